//! Paired multi-view corpus generation and its on-disk form.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ppm;
use super::render::{render_person, render_pose, Appearance, Image, Pose, JOINTS, PALETTE, TEXTURES};
use super::ToyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub identities: usize,
    /// How many identities (the last ones generated) form the test split.
    pub test_identities: usize,
    pub views: usize,
    pub poses: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { identities: 130, test_identities: 10, views: 4, poses: 5, seed: 0 }
    }
}

impl CorpusConfig {
    pub fn pair_count(&self) -> usize {
        self.identities * self.views * self.poses
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRecord {
    pub id: usize,
    pub split: Split,
    pub appearance: Appearance,
    /// Poses the source views are rendered in.
    pub views: Vec<Pose>,
    /// Poses the targets are rendered in.
    pub poses: Vec<Pose>,
}

/// Index of one (source view, target pose) pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairRef {
    pub identity: usize,
    pub view: usize,
    pub pose: usize,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub identity_id: usize,
    pub view_id: usize,
    pub pose_id: usize,
    pub split: Split,
    pub source_image: Image,
    pub target_image: Image,
    pub target_pose: Pose,
    pub pose_image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub identities: Vec<IdentityRecord>,
}

fn eighth(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

/// Draws a random upright pose. Coordinates are multiples of 1/8 pixel so
/// they print exactly in the manifest.
pub fn random_pose<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    let head = [eighth(rng.random_range(12.0..20.0)), eighth(rng.random_range(4.0..8.0))];
    let shoulder = [head[0], head[1] + 3.0];
    let pelvis = [head[0], head[1] + 10.0];
    let mut arm = |side: f64| {
        let a = rng.random_range(-50f64..80.0).to_radians();
        [eighth(shoulder[0] + side * 8.0 * a.cos()), eighth(shoulder[1] + 8.0 * a.sin())]
    };
    let (lh, rh) = (arm(-1.0), arm(1.0));
    let mut leg = |side: f64| {
        let c = rng.random_range(5f64..35.0).to_radians();
        [eighth(pelvis[0] + side * 11.0 * c.sin()), eighth(pelvis[1] + 11.0 * c.cos())]
    };
    let (lf, rf) = (leg(-1.0), leg(1.0));
    Pose { joints: [head, lh, rh, lf, rf] }
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self, ToyError> {
        let max_looks = PALETTE.len().pow(3) * TEXTURES as usize;
        if config.identities == 0 || config.views == 0 || config.poses == 0 {
            return Err(ToyError::Invalid("identity, view and pose counts must be at least 1".into()));
        }
        if config.test_identities >= config.identities {
            return Err(ToyError::Invalid(format!(
                "{} test identities leave no training identities out of {}",
                config.test_identities, config.identities
            )));
        }
        if config.identities > max_looks {
            return Err(ToyError::Invalid(format!("at most {max_looks} distinct identities are available")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut seen = HashSet::new();
        let n_train = config.identities - config.test_identities;
        let mut identities = Vec::with_capacity(config.identities);
        for id in 0..config.identities {
            let appearance = loop {
                let colors = [0; 3].map(|_| rng.random_range(0..PALETTE.len() as u8));
                let look = Appearance { colors, texture: rng.random_range(0..TEXTURES) };
                if seen.insert(look) {
                    break look;
                }
            };
            let views = (0..config.views).map(|_| random_pose(&mut rng)).collect();
            let poses = (0..config.poses).map(|_| random_pose(&mut rng)).collect();
            let split = if id < n_train { Split::Train } else { Split::Test };
            identities.push(IdentityRecord { id, split, appearance, views, poses });
        }
        Ok(Self { config: config.clone(), identities })
    }

    pub fn identities_in(&self, split: Split) -> impl Iterator<Item = &IdentityRecord> {
        self.identities.iter().filter(move |r| r.split == split)
    }

    /// Every (view, pose) pairing of every identity in `split`, in id order.
    pub fn pairs(&self, split: Split) -> Vec<PairRef> {
        self.identities_in(split)
            .flat_map(|r| {
                (0..r.views.len()).flat_map(move |view| (0..r.poses.len()).map(move |pose| PairRef { identity: r.id, view, pose }))
            })
            .collect()
    }

    pub fn source_image(&self, identity: usize, view: usize) -> Image {
        let r = &self.identities[identity];
        render_person(&r.appearance, &r.views[view]).expect("generated poses lie on the canvas")
    }

    pub fn target_image(&self, identity: usize, pose: usize) -> Image {
        let r = &self.identities[identity];
        render_person(&r.appearance, &r.poses[pose]).expect("generated poses lie on the canvas")
    }

    pub fn pose_image(&self, identity: usize, pose: usize) -> Image {
        render_pose(&self.identities[identity].poses[pose]).expect("generated poses lie on the canvas")
    }

    pub fn sample(&self, pair: PairRef) -> ToySample {
        let r = &self.identities[pair.identity];
        ToySample {
            identity_id: r.id,
            view_id: pair.view,
            pose_id: pair.pose,
            split: r.split,
            source_image: self.source_image(pair.identity, pair.view),
            target_image: self.target_image(pair.identity, pair.pose),
            target_pose: r.poses[pair.pose],
            pose_image: self.pose_image(pair.identity, pair.pose),
        }
    }

    /// All distinct person renders of the given split (views then poses).
    pub fn person_images(&self, split: Split) -> Vec<Image> {
        self.identities_in(split)
            .flat_map(|r| {
                let views = (0..r.views.len()).map(|v| self.source_image(r.id, v));
                let poses = (0..r.poses.len()).map(|p| self.target_image(r.id, p));
                views.chain(poses).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Tab-separated manifest, one line per pair:
    /// `identity view pose split joints source target pose_image`.
    /// Joints are `x,y` pairs separated by `;`.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for r in &self.identities {
            for v in 0..r.views.len() {
                for (p, pose) in r.poses.iter().enumerate() {
                    let joints: Vec<String> = pose.joints.iter().map(|[x, y]| format!("{x:.3},{y:.3}")).collect();
                    let (src, tgt, skel) = file_names(r.id, v, p);
                    writeln!(out, "{}\t{v}\t{p}\t{}\t{}\t{src}\t{tgt}\t{skel}", r.id, r.split.as_str(), joints.join(";"))
                        .expect("writing to a String");
                }
            }
        }
        out
    }

    /// Writes `corpus.cfg`, `identities.txt`, `manifest.tsv` and the PPM
    /// images under `images/`.
    pub fn save(&self, dir: &Path) -> Result<(), ToyError> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| ToyError::io(&images, e))?;
        for r in &self.identities {
            for v in 0..r.views.len() {
                let (src, _, _) = file_names(r.id, v, 0);
                ppm::write(&dir.join(src), &self.source_image(r.id, v))?;
            }
            for p in 0..r.poses.len() {
                let (_, tgt, skel) = file_names(r.id, 0, p);
                ppm::write(&dir.join(tgt), &self.target_image(r.id, p))?;
                ppm::write(&dir.join(skel), &self.pose_image(r.id, p))?;
            }
        }
        let c = &self.config;
        let cfg = format!(
            "identities={}\ntest_identities={}\nviews={}\nposes={}\nseed={}\n",
            c.identities, c.test_identities, c.views, c.poses, c.seed
        );
        write_text(&dir.join("corpus.cfg"), &cfg)?;
        let mut ids = String::new();
        for r in &self.identities {
            let [a, b, l] = r.appearance.colors;
            writeln!(ids, "{}\t{}\t{a},{b},{l}\t{}", r.id, r.split.as_str(), r.appearance.texture).expect("writing to a String");
        }
        write_text(&dir.join("identities.txt"), &ids)?;
        write_text(&dir.join("manifest.tsv"), &self.manifest())
    }

    /// Regenerates the corpus from `corpus.cfg` and checks it against the
    /// stored manifest.
    pub fn load(dir: &Path) -> Result<Self, ToyError> {
        let path = dir.join("corpus.cfg");
        let text = fs::read_to_string(&path).map_err(|e| ToyError::io(&path, e))?;
        let mut config = CorpusConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| ToyError::Format(format!("{}: bad line {line:?}", path.display())))?;
            let num = || v.trim().parse::<u64>().map_err(|_| ToyError::Format(format!("{}: bad value for {k}", path.display())));
            match k.trim() {
                "identities" => config.identities = num()? as usize,
                "test_identities" => config.test_identities = num()? as usize,
                "views" => config.views = num()? as usize,
                "poses" => config.poses = num()? as usize,
                "seed" => config.seed = num()?,
                other => return Err(ToyError::Format(format!("{}: unknown key {other:?}", path.display()))),
            }
        }
        let corpus = Self::generate(&config)?;
        let mpath = dir.join("manifest.tsv");
        let manifest = fs::read_to_string(&mpath).map_err(|e| ToyError::io(&mpath, e))?;
        if manifest != corpus.manifest() {
            return Err(ToyError::Format(format!("{} does not match {}", mpath.display(), path.display())));
        }
        Ok(corpus)
    }
}

fn file_names(id: usize, view: usize, pose: usize) -> (String, String, String) {
    (
        format!("images/id{id:04}_view{view}.ppm"),
        format!("images/id{id:04}_pose{pose}.ppm"),
        format!("images/id{id:04}_pose{pose}_skeleton.ppm"),
    )
}

fn write_text(path: &Path, text: &str) -> Result<(), ToyError> {
    fs::write(path, text).map_err(|e| ToyError::io(path, e))
}

/// Parses the joints column of a manifest line.
pub fn parse_joints(field: &str) -> Option<Pose> {
    let mut joints = [[0.0; 2]; JOINTS];
    let mut parts = field.split(';');
    for j in joints.iter_mut() {
        let (x, y) = parts.next()?.split_once(',')?;
        *j = [x.parse().ok()?, y.parse().ok()?];
    }
    parts.next().is_none().then_some(Pose { joints })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { identities: 6, test_identities: 2, views: 2, poses: 3, seed: 11 }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = Corpus::generate(&small()).unwrap();
        assert_eq!(a, Corpus::generate(&small()).unwrap());
        let b = Corpus::generate(&CorpusConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.manifest(), b.manifest());
    }

    #[test]
    fn pair_counts_and_splits() {
        let cfg = CorpusConfig { identities: 50, test_identities: 5, views: 4, poses: 4, seed: 0 };
        let c = Corpus::generate(&cfg).unwrap();
        assert_eq!(c.pairs(Split::Train).len() + c.pairs(Split::Test).len(), 50 * 4 * 4);
        assert_eq!(c.manifest().lines().count(), cfg.pair_count());
        let train: HashSet<_> = c.identities_in(Split::Train).map(|r| r.appearance).collect();
        assert!(c.identities_in(Split::Test).all(|r| !train.contains(&r.appearance)));
    }

    #[test]
    fn manifest_joints_parse_back_exactly() {
        let c = Corpus::generate(&small()).unwrap();
        for (line, pair) in c.manifest().lines().zip(c.identities.iter().flat_map(|r| {
            (0..r.views.len()).flat_map(move |_| r.poses.iter())
        })) {
            let field = line.split('\t').nth(4).unwrap();
            assert_eq!(parse_joints(field).unwrap(), *pair);
        }
    }

    #[test]
    fn random_poses_stay_on_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            render_pose(&random_pose(&mut rng)).unwrap();
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(Corpus::generate(&CorpusConfig { views: 0, ..small() }).is_err());
        assert!(Corpus::generate(&CorpusConfig { test_identities: 6, ..small() }).is_err());
    }
}
