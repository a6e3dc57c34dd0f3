use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use xmdpt::canet::FeaturizerCapacity;
use xmdpt::checkpoint::Checkpoint;
use xmdpt::config::RunConfig;
use xmdpt::data::PreparedCorpus;
use xmdpt::diffusion::GuidanceMode;
use xmdpt::metrics::{psnr, similarity_csv, ssim, SimilarityRow};
use xmdpt::model::Xmdpt;
use xmdpt::nn::ModelConfig;
use xmdpt::pipeline::{condition_similarity, generate, score, SampleSettings};
use xmdpt::tensor::ParamStore;
use xmdpt::toy_world::{ppm, Corpus, PairRef, Split, ToyCodec};
use xmdpt::train::{evaluate, inference_model, validation_set, TrainError, Trainer};

use crate::Common;

const VALIDATION_SEED: u64 = 0x7a11_da7e;

/// Defaults, then `base` (a checkpoint's config), then the config file,
/// then `RUN_SEED`, then flags.
fn load_config(common: &Common, base: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(text) = base {
        cfg.apply_text(text).context("checkpoint config")?;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    cfg.apply_env()?;
    common.flags.apply(&mut cfg)?;
    Ok(cfg)
}

fn prepare(cfg: &RunConfig) -> Result<PreparedCorpus> {
    let corpus = Corpus::load(&cfg.data_dir)
        .with_context(|| format!("loading corpus from {} (run gen-data first)", cfg.data_dir.display()))?;
    Ok(PreparedCorpus::new(corpus, &ToyCodec::fixture(), cfg.patch, FeaturizerCapacity::Base, FeaturizerCapacity::Large)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn append_csv(path: &Path, header: &str) -> Result<File> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Config for a command that reads a checkpoint; architecture keys may
/// not be changed on top of it.
fn checkpoint_config(common: &Common, ck: &Checkpoint) -> Result<RunConfig> {
    let saved = RunConfig::parse(&ck.config).context("checkpoint config")?;
    let cfg = load_config(common, Some(&ck.config))?;
    if cfg.architecture_text() != saved.architecture_text() {
        bail!(
            "checkpoint/config mismatch: checkpoint was trained with\n{}but the configuration asks for\n{}",
            saved.architecture_text(),
            cfg.architecture_text()
        );
    }
    Ok(cfg)
}

fn sample_settings(cfg: &RunConfig, seed: u64) -> Result<SampleSettings> {
    Ok(SampleSettings { steps: cfg.ddim_steps, guidance: cfg.guidance()?, seed })
}

pub fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common, None)?;
    let corpus = Corpus::generate(&cfg.corpus_config())?;
    corpus.save(&cfg.data_dir)?;
    println!(
        "wrote {} identities, {} pairs to {}",
        corpus.identities.len(),
        cfg.corpus_config().pair_count(),
        cfg.data_dir.display()
    );
    Ok(())
}

pub fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, None)?;
    let data = prepare(&cfg)?;
    let model_cfg = cfg.model_config()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let saved = RunConfig::parse(&ck.config).context("checkpoint config")?;
            if saved.architecture_text() != cfg.architecture_text() {
                bail!("checkpoint/config mismatch: {} was trained with a different architecture", path.display());
            }
            Trainer::restore(&model_cfg, cfg.model_options(), cfg.train_config(), cfg.schedule()?, &ck)?
        }
        None => Trainer::new(&model_cfg, cfg.model_options(), cfg.train_config(), cfg.schedule()?)?,
    };
    let out = &cfg.out_dir;
    create_dir(out)?;
    let text = cfg.to_text();
    let mut log = OpenOptions::new().create(true).append(true).open(out.join("run.log"))?;
    writeln!(log, "# effective config at step {}\n{text}", trainer.step)?;
    println!("effective config:\n{text}");
    println!("{} trainable parameters", trainer.store.num_trainable());

    let mut losses = append_csv(&out.join("losses.csv"), "step,batch_seed,denoise,mask,total")?;
    let mut sims = append_csv(&out.join("similarity.csv"), xmdpt::metrics::SIMILARITY_HEADER)?;
    let start = Instant::now();
    while trainer.step < cfg.steps {
        let stats = match trainer.step(&data) {
            Ok(s) => s,
            Err(e @ TrainError::NonFinite { step, batch_seed, .. }) => {
                let dump = format!("step={step}\nbatch_seed={batch_seed}\nerror={e}\n\n{text}");
                write_file(&out.join("nan-dump.txt"), dump)?;
                return Err(e).context(format!("see {}", out.join("nan-dump.txt").display()));
            }
            Err(e) => return Err(e.into()),
        };
        let mask = stats.mask.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(losses, "{},{},{:.6},{mask},{:.6}", stats.step, stats.batch_seed, stats.denoise, stats.total)?;
        let done = trainer.step;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            let (same, cross) = condition_similarity(&trainer.model, &trainer.ema_store(), &data, Split::Test)?;
            let row = SimilarityRow { step: done, mean_same_id: same, mean_cross_id: cross };
            write!(sims, "{}", similarity_csv(&[row]).lines().nth(1).map(|l| format!("{l}\n")).unwrap_or_default())?;
            let line = format!(
                "step {done:>6}  denoise {:.4}  total {:.4}  sim {same:.4}/{cross:.4}  {:.1?}",
                stats.denoise,
                stats.total,
                start.elapsed()
            );
            println!("{line}");
            writeln!(log, "{line}")?;
        }
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
            let ck = trainer.checkpoint(&text);
            ck.save(&out.join(format!("checkpoint-{done:06}.bin")))?;
            ck.save(&out.join("checkpoint.bin"))?;
        }
    }
    println!("finished at step {} in {:.1?}", trainer.step, start.elapsed());
    Ok(())
}

fn test_pairs(data: &PreparedCorpus, n: Option<usize>) -> Result<Vec<PairRef>> {
    let pairs = data.pairs(Split::Test);
    if pairs.is_empty() {
        bail!("the test split is empty");
    }
    Ok(pairs.into_iter().take(n.unwrap_or(usize::MAX)).collect())
}

fn load_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<(Xmdpt, ParamStore<f32>)> {
    Ok(inference_model(&cfg.model_config()?, cfg.model_options(), ck)?)
}

pub fn sample(common: &Common, checkpoint: &Path, n: usize, seed: u64) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(common, &ck)?;
    let data = prepare(&cfg)?;
    let (model, store) = load_model(&cfg, &ck)?;
    let settings = sample_settings(&cfg, seed)?;
    let dir = cfg.out_dir.join("samples");
    create_dir(&dir)?;
    let codec = ToyCodec::fixture();
    let sched = cfg.schedule()?;
    let mut report = String::new();
    let mut total = 0;
    for (i, pair) in test_pairs(&data, Some(n))?.into_iter().enumerate() {
        let g = generate(&model, &store, &data, &codec, pair, &sched, &settings)?;
        let name = format!("sample_{i:03}_id{}_v{}_p{}.ppm", pair.identity, pair.view, pair.pose);
        ppm::write(&dir.join(&name), &g.image)?;
        if i == 0 {
            report.push_str(&g.report.summary());
        }
        total += g.report.forwards;
    }
    let images = total / settings_forwards(&cfg).max(1);
    writeln!(report, "images={images}\ntotal_forwards={total}\nseed={seed}\ncheckpoint_step={}", ck.step)?;
    write_file(&dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn settings_forwards(cfg: &RunConfig) -> usize {
    let per_step = match cfg.guidance_mode {
        GuidanceMode::Standard => 2,
        GuidanceMode::Disentangled => 3,
    };
    per_step * cfg.ddim_steps
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, n: Option<usize>, seed: u64) -> Result<()> {
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let cfg = match &ck {
        Some(ck) => checkpoint_config(common, ck)?,
        None => load_config(common, None)?,
    };
    let data = prepare(&cfg)?;
    let pairs = test_pairs(&data, n)?;
    let results: Vec<(PairRef, xmdpt::toy_world::Image)> = match &ck {
        Some(ck) => {
            let (model, store) = load_model(&cfg, ck)?;
            let settings = sample_settings(&cfg, seed)?;
            let (codec, sched) = (ToyCodec::fixture(), cfg.schedule()?);
            pairs
                .iter()
                .map(|&p| Ok((p, generate(&model, &store, &data, &codec, p, &sched, &settings)?.image)))
                .collect::<Result<_>>()?
        }
        None => pairs.iter().map(|&p| (p, data.corpus.target_image(p.identity, p.pose))).collect(),
    };
    let scores = score(&data, Split::Test, &results)?;
    let dir = cfg.out_dir.join("eval");
    create_dir(&dir)?;
    let (mut ssim_csv, mut psnr_csv) = ("identity,view,pose,ssim\n".to_string(), "identity,view,pose,psnr\n".to_string());
    for (p, img) in &results {
        let gt = data.corpus.target_image(p.identity, p.pose);
        writeln!(ssim_csv, "{},{},{},{:.6}", p.identity, p.view, p.pose, ssim(img, &gt)?)?;
        writeln!(psnr_csv, "{},{},{},{:.4}", p.identity, p.view, p.pose, psnr(img, &gt)?)?;
    }
    write_file(&dir.join("ssim.csv"), ssim_csv)?;
    write_file(&dir.join("psnr.csv"), psnr_csv)?;
    write_file(&dir.join("fid.csv"), format!("count,toy_fid\n{},{:.6e}\n", scores.count, scores.toy_fid))?;
    write_file(
        &dir.join("identity.csv"),
        format!("count,identity_accuracy\n{},{:.6}\n", scores.count, scores.identity_accuracy),
    )?;
    if let Some(ck) = &ck {
        let (model, store) = load_model(&cfg, ck)?;
        let (same, cross) = condition_similarity(&model, &store, &data, Split::Test)?;
        let row = SimilarityRow { step: ck.step, mean_same_id: same, mean_cross_id: cross };
        write_file(&dir.join("similarity.csv"), similarity_csv(&[row]))?;
    }
    let summary = format!(
        "pairs={}\nssim={:.6}\npsnr={:.4}\ntoy_fid={:.6e}\nidentity_accuracy={:.4}\n",
        scores.count, scores.ssim, scores.psnr, scores.toy_fid, scores.identity_accuracy
    );
    write_file(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn bench(common: &Common, checkpoint: Option<&Path>, reps: usize, images: usize) -> Result<()> {
    if reps == 0 || images == 0 {
        bail!("--reps and --images must be at least 1");
    }
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let cfg = match &ck {
        Some(ck) => checkpoint_config(common, ck)?,
        None => load_config(common, None)?,
    };
    let data = prepare(&cfg)?;
    let (model, store) = match &ck {
        Some(ck) => load_model(&cfg, ck)?,
        None => {
            let mut store = ParamStore::new(cfg.seed);
            let model = Xmdpt::new(&mut store, &cfg.model_config()?, cfg.model_options())?;
            (model, store)
        }
    };
    let (codec, sched) = (ToyCodec::fixture(), cfg.schedule()?);
    let pairs = test_pairs(&data, None)?;
    let mut csv = String::from("preset,params,mode,forwards_per_image,mean_ms,std_ms\n");
    let params = Xmdpt::param_count(&model.config, model.options)?;
    println!("{reps} repetitions of {images}-image generation, {} DDIM steps, preset {}", cfg.ddim_steps, cfg.preset);
    for mode in [GuidanceMode::Standard, GuidanceMode::Disentangled] {
        let mut settings = sample_settings(&cfg, 0)?;
        settings.guidance.mode = mode;
        let mut times = Vec::with_capacity(reps);
        let mut forwards = 0;
        for _ in 0..reps {
            let start = Instant::now();
            for &pair in pairs.iter().cycle().take(images) {
                forwards = generate(&model, &store, &data, &codec, pair, &sched, &settings)?.report.forwards;
            }
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let (mean, std) = mean_std(&times);
        println!("  {mode:<12} forwards/image {forwards:>4}  {mean:9.1} ± {std:.1} ms");
        writeln!(csv, "{},{params},{mode},{forwards},{mean:.3},{std:.3}", cfg.preset)?;
    }
    println!("parameter counts:");
    for preset in ["s", "b", "l", "t", "xt"] {
        let count = Xmdpt::param_count(&ModelConfig::preset(preset)?, cfg.model_options())?;
        println!("  {preset:<3} {count:>12}  ({:.2}M)", count as f64 / 1e6);
        writeln!(csv, "{preset},{count},,,,")?;
    }
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("bench.csv"), csv)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Axis {
    MaskRatio,
    Predictor,
    Conditions,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Self::MaskRatio => "model.mask_ratio",
            Self::Predictor => "model.predictor",
            Self::Conditions => "model.conditions",
        }
    }

    fn grid(self) -> &'static [&'static str] {
        match self {
            Self::MaskRatio => &["0.3", "0.5", "0.7"],
            Self::Predictor => &["self", "cross", "cross-self", "self-cross"],
            Self::Conditions => &["LP", "PG", "LPG"],
        }
    }
}

pub fn ablate(common: &Common, axis: Axis, values: Option<&str>, val_examples: usize) -> Result<()> {
    let base = load_config(common, None)?;
    let values: Vec<String> = match values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => axis.grid().iter().map(|s| s.to_string()).collect(),
    };
    let data = prepare(&base)?;
    create_dir(&base.out_dir)?;
    let csv_path: PathBuf = base.out_dir.join("ablation.csv");
    let mut csv = append_csv(&csv_path, "axis,value,seed,steps,val_denoise,val_mask,val_total")?;
    for value in values {
        let mut cfg = base.clone();
        cfg.set(axis.key(), &value)?;
        let model_cfg = cfg.model_config()?;
        let mut trainer = Trainer::new(&model_cfg, cfg.model_options(), cfg.train_config(), cfg.schedule()?)?;
        let start = Instant::now();
        while trainer.step < cfg.steps {
            trainer.step(&data)?;
        }
        let examples = validation_set(&data, &model_cfg, &trainer.schedule, &trainer.config, val_examples, VALIDATION_SEED)?;
        let v = evaluate(&trainer.model, &trainer.ema_store(), &data, &examples, &trainer.schedule, &trainer.config.loss)?;
        let mask = v.mask.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(csv, "{},{value},{},{},{:.6},{mask},{:.6}", axis.key(), cfg.seed, cfg.steps, v.denoise, v.total)?;
        println!("{} = {value:<10} val total {:.4}  denoise {:.4}  ({:.1?})", axis.key(), v.total, v.denoise, start.elapsed());
    }
    println!("results appended to {}", csv_path.display());
    Ok(())
}
