use std::collections::HashSet;
use xmdpt::metrics::psnr;
use xmdpt::toy_world::*;

fn small() -> CorpusConfig {
    CorpusConfig { identities: 50, test_identities: 10, views: 4, poses: 4, seed: 3 }
}

#[test]
fn pair_structure_and_counts() {
    let corpus = Corpus::generate(&small()).unwrap();
    assert_eq!(small().pair_count(), 50 * 4 * 4);
    let all: Vec<PairRef> = [Split::Train, Split::Test].into_iter().flat_map(|s| corpus.pairs(s)).collect();
    assert_eq!(all.len(), 800);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 800);
    let train: HashSet<usize> = corpus.identities_in(Split::Train).map(|r| r.id).collect();
    let test: HashSet<usize> = corpus.identities_in(Split::Test).map(|r| r.id).collect();
    assert_eq!((train.len(), test.len()), (40, 10));
    assert!(train.is_disjoint(&test));
}

#[test]
fn pairs_share_appearance() {
    let corpus = Corpus::generate(&small()).unwrap();
    for pair in corpus.pairs(Split::Test).into_iter().step_by(7) {
        let s = corpus.sample(pair);
        assert_eq!(s.identity_id, pair.identity);
        let r = &corpus.identities[pair.identity];
        assert_eq!(s.source_image, render_person(&r.appearance, &r.views[pair.view]).unwrap());
        assert_eq!(s.target_image, render_person(&r.appearance, &r.poses[pair.pose]).unwrap());
        assert_eq!(s.pose_image, render_pose(&s.target_pose).unwrap());
    }
}

#[test]
fn saved_corpus_is_reproducible() {
    let dir = std::env::temp_dir().join(format!("toy-world-{}", std::process::id()));
    let (a, b) = (dir.join("a"), dir.join("b"));
    Corpus::generate(&small()).unwrap().save(&a).unwrap();
    Corpus::generate(&small()).unwrap().save(&b).unwrap();
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), small().pair_count());
    let mut names: Vec<_> = ["corpus.cfg", "identities.txt", "manifest.tsv"].map(std::path::PathBuf::from).to_vec();
    for e in std::fs::read_dir(a.join("images")).unwrap() {
        names.push(std::path::Path::new("images").join(e.unwrap().file_name()));
    }
    assert_eq!(names.len(), 3 + 50 * (4 + 2 * 4));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let loaded = Corpus::load(&a).unwrap();
    assert_eq!(loaded, Corpus::generate(&small()).unwrap());
    let other = Corpus::generate(&CorpusConfig { seed: 4, ..small() }).unwrap();
    assert_ne!(other.manifest(), loaded.manifest());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn codec_fixture_reconstructs_the_corpus() {
    let corpus = Corpus::generate(&CorpusConfig::default()).unwrap();
    let codec = ToyCodec::fixture();
    let images: Vec<Image> = corpus.person_images(Split::Test).into_iter().chain(corpus.person_images(Split::Train)).take(100).collect();
    assert_eq!(images.len(), 100);
    let latents = codec.encode_batch(&images).unwrap();
    assert_eq!(latents[0].shape(), [LATENT_SIDE, LATENT_SIDE, LATENT_CHANNELS]);
    let decoded = codec.decode_batch(&latents).unwrap();
    let mean = images.iter().zip(&decoded).map(|(a, b)| psnr(a, b).unwrap()).sum::<f64>() / 100.0;
    assert!(mean >= 25.0, "{mean}");
    assert_eq!(codec.encode(&images[0]).unwrap(), latents[0]);
}

#[test]
fn codec_rejects_wrong_canvas() {
    let codec = ToyCodec::fixture();
    assert!(codec.encode(&Image::zeros([CANVAS + 4, CANVAS, 3])).is_err());
}
