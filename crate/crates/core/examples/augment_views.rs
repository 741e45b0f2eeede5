//! Crops a patch, applies a spatial warp, builds the two distorted views and
//! picks an auxiliary patch.

use mixcl::augment::{make_views, pick_auxiliary, spatial_augment, AugmentConfig, LoadedDataset};
use mixcl::data::{generate_synthetic_corpus, CorpusConfig, DatasetManifest};
use mixcl::rng::RngStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("mixcl-example-augment");
    generate_synthetic_corpus(&CorpusConfig::default(), 7, &dir)?;
    let ds = LoadedDataset::from_manifest(&DatasetManifest::load(dir.join("mixed/manifest.toml"))?)?;
    let cfg = AugmentConfig::default();
    let mut rng = RngStream::new(3, 0);
    let p1 = spatial_augment(&ds.crop(0, [16; 3], &mut rng)?, &cfg.spatial, &mut rng);
    let (v1, v1p) = make_views(&p1, &cfg.intensity, &mut rng);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    println!("anchor from volume {} at {:?}", p1.volume, p1.offset);
    println!("mean |V1 - P1| = {:.4}, mean |V1' - P1| = {:.4}", diff(v1.image.data(), p1.image.data()), diff(v1p.image.data(), p1.image.data()));
    println!("views share labels: {}", v1.labels == v1p.labels && v1.labels == p1.labels);
    let p2 = pick_auxiliary(&p1, &ds, cfg.auxiliary_same_prob, &mut rng)?;
    println!("auxiliary from volume {} at {:?}, classes {:?}", p2.volume, p2.offset, p2.labels.classes());
    Ok(())
}
