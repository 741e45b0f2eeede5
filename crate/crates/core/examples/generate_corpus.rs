//! Writes the default synthetic corpus to a temporary directory and prints
//! what each dataset contains.

use mixcl::data::{generate_synthetic_corpus, CorpusConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("mixcl-example-corpus");
    let manifests = generate_synthetic_corpus(&CorpusConfig::default(), 7, &dir)?;
    for m in &manifests {
        let (v, l) = m.load_case(0)?;
        let fg: usize = (1..m.class_count() as u8).map(|k| l.count(k)).sum();
        let (lo, hi) = v.min_max();
        println!(
            "{:<8} {} volumes, labels {:?}; case 0: {:?} voxels, intensity [{lo:.0}, {hi:.0}], {fg} foreground",
            m.id,
            m.len(),
            m.labels,
            v.dims()
        );
    }
    println!("written to {}", dir.display());
    Ok(())
}
