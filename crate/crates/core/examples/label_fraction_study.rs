//! Scratch versus pre-trained initialisation across label fractions and
//! seeds, summarised as a table. Pass `quick` for a single seed.

use mixcl::data::generate_synthetic_corpus;
use mixcl::losses::LossWeights;
use mixcl::study::{run_study, Arm, StudyPlan};
use mixcl::trainer::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("mixcl-example-study");
    let base = ExperimentConfig {
        data_dir: root.join("data"),
        ..ExperimentConfig::default()
    };
    generate_synthetic_corpus(&base.corpus, 7, &base.data_dir)?;
    let mut plan = StudyPlan::default();
    if std::env::args().any(|a| a == "quick") {
        plan.seeds = vec![0];
    }
    let fractions = [0.1, 0.5, 1.0];
    let arms = [Arm::scratch(&fractions), Arm::pretrained("mixcl", LossWeights::default(), &fractions)];
    let r = run_study(&base, &plan, &arms, &root)?;
    print!("{}", r.table());
    for f in fractions {
        println!(
            "fraction {f}: median scratch {:.4}, median mixcl {:.4}",
            r.median_dice("scratch", f).unwrap(),
            r.median_dice("mixcl", f).unwrap()
        );
    }
    println!("runs under {}; compare with `mixcl report --runs {0}/finetune/scratch,{0}/finetune/mixcl`", root.display());
    Ok(())
}
