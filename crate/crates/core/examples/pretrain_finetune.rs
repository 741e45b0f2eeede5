//! A short pre-training run followed by fine-tuning from its checkpoint and
//! from scratch at 10% of the labels.

use mixcl::data::generate_synthetic_corpus;
use mixcl::trainer::{finetune, pretrain, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("mixcl-example-run");
    let mut cfg = ExperimentConfig {
        data_dir: root.join("data"),
        ..ExperimentConfig::default()
    };
    cfg.pretrain.iterations = 40;
    cfg.pretrain.optim.lr = 1e-3;
    cfg.finetune.iterations = 40;
    cfg.finetune.optim.lr = 1e-3;
    cfg.finetune.label_fraction = 0.1;
    generate_synthetic_corpus(&cfg.corpus, 7, &cfg.data_dir)?;

    cfg.output = root.join("pretrain");
    let pre = pretrain(&cfg)?;
    let first = &pre.log.steps[0];
    let last = pre.log.steps.last().unwrap();
    println!("pre-training loss {:.4} -> {:.4}", first.total, last.total);

    for init in [None, Some(root.join("pretrain/model.ckpt"))] {
        let mut c = cfg.clone();
        c.output = root.join(if init.is_some() { "pretrained" } else { "scratch" });
        c.finetune.init = init;
        let o = finetune(&c)?;
        println!(
            "{:<10} supervised {:?}, test {:?}, Dice {:.4}",
            c.output.file_name().unwrap().to_string_lossy(),
            o.supervised,
            o.split.test,
            o.log.final_dice().unwrap()
        );
    }
    Ok(())
}
