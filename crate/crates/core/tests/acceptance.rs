//! End-to-end acceptance checks. Each test prints one `criterion N: PASS` or
//! `criterion N: FAIL` line, written past the harness's output capture.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use mixcl::data::generate_synthetic_corpus;
use mixcl::losses::LossWeights;
use mixcl::sampler::distance_to_boundary;
use mixcl::study::{median, run_study, Arm, StudyPlan};
use mixcl::trainer::{finetune, pretrain, ExperimentConfig};
use mixcl::verify::{
    auxiliary_same_fraction, check_cross_correlation, check_distance_transform, check_label_loss, check_weight_map,
    exclusion_change, grad_check_suite, sampling_l1, weight_argmax, GRAD_TOLERANCE,
};

fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} - {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
}

#[test]
fn criterion_1_gradient_fidelity() {
    let t = Instant::now();
    let rows = grad_check_suite(20, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let detail = rows
        .iter()
        .map(|r| format!("{} {:.2e}", r.loss, r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let ok = worst < GRAD_TOLERANCE && secs < 60.0 && rows.iter().all(|r| r.trials == 20);
    report(1, ok, &format!("{detail}; {secs:.1} s"));
    assert!(ok);
}

#[test]
fn criterion_2_loss_oracles() {
    let ll = check_label_loss(11);
    let cc = check_cross_correlation();
    let ok = ll.passed && cc.passed;
    report(2, ok, &format!("label loss: {}; cross-correlation: {}", ll.summary, cc.summary));
    assert!(ok);
}

#[test]
fn criterion_3_weight_curve() {
    let o = check_weight_map();
    let peak = weight_argmax(1e-4);
    let ok = o.passed && (peak - 4.0).abs() <= 1e-4;
    report(3, ok, &format!("{}; fine-grid argmax {peak}", o.summary));
    assert!(ok);
}

#[test]
fn criterion_4_distance_transform() {
    let o = check_distance_transform(200, 8, 4, distance_to_boundary);
    report(4, o.passed, &o.summary);
    assert!(o.passed, "{:?}", o.failure);
}

#[test]
fn criterion_5_sampling_statistics() {
    let l1 = sampling_l1(100_000, 5);
    let same = auxiliary_same_fraction(10_000, 5);
    let worst = l1.iter().map(|&(_, v)| v).fold(0.0, f64::max);
    let ok = worst < 0.05 && (same - 0.5).abs() <= 0.02;
    report(5, ok, &format!("worst per-class L1 {worst:.4}; same-volume fraction {same:.4}"));
    assert!(ok);
}

#[test]
fn criterion_6_exclusion() {
    let change = exclusion_change(2000, 6);
    let ok = change == 0.0;
    report(6, ok, &format!("largest label-loss change {change:e} over 2000 trials"));
    assert!(ok);
}

/// Criteria 7 and 8 share their scratch and full pre-training runs. Their
/// directional outcomes are reported on the criterion lines; the assertions
/// cover completion and the runtime budget.
#[test]
fn criteria_7_and_8_label_fraction_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        data_dir: dir.path().join("data"),
        ..ExperimentConfig::default()
    };
    generate_synthetic_corpus(&base.corpus, base.seed, &base.data_dir).unwrap();
    let plan = StudyPlan::default();
    let fractions = [0.1, 0.5, 1.0];
    let full = LossWeights::default();
    let no_recon = LossWeights { beta: 0.0, ..full };

    let t = Instant::now();
    let main = run_study(
        &base,
        &plan,
        &[Arm::scratch(&fractions), Arm::pretrained("mixcl", full, &fractions)],
        dir.path(),
    )
    .unwrap();
    let secs7 = t.elapsed().as_secs_f64();
    println!("{}", main.table());

    let seeds = main.seeds();
    let pre = main.median_dice("mixcl", 0.1).unwrap();
    let scr = main.median_dice("scratch", 0.1).unwrap();
    let wins = seeds
        .iter()
        .filter(|&&s| main.gap("mixcl", "scratch", s, 0.1).unwrap() >= main.gap("mixcl", "scratch", s, 1.0).unwrap())
        .count();
    let complete = seeds.len() == 3 && main.rows.len() == 18 && secs7 < 1800.0;
    let ok7 = pre >= scr && wins >= 2 && complete;
    report(
        7,
        ok7,
        &format!(
            "median Dice at 0.1: pretrained {pre:.4} vs scratch {scr:.4}; gap(0.1) >= gap(1.0) in {wins}/3 seeds; {secs7:.0} s"
        ),
    );

    let ablation = run_study(&base, &plan, &[Arm::pretrained("id_label", no_recon, &[0.1])], dir.path()).unwrap();
    let idl = ablation.median_dice("id_label", 0.1).unwrap();
    let ok8 = idl >= scr && pre >= idl && ablation.rows.len() == 3;
    report(
        8,
        ok8,
        &format!("median Dice at 0.1: scratch {scr:.4} <= identity+label {idl:.4} <= identity+label+recon {pre:.4}"),
    );
    println!("{}", ablation.table());

    let gaps: Vec<f64> = seeds.iter().map(|&s| main.gap("mixcl", "scratch", s, 0.1).unwrap()).collect();
    println!("per-seed gap at 0.1: {gaps:?} (median {:.4})", median(gaps.clone()).unwrap());
    assert!(complete, "study incomplete or over budget: {} rows in {secs7:.0} s", main.rows.len());
    assert_eq!(ablation.rows.len(), 3);
}

fn read_all(dir: &Path, names: &[&str]) -> Vec<(String, Vec<u8>)> {
    names.iter().map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap())).collect()
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = ExperimentConfig {
        seed: 9,
        data_dir: dir.path().join("data"),
        ..ExperimentConfig::default()
    };
    base.model.seed = 9;
    base.pretrain.iterations = 12;
    base.finetune.iterations = 12;
    base.finetune.eval_every = 6;
    base.finetune.label_fraction = 0.5;
    generate_synthetic_corpus(&base.corpus, base.seed, &base.data_dir).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut c = base.clone();
        c.output = dir.path().join(run).join("pretrain");
        pretrain(&c).unwrap();
        c.finetune.init = Some(c.output.join("model.ckpt"));
        c.output = dir.path().join(run).join("finetune");
        finetune(&c).unwrap();
        let mut files = read_all(&dir.path().join(run).join("pretrain"), &["train.csv", "model.ckpt"]);
        files.extend(read_all(&dir.path().join(run).join("finetune"), &["train.csv", "eval.csv", "model.ckpt"]));
        outputs.push(files);
    }
    let ok = outputs[0].len() == 5 && outputs[0] == outputs[1];
    report(9, ok, &format!("{} metrics and checkpoint files compared byte for byte", outputs[0].len()));
    assert!(ok);
}
