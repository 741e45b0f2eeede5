use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{cosine_lr, prepare_output, EvalRow, ExperimentConfig, MetricsLog, OptimState, Result, StepRow, TrainError};
use crate::augment::{finetune_augment, LoadedDataset};
use crate::data::{LabelMap, Volume};
use crate::model::{encoder_forward, init_params, load_encoder, seg_head_forward, Checkpoint, ModelConfig, Params};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

const SPLIT_STREAM: u64 = 10;
const SUBSET_STREAM: u64 = 11;
const BATCH_STREAM: u64 = 12;
const DICE_SMOOTH: f64 = 1e-5;

/// `2|A∩B| / (|A|+|B|)` over voxels of class `k`; 1 when both are empty.
pub fn dice(pred: &LabelMap, target: &LabelMap, k: u8) -> f64 {
    assert_eq!(pred.dims(), target.dims(), "dice needs equal shapes");
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        a += usize::from(p == k);
        b += usize::from(t == k);
        both += usize::from(p == k && t == k);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded `folds`-way partition of `n` volumes; fold `fold` is held out.
pub fn fold_split(n: usize, folds: usize, fold: usize, seed: u64) -> FoldSplit {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut RngStream::keyed(seed, SPLIT_STREAM, 0));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, v) in perm.into_iter().enumerate() {
        if i % folds == fold {
            test.push(v);
        } else {
            train.push(v);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    FoldSplit { train, test }
}

/// The first `⌈fraction·|pool|⌉` volumes of a seeded shuffle of `pool`.
pub fn supervised_subset(pool: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let k = (fraction * pool.len() as f64).ceil() as usize;
    if k == 0 {
        return Err(TrainError::EmptySubset(format!(
            "label fraction {fraction} of {} training volumes",
            pool.len()
        )));
    }
    let mut p = pool.to_vec();
    p.shuffle(&mut RngStream::keyed(seed, SUBSET_STREAM, 0));
    let mut s = p[..k.min(p.len())].to_vec();
    s.sort_unstable();
    Ok(s)
}

/// Voxel-mean cross-entropy plus soft Dice loss (all classes, equal
/// weights) of `[B, K, ...]` logits against integer labels.
pub fn segmentation_loss<'g>(logits: Var<'g>, labels: &[u8]) -> Result<Var<'g>> {
    let shape = logits.shape();
    let k = shape[1];
    let b = shape[0];
    let vox: usize = shape[2..].iter().product();
    if labels.len() != b * vox {
        return Err(TrainError::Config(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; b * k * vox];
    for bi in 0..b {
        for v in 0..vox {
            let c = labels[bi * vox + v] as usize;
            if c >= k {
                return Err(TrainError::Config(format!("label {c} outside {k} classes")));
            }
            onehot[(bi * k + c) * vox + v] = 1.0;
        }
    }
    let g = logits.graph();
    let y = g.constant(Tensor::new(shape.clone(), onehot)?);
    let logp = logits.log_softmax(1)?;
    let ce = logp.mul(y)?.sum().mul_scalar(-1.0 / (b * vox) as f64);
    let p = logp.exp();
    let axes: Vec<usize> = std::iter::once(0).chain(2..shape.len()).collect();
    let inter = p.mul(y)?.sum_axes(&axes, false)?;
    let den = p.sum_axes(&axes, false)?.add(y.sum_axes(&axes, false)?)?.add_scalar(DICE_SMOOTH);
    let soft = inter.mul_scalar(2.0).add_scalar(DICE_SMOOTH).div(den)?;
    let dice_loss = soft.mean().neg().add_scalar(1.0);
    Ok(ce.add(dice_loss)?)
}

fn tile_starts(n: usize, p: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=n - p).step_by(p).collect();
    if s.last() != Some(&(n - p)) {
        s.push(n - p);
    }
    s
}

/// Arg-max segmentation of a whole volume from non-overlapping patch tiles
/// (the last tile per axis is shifted to end at the border).
pub fn predict_volume(params: &Params, cfg: &ModelConfig, v: &Volume) -> Result<LabelMap> {
    let d = v.dims();
    let p = cfg.patch;
    if d.iter().any(|&n| n < p) {
        return Err(TrainError::Config(format!("volume {d:?} smaller than patch {p}")));
    }
    let mut out = LabelMap::zeros(d);
    for &x0 in &tile_starts(d[0], p) {
        for &y0 in &tile_starts(d[1], p) {
            for &z0 in &tile_starts(d[2], p) {
                let mut img = Vec::with_capacity(p * p * p);
                for x in 0..p {
                    for y in 0..p {
                        for z in 0..p {
                            img.push(f64::from(v.get(x0 + x, y0 + y, z0 + z)));
                        }
                    }
                }
                let g = Graph::new();
                let bp = params
                    .tensors
                    .iter()
                    .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                    .collect();
                let x = g.constant(Tensor::new(vec![1, 1, p, p, p], img)?);
                let feats = encoder_forward(x, &bp, cfg)?;
                let logits = seg_head_forward(&feats, &bp, cfg)?.value();
                let k = logits.shape()[1];
                let vox = p * p * p;
                let ld = logits.data();
                for i in 0..vox {
                    let mut best = 0;
                    for c in 1..k {
                        if ld[c * vox + i] > ld[best * vox + i] {
                            best = c;
                        }
                    }
                    let (x, y, z) = (i / (p * p), (i / p) % p, i % p);
                    out.set(x0 + x, y0 + y, z0 + z, best as u8);
                }
            }
        }
    }
    Ok(out)
}

/// Dice per foreground class averaged over `cases`, and their mean.
pub fn evaluate(params: &Params, cfg: &ModelConfig, ds: &LoadedDataset, cases: &[usize]) -> Result<(f64, Vec<f64>)> {
    let k = ds.class_count;
    let mut per = vec![0.0; k - 1];
    for &i in cases {
        let (v, l) = &ds.cases[i];
        let pred = predict_volume(params, cfg, v)?;
        for (c, acc) in per.iter_mut().enumerate() {
            *acc += dice(&pred, l, (c + 1) as u8);
        }
    }
    per.iter_mut().for_each(|d| *d /= cases.len() as f64);
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub params: Params,
    pub log: MetricsLog,
    pub files: Vec<PathBuf>,
    pub split: FoldSplit,
    pub supervised: Vec<usize>,
}

/// Fine-tunes encoder and segmentation head on the target dataset and
/// writes `config.toml`, `train.csv`, `eval.csv` and `model.ckpt`.
pub fn finetune(cfg: &ExperimentConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let fc = &cfg.finetune;
    let init = match &fc.init {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let ds = cfg.load_dataset(&cfg.target_dataset)?;
    if ds.len() < fc.folds {
        return Err(TrainError::Config(format!(
            "target dataset '{}' has {} volumes, fewer than finetune.folds = {}",
            ds.id,
            ds.len(),
            fc.folds
        )));
    }
    let split = fold_split(ds.len(), fc.folds, fc.fold, cfg.seed);
    let supervised = supervised_subset(&split.train, fc.label_fraction, cfg.seed)?;
    let mcfg = ModelConfig {
        classes: ds.class_count,
        ..cfg.model.clone()
    };
    let mut params = init_params(&mcfg)?;
    if let Some(ck) = &init {
        load_encoder(&mut params, ck)?;
    }
    let out = cfg.output.clone();
    let mut files = vec![prepare_output(&out, cfg)?];

    let mut log = MetricsLog::default();
    log.note("mode", "finetune");
    log.note("seed", cfg.seed);
    log.note("label_fraction", fc.label_fraction);
    log.note("fold", format!("{}/{}", fc.fold, fc.folds));
    log.note("test_volumes", format!("{:?}", split.test));
    log.note("supervised_volumes", format!("{:?}", supervised));
    let init_note = match &fc.init {
        Some(p) => {
            use sha2::{Digest, Sha256};
            let bytes = std::fs::read(p).map_err(super::io_err(p))?;
            let hex: String = Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect();
            format!("checkpoint sha256 {hex}")
        }
        None => "scratch".to_string(),
    };
    log.note("init", init_note);
    log.class_names = crate::data::DatasetManifest::load(cfg.manifest_path(&cfg.target_dataset))?.labels[1..].to_vec();

    let oc = fc.optim;
    let mut st = OptimState::new(&params, oc);
    let p = mcfg.patch;
    for s in 0..fc.iterations {
        let lr = cosine_lr(s, fc.iterations, oc.lr, oc.lr_min)?;
        let mut rng = RngStream::keyed(cfg.seed, BATCH_STREAM, s);
        let mut img = Vec::with_capacity(fc.batch * p * p * p);
        let mut labels = Vec::with_capacity(fc.batch * p * p * p);
        for _ in 0..fc.batch {
            let v = supervised[rng.random_range(0..supervised.len())];
            let patch = finetune_augment(&ds.crop(v, [p; 3], &mut rng)?, &cfg.augment.finetune, &mut rng);
            img.extend_from_slice(patch.image.data());
            labels.extend_from_slice(patch.labels.data());
        }
        let g = Graph::new();
        let bp = params.bind(&g);
        let x = g.constant(Tensor::new(vec![fc.batch, 1, p, p, p], img)?);
        let feats = encoder_forward(x, &bp, &mcfg)?;
        let logits = seg_head_forward(&feats, &bp, &mcfg)?;
        let loss = segmentation_loss(logits, &labels)?;
        let grads = g.backward(loss)?;
        let by_name = bp.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
        super::adamw_step(&mut params, &by_name, &mut st, lr)?;
        let value = loss.item();
        log.push_step(StepRow {
            step: s + 1,
            lr,
            total: value,
            identity: 0.0,
            label: 0.0,
            recon: 0.0,
            positive_pairs: 0,
        })?;
        let done = s + 1 == fc.iterations;
        if done || (fc.eval_every > 0 && (s + 1) % fc.eval_every == 0) {
            let (mean, per) = evaluate(&params, &mcfg, &ds, &split.test)?;
            log::info!("finetune step {}/{}: loss {value:.5}, mean Dice {mean:.4}", s + 1, fc.iterations);
            log.push_eval(EvalRow {
                step: s + 1,
                mean_dice: mean,
                per_class: per,
            })?;
        }
    }
    let ck = out.join("model.ckpt");
    Checkpoint {
        config: mcfg,
        step: fc.iterations,
        params: params.clone(),
    }
    .save(&ck)?;
    files.push(ck);
    files.extend(log.save(&out)?);
    Ok(FinetuneOutcome {
        params,
        log,
        files,
        split,
        supervised,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new([v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = map(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a, 1), 1.0);
        assert_eq!(dice(&a, &map(&[0, 0, 1, 1]), 1), 0.0);
        let p = map(&[1, 1, 1, 1, 0, 0]);
        let t = map(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&p, &t, 1), 0.5);
        assert_eq!(dice(&t, &p, 1), 0.5);
        assert_eq!(dice(&map(&[0, 0]), &map(&[0, 0]), 1), 1.0);
    }

    #[test]
    fn folds_partition_volumes() {
        let mut seen = vec![0; 10];
        for f in 0..5 {
            let s = fold_split(10, 5, f, 3);
            assert_eq!(s.test.len(), 2);
            assert_eq!(s.train.len(), 8);
            for &t in &s.test {
                seen[t] += 1;
                assert!(!s.train.contains(&t));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(fold_split(10, 5, 2, 3), fold_split(10, 5, 2, 3));
    }

    #[test]
    fn subset_sizes() {
        let pool: Vec<usize> = (0..8).collect();
        assert_eq!(supervised_subset(&pool, 1.0, 0).unwrap(), pool);
        assert_eq!(supervised_subset(&pool, 0.1, 0).unwrap().len(), 1);
        assert_eq!(supervised_subset(&pool, 0.5, 0).unwrap().len(), 4);
        assert!(supervised_subset(&[], 0.5, 0).is_err());
    }

    #[test]
    fn perfect_logits_give_low_loss() {
        let g = Graph::new();
        let labels = [0u8, 1, 1, 0];
        let mut d = vec![0.0; 8];
        for (i, &l) in labels.iter().enumerate() {
            d[l as usize * 4 + i] = 30.0;
        }
        let logits = g.constant(Tensor::new(vec![1, 2, 4, 1, 1], d).unwrap());
        let v = segmentation_loss(logits, &labels).unwrap().item();
        assert!(v.abs() < 1e-6, "{v}");
        let flat = g.constant(Tensor::zeros(&[1, 2, 4, 1, 1]));
        let u = segmentation_loss(flat, &labels).unwrap().item();
        assert!((u - (2f64.ln() + 0.5)).abs() < 1e-5, "{u}");
    }

    #[test]
    fn tiles_cover_volume() {
        assert_eq!(tile_starts(48, 16), vec![0, 16, 32]);
        assert_eq!(tile_starts(40, 16), vec![0, 16, 24]);
        assert_eq!(tile_starts(16, 16), vec![0]);
    }
}
