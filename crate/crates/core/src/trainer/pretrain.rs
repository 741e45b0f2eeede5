use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;

use super::{cosine_lr, prepare_output, ExperimentConfig, MetricsLog, OptimState, Result, StepRow, TrainError};
use crate::augment::{make_views, pick_auxiliary, spatial_augment, LoadedDataset, Patch};
use crate::losses::{
    build_relation_matrix, cross_correlation, identity_loss, label_loss, mixcl_loss, recon_loss, LossParts, Relation,
};
use crate::model::{init_params, pretrain_forward, Checkpoint, Params};
use crate::rng::RngStream;
use crate::sampler::{distance_to_boundary, sample_pixels, weight_map};
use crate::tensor::{Graph, Tensor};

const DATA_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

/// The patches consumed by one pre-training step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Spatially augmented anchor patch before intensity distortion.
    pub p1: Patch,
    pub v1: Patch,
    pub v1_prime: Patch,
    /// Spatially augmented auxiliary patch before intensity distortion.
    pub p2: Patch,
    pub v2: Patch,
}

impl StepInputs {
    /// Draws the step's patches from `(seed, step)` alone.
    pub fn draw(cfg: &ExperimentConfig, datasets: &[LoadedDataset], step: u64) -> Result<Self> {
        let mut rng = RngStream::keyed(cfg.seed, DATA_STREAM, step);
        let ds = &datasets[rng.random_range(0..datasets.len())];
        let size = [cfg.model.patch; 3];
        let vol = rng.random_range(0..ds.len());
        let p1 = spatial_augment(&ds.crop(vol, size, &mut rng)?, &cfg.augment.spatial, &mut rng);
        let (v1, v1_prime) = make_views(&p1, &cfg.augment.intensity, &mut rng);
        let aux = pick_auxiliary(&p1, ds, cfg.augment.auxiliary_same_prob, &mut rng)?;
        let p2 = spatial_augment(&aux, &cfg.augment.spatial, &mut rng);
        let v2 = crate::augment::distort(&p2.image, &cfg.augment.intensity, &mut rng);
        let v2 = Patch { image: v2, ..p2.clone() };
        Ok(Self {
            p1,
            v1,
            v1_prime,
            p2,
            v2,
        })
    }
}

fn as_input(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1, 1];
    shape.extend_from_slice(image.shape());
    Ok(image.reshape(&shape)?)
}

/// Loss values, positive pair count and parameter gradients of one step.
pub fn pretrain_step(
    params: &Params,
    cfg: &ExperimentConfig,
    inp: &StepInputs,
    rng: &mut RngStream,
) -> Result<(LossParts, usize, BTreeMap<String, Tensor>)> {
    let g = Graph::new();
    let bp = params.bind(&g);
    let x1 = g.constant(as_input(&inp.v1.image)?);
    let x1p = g.constant(as_input(&inp.v1_prime.image)?);
    let x2 = g.constant(as_input(&inp.v2.image)?);
    let o1 = pretrain_forward(x1, &bp, &cfg.model)?;
    let o1p = pretrain_forward(x1p, &bp, &cfg.model)?;
    let o2 = pretrain_forward(x2, &bp, &cfg.model)?;

    let lc = &cfg.loss;
    let layers: Vec<usize> = if lc.identity_layers.is_empty() {
        (0..cfg.model.layers).collect()
    } else {
        lc.identity_layers.clone()
    };
    let cs = layers
        .iter()
        .map(|&l| cross_correlation(o1.embeddings[l], o1p.embeddings[l], lc.center_embeddings))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let id = identity_loss(&cs, lc.weights.lambda)?;

    let factor = 1 << lc.label_layer;
    let sample = |labels: &crate::data::LabelMap, rng: &mut RngStream| {
        let s = labels.subsample(factor);
        let w = weight_map(&distance_to_boundary(&s), lc.weight_mu, lc.weight_epsilon);
        let picked = sample_pixels(&w, &s, lc.sample_budget, rng);
        (picked.linear_indices(s.dims()), picked.labels())
    };
    let (rows1, labels1) = sample(&inp.p1.labels, rng);
    let (rows2, labels2) = sample(&inp.p2.labels, rng);
    let a = build_relation_matrix(&labels1, &labels2);
    let positives = a.count(Relation::Positive);
    let z1 = o1.embeddings[lc.label_layer].select_rows(&rows1)?;
    let z2 = o2.embeddings[lc.label_layer].select_rows(&rows2)?;
    let lab = label_loss(z1, z2, &a, lc.weights.tau)?;

    let t1 = g.constant(as_input(&inp.p1.image)?);
    let t2 = g.constant(as_input(&inp.p2.image)?);
    let rec = recon_loss(o1.restored, t1, lc.recon_reduction)?
        .add(recon_loss(o1p.restored, t1, lc.recon_reduction)?)?
        .add(recon_loss(o2.restored, t2, lc.recon_reduction)?)?;

    let parts = LossParts {
        identity: id.item(),
        label: lab.map_or(0.0, |l| l.item()),
        recon: rec.item(),
    };
    let total = mixcl_loss(id, lab, rec, &lc.weights)?;
    let grads = g.backward(total)?;
    let by_name = bp.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
    Ok((parts, positives, by_name))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
    pub files: Vec<PathBuf>,
    /// Steps whose label term was skipped for lack of positive pairs.
    pub skipped_label_steps: u64,
}

/// Runs the pre-training loop and writes `config.toml`, `train.csv` and
/// `model.ckpt` under `cfg.output`.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let datasets = cfg
        .pretrain_datasets
        .iter()
        .map(|id| cfg.load_dataset(id))
        .collect::<Result<Vec<_>>>()?;
    if let Some(d) = datasets.iter().find(|d| d.id == cfg.target_dataset) {
        return Err(TrainError::Config(format!(
            "pre-training corpus contains the target dataset '{}'",
            d.id
        )));
    }
    if let Some(d) = datasets.iter().find(|d| d.is_empty()) {
        return Err(TrainError::Config(format!("dataset '{}' has no cases", d.id)));
    }
    let out = cfg.output.clone();
    let mut files = vec![prepare_output(&out, cfg)?];

    let mut params = init_params(&cfg.model)?;
    let oc = cfg.pretrain.optim;
    let mut st = OptimState::new(&params, oc);
    let mut log = MetricsLog::default();
    log.note("mode", "pretrain");
    log.note("seed", cfg.seed);
    log.note("datasets", cfg.pretrain_datasets.join(" "));
    let total = cfg.pretrain.iterations;
    let mut skipped = 0;
    for s in 0..total {
        let lr = cosine_lr(s, total, oc.lr, oc.lr_min)?;
        let inp = StepInputs::draw(cfg, &datasets, s)?;
        let mut rng = RngStream::keyed(cfg.seed, SAMPLE_STREAM, s);
        let (parts, positives, grads) = pretrain_step(&params, cfg, &inp, &mut rng)?;
        if positives == 0 {
            skipped += 1;
        }
        super::adamw_step(&mut params, &grads, &mut st, lr)?;
        let row = StepRow {
            step: s + 1,
            lr,
            total: parts.total(&cfg.loss.weights),
            identity: parts.identity,
            label: parts.label,
            recon: parts.recon,
            positive_pairs: positives,
        };
        if (s + 1) % 50 == 0 || s == 0 {
            log::info!(
                "pretrain step {}/{total}: loss {:.5} (identity {:.5}, label {:.5}, recon {:.5})",
                s + 1,
                row.total,
                row.identity,
                row.label,
                row.recon
            );
        }
        log.push_step(row)?;
        let every = cfg.pretrain.checkpoint_every;
        if every > 0 && (s + 1) % every == 0 && s + 1 < total {
            let p = out.join(format!("step_{:06}.ckpt", s + 1));
            Checkpoint {
                config: cfg.model.clone(),
                step: s + 1,
                params: params.clone(),
            }
            .save(&p)?;
            files.push(p);
        }
    }
    log.note("skipped_label_steps", skipped);
    let checkpoint = Checkpoint {
        config: cfg.model.clone(),
        step: total,
        params,
    };
    let ck = out.join("model.ckpt");
    checkpoint.save(&ck)?;
    files.push(ck);
    files.extend(log.save(&out)?);
    Ok(PretrainOutcome {
        checkpoint,
        log,
        files,
        skipped_label_steps: skipped,
    })
}
