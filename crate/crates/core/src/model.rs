//! Small convolutional U-shaped network: a multi-scale encoder, one
//! projector head per encoder layer, a reconstruction decoder and a
//! segmentation decoder.
//!
//! Layout of activations is `[B, C, X, Y, Z]`. Convolutions feeding an
//! instance normalization carry no bias; every normalization has a learned
//! per-channel scale and shift.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorMode {
    #[default]
    Standard,
    /// Identity-initialised 1×1×1 stack with no normalization or activation;
    /// the embedding is the feature with its channels duplicated.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub base_channels: usize,
    /// Cubic patch extent.
    pub patch: usize,
    /// Classes of the segmentation head, background included.
    pub classes: usize,
    pub seed: u64,
    pub projector: ProjectorMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            base_channels: 8,
            patch: 16,
            classes: 2,
            seed: 0,
            projector: ProjectorMode::Standard,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(ModelError::Config(format!("layer count {} must be at least 2", self.layers)));
        }
        if self.base_channels == 0 {
            return Err(ModelError::Config("base channel count must be positive".into()));
        }
        let div = 1usize << (self.layers - 1);
        if self.patch == 0 || self.patch % div != 0 {
            return Err(ModelError::Config(format!(
                "patch extent {} must be a positive multiple of {div}",
                self.patch
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!("class count {} must be at least 2", self.classes)));
        }
        Ok(())
    }

    /// Channels of encoder layer `l`: `c0 · 2^l`.
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Spatial extent of encoder layer `l`.
    pub fn extent(&self, l: usize) -> usize {
        self.patch >> l
    }

    /// Output channels of the three projector stages of layer `l`.
    pub fn projector_channels(&self, l: usize) -> [usize; 3] {
        let c = self.channels(l);
        [c, c, 2 * c]
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parameters registered as leaves of one graph.
pub type Bound<'g> = BTreeMap<String, Var<'g>>;

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.tensors.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect()
    }

    /// Copies every tensor whose name starts with `prefix` from `src`.
    /// Fails without modifying `self` if any such tensor is missing on
    /// either side or differs in shape.
    pub fn load_prefix(&mut self, src: &Params, prefix: &str) -> Result<Vec<String>> {
        let ours: Vec<&String> = self.tensors.keys().filter(|k| k.starts_with(prefix)).collect();
        let theirs: Vec<&String> = src.tensors.keys().filter(|k| k.starts_with(prefix)).collect();
        let mut problems = Vec::new();
        for k in &ours {
            match src.tensors.get(*k) {
                None => problems.push(format!("missing '{k}'")),
                Some(t) if t.shape() != self.tensors[*k].shape() => problems.push(format!(
                    "'{k}' has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[*k].shape()
                )),
                _ => {}
            }
        }
        for k in &theirs {
            if !self.tensors.contains_key(*k) {
                problems.push(format!("unexpected '{k}'"));
            }
        }
        if !problems.is_empty() {
            return Err(ModelError::Mismatch(problems.join("; ")));
        }
        let names: Vec<String> = ours.into_iter().cloned().collect();
        for k in &names {
            self.tensors.insert(k.clone(), src.tensors[k].clone());
        }
        Ok(names)
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-b..b)).collect()).expect("shape/length agree")
}

fn identity_kernel(cout: usize, cin: usize) -> Tensor {
    let data = (0..cout * cin).map(|k| if k / cin % cin == k % cin { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![cout, cin, 1, 1, 1], data).expect("shape/length agree")
}

/// Deterministic initialisation from `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<Params> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, 0x1417);
    let mut t = BTreeMap::new();
    let conv = |t: &mut BTreeMap<String, Tensor>, rng: &mut RngStream, name: String, cout, cin, k| {
        t.insert(name, uniform(&[cout, cin, k, k, k], cin * k * k * k, rng));
    };
    let norm = |t: &mut BTreeMap<String, Tensor>, name: &str, c| {
        t.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
        t.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    };
    for l in 0..cfg.layers {
        let c = cfg.channels(l);
        let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
        conv(&mut t, &mut rng, format!("enc.{l}.conv"), c, cin, 3);
        norm(&mut t, &format!("enc.{l}.norm"), c);
        if l > 0 {
            conv(&mut t, &mut rng, format!("enc.{l}.down"), c, c, 3);
        }
    }
    for l in 0..cfg.layers {
        let c = cfg.channels(l);
        match cfg.projector {
            ProjectorMode::Standard => {
                conv(&mut t, &mut rng, format!("proj.{l}.conv0"), c, c, 1);
                norm(&mut t, &format!("proj.{l}.norm0"), c);
                conv(&mut t, &mut rng, format!("proj.{l}.conv1"), c, c, 1);
                norm(&mut t, &format!("proj.{l}.norm1"), c);
                conv(&mut t, &mut rng, format!("proj.{l}.conv2"), 2 * c, c, 1);
            }
            ProjectorMode::Identity => {
                t.insert(format!("proj.{l}.conv0"), identity_kernel(c, c));
                t.insert(format!("proj.{l}.conv1"), identity_kernel(c, c));
                t.insert(format!("proj.{l}.conv2"), identity_kernel(2 * c, c));
            }
        }
        t.insert(format!("proj.{l}.bias2"), Tensor::zeros(&[2 * c]));
    }
    for (head, out) in [("rec", 1), ("seg", cfg.classes)] {
        for l in (1..cfg.layers).rev() {
            let (c, cp) = (cfg.channels(l), cfg.channels(l - 1));
            t.insert(format!("{head}.up.{l}.tconv"), uniform(&[c, cp, 2, 2, 2], c * 8, &mut rng));
            conv(&mut t, &mut rng, format!("{head}.up.{l}.conv"), cp, 2 * cp, 3);
            norm(&mut t, &format!("{head}.up.{l}.norm"), cp);
        }
        conv(&mut t, &mut rng, format!("{head}.out.conv"), out, cfg.base_channels, 1);
        t.insert(format!("{head}.out.bias"), Tensor::zeros(&[out]));
    }
    Ok(Params { tensors: t })
}

fn param<'g>(p: &Bound<'g>, name: &str) -> Result<Var<'g>> {
    p.get(name)
        .copied()
        .ok_or_else(|| ModelError::Mismatch(format!("parameter '{name}' is not bound")))
}

fn channel_vec<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let c = v.shape()[0];
    Ok(v.reshape(&[1, c, 1, 1, 1])?)
}

fn norm_act<'g>(x: Var<'g>, p: &Bound<'g>, name: &str) -> Result<Var<'g>> {
    let gamma = channel_vec(param(p, &format!("{name}.gamma"))?)?;
    let beta = channel_vec(param(p, &format!("{name}.beta"))?)?;
    let y = x.instance_norm(NORM_EPS)?.mul(gamma)?.add(beta)?;
    Ok(y.leaky_relu(LEAKY_SLOPE))
}

fn check_input(x: Var<'_>, cfg: &ModelConfig) -> Result<()> {
    let s = x.shape();
    let p = cfg.patch;
    if s.len() != 5 || s[1] != 1 || s[2..] != [p, p, p] {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "encoder_forward",
            lhs: s,
            rhs: vec![0, 1, p, p, p],
        }));
    }
    Ok(())
}

/// Per-layer features `F^l`, `l = 0..L`, of a `[B, 1, P, P, P]` input.
pub fn encoder_forward<'g>(x: Var<'g>, p: &Bound<'g>, cfg: &ModelConfig) -> Result<Vec<Var<'g>>> {
    check_input(x, cfg)?;
    let mut feats = Vec::with_capacity(cfg.layers);
    let f0 = x.conv3d(param(p, "enc.0.conv")?, 1)?;
    feats.push(norm_act(f0, p, "enc.0.norm")?);
    for l in 1..cfg.layers {
        let h = feats[l - 1].conv3d(param(p, &format!("enc.{l}.conv"))?, 1)?;
        let h = norm_act(h, p, &format!("enc.{l}.norm"))?;
        feats.push(h.conv3d_padded(param(p, &format!("enc.{l}.down"))?, 2, 1)?);
    }
    Ok(feats)
}

/// Embedding matrix `[B·X·Y·Z, 2c]` of layer `l`, one row per pixel in
/// `(b, x, y, z)` order.
pub fn projector_forward<'g>(f: Var<'g>, l: usize, p: &Bound<'g>, cfg: &ModelConfig) -> Result<Var<'g>> {
    let mut h = f.conv3d(param(p, &format!("proj.{l}.conv0"))?, 1)?;
    if cfg.projector == ProjectorMode::Standard {
        h = norm_act(h, p, &format!("proj.{l}.norm0"))?;
    }
    h = h.conv3d(param(p, &format!("proj.{l}.conv1"))?, 1)?;
    if cfg.projector == ProjectorMode::Standard {
        h = norm_act(h, p, &format!("proj.{l}.norm1"))?;
    }
    h = h.conv3d(param(p, &format!("proj.{l}.conv2"))?, 1)?;
    h = h.add(channel_vec(param(p, &format!("proj.{l}.bias2"))?)?)?;
    let s = h.shape();
    let rows = s[0] * s[2] * s[3] * s[4];
    Ok(h.permute(&[0, 2, 3, 4, 1])?.reshape(&[rows, s[1]])?)
}

fn decoder<'g>(feats: &[Var<'g>], p: &Bound<'g>, cfg: &ModelConfig, head: &str) -> Result<Var<'g>> {
    if feats.len() != cfg.layers {
        return Err(ModelError::Config(format!(
            "decoder needs {} feature maps, got {}",
            cfg.layers,
            feats.len()
        )));
    }
    let mut x = feats[cfg.layers - 1];
    for l in (1..cfg.layers).rev() {
        let up = x.conv_transpose3d(param(p, &format!("{head}.up.{l}.tconv"))?)?;
        let cat = Var::concat(&[up, feats[l - 1]], 1)?;
        let h = cat.conv3d(param(p, &format!("{head}.up.{l}.conv"))?, 1)?;
        x = norm_act(h, p, &format!("{head}.up.{l}.norm"))?;
    }
    let out = x.conv3d(param(p, &format!("{head}.out.conv"))?, 1)?;
    Ok(out.add(channel_vec(param(p, &format!("{head}.out.bias"))?)?)?)
}

/// Restored patch `[B, 1, P, P, P]`.
pub fn reconstructor_forward<'g>(feats: &[Var<'g>], p: &Bound<'g>, cfg: &ModelConfig) -> Result<Var<'g>> {
    decoder(feats, p, cfg, "rec")
}

/// Class logits `[B, K, P, P, P]`.
pub fn seg_head_forward<'g>(feats: &[Var<'g>], p: &Bound<'g>, cfg: &ModelConfig) -> Result<Var<'g>> {
    decoder(feats, p, cfg, "seg")
}

/// Outputs of one pre-training forward pass.
pub struct PretrainOutputs<'g> {
    pub features: Vec<Var<'g>>,
    pub embeddings: Vec<Var<'g>>,
    pub restored: Var<'g>,
}

pub fn pretrain_forward<'g>(x: Var<'g>, p: &Bound<'g>, cfg: &ModelConfig) -> Result<PretrainOutputs<'g>> {
    let features = encoder_forward(x, p, cfg)?;
    let embeddings = features
        .iter()
        .enumerate()
        .map(|(l, &f)| projector_forward(f, l, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let restored = reconstructor_forward(&features, p, cfg)?;
    Ok(PretrainOutputs {
        features,
        embeddings,
        restored,
    })
}

const CHECKPOINT_MAGIC: &str = "mixckpt 1";
const PAYLOAD_MARK: &str = "[payload]";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    step: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Model parameters with their config and the training step reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Params,
}

impl Checkpoint {
    /// Text header (magic line, TOML index) followed by a `[payload]` line
    /// and the tensors as little-endian f64 in index order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            step: self.step,
            config: self.config.clone(),
            tensors: self
                .params
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = toml::to_string(&header).map_err(|e| ModelError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut bytes = format!("{CHECKPOINT_MAGIC}\n{text}\n{PAYLOAD_MARK}\n").into_bytes();
        for t in self.params.tensors.values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| ModelError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, bytes).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |msg: String| ModelError::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mark = format!("\n{PAYLOAD_MARK}\n");
        let split = bytes
            .windows(mark.len())
            .position(|w| w == mark.as_bytes())
            .ok_or_else(|| bad("no payload marker".into()))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let body = head
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| bad(format!("missing '{CHECKPOINT_MAGIC}' magic line")))?;
        let header: CheckpointHeader = toml::from_str(body).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[split + mark.len()..];
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload holds {} bytes, index describes {expected}",
                payload.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut off = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            off += 8 * n;
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("tensor '{}': {err}", e.name)))?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            params: Params { tensors },
        })
    }

    /// Verifies that every tensor name and shape matches `reference`.
    pub fn check_against(&self, reference: &Params) -> Result<()> {
        let mut problems = Vec::new();
        for (k, t) in &reference.tensors {
            match self.params.tensors.get(k) {
                None => problems.push(format!("missing '{k}'")),
                Some(o) if o.shape() != t.shape() => {
                    problems.push(format!("'{k}' has shape {:?}, expected {:?}", o.shape(), t.shape()))
                }
                _ => {}
            }
        }
        for k in self.params.tensors.keys() {
            if !reference.tensors.contains_key(k) {
                problems.push(format!("unexpected '{k}'"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Mismatch(problems.join("; ")))
        }
    }
}

/// Replaces the encoder tensors of `params` with those of a checkpoint.
pub fn load_encoder(params: &mut Params, ckpt: &Checkpoint) -> Result<Vec<String>> {
    params.load_prefix(&ckpt.params, "enc.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_correlation, identity_loss, mixcl_loss, recon_loss, LossWeights, Reduction};

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 3,
            base_channels: 2,
            patch: 8,
            classes: 3,
            seed: 5,
            projector: ProjectorMode::Standard,
        }
    }

    fn random_input(b: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 9);
        let n = b * p * p * p;
        Tensor::new(vec![b, 1, p, p, p], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        assert_eq!(init_params(&c).unwrap(), init_params(&c).unwrap());
        let other = ModelConfig { seed: 1, ..c };
        assert_ne!(init_params(&other).unwrap(), init_params(&ModelConfig::default()).unwrap());
    }

    #[test]
    fn projector_channel_rule() {
        let c = ModelConfig::default();
        let triples: Vec<[usize; 3]> = (0..3).map(|l| c.projector_channels(l)).collect();
        assert_eq!(triples, vec![[8, 8, 16], [16, 16, 32], [32, 32, 64]]);
        let p = init_params(&c).unwrap();
        for (l, t) in triples.iter().enumerate() {
            for (s, &co) in t.iter().enumerate() {
                assert_eq!(p.get(&format!("proj.{l}.conv{s}")).unwrap().shape()[0], co);
            }
        }
    }

    #[test]
    fn config_errors() {
        let one = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        assert!(matches!(init_params(&one), Err(ModelError::Config(_))));
        let odd = ModelConfig {
            patch: 12,
            layers: 4,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn biases_start_at_zero_and_weights_in_bound() {
        let p = init_params(&ModelConfig::default()).unwrap();
        for (k, t) in &p.tensors {
            if k.ends_with("bias") || k.ends_with("bias2") || k.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{k}");
            }
        }
        let w = p.get("enc.1.conv").unwrap();
        let b = 1.0 / ((8 * 27) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < b));
    }

    #[test]
    fn feature_shapes() {
        let c = ModelConfig::default();
        let p = init_params(&c).unwrap();
        let g = Graph::new();
        let bp = p.bind(&g);
        let f = encoder_forward(g.constant(random_input(1, 16, 0)), &bp, &c).unwrap();
        let shapes: Vec<Vec<usize>> = f.iter().map(|v| v.shape()).collect();
        assert_eq!(shapes, vec![vec![1, 8, 16, 16, 16], vec![1, 16, 8, 8, 8], vec![1, 32, 4, 4, 4]]);
        let z = projector_forward(f[0], 0, &bp, &c).unwrap();
        assert_eq!(z.shape(), vec![4096, 16]);
        assert_eq!(reconstructor_forward(&f, &bp, &c).unwrap().shape(), vec![1, 1, 16, 16, 16]);
        let seg = seg_head_forward(&f, &bp, &c).unwrap();
        assert_eq!(seg.shape(), vec![1, 2, 16, 16, 16]);
        let sm = seg.log_softmax(1).unwrap().exp().sum_axes(&[1], false).unwrap();
        assert!(sm.value().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_wrong_extent() {
        let c = small();
        let p = init_params(&c).unwrap();
        let g = Graph::new();
        let r = encoder_forward(g.constant(random_input(1, 16, 0)), &p.bind(&g), &c);
        assert!(r.is_err());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let c = small();
        let p = init_params(&c).unwrap();
        let g = Graph::new();
        let f = encoder_forward(g.constant(Tensor::zeros(&[1, 1, 8, 8, 8])), &p.bind(&g), &c).unwrap();
        for v in f {
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_params_give_zero_reconstruction() {
        let c = small();
        let mut p = init_params(&c).unwrap();
        p.tensors.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let g = Graph::new();
        let bp = p.bind(&g);
        let feats: Vec<Var> = (0..3)
            .map(|l| g.constant(Tensor::zeros(&[1, c.channels(l), c.extent(l), c.extent(l), c.extent(l)])))
            .collect();
        let r = reconstructor_forward(&feats, &bp, &c).unwrap();
        assert!(r.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_items_are_independent() {
        let c = small();
        let p = init_params(&c).unwrap();
        let one = random_input(1, 8, 3);
        let mut two_data = one.data().to_vec();
        two_data.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 1, 8, 8, 8], two_data).unwrap();
        let g = Graph::new();
        let bp = p.bind(&g);
        let a = encoder_forward(g.constant(one), &bp, &c).unwrap();
        let b = encoder_forward(g.constant(two), &bp, &c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (xv, yv) = (x.value(), y.value());
            assert_eq!(yv.shape()[0], 2);
            let n = xv.numel();
            assert_eq!(&yv.data()[..n], xv.data());
            assert_eq!(&yv.data()[n..], xv.data());
        }
    }

    #[test]
    fn identity_projector_duplicates_channels() {
        let c = ModelConfig {
            projector: ProjectorMode::Identity,
            ..small()
        };
        let p = init_params(&c).unwrap();
        let g = Graph::new();
        let bp = p.bind(&g);
        let f = encoder_forward(g.constant(random_input(1, 8, 1)), &bp, &c).unwrap();
        let z = projector_forward(f[1], 1, &bp, &c).unwrap();
        let fv = f[1].value();
        let ch = c.channels(1);
        let e = c.extent(1);
        assert_eq!(z.shape(), vec![e * e * e, 2 * ch]);
        let zv = z.value();
        for px in 0..e * e * e {
            for k in 0..2 * ch {
                assert_eq!(zv.data()[px * 2 * ch + k], fv.data()[(k % ch) * e * e * e + px]);
            }
        }
    }

    #[test]
    fn constant_feature_gives_identical_rows() {
        let c = small();
        let p = init_params(&c).unwrap();
        let g = Graph::new();
        let f = g.constant(Tensor::full(&[1, 4, 4, 4, 4], 0.7));
        let mut fd = (*f.value()).clone();
        for (i, v) in fd.data_mut().iter_mut().enumerate() {
            *v = (i / 64) as f64 * 0.3 - 0.2;
        }
        let z = projector_forward(g.constant(fd), 1, &p.bind(&g), &c).unwrap();
        let zv = z.value();
        let w = zv.shape()[1];
        for r in 1..zv.shape()[0] {
            assert_eq!(&zv.data()[r * w..(r + 1) * w], &zv.data()[..w]);
        }
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let c = small();
        let p = init_params(&c).unwrap();
        let g = Graph::new();
        let bp = p.bind(&g);
        let x = g.constant(random_input(1, 8, 4));
        let xp = g.constant(random_input(1, 8, 5));
        let a = pretrain_forward(x, &bp, &c).unwrap();
        let b = pretrain_forward(xp, &bp, &c).unwrap();
        let cs: Vec<Var> = a
            .embeddings
            .iter()
            .zip(&b.embeddings)
            .map(|(&z, &zp)| cross_correlation(z, zp, false).unwrap())
            .collect();
        let id = identity_loss(&cs, 0.005).unwrap();
        let rec = recon_loss(a.restored, x, Reduction::Mean)
            .unwrap()
            .add(recon_loss(b.restored, xp, Reduction::Mean).unwrap())
            .unwrap();
        let seg = seg_head_forward(&a.features, &bp, &c).unwrap().square().mean();
        let loss = mixcl_loss(id, None, rec, &LossWeights::default()).unwrap().add(seg).unwrap();
        let grads = g.backward(loss).unwrap();
        for (k, v) in &bp {
            let n = grads.get(*v).sq_norm();
            assert!(n > 0.0, "no gradient reaches '{k}'");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let ck = Checkpoint {
            config: c.clone(),
            step: 42,
            params: init_params(&c).unwrap(),
        };
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.check_against(&ck.params).unwrap();
        let wider = init_params(&ModelConfig {
            base_channels: 3,
            ..c.clone()
        })
        .unwrap();
        let err = back.check_against(&wider).unwrap_err().to_string();
        assert!(err.contains("enc.0.conv"), "{err}");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(ModelError::Format { .. })));
    }

    #[test]
    fn encoder_loading_touches_only_encoder() {
        let c = small();
        let fresh = init_params(&c).unwrap();
        let trained = Checkpoint {
            config: c.clone(),
            step: 1,
            params: init_params(&ModelConfig { seed: 77, ..c.clone() }).unwrap(),
        };
        let mut p = fresh.clone();
        let names = load_encoder(&mut p, &trained).unwrap();
        assert!(!names.is_empty());
        for (k, t) in &p.tensors {
            if k.starts_with("enc.") {
                assert_eq!(t, &trained.params.tensors[k]);
            } else {
                assert_eq!(t, &fresh.tensors[k]);
            }
        }
        let other = Checkpoint {
            params: init_params(&ModelConfig {
                base_channels: 4,
                ..c.clone()
            })
            .unwrap(),
            ..trained
        };
        let mut q = fresh.clone();
        assert!(load_encoder(&mut q, &other).is_err());
        assert_eq!(q, fresh);
    }
}
