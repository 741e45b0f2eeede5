//! Forward pass of the encoder, projectors and both decoders, then a
//! checkpoint round trip.

use mixcl::model::{init_params, pretrain_forward, seg_head_forward, Checkpoint, ModelConfig};
use mixcl::tensor::{Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg)?;
    println!("{} tensors, {} parameters", params.len(), params.numel());
    let g = Graph::new();
    let bound = params.bind(&g);
    let n = cfg.patch;
    let x = g.constant(Tensor::new(vec![1, 1, n, n, n], (0..n * n * n).map(|i| (i as f64 * 0.37).sin()).collect())?);
    let out = pretrain_forward(x, &bound, &cfg)?;
    for (l, (f, e)) in out.features.iter().zip(&out.embeddings).enumerate() {
        println!("layer {l}: features {:?}, embeddings {:?}", f.shape(), e.shape());
    }
    println!("restored {:?}", out.restored.shape());
    println!("segmentation logits {:?}", seg_head_forward(&out.features, &bound, &cfg)?.shape());

    let path = std::env::temp_dir().join("mixcl-example.ckpt");
    let ck = Checkpoint { config: cfg, step: 0, params };
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("checkpoint round trip exact: {}", back == ck);
    Ok(())
}
