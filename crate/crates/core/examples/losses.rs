//! The three loss terms on random embeddings and their weighted total.

use mixcl::losses::{build_relation_matrix, cross_correlation, identity_loss, label_loss, mixcl_loss, recon_loss, LossWeights, Reduction, Relation};
use mixcl::rng::RngStream;
use mixcl::tensor::{Graph, Tensor};
use rand::Rng;

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() {
    let mut rng = RngStream::new(1, 0);
    let z = random(32, 8, &mut rng);
    let noisy = Tensor::new(vec![32, 8], z.data().iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels1: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
    let labels2: Vec<u8> = (0..32).map(|i| ((i + 1) % 3) as u8).collect();
    let a = build_relation_matrix(&labels1, &labels2);
    println!(
        "relation matrix: {} positive, {} negative, {} excluded",
        a.count(Relation::Positive),
        a.count(Relation::Negative),
        a.count(Relation::Excluded)
    );

    let w = LossWeights::default();
    let g = Graph::new();
    let (z, zp) = (g.param(z), g.constant(noisy));
    let id = identity_loss(&[cross_correlation(z, zp, false).unwrap()], w.lambda).unwrap();
    let lab = label_loss(z, zp, &a, w.tau).unwrap();
    let rec = recon_loss(z, zp, Reduction::Mean).unwrap();
    println!("identity {:.5}, label {:.5}, recon {:.5}", id.item(), lab.map_or(0.0, |l| l.item()), rec.item());
    let total = mixcl_loss(id, lab, rec, &w).unwrap();
    let grads = g.backward(total).unwrap();
    println!("total {:.5}, gradient norm {:.5}", total.item(), grads.get(z).sq_norm().sqrt());
}
