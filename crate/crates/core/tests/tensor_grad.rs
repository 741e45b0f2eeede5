use mixcl::tensor::{gradient_check, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const RTOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights,
/// so every output element contributes a distinct cotangent.
fn project<'g>(out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, &out.shape(), -1.0, 1.0);
    let w = out.graph().constant(w);
    Ok(out.mul(w)?.sum())
}

fn check<F>(inputs: Vec<Tensor>, seed: u64, f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let report = gradient_check(|g, v| project(f(g, v)?, seed), &inputs, H, FLOOR).unwrap();
    assert!(
        report.max_rel_error < RTOL,
        "max relative error {} (analytic {:?}, numeric {:?})",
        report.max_rel_error,
        report.analytic,
        report.numeric
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_binary_with_broadcast(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4], -2.0, 2.0);
        let d = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
        check(vec![a, b, d], seed, |_, v| {
            let s = v[0].add(v[1])?;
            let p = s.mul(v[0])?.sub(v[1])?;
            p.div(v[2])
        });
    }

    #[test]
    fn unary_functions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5], -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &[5], 0.5, 2.0);
        check(vec![x, pos], seed, |_, v| {
            let e = v[0].exp().mul_scalar(0.3).neg().add_scalar(1.0);
            let l = v[1].log()?;
            let s = v[1].sqrt()?;
            let p = v[1].powf(1.7)?;
            let r = v[0].leaky_relu(0.01);
            e.add(l)?.add(s)?.add(p)?.add(r)
        });
    }

    #[test]
    fn matmul_and_reductions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4, 2], -2.0, 2.0);
        check(vec![a, b], seed, |_, v| {
            let m = v[0].matmul(v[1])?;
            let s = m.sum_axes(&[0], true)?;
            let mean = m.mean_axes(&[1], true)?;
            let t = v[0].t()?.mean_axes(&[0], false)?.sum_axes(&[0], true)?;
            m.mul(s)?.add(mean)?.add(t)
        });
    }

    #[test]
    fn shape_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3, 2], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 1, 2], -2.0, 2.0);
        check(vec![a, b], seed, |_, v| {
            let c = Var::concat(&[v[0], v[1], v[0]], 1)?;
            let p = c.permute(&[2, 0, 1])?.reshape(&[4, 7])?;
            let r = p.select_rows(&[3, 0, 3])?;
            Ok(r.square())
        });
    }

    #[test]
    fn norms_and_cosine(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        check(vec![a, b], seed, |_, v| {
            let c = v[0].cosine_similarity(v[1], 1)?;
            let n = v[0].l2_norm(0)?;
            c.sum().add(n.sum())
        });
    }

    #[test]
    fn softmax_and_logsumexp(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        let mask: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
        check(vec![a], seed, move |_, v| {
            let ls = v[0].log_softmax(1)?;
            let lse = v[0].mul_scalar(5.0).masked_logsumexp(&mask)?;
            ls.sum().add(lse)
        });
    }

    #[test]
    fn conv_and_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 3, 5], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[2, 3, 3, 3, 3], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[2, 1, 2, 2, 2], -1.0, 1.0);
        check(vec![x, w, w1, wt], seed, |_, v| {
            let y = v[0].conv3d(v[1], 1)?.instance_norm(1e-5)?;
            let z = y.conv3d_padded(v[2], 2, 1)?;
            let u = z.conv_transpose3d(v[3])?;
            let s = v[0].conv3d(v[2].permute(&[1, 0, 2, 3, 4])?, 2)?;
            u.sum().add(s.sum())
        });
    }
}
