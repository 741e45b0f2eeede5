//! Reverse-mode gradients of a small 3D convolution network checked
//! against central differences.

use mixcl::tensor::{gradient_check, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(vec![1, 2, 4, 4, 4], (0..128).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect())?;
    let w = Tensor::new(vec![3, 2, 3, 3, 3], (0..162).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect())?;
    let report = gradient_check(
        |_, v| {
            let y = v[0].conv3d_padded(v[1], 1, 1)?;
            let y = y.instance_norm(1e-5)?.leaky_relu(0.01);
            Ok(y.mul(y)?.sum())
        },
        &[x, w],
        1e-5,
        1e-3,
    )?;
    println!("input gradient shape {:?}", report.analytic[0].shape());
    println!("max relative error {:.3e}", report.max_rel_error);
    Ok(())
}
