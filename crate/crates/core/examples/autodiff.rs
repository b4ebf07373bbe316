//! Records a small graph, runs the backward pass and checks it numerically.

use mambamic::autodiff::Graph;
use mambamic::gradcheck::grad_check;
use mambamic::Tensor;

fn main() -> mambamic::Result<()> {
    let x = Tensor::<f64>::from_f64(vec![1, 4], &[0.5, -1.0, 2.0, 0.1])?;
    let w = Tensor::<f64>::from_f64(vec![4, 2], &[0.2, -0.4, 0.3, 0.1, -0.5, 0.7, 0.9, 0.0])?;

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let h = g.linear(xv, wv, None)?;
    let a = g.silu(h)?;
    let loss = g.cross_entropy(a, &[1])?;
    let grads = g.backward(loss)?;
    println!("loss      {:.6}", g.value(loss).item());
    println!("dloss/dw  {:?}", grads.get_or_zeros(wv).data());

    let report = grad_check(&[x, w], 1e-5, 1e-4, |g, v| {
        let h = g.linear(v[0], v[1], None)?;
        let a = g.silu(h)?;
        g.cross_entropy(a, &[1])
    })?;
    println!("grad check: {} elements, max rel err {:.2e}, passed {}", report.checked, report.max_rel_error, report.passed());
    Ok(())
}
