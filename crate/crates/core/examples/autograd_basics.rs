//! Reverse-mode gradients of a small expression, checked against central
//! differences.

use ahan::gradcheck::{check_gradients, DEFAULT_EPS};
use ahan::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let w = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 0.2, -0.4, 0.8, 0.3, -0.5])?);
    let loss = x.matmul(w)?.gelu().softmax(1)?.pick(&[0, 3])?.sum();
    let grads = g.backward(loss)?;
    println!("loss       = {:.6}", loss.value().item()?);
    println!("dloss/dx   = {:?}", grads.wrt(x).data());
    println!("dloss/dw   = {:?}", grads.wrt(w).data());

    let inputs = [x.value().as_ref().clone(), w.value().as_ref().clone()];
    let report = check_gradients(&inputs, DEFAULT_EPS, |_g, v| {
        Ok(v[0].matmul(v[1])?.gelu().softmax(1)?.pick(&[0, 3])?.sum())
    })?;
    println!(
        "finite differences: {} coordinates, max relative error {:.2e}",
        report.checked, report.max_rel_err
    );
    Ok(())
}
