//! Builds a small expression on the tape and prints its gradients.

use semflow::{Tape, Tensor};

fn main() -> semflow::Result<()> {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5])?, true)?;
    let w = t.leaf(Tensor::new(&[3, 2], vec![1.0, 0.5, -0.5, 1.0, 0.25, -1.0])?, true)?;
    let y = t.matmul(x, w)?;
    let y = t.gelu(y)?;
    let p = t.softmax(y, 1)?;
    let weights = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0])?;
    let loss = t.mul_const(p, &weights)?;
    let loss = t.sum(loss)?;
    t.backward(loss)?;
    println!("loss {}", t.value(loss).item());
    println!("dL/dx {:?}", t.grad(x).unwrap().data());
    println!("dL/dw {:?}", t.grad(w).unwrap().data());
    Ok(())
}
