//! Reverse-mode gradients on a small expression, checked by finite
//! differences.

use posetransfer::tensor::{gradcheck, Tape};

fn main() -> posetransfer::Result<()> {
    let tape = Tape::new();
    let x = tape.variable(vec![0.5, -1.0, 2.0], &[3])?;
    let y = x.square().mul(x.sigmoid())?.sum_all();
    tape.backward(y)?;
    println!("f(x) = {:.6}", y.item());
    println!("df/dx = {:?}", x.grad().unwrap());

    let report = gradcheck::check(
        |_, v| Ok(v[0].square().mul(v[0].sigmoid())?.sum_all()),
        &[(vec![0.5, -1.0, 2.0], vec![3])],
        1e-6,
    )?;
    println!("max relative error vs finite differences: {:.2e}", report.max_rel_error);
    Ok(())
}
