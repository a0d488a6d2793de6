//! Entropic matching between two small point sets using features built
//! from the coordinates themselves.

use posetransfer::ot::{correlation_from_tensors, row_normalize, solve_ot, warp_coords};
use posetransfer::tensor::Tape;

fn main() -> posetransfer::Result<()> {
    let tape = Tape::new();
    // Features [1, D, N]: one column per point.
    let a = tape.constant(vec![1.0, 0.0, 0.7, 0.0, 1.0, 0.7], &[1, 2, 3])?;
    let b = tape.constant(vec![0.0, 0.7, 1.0, 1.0, 0.7, 0.0], &[1, 2, 3])?;
    let c = correlation_from_tensors(a, b)?;
    for eps in [0.3, 0.03, 0.003] {
        let t = solve_ot(&c, eps, 200)?;
        let v = t.values.value();
        let rows: Vec<f64> = v.chunks(3).map(|r| r.iter().sum()).collect();
        println!("eps {eps}: argmax {:?}, row sums {:.4?}, log domain {}", t.argmax_rows(), rows, t.log_domain);
    }
    let t = solve_ot(&c, 0.03, 5)?;
    let pose = tape.constant(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0], &[3, 3])?;
    let warped = warp_coords(&row_normalize(&t)?, pose)?;
    println!("warped coordinates {:.3?}", warped.to_vec());
    Ok(())
}
