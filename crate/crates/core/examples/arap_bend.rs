//! Bends a capsule by rotating its upper half and lets ARAP fill in the
//! rest from 10% anchors.

use posetransfer::arap::{arap_deform, ArapOptions};
use posetransfer::mesh::shapes::capsule;

fn main() -> posetransfer::Result<()> {
    let rest = capsule(2.0, 0.3, 12, 10);
    let (s, c) = 0.6f64.sin_cos();
    let target: Vec<[f64; 3]> = rest
        .vertices()
        .iter()
        .map(|&[x, y, z]| {
            if y <= 1.0 {
                [x, y, z]
            } else {
                let dy = y - 1.0;
                [x * c - dy * s, 1.0 + x * s + dy * c, z]
            }
        })
        .collect();
    let target = rest.with_vertices(target)?;
    let t = std::time::Instant::now();
    let out = arap_deform(&rest, &target, &ArapOptions::default())?;
    println!("{} vertices, {} anchors, {:.3}s", rest.vertex_count(), out.anchors.len(), t.elapsed().as_secs_f64());
    for (i, e) in out.energies.iter().enumerate().step_by(10) {
        println!("iteration {i:2}: energy {e:.6e}");
    }
    if let Some(path) = std::env::args().nth(1) {
        posetransfer::mesh::save_obj(&out.mesh, path)?;
    }
    Ok(())
}
