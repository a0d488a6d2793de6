//! PMD, Chamfer and EMD under growing noise.

use posetransfer::data::{generate_synthetic_dataset, SyntheticConfig};
use posetransfer::eval::{evaluate_pair, MetricReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> posetransfer::Result<()> {
    let (data, _, _) = generate_synthetic_dataset(&SyntheticConfig {
        n_identities: 1,
        n_poses: 1,
        vertices_per_mesh: 300,
        seed: 1,
    })?;
    let gt = data.mesh(0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut report = MetricReport::default();
    for level in [0.0, 0.01, 0.02, 0.05] {
        let noisy: Vec<[f64; 3]> = gt
            .vertices()
            .iter()
            .map(|p| p.map(|x| x + level * rng.random_range(-1.0..1.0)))
            .collect();
        report.pairs.push(evaluate_pair(format!("noise {level}"), &gt.with_vertices(noisy)?, gt)?);
    }
    print!("{}", report.table());
    println!("{}", report.to_json());
    Ok(())
}
