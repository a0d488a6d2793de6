//! One unsupervised training step on a synthetic pair, with timings.

use std::time::Instant;

use posetransfer::data::{generate_synthetic_dataset, SyntheticConfig};
use posetransfer::train::{dual_step, make_pair, StepContext, TrainConfig};
use posetransfer::transfer::Model;

fn main() -> posetransfer::Result<()> {
    let (data, _, _) = generate_synthetic_dataset(&SyntheticConfig {
        n_identities: 2,
        n_poses: 2,
        ..Default::default()
    })?;
    let cfg = TrainConfig::default();
    let model = Model::new(cfg.generator(), 0);
    let pair = make_pair(&data, (0, 0), (1, 1), 7, false);
    for arap in [false, true] {
        let t = Instant::now();
        let r = dual_step(&model, &pair, &cfg, StepContext { arap, arap_seed: 1 })?;
        println!(
            "arap={arap}: {:.2}s  L_A={:.4} L_B={:.4} L_corr={:.4} L_edge={:.4} total={:.2}",
            t.elapsed().as_secs_f64(),
            r.losses.l_a_rec,
            r.losses.l_b_rec,
            r.losses.l_corr,
            r.losses.l_edge,
            r.losses.total
        );
    }
    Ok(())
}
