//! Desk-scale training run with held-out evaluation.
//!
//! Usage: `train_desk [config.txt] [key=value ...]`

use std::time::Instant;

use posetransfer::train::{epoch_means, evaluate_held_out, load_data, test_pairs, train_with, TrainConfig};
use posetransfer::transfer::Model;

fn main() -> posetransfer::Result<()> {
    let mut cfg = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some((k, v)) => cfg.set(k.trim(), v.trim())?,
            None => cfg = TrainConfig::load(&arg)?,
        }
    }
    cfg.validate()?;
    let data = load_data(&cfg)?;
    let (_, test_poses) = data.split_poses(cfg.test_fraction, cfg.seed);
    let pairs = test_pairs(&data, &test_poses, 32, cfg.seed);
    let fresh = evaluate_held_out(&Model::new(cfg.generator(), cfg.seed), &data, &pairs)?;
    println!(
        "identity copy PMD {:.5}, untrained PMD {:.5}",
        fresh.identity_copy_mean(),
        fresh.model_mean()
    );
    let start = Instant::now();
    let steps_per_epoch = cfg.pairs_per_epoch.div_ceil(cfg.batch_size);
    let mut acc = 0.0;
    let out = train_with(&data, &cfg, |row| {
        acc += row.losses.total;
        if (row.step + 1) % steps_per_epoch == 0 {
            println!(
                "epoch {:3}  mean total {:12.3}  lr {:.2e}  {:6.0}s",
                row.epoch,
                acc / steps_per_epoch as f64,
                row.lr,
                start.elapsed().as_secs_f64()
            );
            acc = 0.0;
        }
    })?;
    let held = evaluate_held_out(&out.model, &data, &pairs)?;
    println!("trained PMD {:.5}", held.model_mean());
    println!("epoch means {:?}", epoch_means(&out.log));
    Ok(())
}
