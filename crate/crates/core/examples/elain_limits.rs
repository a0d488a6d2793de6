//! Elastic instance normalization at its two blend limits.

use posetransfer::tensor::{ParamStore, Tape};
use posetransfer::transfer::{elain_forward, instance_stats, ElainParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> posetransfer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let params = ElainParams::new(&mut store, "elain", 4, 6, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = tape.constant((0..4 * 50).map(|_| rng.random_range(-3.0..3.0)).collect(), &[1, 4, 50])?;
    // Identity features constant over vertices give vertex-constant γ and β.
    let id = tape.constant((0..6).flat_map(|c| vec![0.2 * c as f64 - 0.5; 50]).collect(), &[1, 6, 50])?;

    let keep = elain_forward(h, id, &params, &p, Some(0.0))?;
    let diff = keep.sub(h)?.square().sum_all().item().sqrt();
    println!("w = 0: distance to input {diff:.2e}");

    let full = elain_forward(h, id, &params, &p, Some(1.0))?;
    let beta = params.beta.apply(&p, params.proj.apply(&p, id)?)?;
    let (mean_out, _) = instance_stats(full)?;
    let (mean_beta, _) = instance_stats(beta)?;
    println!("w = 1: output channel means {:.4?}", mean_out.to_vec());
    println!("       mean of beta          {:.4?}", mean_beta.to_vec());

    let learned = elain_forward(h, id, &params, &p, None)?;
    println!("learned w: output shape {:?}", learned.shape());
    Ok(())
}
