//! Neighborhoods and per-vertex features of a synthetic body.

use posetransfer::data::{generate_synthetic_dataset, SyntheticConfig};
use posetransfer::features::{channels_first, extract, knn_index, ExtractorParams, DEFAULT_K};
use posetransfer::ot::coords_tensor;
use posetransfer::tensor::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> posetransfer::Result<()> {
    let (data, _, _) = generate_synthetic_dataset(&SyntheticConfig {
        n_identities: 1,
        n_poses: 1,
        ..Default::default()
    })?;
    let mesh = data.mesh(0, 0);
    let idx = knn_index(mesh.vertices(), DEFAULT_K)?;
    println!("vertex 0 neighbors: {:?}", idx.neighbors(0));

    let mut store = ParamStore::new();
    let params = ExtractorParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let coords = channels_first(coords_tensor(&tape, mesh.vertices()))?;
    let f = extract(coords, &idx, &params, &p)?;
    println!(
        "{} vertices -> features {:?} from {} parameters",
        f.vertex_count,
        f.features.shape(),
        store.total_size()
    );
    Ok(())
}
