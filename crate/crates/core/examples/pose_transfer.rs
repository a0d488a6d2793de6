//! Pose transfer between two synthetic bodies with a freshly initialized
//! or checkpointed generator.
//!
//! Usage: `pose_transfer [checkpoint_dir] [out_dir]`

use posetransfer::data::{generate_synthetic_dataset, SyntheticConfig};
use posetransfer::eval::pmd;
use posetransfer::mesh::{save_obj, shuffle_vertices};
use posetransfer::train::load_model;
use posetransfer::transfer::{transfer, GeneratorConfig, Model};

fn main() -> posetransfer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.first() {
        Some(dir) => load_model(dir)?,
        None => Model::new(GeneratorConfig::desk(), 0),
    };
    let (data, _, _) = generate_synthetic_dataset(&SyntheticConfig {
        n_identities: 2,
        n_poses: 2,
        ..Default::default()
    })?;
    let identity = data.mesh(0, 0);
    let (pose, _) = shuffle_vertices(data.mesh(1, 1), 42);
    let gt = data.mesh(0, 1);
    let out = transfer(identity, &pose, &model)?;
    println!("identity-copy PMD {:.5}", pmd(identity, gt)?);
    println!("warped PMD        {:.5}", pmd(&out.warped, gt)?);
    println!("output PMD        {:.5}", pmd(&out.output, gt)?);
    if let Some(dir) = args.get(1) {
        std::fs::create_dir_all(dir).expect("create output directory");
        save_obj(&out.output, format!("{dir}/output.obj"))?;
        save_obj(&out.warped, format!("{dir}/warped.obj"))?;
    }
    Ok(())
}
