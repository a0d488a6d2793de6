//! Elastic instance normalization and the pose transfer generator.
//!
//! The generator computes features of both meshes, matches them by optimal
//! transport, warps the pose mesh onto the identity indexing and refines the
//! warped coordinates with a per-vertex trunk whose normalization layers are
//! conditioned on the identity features. The trunk predicts an offset that
//! is added to the warped coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{channels_first, extract, knn_index, ExtractorParams, NeighborIndex, DEFAULT_K};
use crate::mesh::{Mesh, Point3};
use crate::nn::Affine;
use crate::ot::{
    coords_tensor, correlation_matrix, row_normalize, solve_ot, to_points, warp_coords, MatchingMatrix,
    DEFAULT_EPSILON, DEFAULT_ITERATIONS,
};
use crate::tensor::{concat, Bound, ParamStore, Tape, Tensor, LEAKY_SLOPE};

/// Variance floor inside the normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Trunk widths of the full-size model.
pub const FULL_WIDTHS: [usize; 3] = [1024, 512, 256];
/// Trunk widths used for desk-scale experiments.
pub const DESK_WIDTHS: [usize; 3] = [256, 128, 64];
/// Init scale of the final 3-channel map.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

/// Per-sample, per-channel mean and `sqrt(var + 1e-5)` over the last axis.
pub fn instance_stats<'t>(h: Tensor<'t>) -> Result<(Tensor<'t>, Tensor<'t>)> {
    let s = h.shape();
    if s.len() != 3 || s[2] == 0 {
        return Err(Error::shape("instance_stats", format!("{s:?}")));
    }
    Ok((h.mean(2)?, h.std(2, NORM_EPS)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElainParams {
    /// Identity features to the block width.
    pub proj: Affine,
    pub gamma: Affine,
    pub beta: Affine,
    /// `[mean(h_warp); mean(h_id)] -> w`, one weight per channel.
    pub blend: Affine,
}

impl ElainParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, id_width: usize, rng: &mut ChaCha8Rng) -> Self {
        ElainParams {
            proj: Affine::new(store, &format!("{name}.proj"), id_width, width, 1.0, rng),
            gamma: Affine::new(store, &format!("{name}.gamma"), width, width, 1.0, rng),
            beta: Affine::new(store, &format!("{name}.beta"), width, width, 1.0, rng),
            blend: Affine::new(store, &format!("{name}.blend"), 2 * width, width, 1.0, rng),
        }
    }
}

/// Normalizes `h_warp` per channel and re-scales it with a blend of the
/// identity-conditioned `γ, β` and its own `σ, μ`. `blend` fixes the weight
/// `w` instead of computing it.
pub fn elain_forward<'t>(
    h_warp: Tensor<'t>,
    identity_features: Tensor<'t>,
    params: &ElainParams,
    p: &Bound<'t>,
    blend: Option<f64>,
) -> Result<Tensor<'t>> {
    let (mu, sigma) = instance_stats(h_warp)?;
    let h_id = params.proj.apply(p, identity_features)?;
    if h_id.shape() != h_warp.shape() {
        return Err(Error::shape(
            "elain_forward",
            format!("h_warp {:?}, projected identity {:?}", h_warp.shape(), h_id.shape()),
        ));
    }
    let gamma = params.gamma.apply(p, h_id)?;
    let beta = params.beta.apply(p, h_id)?;
    let w = match blend {
        Some(x) => h_warp.tape().full(x, &mu.shape()),
        None => params
            .blend
            .apply(p, concat(&[mu, h_id.mean(2)?], 1)?)?
            .sigmoid(),
    };
    let keep = w.neg().add_scalar(1.0);
    let gamma_b = w.mul(gamma)?.add(keep.mul(sigma)?)?;
    let beta_b = w.mul(beta)?.add(keep.mul(mu)?)?;
    h_warp.sub(mu)?.div(sigma)?.mul(gamma_b)?.add(beta_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlockParams {
    pub elain: ElainParams,
    pub conv: Affine,
    /// Present when the block changes width.
    pub skip: Option<Affine>,
}

impl ResBlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        id_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResBlockParams {
            elain: ElainParams::new(store, &format!("{name}.elain"), d_in, id_width, rng),
            conv: Affine::new(store, &format!("{name}.conv"), d_in, d_out, 1.0, rng),
            skip: (d_in != d_out).then(|| Affine::new(store, &format!("{name}.skip"), d_in, d_out, 1.0, rng)),
        }
    }
}

/// `skip(h) + conv(leaky(elain(h)))`.
pub fn elain_resblock<'t>(
    h: Tensor<'t>,
    identity_features: Tensor<'t>,
    params: &ResBlockParams,
    p: &Bound<'t>,
) -> Result<Tensor<'t>> {
    let inner = elain_forward(h, identity_features, &params.elain, p, None)?.leaky_relu(LEAKY_SLOPE);
    let skip = match &params.skip {
        Some(s) => s.apply(p, h)?,
        None => h,
    };
    skip.add(params.conv.apply(p, inner)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub widths: [usize; 3],
    pub k: usize,
    pub epsilon: f64,
    pub iterations: usize,
}

impl GeneratorConfig {
    pub fn full() -> Self {
        GeneratorConfig {
            widths: FULL_WIDTHS,
            k: DEFAULT_K,
            epsilon: DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
        }
    }

    pub fn desk() -> Self {
        GeneratorConfig {
            widths: DESK_WIDTHS,
            ..Self::full()
        }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Layout of every generator parameter inside a [`ParamStore`]. One value
/// serves the main generator and both auxiliary calls.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub extractor: ExtractorParams,
    pub conv_in: Affine,
    pub conv_mid: Affine,
    pub blocks: [ResBlockParams; 3],
    /// Width transitions after the first two blocks.
    pub transitions: [Affine; 2],
    pub conv_out: Affine,
}

impl GeneratorParams {
    pub fn new(config: GeneratorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3] = config.widths;
        let extractor = ExtractorParams::new(store, rng);
        let idw = extractor.output_width();
        let conv_in = Affine::new(store, "trunk.conv_in", 3, w1, 1.0, rng);
        let conv_mid = Affine::new(store, "trunk.conv_mid", w1, w1, 1.0, rng);
        let b1 = ResBlockParams::new(store, "trunk.block1", w1, w1, idw, rng);
        let t1 = Affine::new(store, "trunk.down1", w1, w2, 1.0, rng);
        let b2 = ResBlockParams::new(store, "trunk.block2", w2, w2, idw, rng);
        let t2 = Affine::new(store, "trunk.down2", w2, w3, 1.0, rng);
        let b3 = ResBlockParams::new(store, "trunk.block3", w3, w3, idw, rng);
        let conv_out = Affine::new(store, "trunk.conv_out", w3, 3, OUTPUT_INIT_SCALE, rng);
        GeneratorParams {
            config,
            extractor,
            conv_in,
            conv_mid,
            blocks: [b1, b2, b3],
            transitions: [t1, t2],
            conv_out,
        }
    }
}

/// Generator weights with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: GeneratorParams,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = GeneratorParams::new(config, &mut store, &mut rng);
        Model { params, store }
    }

    /// Adopts stored weights after checking they fit `config`.
    pub fn from_store(config: GeneratorConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0);
        if !fresh.store.same_layout(&store) {
            return Err(Error::Checkpoint(
                "stored tensors do not match the generator configuration".into(),
            ));
        }
        Ok(Model {
            params: fresh.params,
            store,
        })
    }
}

/// One generator input on a tape: `[N, 3]` coordinates and their
/// neighborhoods.
#[derive(Debug, Clone)]
pub struct MeshInput<'t> {
    pub coords: Tensor<'t>,
    pub neighbors: NeighborIndex,
}

impl<'t> MeshInput<'t> {
    pub fn new(coords: Tensor<'t>, k: usize) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::shape("mesh input", format!("{s:?}")));
        }
        let pts = to_points(&coords.value());
        Ok(MeshInput {
            coords,
            neighbors: knn_index(&pts, k)?,
        })
    }

    pub fn constant(tape: &'t Tape, points: &[Point3], k: usize) -> Result<Self> {
        Self::new(coords_tensor(tape, points), k)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Generated<'t> {
    /// `[N_id, 3]`
    pub output: Tensor<'t>,
    pub plan: MatchingMatrix<'t>,
    /// `[N_id, 3]`
    pub warped: Tensor<'t>,
}

/// Full forward pass. The output has the identity's vertex count and order.
pub fn generate<'t>(
    identity: &MeshInput<'t>,
    pose: &MeshInput<'t>,
    params: &GeneratorParams,
    p: &Bound<'t>,
) -> Result<Generated<'t>> {
    let id_cf = channels_first(identity.coords)?;
    let pose_cf = channels_first(pose.coords)?;
    let f_id = extract(id_cf, &identity.neighbors, &params.extractor, p)?;
    let f_pose = extract(pose_cf, &pose.neighbors, &params.extractor, p)?;
    let c = correlation_matrix(&f_id, &f_pose)?;
    let plan = solve_ot(&c, params.config.epsilon, params.config.iterations)?;
    let warped = warp_coords(&row_normalize(&plan)?, pose.coords)?;
    let delta = trunk(channels_first(warped)?, f_id.features, params, p)?;
    let n = identity.neighbors.vertex_count();
    let delta = delta.reshape(&[3, n])?.transpose()?;
    Ok(Generated {
        output: warped.add(delta)?,
        plan,
        warped,
    })
}

/// `[1, 3, N]` warped coordinates to a `[1, 3, N]` offset.
fn trunk<'t>(warped: Tensor<'t>, id_features: Tensor<'t>, params: &GeneratorParams, p: &Bound<'t>) -> Result<Tensor<'t>> {
    let act = |t: Tensor<'t>| t.leaky_relu(LEAKY_SLOPE);
    let mut h = act(params.conv_in.apply(p, warped)?);
    h = act(params.conv_mid.apply(p, h)?);
    h = elain_resblock(h, id_features, &params.blocks[0], p)?;
    h = act(params.transitions[0].apply(p, h)?);
    h = elain_resblock(h, id_features, &params.blocks[1], p)?;
    h = act(params.transitions[1].apply(p, h)?);
    h = elain_resblock(h, id_features, &params.blocks[2], p)?;
    params.conv_out.apply(p, act(h))
}

/// Inference result on meshes.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub output: Mesh,
    pub warped: Mesh,
    /// Best pose vertex for each identity vertex.
    pub matches: Vec<usize>,
}

/// Transfers the pose of `pose` onto `identity`.
pub fn transfer(identity: &Mesh, pose: &Mesh, model: &Model) -> Result<Transfer> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let k = model.params.config.k;
    let id = MeshInput::constant(&tape, identity.vertices(), k)?;
    let po = MeshInput::constant(&tape, pose.vertices(), k)?;
    let g = generate(&id, &po, &model.params, &p)?;
    Ok(Transfer {
        output: identity.with_vertices(to_points(&g.output.value()))?,
        warped: identity.with_vertices(to_points(&g.warped.value()))?,
        matches: g.plan.argmax_rows(),
    })
}
