//! Dual-reconstruction training and the supervised baseline.
//!
//! One unsupervised step on a pair `(M_A, M_B)` runs the generator three
//! times with the same weights:
//!
//! ```text
//! M_output = G(M_A, M_B)            identity M_A, pose M_B
//! M̂_output = ARAP(M_A, M_output)    late epochs only, else M_output
//! M'_A     = G(M̂_output, M_A)
//! M'_B     = G(M_B, M̂_output)
//! loss     = λ_rec (‖V'_A − V_A‖² + ‖V'_B − V_B‖²) + λ_corr L_corr + L_edge
//! ```
//!
//! `L_corr` is the round-trip loss of the main call's plan against `M_B`;
//! `L_edge` is taken on `M_output`. The ARAP refinement replaces values
//! only; gradients pass through it unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arap::{arap_deform, ArapOptions};
use crate::data::{Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::pmd;
use crate::mesh::{Mesh, VertexPermutation};
use crate::ot::{backward_correspondence_loss, coords_tensor, to_points};
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use crate::transfer::{generate, transfer, GeneratorConfig, MeshInput, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda_rec: f64,
    pub lambda_corr: f64,
    pub epochs: usize,
    /// First epoch (0-based) that refines the main output with ARAP.
    pub arap_start_epoch: usize,
    pub lr: f64,
    /// First epoch of the linear decay; `None` means half of `epochs`.
    pub lr_decay_start: Option<usize>,
    /// Learning rate multiplier reached at the last epoch.
    pub lr_final_factor: f64,
    pub batch_size: usize,
    pub pairs_per_epoch: usize,
    pub epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub anchor_fraction: f64,
    pub arap_iterations: usize,
    pub clamp_negative_weights: bool,
    pub widths: [usize; 3],
    pub k: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Checkpoint period in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub data: SyntheticConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::desk();
        TrainConfig {
            mode: Mode::Unsupervised,
            lambda_rec: 2000.0,
            lambda_corr: 200.0,
            epochs: 60,
            arap_start_epoch: 45,
            lr: 1e-4,
            lr_decay_start: None,
            lr_final_factor: 0.5,
            batch_size: 4,
            pairs_per_epoch: 32,
            epsilon: g.epsilon,
            sinkhorn_iterations: g.iterations,
            anchor_fraction: crate::arap::DEFAULT_ANCHOR_FRACTION,
            arap_iterations: crate::arap::DEFAULT_ITERATIONS,
            clamp_negative_weights: false,
            widths: g.widths,
            k: g.k,
            seed: 0,
            test_fraction: 0.2,
            checkpoint_every: 0,
            data: SyntheticConfig::default(),
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("bad value {value:?} for {key}"),
    })
}

impl TrainConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            widths: self.widths,
            k: self.k,
            epsilon: self.epsilon,
            iterations: self.sinkhorn_iterations,
        }
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set_at(n + 1, k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key, as from a config line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "mode" => {
                self.mode = match v {
                    "unsupervised" => Mode::Unsupervised,
                    "supervised" => Mode::Supervised,
                    _ => {
                        return Err(Error::Config {
                            line,
                            msg: format!("mode must be unsupervised or supervised, got {v:?}"),
                        })
                    }
                }
            }
            "lambda_rec" => self.lambda_rec = parse_value(line, key, v)?,
            "lambda_corr" => self.lambda_corr = parse_value(line, key, v)?,
            "epochs" => self.epochs = parse_value(line, key, v)?,
            "arap_start_epoch" => self.arap_start_epoch = parse_value(line, key, v)?,
            "lr" => self.lr = parse_value(line, key, v)?,
            "lr_decay_start" => self.lr_decay_start = Some(parse_value(line, key, v)?),
            "lr_final_factor" => self.lr_final_factor = parse_value(line, key, v)?,
            "batch_size" => self.batch_size = parse_value(line, key, v)?,
            "pairs_per_epoch" => self.pairs_per_epoch = parse_value(line, key, v)?,
            "epsilon" => self.epsilon = parse_value(line, key, v)?,
            "sinkhorn_iterations" => self.sinkhorn_iterations = parse_value(line, key, v)?,
            "anchor_fraction" => self.anchor_fraction = parse_value(line, key, v)?,
            "arap_iterations" => self.arap_iterations = parse_value(line, key, v)?,
            "clamp_negative_weights" => self.clamp_negative_weights = parse_value(line, key, v)?,
            "widths" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|s| parse_value(line, key, s.trim()))
                    .collect::<Result<_>>()?;
                self.widths = parts.try_into().map_err(|_| Error::Config {
                    line,
                    msg: "widths takes three comma-separated values".into(),
                })?;
            }
            "k" => self.k = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "test_fraction" => self.test_fraction = parse_value(line, key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(line, key, v)?,
            "n_identities" => self.data.n_identities = parse_value(line, key, v)?,
            "n_poses" => self.data.n_poses = parse_value(line, key, v)?,
            "vertices" => self.data.vertices_per_mesh = parse_value(line, key, v)?,
            "data_seed" => self.data.seed = parse_value(line, key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if !(self.lambda_rec > 0.0) {
            return bad(format!("lambda_rec must be positive, got {}", self.lambda_rec));
        }
        if !(self.lambda_corr >= 0.0) {
            return bad(format!("lambda_corr must be non-negative, got {}", self.lambda_corr));
        }
        if self.arap_start_epoch > self.epochs {
            return bad(format!(
                "arap_start_epoch {} exceeds epochs {}",
                self.arap_start_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return bad("batch_size and pairs_per_epoch must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_final_factor >= 0.0) {
            return bad("lr must be positive and lr_final_factor non-negative".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must be in [0, 1), got {}", self.test_fraction));
        }
        Ok(())
    }

    /// Flat `key = value` rendering accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            Mode::Unsupervised => "unsupervised",
            Mode::Supervised => "supervised",
        };
        let [w1, w2, w3] = self.widths;
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "lambda_rec = {}", self.lambda_rec);
        let _ = writeln!(s, "lambda_corr = {}", self.lambda_corr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "arap_start_epoch = {}", self.arap_start_epoch);
        let _ = writeln!(s, "lr = {}", self.lr);
        if let Some(d) = self.lr_decay_start {
            let _ = writeln!(s, "lr_decay_start = {d}");
        }
        let _ = writeln!(s, "lr_final_factor = {}", self.lr_final_factor);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "pairs_per_epoch = {}", self.pairs_per_epoch);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "sinkhorn_iterations = {}", self.sinkhorn_iterations);
        let _ = writeln!(s, "anchor_fraction = {}", self.anchor_fraction);
        let _ = writeln!(s, "arap_iterations = {}", self.arap_iterations);
        let _ = writeln!(s, "clamp_negative_weights = {}", self.clamp_negative_weights);
        let _ = writeln!(s, "widths = {w1},{w2},{w3}");
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "test_fraction = {}", self.test_fraction);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "n_identities = {}", self.data.n_identities);
        let _ = writeln!(s, "n_poses = {}", self.data.n_poses);
        let _ = writeln!(s, "vertices = {}", self.data.vertices_per_mesh);
        let _ = writeln!(s, "data_seed = {}", self.data.seed);
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", d.display());
        }
        if let Some(d) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", d.display());
        }
        s
    }

    /// Learning rate of `epoch`: constant, then linear down to
    /// `lr * lr_final_factor` at the last epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let start = self.lr_decay_start.unwrap_or(self.epochs / 2);
        if epoch < start || self.epochs <= start {
            return self.lr;
        }
        let t = ((epoch - start + 1) as f64 / (self.epochs - start) as f64).min(1.0);
        self.lr * (1.0 - (1.0 - self.lr_final_factor) * t)
    }
}

/// Summed squared coordinate difference of two `[N, 3]` tensors.
pub fn reconstruction_loss<'t>(recon: Tensor<'t>, original: Tensor<'t>) -> Result<Tensor<'t>> {
    if recon.shape() != original.shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", recon.shape(), original.shape()),
        ));
    }
    Ok(recon.sub(original)?.square().sum_all())
}

/// `Σ_v Σ_{u ∈ N(v)} ‖v − u‖²` over the undirected `edges`, so each edge
/// counts twice.
pub fn edge_loss<'t>(coords: Tensor<'t>, edges: &[(usize, usize)]) -> Result<Tensor<'t>> {
    let cf = coords.transpose()?;
    let a: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let b: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let d = cf.gather_last(a.into())?.sub(cf.gather_last(b.into())?)?;
    Ok(d.square().sum_all().scale(2.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a_rec: f64,
    pub l_b_rec: f64,
    pub l_corr: f64,
    pub l_edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The total re-assembled from the parts.
    pub fn assemble(&self, lambda_rec: f64, lambda_corr: f64) -> f64 {
        lambda_rec * (self.l_a_rec + self.l_b_rec) + lambda_corr * self.l_corr + self.l_edge
    }

    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.l_a_rec += s * o.l_a_rec;
        self.l_b_rec += s * o.l_b_rec;
        self.l_corr += s * o.l_corr;
        self.l_edge += s * o.l_edge;
        self.total += s * o.total;
    }
}

/// One training example with vertex orders already shuffled.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub a: Mesh,
    pub b: Mesh,
    /// Ground truth of `G(a, b)` in `a`'s vertex order; supervised mode.
    pub gt: Option<Mesh>,
}

/// Per-step switches that are not part of the configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub arap: bool,
    pub arap_seed: u64,
}

/// Loss breakdown and parameter gradients of one pair.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub losses: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
    /// `∂loss/∂M_output`, row-major `[N_A, 3]`.
    pub output_grad: Vec<f64>,
    /// Main output before and after refinement.
    pub output: Vec<f64>,
    pub refined: Vec<f64>,
}

fn finish<'t>(tape: &'t Tape, total: Tensor<'t>) -> Result<f64> {
    let v = total.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    tape.backward(total)?;
    Ok(v)
}

/// Unsupervised dual-reconstruction step on one pair.
pub fn dual_step(model: &Model, pair: &TrainPair, cfg: &TrainConfig, ctx: StepContext) -> Result<StepResult> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let params = &model.params;
    let k = params.config.k;
    let a = MeshInput::constant(&tape, pair.a.vertices(), k)?;
    let b = MeshInput::constant(&tape, pair.b.vertices(), k)?;
    let main = generate(&a, &b, params, &p)?;
    let output = main.output;
    tape.retain_grad(output);
    let (refined, refined_values) = if ctx.arap {
        let target = pair.a.with_vertices(to_points(&output.value()))?;
        let opts = ArapOptions {
            anchor_fraction: cfg.anchor_fraction,
            iterations: cfg.arap_iterations,
            seed: ctx.arap_seed,
            clamp_negative_weights: cfg.clamp_negative_weights,
        };
        let deformed = arap_deform(&pair.a, &target, &opts)?.mesh.flat_coords();
        (output.replace_value(deformed.clone())?, deformed)
    } else {
        (output, output.to_vec())
    };
    let hat = MeshInput::new(refined, k)?;
    let rec_a = generate(&hat, &a, params, &p)?.output;
    let rec_b = generate(&b, &hat, params, &p)?.output;
    let l_a = reconstruction_loss(rec_a, a.coords)?;
    let l_b = reconstruction_loss(rec_b, b.coords)?;
    let l_corr = if cfg.lambda_corr > 0.0 {
        Some(backward_correspondence_loss(&main.plan, b.coords)?)
    } else {
        None
    };
    let l_edge = edge_loss(output, &pair.a.edges())?;
    let mut total = l_a.add(l_b)?.scale(cfg.lambda_rec).add(l_edge)?;
    if let Some(c) = l_corr {
        total = total.add(c.scale(cfg.lambda_corr))?;
    }
    let total_v = finish(&tape, total)?;
    Ok(StepResult {
        losses: LossBreakdown {
            l_a_rec: l_a.item(),
            l_b_rec: l_b.item(),
            l_corr: l_corr.map_or(0.0, |c| c.item()),
            l_edge: l_edge.item(),
            total: total_v,
        },
        grads: p.grads(),
        output_grad: output.grad().unwrap_or_else(|| vec![0.0; output.len()]),
        output: output.to_vec(),
        refined: refined_values,
    })
}

/// Single-generator step against ground truth in the identity's order.
pub fn supervised_step(model: &Model, pair: &TrainPair, cfg: &TrainConfig) -> Result<StepResult> {
    let gt = pair
        .gt
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("supervised step needs ground truth".into()))?;
    if gt.vertex_count() != pair.a.vertex_count() || gt.faces() != pair.a.faces() {
        return Err(Error::InvalidArgument(
            "ground truth must share the identity mesh's vertex order and faces".into(),
        ));
    }
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let k = model.params.config.k;
    let a = MeshInput::constant(&tape, pair.a.vertices(), k)?;
    let b = MeshInput::constant(&tape, pair.b.vertices(), k)?;
    let main = generate(&a, &b, &model.params, &p)?;
    let output = main.output;
    tape.retain_grad(output);
    let l_rec = reconstruction_loss(output, coords_tensor(&tape, gt.vertices()))?;
    let l_corr = if cfg.lambda_corr > 0.0 {
        Some(backward_correspondence_loss(&main.plan, b.coords)?)
    } else {
        None
    };
    let l_edge = edge_loss(output, &pair.a.edges())?;
    let mut total = l_rec.scale(cfg.lambda_rec).add(l_edge)?;
    if let Some(c) = l_corr {
        total = total.add(c.scale(cfg.lambda_corr))?;
    }
    let total_v = finish(&tape, total)?;
    Ok(StepResult {
        losses: LossBreakdown {
            l_a_rec: l_rec.item(),
            l_b_rec: 0.0,
            l_corr: l_corr.map_or(0.0, |c| c.item()),
            l_edge: l_edge.item(),
            total: total_v,
        },
        grads: p.grads(),
        output_grad: output.grad().unwrap_or_else(|| vec![0.0; output.len()]),
        output: output.to_vec(),
        refined: output.to_vec(),
    })
}

/// Indices `(identity, pose)` of a source mesh.
pub type MeshId = (usize, usize);

/// Draws a pair of training meshes and shuffles both vertex orders.
pub fn make_pair(data: &Dataset, a: MeshId, b: MeshId, seed: u64, supervised: bool) -> TrainPair {
    let perm_a = VertexPermutation::random(data.vertex_count(), seed);
    let perm_b = VertexPermutation::random(data.vertex_count(), seed ^ 0xb5ad_4ece_da1c_e2a9);
    TrainPair {
        a: perm_a.apply(data.mesh(a.0, a.1)),
        b: perm_b.apply(data.mesh(b.0, b.1)),
        gt: supervised.then(|| perm_a.apply(data.mesh(a.0, b.1))),
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// The epoch's pairs: distinct identities, poses from `train_poses`.
pub fn epoch_pairs(data: &Dataset, train_poses: &[usize], count: usize, seed: u64, epoch: usize) -> Vec<(MeshId, MeshId, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 1));
    let n_id = data.n_identities();
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n_id);
            let j = if n_id > 1 {
                (i + rng.random_range(1..n_id)) % n_id
            } else {
                i
            };
            let p = *train_poses.choose(&mut rng).expect("training poses");
            let q = *train_poses.choose(&mut rng).expect("training poses");
            ((i, p), (j, q), rng.random())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,step,L_A_rec,L_B_rec,L_corr,L_edge,total,lr";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, l.l_a_rec, l.l_b_rec, l.l_corr, l.l_edge, l.total, r.lr
        );
    }
    s
}

/// Mean total loss of each epoch.
pub fn epoch_means(rows: &[LogRow]) -> Vec<f64> {
    let Some(last) = rows.last() else {
        return Vec::new();
    };
    let mut sums = vec![(0.0, 0usize); last.epoch + 1];
    for r in rows {
        sums[r.epoch].0 += r.losses.total;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub train_poses: Vec<usize>,
    pub test_poses: Vec<usize>,
}

fn checkpoint_of(model: &Model, cfg: &TrainConfig, epoch: usize, steps: u64) -> Checkpoint {
    Checkpoint {
        params: model.store.clone(),
        step: steps,
        meta: serde_json::json!({
            "generator": model.params.config,
            "epochs_done": epoch,
            "config": cfg.to_text(),
        }),
    }
}

/// Writes `model` as a checkpoint directory readable by [`load_model`].
pub fn save_model(dir: impl AsRef<Path>, model: &Model, cfg: &TrainConfig) -> Result<()> {
    save_checkpoint(dir, &checkpoint_of(model, cfg, 0, 0))
}

/// Restores a model from a checkpoint directory.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let ckpt = load_checkpoint(dir)?;
    let config: GeneratorConfig = serde_json::from_value(ckpt.meta["generator"].clone())
        .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
    Model::from_store(config, ckpt.params)
}

/// Loads the dataset named by the configuration, generating it when no
/// directory is given.
pub fn load_data(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(d) => Dataset::load(d),
        None => Ok(crate::data::generate_synthetic_dataset(&cfg.data)?.0),
    }
}

/// Runs the epoch loop. With `out_dir` set, writes `loss_log.csv`,
/// `config.txt` and checkpoints under it.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, |_| {})
}

/// As [`train`], calling `on_step` after every optimizer step.
pub fn train_with(data: &Dataset, cfg: &TrainConfig, mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_poses, test_poses) = data.split_poses(cfg.test_fraction, cfg.seed);
    let mut model = Model::new(cfg.generator(), cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.store.sizes(),
    );
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let supervised = cfg.mode == Mode::Supervised;
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        let pairs = epoch_pairs(data, &train_poses, cfg.pairs_per_epoch, cfg.seed, epoch);
        for (batch_idx, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<StepResult>> = batch
                .par_iter()
                .map(|&(a, b, seed)| {
                    let pair = make_pair(data, a, b, seed, supervised);
                    if supervised {
                        supervised_step(&model, &pair, cfg)
                    } else {
                        let ctx = StepContext {
                            arap: epoch >= cfg.arap_start_epoch,
                            arap_seed: mix(cfg.seed, epoch as u64, seed),
                        };
                        dual_step(&model, &pair, cfg, ctx)
                    }
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut losses = LossBreakdown::default();
            let mut grads: Vec<Vec<f64>> = model.store.sizes().map(|n| vec![0.0; n]).collect();
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: batch_idx },
                    e => e,
                })?;
                losses.add_scaled(&r.losses, scale);
                for (g, rg) in grads.iter_mut().zip(&r.grads) {
                    for (x, y) in g.iter_mut().zip(rg) {
                        *x += scale * y;
                    }
                }
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            adam.step(model.store.data_mut(), &grads)?;
            let row = LogRow {
                epoch,
                step,
                losses,
                lr,
            };
            on_step(&row);
            log.push(row);
            step += 1;
        }
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(
                    dir.join(format!("checkpoint_epoch{:03}", epoch + 1)),
                    &checkpoint_of(&model, cfg, epoch + 1, adam.step_count()),
                )?;
            }
        }
    }
    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(dir.join("checkpoint"), &checkpoint_of(&model, cfg, cfg.epochs, adam.step_count()))?;
        let p = dir.join("loss_log.csv");
        fs::write(&p, log_csv(&log)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        train_poses,
        test_poses,
    })
}

/// A held-out transfer with known answer `mesh(identity.0, pose.1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestPair {
    pub identity: MeshId,
    pub pose: MeshId,
    pub shuffle_seed: u64,
}

/// Pairs over the test poses with distinct identities.
pub fn test_pairs(data: &Dataset, test_poses: &[usize], count: usize, seed: u64) -> Vec<TestPair> {
    epoch_pairs(data, test_poses, count, seed ^ 0x7e57, usize::MAX)
        .into_iter()
        .map(|(a, b, s)| TestPair {
            identity: a,
            pose: b,
            shuffle_seed: s,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    /// PMD of the model output per pair.
    pub model: Vec<f64>,
    /// PMD of copying the identity mesh per pair.
    pub identity_copy: Vec<f64>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

impl HeldOut {
    pub fn model_mean(&self) -> f64 {
        mean(&self.model)
    }

    pub fn identity_copy_mean(&self) -> f64 {
        mean(&self.identity_copy)
    }
}

/// PMD of single-generator transfers on held-out pairs. The pose mesh is
/// shuffled; the identity keeps template order so the ground truth aligns.
pub fn evaluate_held_out(model: &Model, data: &Dataset, pairs: &[TestPair]) -> Result<HeldOut> {
    let rows: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|t| {
            let id = data.mesh(t.identity.0, t.identity.1);
            let pose = VertexPermutation::random(data.vertex_count(), t.shuffle_seed).apply(data.mesh(t.pose.0, t.pose.1));
            let gt = data.mesh(t.identity.0, t.pose.1);
            let out = transfer(id, &pose, model)?;
            Ok((pmd(&out.output, gt)?, pmd(id, gt)?))
        })
        .collect();
    let mut h = HeldOut {
        model: Vec::new(),
        identity_copy: Vec::new(),
    };
    for r in rows {
        let (m, c) = r?;
        h.model.push(m);
        h.identity_copy.push(c);
    }
    Ok(h)
}

/// Parameters as stored, for callers that only need the weights.
pub fn params_of(outcome: &TrainOutcome) -> &ParamStore {
    &outcome.model.store
}
