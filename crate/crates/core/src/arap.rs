//! As-rigid-as-possible deformation with cotangent weights.
//!
//! The energy of positions `v̂` against rest positions `v` is
//!
//! ```text
//! E = Σ_i Σ_{j ∈ N(i)} w_ij ‖(v̂_i − v̂_j) − R_i (v_i − v_j)‖²
//! ```
//!
//! and is minimized by alternating per-vertex rotation fits with a global
//! solve of the anchored Laplacian system, which is factored once per
//! problem.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{cotangent_weights, Mesh, Point3};
use crate::sparse::SpdSolver;

pub const DEFAULT_ANCHOR_FRACTION: f64 = 0.1;
pub const DEFAULT_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArapOptions {
    pub anchor_fraction: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Replace negative cotangent weights by zero.
    pub clamp_negative_weights: bool,
}

impl Default for ArapOptions {
    fn default() -> Self {
        ArapOptions {
            anchor_fraction: DEFAULT_ANCHOR_FRACTION,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            clamp_negative_weights: false,
        }
    }
}

fn vec3(p: Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// Anchored deformation state of one rest mesh.
#[derive(Debug)]
pub struct ArapProblem {
    rest: Vec<Vector3<f64>>,
    neighbors: Vec<Vec<(usize, f64)>>,
    anchors: Vec<usize>,
    /// Position of each vertex among the free unknowns.
    free_slot: Vec<Option<usize>>,
    free: Vec<usize>,
    rotations: Vec<Matrix3<f64>>,
    positions: Vec<Vector3<f64>>,
    solver: Option<SpdSolver>,
}

impl ArapProblem {
    /// Sets up the problem with anchors pinned at their targets and every
    /// other vertex at its rest position. Every rotation starts at the best
    /// rigid fit of the rest anchors to their targets.
    pub fn new(rest: &Mesh, anchors: &[(usize, Point3)], clamp_negative_weights: bool) -> Result<Self> {
        let n = rest.vertex_count();
        let mut target = vec![None; n];
        for &(i, p) in anchors {
            if i >= n {
                return Err(Error::InvalidArgument(format!("anchor {i} out of range for {n} vertices")));
            }
            if target[i].replace(p).is_some() {
                return Err(Error::InvalidArgument(format!("anchor {i} given twice")));
            }
        }
        let mut weights = cotangent_weights(rest)?;
        if clamp_negative_weights {
            weights = weights.clamped_nonnegative();
        }
        let labels = rest.component_labels();
        let n_comp = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut anchored = vec![false; n_comp];
        for &(i, _) in anchors {
            anchored[labels[i]] = true;
        }
        if let Some(c) = anchored.iter().position(|a| !a) {
            let vertex = labels.iter().position(|&l| l == c).expect("label in use");
            return Err(Error::SingularSystem { vertex });
        }
        let neighbors = weights.neighbor_lists(n);
        let mut free_slot = vec![None; n];
        let mut free = Vec::new();
        for i in 0..n {
            if target[i].is_none() {
                free_slot[i] = Some(free.len());
                free.push(i);
            }
        }
        let mut triplets = Vec::new();
        for (fi, &i) in free.iter().enumerate() {
            let mut diag = 0.0;
            for &(j, w) in &neighbors[i] {
                diag += w;
                if let Some(fj) = free_slot[j] {
                    triplets.push((fi, fj, -w));
                }
            }
            triplets.push((fi, fi, diag));
        }
        let solver = if free.is_empty() {
            None
        } else {
            Some(SpdSolver::factor(free.len(), &triplets)?)
        };
        let rest_v: Vec<Vector3<f64>> = rest.vertices().iter().map(|&p| vec3(p)).collect();
        let positions = (0..n).map(|i| target[i].map_or(rest_v[i], vec3)).collect();
        let mut sorted: Vec<usize> = anchors.iter().map(|a| a.0).collect();
        sorted.sort_unstable();
        let start = anchor_fit(&rest_v, anchors);
        Ok(ArapProblem {
            rest: rest_v,
            neighbors,
            anchors: sorted,
            free_slot,
            free,
            rotations: vec![start; n],
            positions,
            solver,
        })
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }

    pub fn set_rotations(&mut self, rotations: Vec<Matrix3<f64>>) {
        assert_eq!(rotations.len(), self.rest.len(), "one rotation per vertex");
        self.rotations = rotations;
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.positions.iter().map(|v| [v.x, v.y, v.z]).collect()
    }

    /// Overwrites the current positions; anchors keep their targets.
    pub fn set_free_positions(&mut self, positions: &[Point3]) {
        assert_eq!(positions.len(), self.rest.len(), "one position per vertex");
        for &i in &self.free {
            self.positions[i] = vec3(positions[i]);
        }
    }

    pub fn energy(&self) -> f64 {
        (0..self.rest.len())
            .map(|i| {
                self.neighbors[i]
                    .iter()
                    .map(|&(j, w)| {
                        let d = (self.positions[i] - self.positions[j])
                            - self.rotations[i] * (self.rest[i] - self.rest[j]);
                        w * d.norm_squared()
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Optimal rotation per vertex for the current positions. Cells whose
    /// covariance vanishes keep their previous rotation.
    pub fn fit_rotations(&mut self) {
        let rest = &self.rest;
        let pos = &self.positions;
        let nbrs = &self.neighbors;
        let prev = &self.rotations;
        self.rotations = (0..rest.len())
            .into_par_iter()
            .map(|i| {
                let mut s = Matrix3::zeros();
                let mut scale = 0.0;
                for &(j, w) in &nbrs[i] {
                    let e = rest[i] - rest[j];
                    let f = pos[i] - pos[j];
                    s += w * e * f.transpose();
                    scale += w.abs() * e.norm() * f.norm();
                }
                if !(s.norm() > 1e-12 * scale) {
                    return prev[i];
                }
                best_rotation(&s).unwrap_or(prev[i])
            })
            .collect();
    }

    /// Exact minimizer of the energy over free positions for the current
    /// rotations.
    pub fn solve_positions(&mut self) {
        let Some(solver) = &self.solver else {
            return;
        };
        let mut rhs = DMatrix::zeros(self.free.len(), 3);
        for (fi, &i) in self.free.iter().enumerate() {
            let mut b = Vector3::zeros();
            for &(j, w) in &self.neighbors[i] {
                let r = self.rotations[i] + self.rotations[j];
                b += 0.5 * w * (r * (self.rest[i] - self.rest[j]));
                if self.free_slot[j].is_none() {
                    b += w * self.positions[j];
                }
            }
            for c in 0..3 {
                rhs[(fi, c)] = b[c];
            }
        }
        let x = solver.solve(&rhs);
        for (fi, &i) in self.free.iter().enumerate() {
            self.positions[i] = Vector3::new(x[(fi, 0)], x[(fi, 1)], x[(fi, 2)]);
        }
    }
}

/// Rotation maximizing `tr(R S)`, with the reflection case folded onto the
/// smallest singular direction.
fn best_rotation(s: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = s.svd(true, true);
    let mut u = svd.u?;
    let v = svd.v_t?.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let k = svd.singular_values.imin();
        u.column_mut(k).neg_mut();
        r = v * u.transpose();
    }
    Some(r)
}

/// Rotation of the least-squares rigid map from rest anchors to their
/// targets; identity when the anchors do not determine one.
fn anchor_fit(rest: &[Vector3<f64>], anchors: &[(usize, Point3)]) -> Matrix3<f64> {
    if anchors.len() < 3 {
        return Matrix3::identity();
    }
    let k = anchors.len() as f64;
    let c_rest = anchors.iter().map(|&(i, _)| rest[i]).sum::<Vector3<f64>>() / k;
    let c_tgt = anchors.iter().map(|&(_, p)| vec3(p)).sum::<Vector3<f64>>() / k;
    let mut s = Matrix3::zeros();
    let mut scale = 0.0;
    for &(i, p) in anchors {
        let e = rest[i] - c_rest;
        let f = vec3(p) - c_tgt;
        s += e * f.transpose();
        scale += e.norm() * f.norm();
    }
    let svd = s.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    if !(sv[1] > 1e-9 * scale) {
        return Matrix3::identity();
    }
    best_rotation(&s).unwrap_or_else(Matrix3::identity)
}

/// `ceil(fraction * n_c)` vertices from every connected component, uniform
/// without replacement.
pub fn sample_anchors(mesh: &Mesh, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("anchor fraction {fraction} not in (0, 1]")));
    }
    let labels = mesh.component_labels();
    let n_comp = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_comp];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for m in &members {
        let k = ((fraction * m.len() as f64).ceil() as usize).clamp(1, m.len());
        out.extend(sample(&mut rng, m.len(), k).into_iter().map(|x| m[x]));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ArapOutput {
    pub mesh: Mesh,
    pub anchors: Vec<usize>,
    /// Energy before the first iteration and after each one. An iteration
    /// solves positions for the current rotations, then refits rotations.
    pub energies: Vec<f64>,
}

/// Deforms `rest` so its sampled anchors match `target`, keeping cells as
/// rigid as possible.
pub fn arap_deform(rest: &Mesh, target: &Mesh, options: &ArapOptions) -> Result<ArapOutput> {
    if rest.vertex_count() != target.vertex_count() || rest.faces() != target.faces() {
        return Err(Error::InvalidMesh(
            "rest and target meshes must share vertex count and faces".into(),
        ));
    }
    let anchors = sample_anchors(rest, options.anchor_fraction, options.seed)?;
    let pinned: Vec<(usize, Point3)> = anchors.iter().map(|&i| (i, target.vertices()[i])).collect();
    let mut problem = ArapProblem::new(rest, &pinned, options.clamp_negative_weights)?;
    let mut energies = vec![problem.energy()];
    for _ in 0..options.iterations {
        problem.solve_positions();
        problem.fit_rotations();
        energies.push(problem.energy());
    }
    Ok(ArapOutput {
        mesh: rest.with_vertices(problem.positions())?,
        anchors,
        energies,
    })
}
