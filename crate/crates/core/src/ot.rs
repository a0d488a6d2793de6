//! Feature correlation, entropic optimal transport and warping.
//!
//! Vertex coordinates are `[N, 3]` tensors throughout this module. The
//! transport plan from [`solve_ot`] has row sums `1/N_id`; warping uses its
//! row-normalized form so warped vertices are convex combinations of pose
//! vertices, and the backward warp uses the column-normalized transpose.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mesh::{Face, Mesh, Point3};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_EPSILON: f64 = 0.03;
pub const DEFAULT_ITERATIONS: usize = 5;
/// Lower clamp on feature norms.
pub const NORM_FLOOR: f64 = 1e-8;
/// `Z/ε` above which the solver switches to the log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 30.0;

/// Cosine similarities, `[N_id, N_pose]`.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationMatrix<'t> {
    pub values: Tensor<'t>,
}

/// Transport plan, `[N_id, N_pose]`.
#[derive(Debug, Clone, Copy)]
pub struct MatchingMatrix<'t> {
    pub values: Tensor<'t>,
    pub epsilon: f64,
    pub iterations: usize,
    pub log_domain: bool,
}

impl MatchingMatrix<'_> {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    /// Column of the largest entry in each row, ties to the lower index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        argmax_rows(&self.values.value(), self.cols())
    }
}

pub(crate) fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn unit_columns<'t>(f: Tensor<'t>) -> Result<Tensor<'t>> {
    let s = f.shape();
    let f = match s.len() {
        3 if s[0] == 1 => f.reshape(&[s[1], s[2]])?,
        2 => f,
        _ => return Err(Error::shape("correlation_matrix", format!("features {s:?}"))),
    };
    // clamping the squared norm keeps the gradient finite at zero vectors
    let norm = f.square().sum(0)?.clamp_min(NORM_FLOOR * NORM_FLOOR).sqrt();
    f.div(norm)
}

/// Cosine similarity between every identity and pose feature vector.
pub fn correlation_matrix<'t>(f_id: &FeatureMap<'t>, f_pose: &FeatureMap<'t>) -> Result<CorrelationMatrix<'t>> {
    correlation_from_tensors(f_id.features, f_pose.features)
}

/// As [`correlation_matrix`] on raw `[D, N]` or `[1, D, N]` tensors.
pub fn correlation_from_tensors<'t>(f_id: Tensor<'t>, f_pose: Tensor<'t>) -> Result<CorrelationMatrix<'t>> {
    let a = unit_columns(f_id)?;
    let b = unit_columns(f_pose)?;
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::shape(
            "correlation_matrix",
            format!("channel widths {} and {}", a.shape()[0], b.shape()[0]),
        ));
    }
    Ok(CorrelationMatrix {
        values: a.transpose()?.matmul(b)?,
    })
}

fn check_finite(t: Tensor<'_>, what: &'static str) -> Result<()> {
    if t.tape().is_checked() && t.value().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Whether the scaling iterations should run on logarithms. Besides the
/// global test on `min(Z)/ε`, a row or column whose smallest cost exceeds
/// the threshold also qualifies, since its kernel entries can underflow
/// together.
fn needs_log_domain(z: &[f64], cols: usize, epsilon: f64) -> bool {
    let rows = z.len() / cols;
    let row_min = z.chunks(cols).map(|r| r.iter().copied().fold(f64::INFINITY, f64::min));
    let col_min = (0..cols).map(|j| (0..rows).map(|i| z[i * cols + j]).fold(f64::INFINITY, f64::min));
    row_min.chain(col_min).any(|m| m / epsilon > LOG_DOMAIN_THRESHOLD)
}

/// Entropic optimal transport between uniform marginals with cost
/// `Z = 1 - C`, by unrolled Sinkhorn scaling. The loop starts from
/// `a = 1/N_id`, alternates the column and row updates, and ends on a row
/// update, so row sums of the result are exactly `1/N_id`. Gradients flow
/// through every iteration.
pub fn solve_ot<'t>(c: &CorrelationMatrix<'t>, epsilon: f64, i_max: usize) -> Result<MatchingMatrix<'t>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if i_max == 0 {
        return Err(Error::InvalidArgument("i_max must be at least 1".into()));
    }
    let s = c.values.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("solve_ot", format!("{s:?}")));
    }
    let (n_id, n_pose) = (s[0], s[1]);
    let tape = c.values.tape();
    let z = c.values.neg().add_scalar(1.0);
    let log_domain = needs_log_domain(&z.value(), n_pose, epsilon);
    let values = if log_domain {
        sinkhorn_log(tape, z, epsilon, i_max, n_id, n_pose)?
    } else {
        sinkhorn_plain(tape, z, epsilon, i_max, n_id, n_pose)?
    };
    check_finite(values, "transport plan")?;
    Ok(MatchingMatrix {
        values,
        epsilon,
        iterations: i_max,
        log_domain,
    })
}

fn sinkhorn_plain<'t>(
    tape: &'t Tape,
    z: Tensor<'t>,
    epsilon: f64,
    i_max: usize,
    n_id: usize,
    n_pose: usize,
) -> Result<Tensor<'t>> {
    let u = z.scale(-1.0 / epsilon).exp();
    check_finite(u, "Sinkhorn kernel")?;
    let ut = u.transpose()?;
    let mut a = tape.full(1.0 / n_id as f64, &[n_id, 1]);
    let mut b = tape.full(1.0 / n_pose as f64, &[n_pose, 1]);
    for _ in 0..i_max {
        b = ut.matmul(a)?.recip_scaled(1.0 / n_pose as f64)?;
        check_finite(b, "Sinkhorn column scaling")?;
        a = u.matmul(b)?.recip_scaled(1.0 / n_id as f64)?;
        check_finite(a, "Sinkhorn row scaling")?;
    }
    a.mul(u)?.mul(b.reshape(&[1, n_pose])?)
}

fn sinkhorn_log<'t>(
    tape: &'t Tape,
    z: Tensor<'t>,
    epsilon: f64,
    i_max: usize,
    n_id: usize,
    n_pose: usize,
) -> Result<Tensor<'t>> {
    let k = z.scale(-1.0 / epsilon);
    let log_row = -(n_id as f64).ln();
    let log_col = -(n_pose as f64).ln();
    let mut la = tape.full(log_row, &[n_id, 1]);
    let mut lb = tape.full(log_col, &[1, n_pose]);
    for _ in 0..i_max {
        lb = k.add(la)?.logsumexp(0)?.neg().add_scalar(log_col);
        la = k.add(lb)?.logsumexp(1)?.neg().add_scalar(log_row);
    }
    Ok(k.add(la)?.add(lb)?.exp())
}

fn normalize_axis<'t>(t: Tensor<'t>, axis: usize, what: &str) -> Result<Tensor<'t>> {
    let sums = t.sum(axis)?;
    if let Some(i) = sums.value().iter().position(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} {i} of the matching matrix sums to zero")));
    }
    t.div(sums)
}

/// Scales each row to sum to one.
pub fn row_normalize<'t>(t: &MatchingMatrix<'t>) -> Result<MatchingMatrix<'t>> {
    Ok(MatchingMatrix {
        values: normalize_axis(t.values, 1, "row")?,
        ..*t
    })
}

fn check_coords(v: Tensor<'_>, rows: usize, op: &'static str) -> Result<()> {
    if v.shape() != [rows, 3] {
        return Err(Error::shape(op, format!("coordinates {:?}, expected [{rows}, 3]", v.shape())));
    }
    Ok(())
}

/// `V_warp = T · V_pose` for a row-normalized plan, `[N_id, 3]`.
pub fn warp_coords<'t>(t: &MatchingMatrix<'t>, v_pose: Tensor<'t>) -> Result<Tensor<'t>> {
    check_coords(v_pose, t.cols(), "warp_pose_mesh")?;
    t.values.matmul(v_pose)
}

/// Warps pose coordinates onto the identity indexing and builds a mesh with
/// the identity faces.
pub fn warp_pose_mesh<'t>(t: &MatchingMatrix<'t>, v_pose: Tensor<'t>, faces_id: &[Face]) -> Result<(Tensor<'t>, Mesh)> {
    let warped = warp_coords(t, v_pose)?;
    let mesh = Mesh::new(to_points(&warped.value()), faces_id.to_vec())?;
    Ok((warped, mesh))
}

/// `V'_pose = T_colnorm^T · V_warp`, `[N_pose, 3]`.
pub fn backward_warp<'t>(t: &MatchingMatrix<'t>, v_warp: Tensor<'t>) -> Result<Tensor<'t>> {
    check_coords(v_warp, t.rows(), "backward_warp")?;
    normalize_axis(t.values, 0, "column")?.transpose()?.matmul(v_warp)
}

/// Summed squared distance between the pose vertices and their round trip
/// through the forward and backward warps.
pub fn backward_correspondence_loss<'t>(t: &MatchingMatrix<'t>, v_pose: Tensor<'t>) -> Result<Tensor<'t>> {
    let warped = warp_coords(&row_normalize(t)?, v_pose)?;
    let back = backward_warp(t, warped)?;
    Ok(back.sub(v_pose)?.square().sum_all())
}

/// Row-major `[N, 3]` values to points.
pub fn to_points(values: &[f64]) -> Vec<Point3> {
    values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Points as a `[N, 3]` constant.
pub fn coords_tensor<'t>(tape: &'t Tape, points: &[Point3]) -> Tensor<'t> {
    tape.constant(points.iter().flatten().copied().collect(), &[points.len(), 3])
        .expect("point buffer matches its shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan<'t>(tape: &'t Tape, c: Vec<f64>, n: usize, m: usize, eps: f64, iters: usize) -> MatchingMatrix<'t> {
        let c = CorrelationMatrix {
            values: tape.constant(c, &[n, m]).unwrap(),
        };
        solve_ot(&c, eps, iters).unwrap()
    }

    fn fixed(tape: &Tape, t: Vec<f64>, n: usize, m: usize) -> MatchingMatrix<'_> {
        MatchingMatrix {
            values: tape.constant(t, &[n, m]).unwrap(),
            epsilon: 1.0,
            iterations: 0,
            log_domain: false,
        }
    }

    #[test]
    fn correlation_examples() {
        let tape = Tape::new();
        // columns are vertices: id = {(1,0), (0,1), (0,0)}, pose = {(1,1), (1,0)}
        let a = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]).unwrap();
        let b = tape.constant(vec![1.0, 1.0, 1.0, 0.0], &[2, 2]).unwrap();
        let c = correlation_from_tensors(a, b).unwrap().values.to_vec();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [h, 1.0, h, 0.0, 0.0, 0.0];
        for (x, y) in c.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn correlation_scale_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fa: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fb: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let c1 = correlation_from_tensors(
            tape.constant(fa.clone(), &[4, 10]).unwrap(),
            tape.constant(fb.clone(), &[4, 8]).unwrap(),
        )
        .unwrap()
        .values
        .to_vec();
        let c2 = correlation_from_tensors(
            tape.constant(fa.iter().map(|x| x * 37.0).collect(), &[4, 10]).unwrap(),
            tape.constant(fb, &[4, 8]).unwrap(),
        )
        .unwrap()
        .values
        .to_vec();
        for (x, y) in c1.iter().zip(&c2) {
            assert!(x.abs() <= 1.0 + 1e-6);
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_gradient_at_zero_feature_is_finite() {
        let tape = Tape::new();
        let a = tape.variable(vec![0.0, 0.0], &[2, 1]).unwrap();
        let b = tape.constant(vec![1.0, 2.0], &[2, 1]).unwrap();
        let c = correlation_from_tensors(a, b).unwrap().values;
        tape.backward(c.sum_all()).unwrap();
        assert!(a.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        let tape = Tape::new();
        let t = plan(&tape, vec![0.4; 12], 3, 4, 0.03, 5).values.to_vec();
        for x in t {
            assert!((x - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    /// Over the 2x2 polytope with marginals 1/2, plans are
    /// `[[p, 1/2-p], [1/2-p, p]]`; the LP optimum is found by scanning `p`.
    #[test]
    fn two_by_two_matches_scanned_polytope() {
        let z = [0.0, 1.0, 1.0, 0.0];
        let cost = |p: f64| p * z[0] + (0.5 - p) * z[1] + (0.5 - p) * z[2] + p * z[3];
        let best = (0..=1000)
            .map(|i| 0.5 * i as f64 / 1000.0)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap();
        let tape = Tape::new();
        let c: Vec<f64> = z.iter().map(|x| 1.0 - x).collect();
        let t = plan(&tape, c, 2, 2, 0.01, 200).values.to_vec();
        let oracle = [best, 0.5 - best, 0.5 - best, best];
        for (x, y) in t.iter().zip(oracle) {
            assert!((x - y).abs() < 1e-3, "{t:?}");
        }
    }

    #[test]
    fn marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, m) in [(7, 5), (6, 6), (3, 9)] {
            let c: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let t = plan(&tape, c.clone(), n, m, DEFAULT_EPSILON, DEFAULT_ITERATIONS);
            for row in t.values.to_vec().chunks(m) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0 / n as f64).abs() < 1e-9);
            }
            let t = plan(&tape, c, n, m, 0.3, 200).values.to_vec();
            for j in 0..m {
                let s: f64 = (0..n).map(|i| t[i * m + j]).sum();
                assert!((s - 1.0 / m as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_domain_agrees_with_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..0.5)).collect();
        let tape = Tape::new();
        let zt = tape.constant(z.clone(), &[4, 5]).unwrap();
        let plain = sinkhorn_plain(&tape, zt, 0.05, 30, 4, 5).unwrap().to_vec();
        let logd = sinkhorn_log(&tape, zt, 0.05, 30, 4, 5).unwrap().to_vec();
        for (x, y) in plain.iter().zip(&logd) {
            assert!((x - y).abs() < 1e-12);
        }
        // a cost shift that underflows the plain kernel
        let c: Vec<f64> = z.iter().map(|x| 1.0 - (x + 40.0)).collect();
        let t = plan(&tape, c, 4, 5, 0.05, 30);
        assert!(t.log_domain);
        for (x, y) in t.values.to_vec().iter().zip(&logd) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn checked_tape_reports_underflow() {
        // the second column's kernel entries underflow to zero
        let z = vec![0.0, 40.0, 0.0, 40.0];
        let tape = Tape::checked();
        let zt = tape.constant(z.clone(), &[2, 2]).unwrap();
        assert!(matches!(sinkhorn_plain(&tape, zt, 0.03, 5, 2, 2), Err(Error::NonFinite(_))));
        assert!(needs_log_domain(&z, 2, 0.03));
        let c = CorrelationMatrix {
            values: tape.constant(z.iter().map(|x| 1.0 - x).collect(), &[2, 2]).unwrap(),
        };
        let t = solve_ot(&c, 0.03, 5).unwrap();
        assert!(t.log_domain);
        assert!(solve_ot(&c, -1.0, 5).is_err());
        assert!(solve_ot(&c, 0.03, 0).is_err());
    }

    #[test]
    fn sinkhorn_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = gradcheck::check(
            |tape, v| {
                let t = solve_ot(&CorrelationMatrix { values: v[0] }, 0.3, 5)?;
                let zt = tape.constant(z.clone(), &[3, 4])?;
                Ok(zt.mul(t.values)?.sum_all())
            },
            &[(c, vec![3, 4])],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn row_normalize_properties() {
        let tape = Tape::new();
        let t = fixed(&tape, vec![0.1, 0.3, 0.05, 0.05], 2, 2);
        let r = row_normalize(&t).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(&r.values.to_vec(), &[0.25, 0.75, 0.5, 0.5]));
        let rr = row_normalize(&r).unwrap();
        assert!(close(&rr.values.to_vec(), &r.values.to_vec()));
        assert_eq!(r.argmax_rows(), t.argmax_rows());
        let zero = fixed(&tape, vec![0.0, 0.0, 1.0, 1.0], 2, 2);
        assert!(row_normalize(&zero).is_err());
    }

    #[test]
    fn permutation_warp_round_trip() {
        let tape = Tape::new();
        let perm = [2usize, 0, 3, 1];
        let mut t = vec![0.0; 16];
        for (i, &j) in perm.iter().enumerate() {
            t[i * 4 + j] = 0.25;
        }
        let t = row_normalize(&fixed(&tape, t, 4, 4)).unwrap();
        let pts = [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0], [-1.0, 0.5, 9.0]];
        let v = coords_tensor(&tape, &pts);
        let w = warp_coords(&t, v).unwrap().to_vec();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(&w[3 * i..3 * i + 3], &pts[j]);
        }
        let back = backward_warp(&t, warp_coords(&t, v).unwrap()).unwrap();
        assert_eq!(back.to_vec(), v.to_vec());
        assert_eq!(backward_correspondence_loss(&t, v).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_plan_collapses_to_centroid() {
        let tape = Tape::new();
        let t = fixed(&tape, vec![0.25; 4], 2, 2);
        let v = coords_tensor(&tape, &[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let back = backward_warp(&t, v).unwrap().to_vec();
        assert!(back.iter().all(|x| x.abs() < 1e-15));
        assert!((backward_correspondence_loss(&t, v).unwrap().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_warp_matches_dense_oracle() {
        // doubly stochastic: average of permutation matrices
        let n = 5;
        let perms = [[0, 1, 2, 3, 4], [1, 2, 3, 4, 0], [4, 3, 2, 1, 0]];
        let weights = [0.5, 0.3, 0.2];
        let mut t = vec![0.0; n * n];
        for (p, w) in perms.iter().zip(weights) {
            for i in 0..n {
                t[i * n + p[i]] += w / n as f64;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3> = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let tape = Tape::new();
        let m = fixed(&tape, t.clone(), n, n);
        let got = backward_warp(&m, coords_tensor(&tape, &pts)).unwrap().to_vec();
        for i in 0..n {
            let col: f64 = (0..n).map(|j| t[j * n + i]).sum();
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..n {
                    s += t[j * n + i] / col * pts[j][c];
                }
                assert!((got[i * 3 + c] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warped_mesh_keeps_identity_faces() {
        let tape = Tape::new();
        let t = fixed(&tape, vec![0.2, 0.8, 0.5, 0.5, 1.0, 0.0], 3, 2);
        let v = coords_tensor(&tape, &[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let (_, mesh) = warp_pose_mesh(&t, v, &[[0, 1, 2]]).unwrap();
        assert_eq!(mesh.faces(), &[[0, 1, 2]]);
        assert_eq!(mesh.vertex_count(), 3);
        assert!(warp_pose_mesh(&t, v, &[[0, 1, 3]]).is_err());
    }
}
