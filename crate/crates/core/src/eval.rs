//! Mesh and point-set metrics.
//!
//! Conventions, since none is universal:
//! * PMD is the mean squared distance between corresponding vertices.
//! * Chamfer distance sums the two directed means of squared nearest
//!   neighbour distances.
//! * EMD is the mean unsquared distance under the best bijection.
//!
//! Reports keep raw values; [`MetricReport::table`] shows PMD and CD
//! ×10⁻³ and EMD ×10⁻².

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{load_obj, Mesh, Point3};

/// Largest set solved by exact assignment.
pub const EXACT_EMD_LIMIT: usize = 1024;
pub const MAX_EMD_POINTS: usize = 4096;
pub const ENTROPIC_EPSILON: f64 = 0.002;
pub const ENTROPIC_ITERATIONS: usize = 500;

fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn pmd(a: &Mesh, b: &Mesh) -> Result<f64> {
    pmd_points(a.vertices(), b.vertices())
}

pub fn pmd_points(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("pmd", format!("{} vs {} vertices", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(p, q)| dist2(p, q)).sum::<f64>() / a.len() as f64)
}

fn directed_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|p| b.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / a.len() as f64
}

pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("chamfer distance of an empty set".into()));
    }
    Ok(directed_chamfer(a, b) + directed_chamfer(b, a))
}

/// Minimum-cost perfect matching of a square cost matrix (row-major),
/// returned as `assignment[row] = col`. Shortest augmenting paths with
/// potentials, O(n³).
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "square cost matrix");
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

fn distance_matrix(a: &[Point3], b: &[Point3]) -> Vec<f64> {
    a.par_iter()
        .flat_map_iter(|p| b.iter().map(move |q| dist2(p, q).sqrt()))
        .collect()
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmdMode {
    Exact,
    Entropic,
}

pub fn emd_exact(a: &[Point3], b: &[Point3]) -> Result<f64> {
    check_emd_sizes(a, b)?;
    let n = a.len();
    let c = distance_matrix(a, b);
    let assign = hungarian(&c, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum::<f64>() / n as f64)
}

/// Transport cost of the entropic plan between uniform measures, solved in
/// the log domain. The regularization starts at the largest cost and decays
/// geometrically to `epsilon` over the first half of the iterations, which
/// holds for the second half.
pub fn emd_entropic(a: &[Point3], b: &[Point3], epsilon: f64, iterations: usize) -> Result<f64> {
    check_emd_sizes(a, b)?;
    let n = a.len();
    let c = distance_matrix(a, b);
    let log_mass = -(n as f64).ln();
    let start = c.iter().copied().fold(epsilon, f64::max);
    let ramp = (iterations / 2).max(1);
    let decay = (epsilon / start).powf(1.0 / ramp as f64);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut eps = start;
    for it in 0..iterations {
        eps = if it + 1 >= ramp { epsilon } else { start * decay.powi(it as i32 + 1) };
        let e = eps;
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let row = &c[i * n..(i + 1) * n];
            *fi = e * (log_mass - logsumexp((0..n).map(|j| (g[j] - row[j]) / e)));
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            *gj = e * (log_mass - logsumexp((0..n).map(|i| (f[i] - c[i * n + j]) / e)));
        });
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let cij = c[i * n + j];
                    ((f[i] + g[j] - cij) / eps).exp() * cij
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total)
}

fn check_emd_sizes(a: &[Point3], b: &[Point3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("emd", format!("{} vs {} points", a.len(), b.len())));
    }
    if a.is_empty() || a.len() > MAX_EMD_POINTS {
        return Err(Error::InvalidArgument(format!(
            "emd needs 1..={MAX_EMD_POINTS} points, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// Exact up to [`EXACT_EMD_LIMIT`] points, entropic above.
pub fn emd(a: &[Point3], b: &[Point3]) -> Result<(f64, EmdMode)> {
    check_emd_sizes(a, b)?;
    if a.len() <= EXACT_EMD_LIMIT {
        Ok((emd_exact(a, b)?, EmdMode::Exact))
    } else {
        Ok((emd_entropic(a, b, ENTROPIC_EPSILON, ENTROPIC_ITERATIONS)?, EmdMode::Entropic))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub pmd: f64,
    pub cd: f64,
    pub emd: f64,
    pub emd_mode: EmdMode,
}

pub fn evaluate_pair(pair_id: impl Into<String>, pred: &Mesh, gt: &Mesh) -> Result<PairMetrics> {
    let (emd, emd_mode) = emd(pred.vertices(), gt.vertices())?;
    Ok(PairMetrics {
        pair_id: pair_id.into(),
        pmd: pmd(pred, gt)?,
        cd: chamfer(pred.vertices(), gt.vertices())?,
        emd,
        emd_mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pmd_mean: f64,
    pub cd_mean: f64,
    pub emd_mean: f64,
    pub n_pairs: usize,
    /// `exact`, `entropic` or `mixed`.
    pub emd_mode: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
}

impl MetricReport {
    pub fn summary(&self) -> Summary {
        let n = self.pairs.len();
        let mean = |f: fn(&PairMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.pairs.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let exact = self.pairs.iter().all(|p| p.emd_mode == EmdMode::Exact);
        let entropic = self.pairs.iter().all(|p| p.emd_mode == EmdMode::Entropic);
        Summary {
            pmd_mean: mean(|p| p.pmd),
            cd_mean: mean(|p| p.cd),
            emd_mean: mean(|p| p.emd),
            n_pairs: n,
            emd_mode: match (exact, entropic) {
                (true, _) => "exact",
                (_, true) => "entropic",
                _ => "mixed",
            }
            .into(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair_id,pmd,cd,emd\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{}", p.pair_id, p.pmd, p.cd, p.emd);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    /// Human-readable table in display units.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>12} {:>12} {:>12}\n", "pair", "PMD e-3", "CD e-3", "EMD e-2");
        let mut row = |id: &str, pmd: f64, cd: f64, emd: f64| {
            let _ = writeln!(s, "{id:<24} {:>12.4} {:>12.4} {:>12.4}", pmd * 1e3, cd * 1e3, emd * 1e2);
        };
        for p in &self.pairs {
            row(&p.pair_id, p.pmd, p.cd, p.emd);
        }
        let m = self.summary();
        row("mean", m.pmd_mean, m.cd_mean, m.emd_mean);
        s
    }
}

fn obj_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("obj") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Metrics for every `.obj` in `pred_dir` against the file of the same stem
/// in `gt_dir`. A prediction without ground truth is an error.
pub fn evaluate_dirs(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<MetricReport> {
    let preds = obj_files(pred_dir.as_ref())?;
    let gts = obj_files(gt_dir.as_ref())?;
    let jobs: Vec<(String, std::path::PathBuf, std::path::PathBuf)> = preds
        .into_iter()
        .map(|(stem, p)| match gts.get(&stem) {
            Some(g) => Ok((stem, p, g.clone())),
            None => Err(Error::InvalidArgument(format!("no ground truth for {stem}"))),
        })
        .collect::<Result<_>>()?;
    let pairs = jobs
        .par_iter()
        .map(|(stem, p, g)| evaluate_pair(stem.clone(), &load_obj(p)?, &load_obj(g)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { pairs })
}
