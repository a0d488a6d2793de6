//! Per-vertex deep features from a flat stack of point convolutions.
//!
//! Each point convolution maps, for every vertex, the features of its `k`
//! nearest neighbors concatenated with the neighbor's offset from the center
//! through a shared affine map and LeakyReLU, then max-pools over the
//! neighbors. The affine map is split into a feature part, applied once per
//! vertex before gathering, and an offset part; the result is identical to
//! applying it to the concatenation.
//!
//! There is no downsampling: all three stages (32, 64, 128 channels) keep the
//! input vertex count. The last stage concatenates the center vertex's
//! incoming features with the pooled neighbor features before its output
//! affine map.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::Point3;
use crate::nn::Affine;
use crate::tensor::{concat, Bound, ParamId, ParamStore, Tensor, LEAKY_SLOPE};

pub const DEFAULT_K: usize = 16;
pub const STAGE_WIDTHS: [usize; 3] = [32, 64, 128];

/// The `k` nearest neighbors of every vertex, excluding itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    flat: Rc<[usize]>,
    centers: Rc<[usize]>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vertex_count(&self) -> usize {
        self.centers.len() / self.k.max(1)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.flat[i * self.k..(i + 1) * self.k]
    }

    /// Neighbor lists flattened vertex-major, `N * k` entries.
    pub fn flat(&self) -> Rc<[usize]> {
        self.flat.clone()
    }

    /// Each vertex index repeated `k` times, aligned with [`Self::flat`].
    pub fn centers(&self) -> Rc<[usize]> {
        self.centers.clone()
    }
}

/// Exhaustive k-nearest-neighbor search. Lists are sorted by ascending
/// Euclidean distance, ties broken by lower index.
pub fn knn_index(vertices: &[Point3], k: usize) -> Result<NeighborIndex> {
    let n = vertices.len();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs more than {n} vertices"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = vertices[i];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let q = vertices[j];
                    let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    (d, j)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let flat: Vec<usize> = lists.into_iter().flatten().collect();
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    Ok(NeighborIndex {
        k,
        flat: flat.into(),
        centers: centers.into(),
    })
}

/// Weights of one point convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointConvParams {
    /// Feature part of the shared map, with the bias.
    pub feature: Affine,
    /// Offset part of the shared map, `[D_out, 3]`.
    pub offset: ParamId,
}

impl PointConvParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // fan-in of the concatenated input
        let scale = ((d_in as f64) / (d_in + 3) as f64).sqrt();
        let feature = Affine::new(store, &format!("{name}.feature"), d_in, d_out, scale, rng);
        let offset_scale = (3.0 / (d_in + 3) as f64).sqrt();
        let bound = offset_scale / 3f64.sqrt();
        let w = (0..3 * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        let offset = store.add(format!("{name}.offset.weight"), &[d_out, 3], w);
        PointConvParams { feature, offset }
    }
}

/// Neighbor-minus-center coordinate offsets, `[1, 3, N * k]`.
pub fn relative_offsets<'t>(coords: Tensor<'t>, idx: &NeighborIndex) -> Result<Tensor<'t>> {
    coords
        .gather_last(idx.flat())?
        .sub(coords.gather_last(idx.centers())?)
}

/// `features: [1, D_in, N]`, `coords: [1, 3, N]` gives `[1, D_out, N]`.
pub fn point_conv<'t>(
    features: Tensor<'t>,
    coords: Tensor<'t>,
    idx: &NeighborIndex,
    params: &PointConvParams,
    p: &Bound<'t>,
) -> Result<Tensor<'t>> {
    let fs = features.shape();
    let cs = coords.shape();
    if fs.len() != 3 || fs[0] != 1 || cs != [1, 3, fs[2]] || idx.vertex_count() != fs[2] {
        return Err(Error::shape(
            "point_conv",
            format!(
                "features {fs:?}, coords {cs:?}, index over {} vertices",
                idx.vertex_count()
            ),
        ));
    }
    let projected = features.conv1x1(p.get(params.feature.weight), Some(p.get(params.feature.bias)))?;
    let gathered = projected.gather_last(idx.flat())?;
    let offsets = relative_offsets(coords, idx)?.conv1x1(p.get(params.offset), None)?;
    gathered
        .add(offsets)?
        .leaky_relu(LEAKY_SLOPE)
        .group_max_last(idx.k())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorParams {
    pub stages: [PointConvParams; 3],
    /// `[center ; pooled] -> 128` map of the last stage.
    pub fuse: Affine,
}

impl ExtractorParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3] = STAGE_WIDTHS;
        let stages = [
            PointConvParams::new(store, "extractor.conv1", 3, w1, rng),
            PointConvParams::new(store, "extractor.conv2", w1, w2, rng),
            PointConvParams::new(store, "extractor.conv3", w2, w3, rng),
        ];
        let fuse = Affine::new(store, "extractor.fuse", w2 + w3, w3, 1.0, rng);
        ExtractorParams { stages, fuse }
    }

    pub fn output_width(&self) -> usize {
        self.fuse.d_out
    }
}

/// Per-vertex features of one mesh.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'t> {
    /// `[1, D, N]`
    pub features: Tensor<'t>,
    pub vertex_count: usize,
    pub width: usize,
}

/// Runs the three-stage extractor on `coords: [1, 3, N]`.
pub fn extract<'t>(
    coords: Tensor<'t>,
    idx: &NeighborIndex,
    params: &ExtractorParams,
    p: &Bound<'t>,
) -> Result<FeatureMap<'t>> {
    let h1 = point_conv(coords, coords, idx, &params.stages[0], p)?;
    let h2 = point_conv(h1, coords, idx, &params.stages[1], p)?;
    let h3 = point_conv(h2, coords, idx, &params.stages[2], p)?;
    let fused = params
        .fuse
        .apply(p, concat(&[h2, h3], 1)?)?
        .leaky_relu(LEAKY_SLOPE);
    let n = idx.vertex_count();
    Ok(FeatureMap {
        features: fused,
        vertex_count: n,
        width: params.output_width(),
    })
}

/// `[N, 3]` points as a `[1, 3, N]` constant-layout tensor.
pub fn channels_first<'t>(points: Tensor<'t>) -> Result<Tensor<'t>> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("channels_first", format!("{s:?}")));
    }
    points.transpose()?.reshape(&[1, 3, s[0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::VertexPermutation;
    use crate::tensor::{gradcheck, Tape};
    use rand::SeedableRng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn to_cf(points: &[Point3]) -> Vec<f64> {
        let n = points.len();
        let mut out = vec![0.0; 3 * n];
        for (i, p) in points.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = p[c];
            }
        }
        out
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let idx = knn_index(&pts, 1).unwrap();
        assert_eq!(idx.neighbors(1), &[0]);
        assert_eq!(idx.neighbors(0), &[1]);
        assert_eq!(idx.neighbors(2), &[1]);
        assert!(knn_index(&pts, 3).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [1.0, 2.0, 3.0],
        ];
        let idx = knn_index(&pts, 2).unwrap();
        for i in 0..4 {
            let mut all: Vec<(f64, usize)> = (0..4)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|c| (pts[i][c] - pts[j][c]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all.iter().take(2).map(|x| x.1).collect();
            assert_eq!(idx.neighbors(i), expect.as_slice());
        }
    }

    #[test]
    fn knn_duplicates_keep_twin() {
        let mut pts = cloud(5, 1);
        pts.extend(pts.clone());
        let idx = knn_index(&pts, 1).unwrap();
        for i in 0..5 {
            assert_eq!(idx.neighbors(i), &[i + 5]);
            assert_eq!(idx.neighbors(i + 5), &[i]);
        }
    }

    #[test]
    fn point_conv_k1_is_mapped_neighbor() {
        let pts = cloud(6, 2);
        let idx = knn_index(&pts, 1).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pc = PointConvParams::new(&mut store, "pc", 3, 4, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let coords = tape.constant(to_cf(&pts), &[1, 3, 6]).unwrap();
        let out = point_conv(coords, coords, &idx, &pc, &p).unwrap().to_vec();
        let (wf, bf, wo) = (store.get(pc.feature.weight), store.get(pc.feature.bias), store.get(pc.offset));
        for i in 0..6 {
            let j = idx.neighbors(i)[0];
            for o in 0..4 {
                let mut v = bf[o];
                for c in 0..3 {
                    v += wf[o * 3 + c] * pts[j][c] + wo[o * 3 + c] * (pts[j][c] - pts[i][c]);
                }
                let v = if v > 0.0 { v } else { LEAKY_SLOPE * v };
                assert!((out[o * 6 + i] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_conv_symmetric_neighborhood_is_order_free() {
        // center at origin with four symmetric neighbors, equal features
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let idx = knn_index(&pts, 4).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pc = PointConvParams::new(&mut store, "pc", 2, 3, &mut rng);
        let run = |idx: &NeighborIndex| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let coords = tape.constant(to_cf(&pts), &[1, 3, 5]).unwrap();
            let feats = tape.constant(vec![0.7; 10], &[1, 2, 5]).unwrap();
            point_conv(feats, coords, idx, &pc, &p).unwrap().to_vec()
        };
        let base = run(&idx);
        let mut flat = idx.flat().to_vec();
        flat[..4].reverse();
        let reordered = NeighborIndex {
            k: 4,
            flat: flat.into(),
            centers: idx.centers(),
        };
        assert_eq!(run(&reordered), base);
    }

    #[test]
    fn relative_offsets_translation_invariant() {
        let pts = cloud(20, 4);
        let idx = knn_index(&pts, 5).unwrap();
        let shifted: Vec<Point3> = pts.iter().map(|p| [p[0] + 3.0, p[1] - 7.5, p[2] + 0.25]).collect();
        let tape = Tape::new();
        let a = relative_offsets(tape.constant(to_cf(&pts), &[1, 3, 20]).unwrap(), &idx).unwrap();
        let b = relative_offsets(tape.constant(to_cf(&shifted), &[1, 3, 20]).unwrap(), &idx).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn extract_values(pts: &[Point3], store: &ParamStore, params: &ExtractorParams, k: usize) -> Vec<f64> {
        let idx = knn_index(pts, k).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let coords = tape.constant(to_cf(pts), &[1, 3, pts.len()]).unwrap();
        let fm = extract(coords, &idx, params, &p).unwrap();
        assert_eq!(fm.features.shape(), vec![1, 128, pts.len()]);
        fm.features.to_vec()
    }

    #[test]
    fn extract_width_and_equivariance() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ExtractorParams::new(&mut store, &mut rng);
        for seed in 0..5 {
            let pts = cloud(40, 100 + seed);
            let base = extract_values(&pts, &store, &params, 8);
            let perm = VertexPermutation::random(40, seed);
            let shuffled = perm.permute(&pts);
            let out = extract_values(&shuffled, &store, &params, 8);
            for c in 0..128 {
                for new in 0..40 {
                    let old = perm.inverse()[new];
                    assert!((out[c * 40 + new] - base[c * 40 + old]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn point_conv_gradient_check() {
        let pts = cloud(8, 7);
        let idx = knn_index(&pts, 3).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pc = PointConvParams::new(&mut store, "pc", 2, 4, &mut rng);
        let feats: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let r = gradcheck::check(
            |tape, v| {
                let p = store.bind(tape);
                Ok(point_conv(v[1], v[0], &idx, &pc, &p)?.square().sum_all())
            },
            &[(to_cf(&pts), vec![1, 3, 8]), (feats, vec![1, 2, 8])],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }
}
