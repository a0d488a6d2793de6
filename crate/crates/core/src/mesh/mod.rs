//! Triangle meshes: representation, preprocessing, adjacency and cotangent
//! edge weights.

mod io;
pub mod shapes;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use io::{load_obj, parse_obj, save_obj, write_correspondence_ply, write_obj};

pub type Point3 = [f64; 3];
pub type Face = [usize; 3];

/// Vertex coordinates plus triangle faces.
///
/// Meshes are immutable values; every preprocessing step returns a new mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point3>,
    faces: Vec<Face>,
    name: Option<String>,
}

impl Mesh {
    /// Builds a mesh, checking that every face index is in range and that no
    /// face repeats a vertex.
    pub fn new(vertices: Vec<Point3>, faces: Vec<Face>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} indexes past vertex count {n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} repeats a vertex"
                )));
            }
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(Mesh {
            vertices,
            faces,
            name: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same topology, new coordinates.
    pub fn with_vertices(&self, vertices: Vec<Point3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(
                "with_vertices",
                format!("{} vertices for a {}-vertex mesh", vertices.len(), self.vertices.len()),
            ));
        }
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
            name: self.name.clone(),
        })
    }

    /// Coordinates flattened vertex-major: `[x0, y0, z0, x1, ...]`.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Axis-aligned bounding box `(min, max)`. `None` for an empty mesh.
    pub fn bbox(&self) -> Option<(Point3, Point3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(mut lo, mut hi), v| {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
            (lo, hi)
        }))
    }

    /// Unique undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Sorted one-ring neighbor lists for every vertex.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (i, j) in self.edges() {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Connected components over the edge graph, as a label per vertex.
    /// Isolated vertices get their own label.
    pub fn component_labels(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; adj.len()];
        let mut next = 0;
        for start in 0..adj.len() {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(v) = stack.pop() {
                for &u in &adj[v] {
                    if label[u] == usize::MAX {
                        label[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        label
    }
}

/// The vertices sharing a face edge with `i`.
pub fn one_ring(mesh: &Mesh, i: usize) -> BTreeSet<usize> {
    let mut ring = BTreeSet::new();
    for f in mesh.faces() {
        if let Some(k) = f.iter().position(|&v| v == i) {
            ring.insert(f[(k + 1) % 3]);
            ring.insert(f[(k + 2) % 3]);
        }
    }
    ring
}

/// Translates the mesh so its bounding-box center sits at the origin.
pub fn center_by_bbox(mesh: &Mesh) -> Mesh {
    let Some((lo, hi)) = mesh.bbox() else {
        return mesh.clone();
    };
    let c = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| [v[0] - c[0], v[1] - c[1], v[2] - c[2]])
        .collect();
    Mesh {
        vertices,
        faces: mesh.faces.clone(),
        name: mesh.name.clone(),
    }
}

/// A relabeling of mesh vertices.
///
/// `forward[old] = new` and `inverse[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexPermutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl VertexPermutation {
    pub fn identity(n: usize) -> Self {
        VertexPermutation {
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    /// Builds from the `inverse` map (`new -> old`).
    pub fn from_inverse(inverse: Vec<usize>) -> Result<Self> {
        let n = inverse.len();
        let mut forward = vec![usize::MAX; n];
        for (new, &old) in inverse.iter().enumerate() {
            if old >= n || forward[old] != usize::MAX {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            forward[old] = new;
        }
        Ok(VertexPermutation { forward, inverse })
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inverse: Vec<usize> = (0..n).collect();
        inverse.shuffle(&mut rng);
        Self::from_inverse(inverse).expect("shuffle yields a permutation")
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Reorders per-vertex data from the original order into the permuted one.
    pub fn permute<T: Clone>(&self, data: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&old| data[old].clone()).collect()
    }

    /// Reorders per-vertex data from the permuted order back to the original.
    pub fn unpermute<T: Clone>(&self, data: &[T]) -> Vec<T> {
        self.forward.iter().map(|&new| data[new].clone()).collect()
    }

    pub fn apply(&self, mesh: &Mesh) -> Mesh {
        let faces = mesh
            .faces
            .iter()
            .map(|f| [self.forward[f[0]], self.forward[f[1]], self.forward[f[2]]])
            .collect();
        Mesh {
            vertices: self.permute(&mesh.vertices),
            faces,
            name: mesh.name.clone(),
        }
    }

    pub fn invert(&self, mesh: &Mesh) -> Mesh {
        let faces = mesh
            .faces
            .iter()
            .map(|f| [self.inverse[f[0]], self.inverse[f[1]], self.inverse[f[2]]])
            .collect();
        Mesh {
            vertices: self.unpermute(&mesh.vertices),
            faces,
            name: mesh.name.clone(),
        }
    }
}

/// Randomly relabels the vertices; faces are reindexed so the geometry is
/// unchanged.
pub fn shuffle_vertices(mesh: &Mesh, seed: u64) -> (Mesh, VertexPermutation) {
    let perm = VertexPermutation::random(mesh.vertex_count(), seed);
    (perm.apply(mesh), perm)
}

/// Symmetric per-edge weights keyed by `(min, max)` vertex pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeWeights {
    entries: BTreeMap<(usize, usize), f64>,
}

impl EdgeWeights {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &w)| (k, w))
    }

    /// Every weight replaced by `max(w, 0)`.
    pub fn clamped_nonnegative(&self) -> EdgeWeights {
        EdgeWeights {
            entries: self.entries.iter().map(|(&k, &w)| (k, w.max(0.0))).collect(),
        }
    }

    /// Per-vertex `(neighbor, weight)` lists.
    pub fn neighbor_lists(&self, n: usize) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); n];
        for (&(i, j), &w) in &self.entries {
            out[i].push((j, w));
            out[j].push((i, w));
        }
        out
    }
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Cotangent weights `w_ij = ½ Σ cot θ` over the angles opposite edge `(i, j)`.
/// Boundary edges use their single opposite angle.
pub fn cotangent_weights(mesh: &Mesh) -> Result<EdgeWeights> {
    let v = mesh.vertices();
    let mut entries = BTreeMap::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        let scale = (0..3)
            .map(|k| {
                let e = sub(v[f[(k + 1) % 3]], v[f[k]]);
                dot(e, e)
            })
            .fold(0.0, f64::max);
        let twice_area = {
            let c = cross(sub(v[f[1]], v[f[0]]), sub(v[f[2]], v[f[0]]));
            dot(c, c).sqrt()
        };
        if twice_area <= 1e-12 * scale || scale == 0.0 {
            return Err(Error::DegenerateFace { face: fi });
        }
        for k in 0..3 {
            // angle at f[k], opposite the edge (f[k+1], f[k+2])
            let o = v[f[k]];
            let a = f[(k + 1) % 3];
            let b = f[(k + 2) % 3];
            let ea = sub(v[a], o);
            let eb = sub(v[b], o);
            let cot = dot(ea, eb) / twice_area;
            *entries.entry((a.min(b), a.max(b))).or_insert(0.0) += 0.5 * cot;
        }
    }
    Ok(EdgeWeights { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tetrahedron() -> Mesh {
        Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
        )
        .unwrap()
    }

    fn grid(n: usize) -> Mesh {
        let mut verts = Vec::new();
        for y in 0..n {
            for x in 0..n {
                verts.push([x as f64, y as f64, 0.0]);
            }
        }
        let mut faces = Vec::new();
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let a = y * n + x;
                faces.push([a, a + 1, a + n + 1]);
                faces.push([a, a + n + 1, a + n]);
            }
        }
        Mesh::new(verts, faces).unwrap()
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(Mesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Mesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn center_unit_cube() {
        let mut verts = Vec::new();
        for i in 0..8 {
            verts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let m = Mesh::new(verts, vec![]).unwrap();
        let c = center_by_bbox(&m);
        let (lo, hi) = c.bbox().unwrap();
        assert_eq!(lo, [-0.5; 3]);
        assert_eq!(hi, [0.5; 3]);
        let again = center_by_bbox(&c);
        for (a, b) in again.vertices().iter().zip(c.vertices()) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn center_single_vertex() {
        let m = Mesh::new(vec![[3.0, 4.0, 5.0]], vec![]).unwrap();
        assert_eq!(center_by_bbox(&m).vertices()[0], [0.0; 3]);
    }

    #[test]
    fn shuffle_is_deterministic_and_invertible() {
        let m = grid(5);
        let (a, pa) = shuffle_vertices(&m, 7);
        let (b, pb) = shuffle_vertices(&m, 7);
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        assert_eq!(pa.invert(&a), m);
        for (new, &old) in pa.inverse().iter().enumerate() {
            assert_eq!(pa.forward()[old], new);
        }
    }

    #[test]
    fn shuffle_preserves_edges_as_geometry() {
        let m = grid(4);
        let (s, _) = shuffle_vertices(&m, 3);
        let key = |mesh: &Mesh| {
            let mut e: Vec<_> = mesh
                .edges()
                .iter()
                .map(|&(i, j)| {
                    let (a, b) = (mesh.vertices()[i], mesh.vertices()[j]);
                    let (a, b) = if a < b { (a, b) } else { (b, a) };
                    format!("{a:?}{b:?}")
                })
                .collect();
            e.sort();
            e
        };
        assert_eq!(key(&m), key(&s));
    }

    #[test]
    fn one_ring_cases() {
        let t = tetrahedron();
        for i in 0..4 {
            let ring = one_ring(&t, i);
            assert_eq!(ring.len(), 3);
            assert!(!ring.contains(&i));
        }
        let mut v = t.vertices().to_vec();
        v.push([5.0, 5.0, 5.0]);
        let with_isolated = Mesh::new(v, t.faces().to_vec()).unwrap();
        assert!(one_ring(&with_isolated, 4).is_empty());

        // interior vertex of a diagonal-split grid, enumerated from the faces
        let g = grid(5);
        let center = 2 * 5 + 2;
        let mut expected = BTreeSet::new();
        for f in g.faces() {
            if f.contains(&center) {
                expected.extend(f.iter().copied().filter(|&x| x != center));
            }
        }
        assert_eq!(expected.len(), 6);
        assert_eq!(one_ring(&g, center), expected);
        assert_eq!(g.adjacency()[center], expected.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn cotangent_equilateral() {
        let h = 3f64.sqrt() / 2.0;
        let one = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cot60 = 1.0 / 3f64.sqrt();
        let w = cotangent_weights(&one).unwrap();
        assert_eq!(w.len(), 3);
        for ((_, _), x) in w.iter() {
            assert_abs_diff_eq!(x, 0.5 * cot60, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w.get(0, 1).unwrap(), 0.28868, epsilon = 1e-5);

        let two = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0], [0.5, -h, 0.0]],
            vec![[0, 1, 2], [1, 0, 3]],
        )
        .unwrap();
        let w = cotangent_weights(&two).unwrap();
        assert_abs_diff_eq!(w.get(1, 0).unwrap(), 0.57735, epsilon = 1e-5);
        assert_abs_diff_eq!(w.get(0, 2).unwrap(), 0.5 * cot60, epsilon = 1e-12);
    }

    #[test]
    fn cotangent_right_angle_is_zero() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let w = cotangent_weights(&m).unwrap();
        assert_abs_diff_eq!(w.get(1, 2).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(0, 1).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cotangent_degenerate_face_errors() {
        let m = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 3], [0, 1, 2]],
        )
        .unwrap();
        match cotangent_weights(&m) {
            Err(Error::DegenerateFace { face }) => assert_eq!(face, 1),
            other => panic!("expected degenerate face error, got {other:?}"),
        }
    }

    #[test]
    fn components() {
        let t = tetrahedron();
        let mut v = t.vertices().to_vec();
        v.extend_from_slice(&[[5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [5.0, 1.0, 0.0]]);
        let mut f = t.faces().to_vec();
        f.push([4, 5, 6]);
        let m = Mesh::new(v, f).unwrap();
        let l = m.component_labels();
        assert_eq!(l[0], l[3]);
        assert_eq!(l[4], l[6]);
        assert_ne!(l[0], l[4]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn random_mesh() -> impl Strategy<Value = Mesh> {
        // a perturbed grid keeps faces non-degenerate
        (3usize..7, prop::collection::vec(-0.2f64..0.2, 3 * 49)).prop_map(|(n, jitter)| {
            let mut verts = Vec::new();
            for y in 0..n {
                for x in 0..n {
                    let k = 3 * (y * n + x);
                    verts.push([x as f64 + jitter[k], y as f64 + jitter[k + 1], jitter[k + 2]]);
                }
            }
            let mut faces = Vec::new();
            for y in 0..n - 1 {
                for x in 0..n - 1 {
                    let a = y * n + x;
                    faces.push([a, a + 1, a + n + 1]);
                    faces.push([a, a + n + 1, a + n]);
                }
            }
            Mesh::new(verts, faces).unwrap()
        })
    }

    fn edge_lengths(m: &Mesh) -> Vec<u64> {
        let mut l: Vec<u64> = m
            .edges()
            .iter()
            .map(|&(i, j)| {
                let d = sub(m.vertices()[i], m.vertices()[j]);
                dot(d, d).to_bits()
            })
            .collect();
        l.sort_unstable();
        l
    }

    proptest! {
        #[test]
        fn shuffle_preserves_edge_lengths(m in random_mesh(), seed in any::<u64>()) {
            let (s, p) = shuffle_vertices(&m, seed);
            prop_assert_eq!(edge_lengths(&m), edge_lengths(&s));
            prop_assert_eq!(p.invert(&s), m);
        }

        #[test]
        fn cotangent_rigid_invariance(m in random_mesh(), angle in 0.0f64..6.28, t in prop::array::uniform3(-5.0f64..5.0)) {
            let (c, s) = (angle.cos(), angle.sin());
            let moved: Vec<Point3> = m.vertices().iter()
                .map(|v| [c * v[0] - s * v[2] + t[0], v[1] + t[1], s * v[0] + c * v[2] + t[2]])
                .collect();
            let m2 = m.with_vertices(moved).unwrap();
            let (w1, w2) = (cotangent_weights(&m).unwrap(), cotangent_weights(&m2).unwrap());
            for ((k, a), (k2, b)) in w1.iter().zip(w2.iter()) {
                prop_assert_eq!(k, k2);
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn center_idempotent(m in random_mesh()) {
            let once = center_by_bbox(&m);
            let twice = center_by_bbox(&once);
            for (a, b) in once.vertices().iter().zip(twice.vertices()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-12);
                }
            }
        }
    }
}
