//! Closed primitive meshes.

use std::f64::consts::PI;

use super::{Face, Mesh, Point3};

/// Corner tetrahedron at the origin with outward faces.
pub fn tetrahedron() -> Mesh {
    Mesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ],
        vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
    )
    .expect("valid tetrahedron")
}

/// Connects stacked rings of `segments` vertices starting at `first`, with
/// a pole below the first ring and above the last.
fn ring_faces(first: usize, rings: usize, segments: usize, south: usize, north: usize) -> Vec<Face> {
    let mut faces = Vec::new();
    let at = |r: usize, s: usize| first + r * segments + s % segments;
    for s in 0..segments {
        faces.push([south, at(0, s), at(0, s + 1)]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            faces.push([at(r, s), at(r + 1, s + 1), at(r, s + 1)]);
            faces.push([at(r, s), at(r + 1, s), at(r + 1, s + 1)]);
        }
    }
    for s in 0..segments {
        faces.push([north, at(rings - 1, s + 1), at(rings - 1, s)]);
    }
    faces
}

/// Latitude-longitude sphere at the origin with `rings` interior rings.
pub fn uv_sphere(rings: usize, segments: usize, radius: f64) -> Mesh {
    assert!(rings >= 1 && segments >= 3, "sphere needs a ring and three segments");
    let mut v: Vec<Point3> = vec![[0.0, -radius, 0.0], [0.0, radius, 0.0]];
    for r in 0..rings {
        let theta = PI * (r + 1) as f64 / (rings + 1) as f64;
        let (y, rad) = (-radius * theta.cos(), radius * theta.sin());
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            v.push([rad * phi.cos(), y, rad * phi.sin()]);
        }
    }
    let faces = ring_faces(2, rings, segments, 0, 1);
    Mesh::new(v, faces).expect("valid sphere")
}

/// Capsule along `+y` from `0` to `length`: `rings` cylinder rings plus one
/// cap ring and a pole at each end. Vertex order is south pole, north pole,
/// then rings bottom to top.
pub fn capsule(length: f64, radius: f64, rings: usize, segments: usize) -> Mesh {
    tube(length, radius, rings, segments, true)
}

/// As [`capsule`], optionally without the cap rings, in which case the
/// poles sit at `y = -radius/2` and `y = length + radius/2`.
pub fn tube(length: f64, radius: f64, rings: usize, segments: usize, caps: bool) -> Mesh {
    assert!(rings >= 2 && segments >= 3, "tube needs two rings and three segments");
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut levels = Vec::new();
    if caps {
        levels.push((-radius * h, radius * h));
    }
    for r in 0..rings {
        levels.push((length * r as f64 / (rings - 1) as f64, radius));
    }
    if caps {
        levels.push((length + radius * h, radius * h));
    }
    let pole = if caps { radius } else { 0.5 * radius };
    let mut v: Vec<Point3> = vec![[0.0, -pole, 0.0], [0.0, length + pole, 0.0]];
    for &(y, rad) in &levels {
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            v.push([rad * phi.cos(), y, rad * phi.sin()]);
        }
    }
    let faces = ring_faces(2, levels.len(), segments, 0, 1);
    Mesh::new(v, faces).expect("valid tube")
}

/// Concatenates meshes into one, offsetting face indices.
pub fn merge(parts: &[Mesh]) -> Mesh {
    let mut v = Vec::new();
    let mut f = Vec::new();
    for m in parts {
        let off = v.len();
        v.extend_from_slice(m.vertices());
        f.extend(m.faces().iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
    }
    Mesh::new(v, f).expect("merged parts stay valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signed_volume(m: &Mesh) -> f64 {
        let v = m.vertices();
        m.faces()
            .iter()
            .map(|f| {
                let (a, b, c) = (v[f[0]], v[f[1]], v[f[2]]);
                (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0]))
                    / 6.0
            })
            .sum()
    }

    fn is_closed(m: &Mesh) -> bool {
        let mut count = std::collections::BTreeMap::new();
        for f in m.faces() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    #[test]
    fn primitives_are_closed_and_outward() {
        for m in [tetrahedron(), uv_sphere(6, 10, 1.0), capsule(2.0, 0.3, 4, 8), tube(1.0, 0.2, 2, 4, false)] {
            assert!(is_closed(&m));
            assert!(signed_volume(&m) > 0.0, "{}", signed_volume(&m));
        }
        let s = uv_sphere(30, 60, 1.0);
        assert!((signed_volume(&s) - 4.0 / 3.0 * PI).abs() < 0.02);
    }

    #[test]
    fn capsule_layout() {
        let c = capsule(1.0, 0.2, 3, 8);
        assert_eq!(c.vertex_count(), 2 + 5 * 8);
        assert_eq!(c.vertices()[1], [0.0, 1.2, 0.0]);
        let m = merge(&[c.clone(), c]);
        assert_eq!(m.vertex_count(), 84);
        assert_eq!(m.component_labels().iter().max(), Some(&1));
    }
}
