use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Mesh, Point3};
use crate::error::{Error, Result};

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mesh = parse_obj(&text)?;
    Ok(match path.file_stem().and_then(|s| s.to_str()) {
        Some(stem) => mesh.with_name(stem),
        None => mesh,
    })
}

/// Parses `v` and `f` records. Normals, texture coordinates and every other
/// record type are skipped.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: format!("bad coordinate {s:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "vertex needs three coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = parts
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        head.parse::<i64>().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: format!("bad face index {s:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::NonTriangularFace {
                        line: line_no,
                        count: idx.len(),
                    });
                }
                raw_faces.push((line_no, [idx[0], idx[1], idx[2]]));
            }
            _ => {}
        }
    }

    let n = vertices.len();
    let mut faces = Vec::with_capacity(raw_faces.len());
    for (line, raw) in raw_faces {
        let mut f = [0usize; 3];
        for (k, &r) in raw.iter().enumerate() {
            // 1-based; negative indices count back from the end
            let resolved = if r > 0 { r - 1 } else { n as i64 + r };
            if r == 0 || resolved < 0 || resolved >= n as i64 {
                return Err(Error::IndexOutOfRange {
                    line,
                    index: r,
                    count: n,
                });
            }
            f[k] = resolved as usize;
        }
        faces.push(f);
    }
    Mesh::new(vertices, faces)
}

pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.vertex_count() * 40);
    if let Some(name) = mesh.name() {
        let _ = writeln!(out, "o {name}");
    }
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_obj(mesh)).map_err(|e| Error::io(path, e))
}

fn color_of(p: Point3, lo: Point3, hi: Point3) -> [u8; 3] {
    let mut c = [0u8; 3];
    for k in 0..3 {
        let span = (hi[k] - lo[k]).max(1e-12);
        c[k] = (((p[k] - lo[k]) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    c
}

/// ASCII PLY with both meshes' vertices (the second translated by `offset`),
/// per-vertex colors and one line element per `(i, j)` match.
///
/// Vertex `i` of `a` and its matched vertex of `b` share a color derived from
/// `a`'s bounding-box position; unmatched `b` vertices are gray.
pub fn write_correspondence_ply(
    a: &Mesh,
    b: &Mesh,
    matches: &[(usize, usize)],
    offset: Point3,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let na = a.vertex_count();
    if let Some(&(i, j)) = matches
        .iter()
        .find(|&&(i, j)| i >= na || j >= b.vertex_count())
    {
        return Err(Error::InvalidArgument(format!(
            "match ({i}, {j}) out of range"
        )));
    }
    let (lo, hi) = a.bbox().unwrap_or(([0.0; 3], [1.0; 3]));
    let mut b_colors = vec![[128u8; 3]; b.vertex_count()];
    for &(i, j) in matches {
        b_colors[j] = color_of(a.vertices()[i], lo, hi);
    }

    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nelement edge {}\n\
         property int vertex1\nproperty int vertex2\nend_header\n",
        na + b.vertex_count(),
        matches.len()
    );
    for v in a.vertices() {
        let c = color_of(*v, lo, hi);
        let _ = writeln!(out, "{} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]);
    }
    for (v, c) in b.vertices().iter().zip(&b_colors) {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            v[0] + offset[0],
            v[1] + offset[1],
            v[2] + offset[2],
            c[0],
            c[1],
            c[2]
        );
    }
    for &(i, j) in matches {
        let _ = writeln!(out, "{} {}", i, na + j);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TET: &str = "# tetrahedron\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\n\
                       f 1 3 2\nf 1/1/1 2/2/2 4/4/4\nf 2 3 4\nf 1 4 3\n";

    #[test]
    fn parses_tetrahedron() {
        let m = parse_obj(TET).unwrap();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.face_count(), 4);
        assert_eq!(m.faces()[1], [0, 1, 3]);
    }

    #[test]
    fn zero_index_is_out_of_range() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n").unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { line: 4, index: 0, .. }));
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn quad_is_rejected() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(err, Error::NonTriangularFace { line: 5, count: 4 }));
        assert!(err.to_string().contains("non-triangular face"));
    }

    #[test]
    fn bad_number_reports_line() {
        let err = parse_obj("v 0 0 0\nv 1 x 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn negative_indices_are_relative() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(m.faces()[0], [0, 1, 2]);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = parse_obj(TET).unwrap();
        let verts: Vec<Point3> = m
            .vertices()
            .iter()
            .map(|v| [v[0] + 0.123456789, v[1] - 1e-7, v[2] * 3.3])
            .collect();
        let m = m.with_vertices(verts).unwrap();
        let p = dir.path().join("tet.obj");
        save_obj(&m, &p).unwrap();
        let back = load_obj(&p).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
        assert_eq!(back.name(), Some("tet"));
    }

    #[test]
    fn large_mesh_writes_every_vertex() {
        let n = 6890;
        let verts: Vec<Point3> = (0..n).map(|i| [i as f64, (i * 2) as f64, 0.5]).collect();
        let m = Mesh::new(verts, vec![[0, 1, 2]]).unwrap();
        let text = write_obj(&m);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), n);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = parse_obj(TET).unwrap();
        let err = save_obj(&m, "/nonexistent-dir/sub/x.obj").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn ply_has_lines() {
        let dir = tempfile::tempdir().unwrap();
        let m = parse_obj(TET).unwrap();
        let p = dir.path().join("c.ply");
        write_correspondence_ply(&m, &m, &[(0, 1), (2, 3)], [2.0, 0.0, 0.0], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 8"));
        assert!(text.contains("element edge 2"));
        assert!(text.trim_end().ends_with("2 7"));
        assert!(write_correspondence_ply(&m, &m, &[(0, 9)], [0.0; 3], &p).is_err());
    }
}
