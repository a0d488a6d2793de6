//! OBJ round trip, vertex shuffling and cotangent weights.

use posetransfer::mesh::shapes::uv_sphere;
use posetransfer::mesh::{cotangent_weights, parse_obj, shuffle_vertices, write_obj};

fn main() -> posetransfer::Result<()> {
    let sphere = uv_sphere(4, 8, 1.0);
    let text = write_obj(&sphere);
    let back = parse_obj(&text)?;
    println!("{} vertices, {} faces, round trip equal: {}", back.vertex_count(), back.face_count(), back.faces() == sphere.faces());
    let (shuffled, perm) = shuffle_vertices(&sphere, 7);
    println!("restored after shuffle: {}", perm.invert(&shuffled).vertices() == sphere.vertices());
    let w = cotangent_weights(&sphere)?;
    let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, x)| (lo.min(x), hi.max(x)));
    println!("{} edges, cotangent weights in [{lo:.3}, {hi:.3}]", w.len());
    Ok(())
}
