//! Procedural articulated bodies standing in for a registered body-model
//! dataset.
//!
//! A body is ten tubes (torso, head, two upper arms, two forearms, two
//! thighs, two shins) on a fixed skeleton. Identities scale bone lengths
//! and radii; poses set three joint angles per bone. Every vertex follows
//! its bone rigidly, except near the proximal joint where it is blended
//! with the parent bone. All meshes share one template topology, so
//! `mesh(i, p)` and `mesh(i', p)` have identical vertex counts and faces.
//!
//! Vertex count: each tube has two poles plus `segments` vertices per ring.
//! Budgets from 500 up use 8 segments with cap rings, 300 to 499 use 6 with
//! caps, smaller ones 4 without caps. Cylinder rings are spread over bones by
//! template length (at least two each), so the count lands within
//! `segments / 2` of the request, above 100 at minimum.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::shapes::tube;
use crate::mesh::{center_by_bbox, load_obj, save_obj, Face, Mesh, Point3};

pub const BONES: usize = 10;

struct BoneSpec {
    name: &'static str,
    parent: Option<usize>,
    length: f64,
    radius: f64,
    /// Lower and upper bounds of (bend x, bend z, twist).
    range: [(f64, f64); 3],
}

const SKELETON: [BoneSpec; BONES] = [
    BoneSpec { name: "torso", parent: None, length: 0.55, radius: 0.14, range: [(-0.35, 0.35), (-0.25, 0.25), (-0.5, 0.5)] },
    BoneSpec { name: "head", parent: Some(0), length: 0.16, radius: 0.1, range: [(-0.4, 0.4), (-0.3, 0.3), (-0.6, 0.6)] },
    BoneSpec { name: "upper_arm_l", parent: Some(0), length: 0.3, radius: 0.05, range: [(-1.0, 1.0), (-1.1, 1.1), (-0.4, 0.4)] },
    BoneSpec { name: "forearm_l", parent: Some(2), length: 0.27, radius: 0.04, range: [(0.0, 1.9), (-0.15, 0.15), (-0.3, 0.3)] },
    BoneSpec { name: "upper_arm_r", parent: Some(0), length: 0.3, radius: 0.05, range: [(-1.0, 1.0), (-1.1, 1.1), (-0.4, 0.4)] },
    BoneSpec { name: "forearm_r", parent: Some(4), length: 0.27, radius: 0.04, range: [(-1.9, 0.0), (-0.15, 0.15), (-0.3, 0.3)] },
    BoneSpec { name: "thigh_l", parent: Some(0), length: 0.42, radius: 0.07, range: [(-1.2, 0.5), (-0.4, 0.4), (-0.3, 0.3)] },
    BoneSpec { name: "shin_l", parent: Some(6), length: 0.42, radius: 0.055, range: [(0.0, 1.7), (-0.1, 0.1), (-0.2, 0.2)] },
    BoneSpec { name: "thigh_r", parent: Some(0), length: 0.42, radius: 0.07, range: [(-1.2, 0.5), (-0.4, 0.4), (-0.3, 0.3)] },
    BoneSpec { name: "shin_r", parent: Some(8), length: 0.42, radius: 0.055, range: [(0.0, 1.7), (-0.1, 0.1), (-0.2, 0.2)] },
];

/// Bone names in template order.
pub fn bone_names() -> [&'static str; BONES] {
    SKELETON.map(|b| b.name)
}

/// Rest orientation taking the local `+y` axis onto the bone direction.
fn rest_orientation(bone: usize) -> Matrix3<f64> {
    match bone {
        0 | 1 => Matrix3::identity(),
        2 | 3 => *Rotation3::from_axis_angle(&Vector3::z_axis(), -FRAC_PI_2).matrix(),
        4 | 5 => *Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2).matrix(),
        _ => *Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).matrix(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub lengths: [f64; BONES],
    pub radii: [f64; BONES],
    /// Seed of the per-vertex surface detail.
    pub detail_seed: u64,
}

impl IdentityParams {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let height = rng.random_range(0.85..1.15);
        let torso = rng.random_range(0.85..1.15);
        let arms = rng.random_range(0.85..1.15);
        let legs = rng.random_range(0.85..1.15);
        let bulk = rng.random_range(0.75..1.35);
        let head = rng.random_range(0.85..1.15);
        let group = [torso, head, arms, arms, arms, arms, legs, legs, legs, legs];
        let mut lengths = [0.0; BONES];
        let mut radii = [0.0; BONES];
        for b in 0..BONES {
            lengths[b] = SKELETON[b].length * height * group[b];
            let thickness = if b == 1 { head } else { bulk * rng.random_range(0.9..1.1) };
            radii[b] = SKELETON[b].radius * height * thickness;
        }
        IdentityParams {
            lengths,
            radii,
            detail_seed: rng.random(),
        }
    }
}

/// Joint angles `(bend x, bend z, twist)` per bone, in bone-local axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub angles: [[f64; 3]; BONES],
}

impl PoseParams {
    pub fn rest() -> Self {
        PoseParams {
            angles: [[0.0; 3]; BONES],
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut angles = [[0.0; 3]; BONES];
        for (b, a) in angles.iter_mut().enumerate() {
            for k in 0..3 {
                let (lo, hi) = SKELETON[b].range[k];
                a[k] = rng.random_range(lo..=hi);
            }
        }
        PoseParams { angles }
    }

    fn rotation(&self, bone: usize) -> Matrix3<f64> {
        let [x, z, t] = self.angles[bone];
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), x);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), z);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), t);
        *(rx * rz * ry).matrix()
    }
}

/// Shared topology of every body mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate {
    rings: [usize; BONES],
    segments: usize,
    caps: bool,
    faces: Vec<Face>,
    /// Owning bone of each vertex.
    bone_of: Vec<usize>,
}

impl BodyTemplate {
    pub fn new(vertices_per_mesh: usize) -> Result<Self> {
        if vertices_per_mesh < 100 {
            return Err(Error::InvalidArgument(format!(
                "bodies need at least 100 vertices, got {vertices_per_mesh}"
            )));
        }
        let (segments, caps) = match vertices_per_mesh {
            500.. => (8, true),
            300..=499 => (6, true),
            _ => (4, false),
        };
        let fixed = 2 + if caps { 2 * segments } else { 0 };
        let budget = vertices_per_mesh.saturating_sub(BONES * fixed);
        let total = ((budget as f64 / segments as f64).round() as usize).max(2 * BONES);
        // largest-remainder split by template length, two rings minimum
        let sum_len: f64 = SKELETON.iter().map(|b| b.length).sum();
        let spare = total - 2 * BONES;
        let share: Vec<f64> = SKELETON.iter().map(|b| spare as f64 * b.length / sum_len).collect();
        let mut rings = [2usize; BONES];
        let mut given = 0;
        for b in 0..BONES {
            rings[b] += share[b].floor() as usize;
            given += share[b].floor() as usize;
        }
        let mut order: Vec<usize> = (0..BONES).collect();
        order.sort_by(|&a, &b| (share[b] - share[b].floor()).total_cmp(&(share[a] - share[a].floor())).then(a.cmp(&b)));
        for &b in order.iter().take(spare - given) {
            rings[b] += 1;
        }
        let mut faces = Vec::new();
        let mut bone_of = Vec::new();
        for b in 0..BONES {
            let t = tube(1.0, 0.1, rings[b], segments, caps);
            let off = bone_of.len();
            faces.extend(t.faces().iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
            bone_of.extend(std::iter::repeat_n(b, t.vertex_count()));
        }
        Ok(BodyTemplate {
            rings,
            segments,
            caps,
            faces,
            bone_of,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.bone_of.len()
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn bone_of(&self) -> &[usize] {
        &self.bone_of
    }

    /// Bone-local vertices of one identity, with surface detail.
    fn local_vertices(&self, id: &IdentityParams) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(id.detail_seed);
        let mut out = Vec::with_capacity(self.vertex_count());
        for b in 0..BONES {
            let t = tube(id.lengths[b], id.radii[b], self.rings[b], self.segments, self.caps);
            let amp = 0.03 * id.radii[b];
            for p in t.vertices() {
                out.push([
                    p[0] + rng.random_range(-amp..amp),
                    p[1] + rng.random_range(-amp..amp),
                    p[2] + rng.random_range(-amp..amp),
                ]);
            }
        }
        out
    }

    /// Body of `id` in pose `pose`, centered on its bounding box.
    pub fn mesh(&self, id: &IdentityParams, pose: &PoseParams) -> Mesh {
        let local = self.local_vertices(id);
        let rest = Skeleton::new(id, &PoseParams::rest());
        let posed = Skeleton::new(id, pose);
        let verts = local
            .iter()
            .zip(&self.bone_of)
            .map(|(p, &b)| {
                let x = Vector3::new(p[0], p[1], p[2]);
                let own = posed.global[b] * x + posed.joint[b];
                let v = match SKELETON[b].parent {
                    Some(parent) => {
                        let world_rest = rest.global[b] * x + rest.joint[b];
                        let in_parent = rest.global[parent].transpose() * (world_rest - rest.joint[parent]);
                        let follow = posed.global[parent] * in_parent + posed.joint[parent];
                        let w = parent_weight(p[1], id.lengths[b], id.radii[b]);
                        own * (1.0 - w) + follow * w
                    }
                    None => own,
                };
                [v.x, v.y, v.z]
            })
            .collect();
        let m = Mesh::new(verts, self.faces.clone()).expect("template faces are valid");
        center_by_bbox(&m)
    }
}

/// Share of the parent bone's motion at local height `y`: one half at the
/// proximal pole, fading to zero a quarter of the way along the bone.
fn parent_weight(y: f64, length: f64, radius: f64) -> f64 {
    let start = -radius;
    let end = 0.25 * length;
    let s = ((y - start) / (end - start)).clamp(0.0, 1.0);
    0.5 * (1.0 - s * s * (3.0 - 2.0 * s))
}

/// Posed bone frames.
struct Skeleton {
    global: [Matrix3<f64>; BONES],
    joint: [Vector3<f64>; BONES],
}

impl Skeleton {
    fn new(id: &IdentityParams, pose: &PoseParams) -> Self {
        let mut global = [Matrix3::identity(); BONES];
        let mut joint = [Vector3::zeros(); BONES];
        for b in 0..BONES {
            match SKELETON[b].parent {
                None => {
                    global[b] = pose.rotation(b) * rest_orientation(b);
                }
                Some(p) => {
                    let rel = rest_orientation(p).transpose() * rest_orientation(b);
                    global[b] = global[p] * rel * pose.rotation(b);
                    let attach = rest_orientation(p).transpose() * attachment(b, id);
                    joint[b] = joint[p] + global[p] * attach;
                }
            }
        }
        Skeleton { global, joint }
    }
}

/// Rest-pose offset of a bone's joint from its parent's joint.
fn attachment(bone: usize, id: &IdentityParams) -> Vector3<f64> {
    let (l, r) = (id.lengths, id.radii);
    match bone {
        1 => Vector3::new(0.0, l[0] + 0.5 * r[0] + r[1], 0.0),
        2 => Vector3::new(r[0] + r[2], 0.88 * l[0], 0.0),
        4 => Vector3::new(-(r[0] + r[4]), 0.88 * l[0], 0.0),
        3 => Vector3::new(l[2], 0.0, 0.0),
        5 => Vector3::new(-l[4], 0.0, 0.0),
        6 => Vector3::new(0.55 * r[0], -0.3 * r[0], 0.0),
        8 => Vector3::new(-0.55 * r[0], -0.3 * r[0], 0.0),
        7 => Vector3::new(0.0, -l[6], 0.0),
        9 => Vector3::new(0.0, -l[8], 0.0),
        _ => unreachable!("root has no attachment"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub n_poses: usize,
    pub vertices_per_mesh: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_identities: 8,
            n_poses: 40,
            vertices_per_mesh: 600,
            seed: 0,
        }
    }
}

/// Ground-truth grid of meshes, `meshes[identity][pose]`, all in template
/// vertex order.
#[derive(Debug, Clone)]
pub struct Dataset {
    meshes: Vec<Vec<Mesh>>,
}

impl Dataset {
    pub fn from_meshes(meshes: Vec<Vec<Mesh>>) -> Result<Self> {
        let first = meshes
            .first()
            .and_then(|row| row.first())
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let n_poses = meshes[0].len();
        for row in &meshes {
            if row.len() != n_poses {
                return Err(Error::InvalidArgument("every identity needs every pose".into()));
            }
            if row.iter().any(|m| m.faces() != first.faces() || m.vertex_count() != first.vertex_count()) {
                return Err(Error::InvalidMesh("dataset meshes must share one topology".into()));
            }
        }
        Ok(Dataset { meshes })
    }

    pub fn n_identities(&self) -> usize {
        self.meshes.len()
    }

    pub fn n_poses(&self) -> usize {
        self.meshes[0].len()
    }

    pub fn vertex_count(&self) -> usize {
        self.meshes[0][0].vertex_count()
    }

    pub fn mesh(&self, identity: usize, pose: usize) -> &Mesh {
        &self.meshes[identity][pose]
    }

    /// Splits pose indices into sorted `(train, test)` sets with
    /// `round(fraction * n_poses)` test poses.
    pub fn split_poses(&self, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.n_poses();
        let n_test = ((test_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57));
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (train, test)
    }

    /// Writes `id{i:02}_pose{p:03}.obj` files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, row) in self.meshes.iter().enumerate() {
            for (p, m) in row.iter().enumerate() {
                save_obj(m, dir.join(format!("id{i:02}_pose{p:03}.obj")))?;
            }
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut grid: BTreeMap<usize, BTreeMap<usize, Mesh>> = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if path.extension().and_then(|e| e.to_str()) != Some("obj") {
                continue;
            }
            if let Some((i, p)) = parse_stem(stem) {
                grid.entry(i).or_default().insert(p, load_obj(&path)?);
            }
        }
        let meshes: Vec<Vec<Mesh>> = grid.into_values().map(|row| row.into_values().collect()).collect();
        if meshes.is_empty() {
            return Err(Error::InvalidArgument(format!("no idXX_poseYYY.obj files in {}", dir.display())));
        }
        Self::from_meshes(meshes)
    }
}

fn parse_stem(stem: &str) -> Option<(usize, usize)> {
    let rest = stem.strip_prefix("id")?;
    let (i, p) = rest.split_once("_pose")?;
    Some((i.parse().ok()?, p.parse().ok()?))
}

/// Samples identities and poses and builds every `(identity, pose)` mesh.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<(Dataset, Vec<IdentityParams>, Vec<PoseParams>)> {
    if cfg.n_identities == 0 || cfg.n_poses == 0 {
        return Err(Error::InvalidArgument("need at least one identity and one pose".into()));
    }
    let template = BodyTemplate::new(cfg.vertices_per_mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<IdentityParams> = (0..cfg.n_identities).map(|_| IdentityParams::sample(&mut rng)).collect();
    let poses: Vec<PoseParams> = (0..cfg.n_poses).map(|_| PoseParams::sample(&mut rng)).collect();
    let meshes = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            poses
                .iter()
                .enumerate()
                .map(|(p, pose)| template.mesh(id, pose).with_name(format!("id{i:02}_pose{p:03}")))
                .collect()
        })
        .collect();
    Ok((Dataset::from_meshes(meshes)?, ids, poses))
}
