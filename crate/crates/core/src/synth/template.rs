//! Procedural capsule-limb humanoid with linear blend skinning.
//!
//! Sixteen body parts, one per skeleton joint. Each part is a closed tube of
//! `RINGS × AROUND` vertices running from its joint toward the next joint (or
//! an end effector), giving 1024 vertices in total. Rest pose is a T-pose,
//! y up, facing +z, feet near y = 0.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::mesh::{JointRegressor, MeshTopology, PartLabels, RegisteredMesh, Rotation, Vec3};

pub const RINGS: usize = 8;
pub const AROUND: usize = 8;
const PART_VERTS: usize = RINGS * AROUND;

pub const JOINT_NAMES: [&str; 16] = [
    "pelvis",
    "spine",
    "chest",
    "head",
    "l_upperarm",
    "l_forearm",
    "l_hand",
    "r_upperarm",
    "r_forearm",
    "r_hand",
    "l_thigh",
    "l_shin",
    "l_foot",
    "r_thigh",
    "r_shin",
    "r_foot",
];

const PARENTS: [i32; 16] = [-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14];

/// Per-part tube: joint position, tube start and end, base radius.
struct PartSpec {
    joint: [f64; 3],
    start: [f64; 3],
    end: [f64; 3],
    radius: f64,
}

fn part_specs() -> Vec<PartSpec> {
    let p = |joint: [f64; 3], start: [f64; 3], end: [f64; 3], radius: f64| PartSpec {
        joint,
        start,
        end,
        radius,
    };
    let mut parts = vec![
        p([0.0, 0.95, 0.0], [0.0, 0.86, 0.0], [0.0, 1.05, 0.0], 0.15),
        p([0.0, 1.05, 0.0], [0.0, 1.05, 0.0], [0.0, 1.25, 0.0], 0.13),
        p([0.0, 1.25, 0.0], [0.0, 1.25, 0.0], [0.0, 1.48, 0.0], 0.16),
        p([0.0, 1.50, 0.0], [0.0, 1.50, 0.0], [0.0, 1.76, 0.0], 0.10),
        p([0.18, 1.42, 0.0], [0.18, 1.42, 0.0], [0.46, 1.42, 0.0], 0.05),
        p([0.46, 1.42, 0.0], [0.46, 1.42, 0.0], [0.72, 1.42, 0.0], 0.04),
        p([0.72, 1.42, 0.0], [0.72, 1.42, 0.0], [0.88, 1.42, 0.0], 0.035),
    ];
    let mirror = |s: &PartSpec| PartSpec {
        joint: [-s.joint[0], s.joint[1], s.joint[2]],
        start: [-s.start[0], s.start[1], s.start[2]],
        end: [-s.end[0], s.end[1], s.end[2]],
        radius: s.radius,
    };
    let right_arm: Vec<PartSpec> = parts[4..7].iter().map(mirror).collect();
    parts.extend(right_arm);
    let left_leg = vec![
        p([0.10, 0.90, 0.0], [0.10, 0.90, 0.0], [0.10, 0.50, 0.0], 0.075),
        p([0.10, 0.50, 0.0], [0.10, 0.50, 0.0], [0.10, 0.10, 0.0], 0.055),
        p([0.10, 0.07, -0.03], [0.10, 0.07, -0.03], [0.10, 0.05, 0.18], 0.04),
    ];
    let right_leg: Vec<PartSpec> = left_leg.iter().map(mirror).collect();
    parts.extend(left_leg);
    parts.extend(right_leg);
    parts
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Inclusive per-axis Euler angle limits (radians) for each joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl JointLimits {
    fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Self {
        JointLimits { x, y, z }
    }

    fn mirrored(&self) -> Self {
        JointLimits {
            x: self.x,
            y: (-self.y.1, -self.y.0),
            z: (-self.z.1, -self.z.0),
        }
    }

    fn clamp(&self, a: [f64; 3]) -> [f64; 3] {
        [a[0].clamp(self.x.0, self.x.1), a[1].clamp(self.y.0, self.y.1), a[2].clamp(self.z.0, self.z.1)]
    }
}

pub fn default_limits() -> Vec<JointLimits> {
    let zero = JointLimits::new((0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
    let upperarm = JointLimits::new((-0.6, 0.6), (-0.7, 0.7), (-1.2, 0.5));
    let forearm = JointLimits::new((0.0, 0.0), (-1.6, 0.0), (0.0, 0.0));
    let hand = JointLimits::new((-0.3, 0.3), (-0.3, 0.3), (-0.4, 0.4));
    let thigh = JointLimits::new((-1.2, 0.4), (-0.3, 0.3), (-0.1, 0.5));
    let shin = JointLimits::new((0.0, 1.6), (0.0, 0.0), (0.0, 0.0));
    let foot = JointLimits::new((-0.3, 0.3), (-0.2, 0.2), (0.0, 0.0));
    vec![
        zero,
        JointLimits::new((-0.3, 0.4), (-0.3, 0.3), (-0.2, 0.2)),
        JointLimits::new((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
        JointLimits::new((-0.4, 0.4), (-0.6, 0.6), (-0.3, 0.3)),
        upperarm.clone(),
        forearm.clone(),
        hand.clone(),
        upperarm.mirrored(),
        forearm.mirrored(),
        hand.mirrored(),
        thigh.clone(),
        shin.clone(),
        foot.clone(),
        thigh.mirrored(),
        shin.mirrored(),
        foot.mirrored(),
    ]
}

/// Body pose: local Euler angles per joint (x, y, z; applied as Rz·Ry·Rx).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub Vec<[f64; 3]>);

/// Coefficients of the shape axes: overall scale and limb girth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Shape(pub [f64; 2]);

pub struct ArticulatedTemplate {
    rest: RegisteredMesh,
    parents: Vec<i32>,
    joints: Vec<Vec3>,
    /// Row-major `V × B`.
    skin_weights: Vec<f64>,
    /// One displacement field per shape axis, `V` vectors each.
    shape_axes: Vec<Vec<Vec3>>,
    /// Joint offsets per shape axis.
    joint_axes: Vec<Vec<Vec3>>,
    limits: Vec<JointLimits>,
    end_effectors: Vec<Vec3>,
}

impl ArticulatedTemplate {
    pub fn new(
        rest: RegisteredMesh,
        parents: Vec<i32>,
        joints: Vec<Vec3>,
        skin_weights: Vec<f64>,
        shape_axes: Vec<Vec<Vec3>>,
        joint_axes: Vec<Vec<Vec3>>,
        limits: Vec<JointLimits>,
    ) -> Result<Self> {
        let (v, b) = (rest.vertex_count(), joints.len());
        if parents.len() != b || limits.len() != b {
            return Err(invalid!("skeleton arrays disagree on the joint count {b}"));
        }
        let roots = parents.iter().filter(|&&p| p < 0).count();
        if roots != 1 || parents.iter().enumerate().any(|(j, &p)| p >= j as i32) {
            return Err(invalid!("skeleton must be a tree with one root and parents before children"));
        }
        if skin_weights.len() != v * b {
            return Err(invalid!("skinning weights need {v} × {b} entries"));
        }
        for (i, row) in skin_weights.chunks_exact(b).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
                return Err(invalid!("skinning row {i} is not a convex combination (sum {sum})"));
            }
        }
        if shape_axes.len() != joint_axes.len() || shape_axes.iter().any(|a| a.len() != v) || joint_axes.iter().any(|a| a.len() != b) {
            return Err(invalid!("shape axes have inconsistent sizes"));
        }
        Ok(ArticulatedTemplate {
            rest,
            parents,
            joints,
            skin_weights,
            shape_axes,
            joint_axes,
            limits,
            end_effectors: Vec::new(),
        })
    }

    /// The 1024-vertex humanoid.
    pub fn desk() -> Self {
        let specs = part_specs();
        let b = specs.len();
        let mut positions = Vec::with_capacity(b * PART_VERTS);
        let mut girth = Vec::with_capacity(b * PART_VERTS);
        let mut weights = vec![0f64; b * PART_VERTS * b];
        let mut faces = Vec::new();
        for (p, spec) in specs.iter().enumerate() {
            let (start, end) = (v3(spec.start), v3(spec.end));
            let axis = (end - start).normalize();
            let helper = if axis.y.abs() < 0.9 { Vec3::y() } else { Vec3::z() };
            let u = axis.cross(&helper).normalize();
            let w = axis.cross(&u);
            let base = (p * PART_VERTS) as u32;
            for r in 0..RINGS {
                let t = r as f64 / (RINGS - 1) as f64;
                let centre = start + (end - start) * t;
                let radius = spec.radius * (0.75 + 0.25 * (std::f64::consts::PI * t).sin());
                for a in 0..AROUND {
                    let theta = 2.0 * std::f64::consts::PI * a as f64 / AROUND as f64;
                    let dir = u * theta.cos() + w * theta.sin();
                    positions.push(centre + dir * radius);
                    girth.push(dir * radius);
                    let row = (p * PART_VERTS + r * AROUND + a) * b;
                    let parent = PARENTS[p];
                    if parent >= 0 && t < 0.25 {
                        let wp = 0.5 * (1.0 - t / 0.25);
                        weights[row + parent as usize] = wp;
                        weights[row + p] = 1.0 - wp;
                    } else {
                        weights[row + p] = 1.0;
                    }
                }
            }
            for r in 0..RINGS - 1 {
                for a in 0..AROUND {
                    let a1 = (a + 1) % AROUND;
                    let i00 = base + (r * AROUND + a) as u32;
                    let i01 = base + (r * AROUND + a1) as u32;
                    let i10 = base + ((r + 1) * AROUND + a) as u32;
                    let i11 = base + ((r + 1) * AROUND + a1) as u32;
                    faces.push([i00, i10, i11]);
                    faces.push([i00, i11, i01]);
                }
            }
            let last = base + ((RINGS - 1) * AROUND) as u32;
            for a in 1..AROUND as u32 - 1 {
                faces.push([base, base + a + 1, base + a]);
                faces.push([last, last + a, last + a + 1]);
            }
        }
        let vertex_part: Vec<u32> = (0..b * PART_VERTS).map(|i| (i / PART_VERTS) as u32).collect();
        let parts = PartLabels {
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            vertex_part: vertex_part.clone(),
        };
        // Per-part pooling: pairs of rings and pairs of around-samples, then
        // pairs again, then one cell per part.
        let level1: Vec<u32> = (0..b * PART_VERTS)
            .map(|i| {
                let (p, r, a) = (i / PART_VERTS, (i % PART_VERTS) / AROUND, i % AROUND);
                (p * 16 + (r / 2) * 4 + a / 2) as u32
            })
            .collect();
        let level2: Vec<u32> = (0..b * 16)
            .map(|c| {
                let (p, r, a) = (c / 16, (c % 16) / 4, c % 4);
                (p * 4 + (r / 2) * 2 + a / 2) as u32
            })
            .collect();
        let level3: Vec<u32> = (0..b * 4).map(|c| (c / 4) as u32).collect();
        let topology = MeshTopology::with_hierarchy(&positions, faces, &[level1, level2, level3], 3, Some(parts))
            .expect("desk template topology is valid");
        let rest = RegisteredMesh::new(Arc::new(topology), positions).expect("finite rest mesh");

        let joints: Vec<Vec3> = specs.iter().map(|s| v3(s.joint)).collect();
        let pelvis = joints[0];
        let scale_axis: Vec<Vec3> = rest.vertices().iter().map(|v| v - pelvis).collect();
        let scale_joints: Vec<Vec3> = joints.iter().map(|j| j - pelvis).collect();
        let girth_joints = vec![Vec3::zeros(); b];
        let mut t = Self::new(
            rest,
            PARENTS.to_vec(),
            joints,
            weights,
            vec![scale_axis, girth],
            vec![scale_joints, girth_joints],
            default_limits(),
        )
        .expect("desk template is valid");
        t.end_effectors = vec![
            v3(specs[3].end),
            v3(specs[6].end),
            v3(specs[9].end),
            v3(specs[12].end),
            v3(specs[15].end),
        ];
        t
    }

    pub fn rest_mesh(&self) -> &RegisteredMesh {
        &self.rest
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        self.rest.topology()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn rest_joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn parents(&self) -> &[i32] {
        &self.parents
    }

    pub fn limits(&self) -> &[JointLimits] {
        &self.limits
    }

    pub fn skin_weights(&self) -> &[f64] {
        &self.skin_weights
    }

    pub fn shape_axis_count(&self) -> usize {
        self.shape_axes.len()
    }

    /// SHA-256 over rest vertices, topology, skeleton and skinning.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.topology().hash().as_bytes());
        for v in self.rest.vertices() {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        for p in &self.parents {
            h.update(p.to_le_bytes());
        }
        for w in &self.skin_weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Samples a pose within the joint limits and shape coefficients from
    /// the given seeds.
    pub fn sample_pose(&self, seed: u64) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Pose(
            self.limits
                .iter()
                .map(|l| [draw(&mut rng, l.x), draw(&mut rng, l.y), draw(&mut rng, l.z)])
                .collect(),
        )
    }

    pub fn sample_shape(&self, seed: u64) -> Shape {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Shape([rng.random_range(-0.12..=0.12), rng.random_range(-0.25..=0.25)])
    }

    /// Posed, shaped body with the root joint unrotated.
    pub fn sample_body(&self, pose_seed: u64, shape_seed: u64) -> Result<RegisteredMesh> {
        self.pose_mesh(&self.sample_pose(pose_seed), &self.sample_shape(shape_seed))
    }

    /// World transforms `(rotation, translation)` of every joint, mapping
    /// rest-space points to posed space.
    fn skinning_transforms(&self, pose: &Pose, joints: &[Vec3]) -> Vec<(nalgebra::Matrix3<f64>, Vec3)> {
        let b = self.joints.len();
        let mut global: Vec<(nalgebra::Matrix3<f64>, Vec3)> = Vec::with_capacity(b);
        for j in 0..b {
            let a = self.limits[j].clamp(pose.0[j]);
            let local = *Rotation::from_euler_xyz(a[0], a[1], a[2]).matrix();
            let g = match self.parents[j] {
                p if p < 0 => (local, joints[j]),
                p => {
                    let (pr, pt) = global[p as usize];
                    (pr * local, pr * (joints[j] - joints[p as usize]) + pt)
                }
            };
            global.push(g);
        }
        global.into_iter().enumerate().map(|(j, (r, t))| (r, t - r * joints[j])).collect()
    }

    pub fn pose_mesh(&self, pose: &Pose, shape: &Shape) -> Result<RegisteredMesh> {
        if pose.0.len() != self.joints.len() {
            return Err(invalid!("pose has {} joints, template has {}", pose.0.len(), self.joints.len()));
        }
        let (shaped, joints) = self.shaped(shape);
        let transforms = self.skinning_transforms(pose, &joints);
        let b = self.joints.len();
        let vertices = shaped
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let row = &self.skin_weights[i * b..(i + 1) * b];
                // Blended displacement, so identity transforms leave v untouched.
                let mut d = Vec3::zeros();
                for (j, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        let (r, t) = &transforms[j];
                        d += (r * v - v + t) * w;
                    }
                }
                v + d
            })
            .collect();
        RegisteredMesh::new(self.topology().clone(), vertices)
    }

    fn shaped(&self, shape: &Shape) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut verts = self.rest.vertices().to_vec();
        let mut joints = self.joints.clone();
        for (k, &c) in shape.0.iter().enumerate().take(self.shape_axes.len()) {
            for (v, d) in verts.iter_mut().zip(&self.shape_axes[k]) {
                *v += d * c;
            }
            for (j, d) in joints.iter_mut().zip(&self.joint_axes[k]) {
                *j += d * c;
            }
        }
        (verts, joints)
    }

    /// Indices of the vertices of ring `ring` of part `part`.
    pub fn ring(part: usize, ring: usize) -> Vec<usize> {
        (0..AROUND).map(|a| part * PART_VERTS + ring * AROUND + a).collect()
    }

    /// 16 skeleton joints plus 5 end effectors (head top, hands, feet),
    /// each a uniform average of one vertex ring.
    pub fn desk_regressor(&self) -> Result<JointRegressor> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for j in 0..16 {
            if j == 0 {
                let mut g = Self::ring(10, 0);
                g.extend(Self::ring(13, 0));
                groups.push(g);
            } else {
                groups.push(Self::ring(j, 0));
            }
        }
        for part in [3, 6, 9, 12, 15] {
            groups.push(Self::ring(part, RINGS - 1));
        }
        JointRegressor::from_vertex_groups("desk21", self.rest.vertex_count(), &groups)
    }

    /// Human3.6M 17-joint layout built from the same vertex rings.
    pub fn h36m_regressor(&self) -> Result<JointRegressor> {
        let mut pelvis = Self::ring(10, 0);
        pelvis.extend(Self::ring(13, 0));
        let neck = Self::ring(2, RINGS - 1);
        let groups = vec![
            pelvis,
            Self::ring(13, 0),
            Self::ring(14, 0),
            Self::ring(15, 0),
            Self::ring(10, 0),
            Self::ring(11, 0),
            Self::ring(12, 0),
            Self::ring(1, RINGS / 2),
            Self::ring(2, RINGS / 2),
            neck,
            Self::ring(3, RINGS - 1),
            Self::ring(4, 0),
            Self::ring(5, 0),
            Self::ring(6, 0),
            Self::ring(7, 0),
            Self::ring(8, 0),
            Self::ring(9, 0),
        ];
        JointRegressor::from_vertex_groups("h36m17", self.rest.vertex_count(), &groups)
    }

    /// Rest-pose Human3.6M joints centered on the rest mesh centroid,
    /// flattened to 51 values.
    pub fn initial_pose(&self) -> Result<Vec<f64>> {
        let c = self.rest.centroid();
        let joints = self.h36m_regressor()?.regress(&self.rest)?;
        Ok(joints.joints().iter().flat_map(|j| [j.x - c.x, j.y - c.y, j.z - c.z]).collect())
    }

    pub fn end_effectors(&self) -> &[Vec3] {
        &self.end_effectors
    }
}
