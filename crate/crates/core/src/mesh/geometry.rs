use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::topology::MeshTopology;
use crate::error::{invalid, Result};

pub type Vec3 = Vector3<f64>;

/// A proper rotation: `RᵀR = I` and `det R = +1`, both within [`Rotation::TOLERANCE`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub const TOLERANCE: f64 = 1e-5;

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("rotation has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if ortho > Self::TOLERANCE {
            return Err(invalid!("rotation is not orthonormal (max |RᵀR - I| = {ortho:e})"));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > Self::TOLERANCE {
            return Err(invalid!("rotation determinant is {det}, expected +1"));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Right-handed rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Rotation(*nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    /// `Rz(z) · Ry(y) · Rx(x)`.
    pub fn from_euler_xyz(x: f64, y: f64, z: f64) -> Self {
        let rx = Self::from_axis_angle(&Vec3::x(), x);
        let ry = Self::from_axis_angle(&Vec3::y(), y);
        let rz = Self::from_axis_angle(&Vec3::z(), z);
        rz.compose(&ry).compose(&rx)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 9 {
            return Err(invalid!("rotation needs 9 values, got {}", values.len()));
        }
        Self::new(Matrix3::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `self · other`
    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.transpose() * other.0;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl TryFrom<[f64; 9]> for Rotation {
    type Error = crate::Error;

    fn try_from(value: [f64; 9]) -> Result<Self> {
        Rotation::from_row_major(&value)
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> Self {
        r.to_row_major()
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// A vertex array on a fixed, shared topology. Vertices are in meters.
#[derive(Clone, Debug)]
pub struct RegisteredMesh {
    topology: Arc<MeshTopology>,
    vertices: Vec<Vec3>,
}

impl RegisteredMesh {
    pub fn new(topology: Arc<MeshTopology>, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != topology.vertex_count() {
            return Err(invalid!(
                "mesh has {} vertices, topology expects {}",
                vertices.len(),
                topology.vertex_count()
            ));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid!("mesh has non-finite vertices"));
        }
        Ok(RegisteredMesh { topology, vertices })
    }

    /// Builds a mesh from a flat `x0 y0 z0 x1 ...` buffer.
    pub fn from_flat<T: Copy + Into<f64>>(topology: Arc<MeshTopology>, flat: &[T]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(invalid!("flat vertex buffer length {} is not a multiple of 3", flat.len()));
        }
        let vertices = flat
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0].into(), c[1].into(), c[2].into()))
            .collect();
        Self::new(topology, vertices)
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        &self.topology
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.vertices)
    }

    pub fn to_flat_f32(&self) -> Vec<f32> {
        self.vertices
            .iter()
            .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
            .collect()
    }

    pub fn map_vertices(&self, f: impl FnMut(&Vec3) -> Vec3) -> Result<Self> {
        Self::new(self.topology.clone(), self.vertices.iter().map(f).collect())
    }

    pub fn translated(&self, offset: &Vec3) -> Result<Self> {
        self.map_vertices(|v| v + offset)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        if self.vertices.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }

    pub(crate) fn same_topology(&self, other: &RegisteredMesh) -> bool {
        self.has_topology(&other.topology)
    }

    pub fn has_topology(&self, topology: &Arc<MeshTopology>) -> bool {
        Arc::ptr_eq(&self.topology, topology) || *self.topology == **topology
    }
}

/// Point used as the origin of a canonical mesh.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalOrigin {
    /// Mean vertex.
    #[default]
    Centroid,
    /// A joint produced by the joint regressor (for example the pelvis).
    RootJoint,
}

/// A registered mesh with global orientation removed and its origin at the
/// centroid (or at the root joint when built with [`CanonicalOrigin::RootJoint`]).
#[derive(Clone, Debug)]
pub struct CanonicalMesh {
    mesh: RegisteredMesh,
    origin: CanonicalOrigin,
}

impl CanonicalMesh {
    pub const CENTERING_TOLERANCE: f64 = 1e-6;

    /// Wraps a mesh whose centroid is already at the origin.
    pub fn from_centered(mesh: RegisteredMesh) -> Result<Self> {
        let c = mesh.centroid();
        if c.norm() > Self::CENTERING_TOLERANCE {
            return Err(invalid!("canonical mesh centroid is {:e} m from the origin", c.norm()));
        }
        Ok(CanonicalMesh {
            mesh,
            origin: CanonicalOrigin::Centroid,
        })
    }

    /// Subtracts the centroid.
    pub fn recentered(mesh: &RegisteredMesh) -> Result<Self> {
        let c = mesh.centroid();
        Ok(CanonicalMesh {
            mesh: mesh.translated(&-c)?,
            origin: CanonicalOrigin::Centroid,
        })
    }

    pub fn as_mesh(&self) -> &RegisteredMesh {
        &self.mesh
    }

    pub fn into_mesh(self) -> RegisteredMesh {
        self.mesh
    }

    pub fn vertices(&self) -> &[Vec3] {
        self.mesh.vertices()
    }

    pub fn origin(&self) -> CanonicalOrigin {
        self.origin
    }
}

/// `R⁻¹ · (v − centroid)` for every vertex.
pub fn canonicalize(mesh: &RegisteredMesh, root_rotation: &Rotation) -> Result<CanonicalMesh> {
    let c = mesh.centroid();
    let inv = root_rotation.inverse();
    let out = mesh.map_vertices(|v| inv.apply(&(v - c)))?;
    Ok(CanonicalMesh {
        mesh: out,
        origin: CanonicalOrigin::Centroid,
    })
}

/// Like [`canonicalize`] but translates an arbitrary anchor (e.g. the root
/// joint) to the origin instead of the centroid.
pub fn canonicalize_about(mesh: &RegisteredMesh, root_rotation: &Rotation, anchor: &Vec3) -> Result<CanonicalMesh> {
    let inv = root_rotation.inverse();
    let out = mesh.map_vertices(|v| inv.apply(&(v - anchor)))?;
    Ok(CanonicalMesh {
        mesh: out,
        origin: CanonicalOrigin::RootJoint,
    })
}

/// Rotates every vertex of a canonical mesh by `rotation`.
pub fn apply_orientation(canonical: &CanonicalMesh, rotation: &Rotation) -> Result<RegisteredMesh> {
    canonical.mesh.map_vertices(|v| rotation.apply(v))
}
