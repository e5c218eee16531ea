use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{RegisteredMesh, Vec3};
use crate::error::{invalid, Error, Result};

/// Dense `J × V` convex-weight matrix mapping mesh vertices to joints.
///
/// Stored as JSON `{"layout": "smpl24", "joints": J, "vertices": V, "weights": [[...], ...]}`
/// or as plain text: a header line `# layout J V` followed by `J` lines of `V`
/// whitespace-separated weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegressorFile", into = "RegressorFile")]
pub struct JointRegressor {
    layout: String,
    joints: usize,
    vertices: usize,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RegressorFile {
    layout: String,
    joints: usize,
    vertices: usize,
    weights: Vec<Vec<f64>>,
}

impl TryFrom<RegressorFile> for JointRegressor {
    type Error = Error;

    fn try_from(f: RegressorFile) -> Result<Self> {
        if f.weights.len() != f.joints || f.weights.iter().any(|r| r.len() != f.vertices) {
            return Err(invalid!("regressor weights are not {} × {}", f.joints, f.vertices));
        }
        JointRegressor::new(f.layout, f.joints, f.vertices, f.weights.concat())
    }
}

impl From<JointRegressor> for RegressorFile {
    fn from(r: JointRegressor) -> Self {
        RegressorFile {
            weights: r.weights.chunks(r.vertices).map(<[f64]>::to_vec).collect(),
            layout: r.layout,
            joints: r.joints,
            vertices: r.vertices,
        }
    }
}

impl JointRegressor {
    pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(layout: impl Into<String>, joints: usize, vertices: usize, weights: Vec<f64>) -> Result<Self> {
        if joints == 0 || vertices == 0 || weights.len() != joints * vertices {
            return Err(invalid!("regressor needs {joints} × {vertices} weights, got {}", weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid!("regressor has non-finite weights"));
        }
        for (j, row) in weights.chunks(vertices).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOLERANCE {
                return Err(invalid!("regressor row {j} sums to {s}, expected 1"));
            }
        }
        Ok(JointRegressor {
            layout: layout.into(),
            joints,
            vertices,
            weights,
        })
    }

    /// Each joint is the uniform average of the listed vertices.
    pub fn from_vertex_groups(layout: impl Into<String>, vertices: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut w = vec![0.0; groups.len() * vertices];
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(invalid!("joint {j} has no vertices"));
            }
            for &v in g {
                if v >= vertices {
                    return Err(invalid!("joint {j} references vertex {v} >= {vertices}"));
                }
                w[j * vertices + v] += 1.0 / g.len() as f64;
            }
        }
        Self::new(layout, groups.len(), vertices, w)
    }

    pub fn layout(&self) -> &str {
        &self.layout
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.vertices..(j + 1) * self.vertices]
    }

    /// Row-major `J × V` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn regress_points(&self, points: &[Vec3]) -> Result<JointSet> {
        if points.len() != self.vertices {
            return Err(invalid!("regressor expects {} vertices, got {}", self.vertices, points.len()));
        }
        let joints = (0..self.joints)
            .map(|j| {
                self.row(j)
                    .iter()
                    .zip(points)
                    .filter(|(w, _)| **w != 0.0)
                    .fold(Vec3::zeros(), |acc, (w, p)| acc + p * *w)
            })
            .collect();
        Ok(JointSet::new(joints))
    }

    pub fn regress(&self, mesh: &RegisteredMesh) -> Result<JointSet> {
        self.regress_points(mesh.vertices())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            Ok(serde_json::from_str(&text)?)
        } else {
            Self::parse_text(&text)
        }
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| invalid!("empty regressor file"))?;
        let fields: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
        if fields.len() != 3 {
            return Err(invalid!("regressor header must be `# <layout> <joints> <vertices>`"));
        }
        let joints: usize = fields[1].parse().map_err(|_| invalid!("bad joint count in header"))?;
        let vertices: usize = fields[2].parse().map_err(|_| invalid!("bad vertex count in header"))?;
        let mut weights = Vec::with_capacity(joints * vertices);
        for line in lines {
            for tok in line.split_whitespace() {
                weights.push(tok.parse::<f64>().map_err(|_| invalid!("bad regressor weight `{tok}`"))?);
            }
        }
        Self::new(fields[0], joints, vertices, weights)
    }
}

/// `J × 3` joint positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSet {
    joints: Vec<Vec3>,
}

impl JointSet {
    pub fn new(joints: Vec<Vec3>) -> Self {
        JointSet { joints }
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn map(&self, f: impl Fn(&Vec3) -> Vec3) -> JointSet {
        JointSet::new(self.joints.iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::topology::MeshTopology;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn mesh(rng: &mut impl Rng, n: usize) -> RegisteredMesh {
        let vs = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        RegisteredMesh::new(Arc::new(MeshTopology::point_cloud(n)), vs).unwrap()
    }

    fn random_regressor(rng: &mut impl Rng, j: usize, v: usize) -> JointRegressor {
        let mut w = Vec::new();
        for _ in 0..j {
            let row: Vec<f64> = (0..v).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum();
            w.extend(row.into_iter().map(|x| x / s));
        }
        JointRegressor::new("custom", j, v, w).unwrap()
    }

    #[test]
    fn one_hot_rows_select_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = mesh(&mut rng, 10);
        let r = JointRegressor::from_vertex_groups("custom", 10, &[vec![3], vec![7], vec![0]]).unwrap();
        let j = r.regress(&m).unwrap();
        assert_eq!(j.joints(), &[m.vertices()[3], m.vertices()[7], m.vertices()[0]]);
    }

    #[test]
    fn uniform_row_is_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = mesh(&mut rng, 12);
        let r = JointRegressor::from_vertex_groups("custom", 12, &[(0..12).collect()]).unwrap();
        let j = r.regress(&m).unwrap();
        assert!((j.joints()[0] - m.centroid()).norm() < 1e-12);
    }

    #[test]
    fn random_regressor_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = mesh(&mut rng, 15);
        let r = random_regressor(&mut rng, 4, 15);
        let j = r.regress(&m).unwrap();
        // Oracle: explicit nalgebra product W (J×V) · X (V×3).
        let w = nalgebra::DMatrix::from_row_slice(4, 15, r.weights());
        let x = nalgebra::DMatrix::from_fn(15, 3, |i, c| m.vertices()[i][c]);
        let expect = w * x;
        for (k, p) in j.joints().iter().enumerate() {
            for c in 0..3 {
                assert!((p[c] - expect[(k, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn regression_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, b) = (mesh(&mut rng, 9), mesh(&mut rng, 9));
        let r = random_regressor(&mut rng, 3, 9);
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<Vec3> = a.vertices().iter().zip(b.vertices()).map(|(x, y)| x * alpha + y * beta).collect();
        let lhs = r.regress_points(&combo).unwrap();
        let (ja, jb) = (r.regress(&a).unwrap(), r.regress(&b).unwrap());
        for ((l, x), y) in lhs.joints().iter().zip(ja.joints()).zip(jb.joints()) {
            assert!((l - (x * alpha + y * beta)).norm() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_and_bad_rows_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_regressor(&mut rng, 2, 5);
        assert!(r.regress(&mesh(&mut rng, 6)).is_err());
        assert!(JointRegressor::new("x", 1, 2, vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn text_and_json_formats() {
        let r = JointRegressor::parse_text("# h36m17 2 3\n0.5 0.5 0\n0 0 1\n").unwrap();
        assert_eq!(r.layout(), "h36m17");
        assert_eq!(r.joint_count(), 2);
        let json = serde_json::to_string(&r).unwrap();
        let back: JointRegressor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
