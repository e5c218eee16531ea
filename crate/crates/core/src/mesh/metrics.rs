//! Evaluation metrics. Errors are computed in meters and returned in
//! millimeters.

use nalgebra::{Matrix3, SVD};

use super::geometry::{centroid, RegisteredMesh, Rotation, Vec3};
use super::joints::JointSet;
use crate::error::{invalid, Result};

pub const MM_PER_M: f64 = 1000.0;

fn mean_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Per-vertex error: mean Euclidean distance between corresponding vertices (mm).
pub fn pve(pred: &RegisteredMesh, gt: &RegisteredMesh) -> Result<f64> {
    if !pred.same_topology(gt) {
        return Err(invalid!("pve: meshes have different topologies"));
    }
    Ok(mean_distance(pred.vertices(), gt.vertices()) * MM_PER_M)
}

/// Mean per-joint position error (mm).
pub fn mpjpe(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(invalid!("mpjpe: {} predicted joints vs {} ground truth", pred.len(), gt.len()));
    }
    Ok(mean_distance(pred.joints(), gt.joints()) * MM_PER_M)
}

/// Similarity transform `y ≈ s·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vec3,
    /// Set when the source points span fewer than two dimensions and only a
    /// translation was fitted.
    pub degenerate: bool,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) * self.scale + self.translation
    }
}

/// Closed-form least-squares similarity aligning `x` onto `y`
/// (SVD of the cross-covariance with a reflection correction).
///
/// Requires at least three non-collinear points in `x`; otherwise the result
/// is a translation-only fit with `degenerate = true`.
pub fn procrustes_align(x: &JointSet, y: &JointSet) -> Result<Similarity> {
    if x.len() != y.len() {
        return Err(invalid!("procrustes: {} source points vs {} target points", x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(invalid!("procrustes: no points"));
    }
    let (xs, ys) = (x.joints(), y.joints());
    let (mx, my) = (centroid(xs), centroid(ys));
    let n = xs.len() as f64;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, q) in xs.iter().zip(ys) {
        let (pc, qc) = (p - mx, q - my);
        cov += qc * pc.transpose();
        src_cov += pc * pc.transpose();
        var_x += pc.norm_squared();
    }
    cov /= n;
    var_x /= n;

    let translation_only = Similarity {
        scale: 1.0,
        rotation: Rotation::identity(),
        translation: my - mx,
        degenerate: true,
    };
    let spread = src_cov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if var_x <= f64::EPSILON || ev[1] <= 1e-12 * ev[0].max(f64::MIN_POSITIVE) {
        return Ok(translation_only);
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Ok(translation_only),
    };
    let mut signs = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        signs[(2, 2)] = -1.0;
    }
    let r = u * signs * v_t;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * signs[(i, i)]).sum();
    let scale = trace_ds / var_x;
    let rotation = Rotation::new_unchecked(r);
    let translation = my - rotation.apply(&mx) * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
        degenerate: false,
    })
}

/// MPJPE after optimally aligning `pred` onto `gt` with a similarity transform (mm).
pub fn pa_mpjpe(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    let sim = procrustes_align(pred, gt)?;
    mpjpe(&pred.map(|p| sim.apply(p)), gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::topology::MeshTopology;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
    }

    fn rand_joints(rng: &mut impl Rng, n: usize) -> JointSet {
        JointSet::new((0..n).map(|_| rand_vec(rng, 0.5)).collect())
    }

    fn rand_rotation(rng: &mut impl Rng) -> Rotation {
        Rotation::from_axis_angle(&(rand_vec(rng, 1.0) + Vec3::new(0.0, 0.0, 1e-3)), rng.random_range(-3.0..3.0))
    }

    fn objective(sim: &Similarity, x: &JointSet, y: &JointSet) -> f64 {
        x.joints().iter().zip(y.joints()).map(|(p, q)| (sim.apply(p) - q).norm_squared()).sum()
    }

    #[test]
    fn pve_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let topo = Arc::new(MeshTopology::point_cloud(30));
        let gt = RegisteredMesh::new(topo.clone(), (0..30).map(|_| rand_vec(&mut rng, 1.0)).collect()).unwrap();
        assert_eq!(pve(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.translated(&Vec3::new(0.001, 0.0, 0.0)).unwrap();
        assert!((pve(&shifted, &gt).unwrap() - 1.0).abs() < 1e-9);

        let pert = gt.map_vertices(|v| v + rand_vec(&mut rng, 0.05)).unwrap();
        let mut oracle = 0.0;
        for i in 0..30 {
            let (a, b) = (pert.vertices()[i], gt.vertices()[i]);
            oracle += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
        oracle = oracle / 30.0 * 1000.0;
        let got = pve(&pert, &gt).unwrap();
        assert!((got - oracle).abs() <= 1e-9 * oracle);
        assert_eq!(got, pve(&gt, &pert).unwrap());
    }

    #[test]
    fn pve_rejects_topology_mismatch() {
        let a = RegisteredMesh::new(Arc::new(MeshTopology::point_cloud(3)), vec![Vec3::zeros(); 3]).unwrap();
        let b = RegisteredMesh::new(Arc::new(MeshTopology::point_cloud(4)), vec![Vec3::zeros(); 4]).unwrap();
        assert!(pve(&a, &b).is_err());
    }

    #[test]
    fn mpjpe_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = rand_joints(&mut rng, 17);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let off = gt.map(|p| p + Vec3::new(0.0, 0.02, 0.0));
        assert!((mpjpe(&off, &gt).unwrap() - 20.0).abs() < 1e-9);
        let pert = gt.map(|p| p + Vec3::new(0.01, -0.03, 0.02) * p.x);
        let oracle: f64 = (0..17)
            .map(|i| {
                let d = pert.joints()[i] - gt.joints()[i];
                (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
            })
            .sum::<f64>()
            / 17.0
            * 1000.0;
        assert!((mpjpe(&pert, &gt).unwrap() - oracle).abs() <= 1e-9 * oracle);
        assert!(mpjpe(&gt, &rand_joints(&mut rng, 5)).is_err());
    }

    #[test]
    fn procrustes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_joints(&mut rng, 10);
        let s = procrustes_align(&x, &x).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-9);
        assert!((s.rotation.matrix() - Matrix3::identity()).abs().max() < 1e-9);
        assert!(s.translation.norm() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_planted_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = rand_joints(&mut rng, 24);
            let r0 = rand_rotation(&mut rng);
            let t0 = rand_vec(&mut rng, 2.0);
            let y = x.map(|p| r0.apply(p) * 2.0 + t0);
            let s = procrustes_align(&x, &y).unwrap();
            assert!((s.scale - 2.0).abs() < 1e-6);
            assert!((s.rotation.matrix() - r0.matrix()).abs().max() < 1e-6);
            assert!((s.translation - t0).norm() < 1e-6);
            assert!(pa_mpjpe(&x, &y).unwrap() < 1e-6);
        }
    }

    #[test]
    fn procrustes_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_joints(&mut rng, 12);
        let y = rand_joints(&mut rng, 12);
        let best = procrustes_align(&x, &y).unwrap();
        let f_best = objective(&best, &x, &y);
        for _ in 0..10_000 {
            let cand = Similarity {
                scale: rng.random_range(0.0..2.0),
                rotation: rand_rotation(&mut rng),
                translation: rand_vec(&mut rng, 0.5),
                degenerate: false,
            };
            assert!(f_best <= objective(&cand, &x, &y) + 1e-12);
        }
        Rotation::new(*best.rotation.matrix()).unwrap();
    }

    #[test]
    fn pa_mpjpe_not_above_mpjpe_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let gt = rand_joints(&mut rng, 24);
            let pred = rand_joints(&mut rng, 24);
            assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap());
            let r = rand_rotation(&mut rng);
            let t = rand_vec(&mut rng, 1.0);
            let s = rng.random_range(0.2..3.0);
            let moved = pred.map(|p| r.apply(p) * s + t);
            assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&moved, &gt).unwrap() + 1e-9);
        }
    }

    #[test]
    fn degenerate_points_fall_back_to_translation() {
        let x = JointSet::new(vec![Vec3::new(1.0, 1.0, 1.0); 5]);
        let y = JointSet::new(vec![Vec3::new(0.0, 2.0, 1.0); 5]);
        let s = procrustes_align(&x, &y).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.scale, 1.0);
        assert_eq!(s.translation, Vec3::new(-1.0, 1.0, 0.0));
        let line = JointSet::new((0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect());
        assert!(procrustes_align(&line, &y).unwrap().degenerate);
    }
}
