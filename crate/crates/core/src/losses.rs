//! Training objectives. Every loss is mean-reduced so that weights do not
//! depend on batch size, token count or joint count.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{RegisteredMesh, Vec3};

/// Mean over the `B × N` cells of `−log softmax(logits)[gt]`.
///
/// `logits` is `(B, N, S)`; `gt` holds `B·N` indices in row-major order.
pub fn cross_entropy_mesh(logits: &Tensor, gt: &[u32]) -> Result<Tensor> {
    let (b, n, s) = logits.dims3()?;
    if gt.len() != b * n {
        return Err(Error::shape("ground-truth tokens", b * n, gt.len()));
    }
    if let Some(&bad) = gt.iter().find(|&&i| i as usize >= s) {
        return Err(invalid!("ground-truth token {bad} is out of range for S = {s}"));
    }
    let idx = Tensor::from_vec(gt.to_vec(), (b, n, 1), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(logp.gather(&idx, 2)?.neg()?.mean_all()?)
}

/// Mean squared difference over the 9 entries of `(B, 3, 3)` rotations.
pub fn rotation_mse(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() || pred.rank() != 3 || pred.dims()[1..] != [3, 3] {
        return Err(invalid!("rotation shapes {:?} and {:?} do not match (B, 3, 3)", pred.dims(), gt.dims()));
    }
    Ok((pred - gt)?.sqr()?.mean_all()?)
}

/// `s · (x, y) + t` for joints `(B, J, 3)` and cameras `(B, 3)` = `[s, tx, ty]`.
pub fn project_weak_perspective(joints: &Tensor, camera: &Tensor) -> Result<Tensor> {
    let (b, _, three) = joints.dims3()?;
    if three != 3 || camera.dims() != [b, 3] {
        return Err(invalid!("projection needs joints (B, J, 3) and cameras (B, 3), got {:?} and {:?}", joints.dims(), camera.dims()));
    }
    let s = camera.narrow(1, 0, 1)?.unsqueeze(2)?;
    let t = camera.narrow(1, 1, 2)?.unsqueeze(1)?;
    Ok(joints.narrow(2, 0, 2)?.broadcast_mul(&s)?.broadcast_add(&t)?)
}

/// Mean absolute deviation over all `2·J` coordinates between the projected
/// joints and `gt_2d (B, J, 2)`.
pub fn reprojection_l1(joints: &Tensor, camera: &Tensor, gt_2d: &Tensor) -> Result<Tensor> {
    let proj = project_weak_perspective(joints, camera)?;
    if proj.dims() != gt_2d.dims() {
        return Err(Error::shape("2D joints", format!("{:?}", proj.dims()), format!("{:?}", gt_2d.dims())));
    }
    Ok((proj - gt_2d)?.abs()?.mean_all()?)
}

/// Mean per-vertex Euclidean distance between `(B, V, 3)` tensors. A tiny
/// constant under the square root keeps the gradient finite at zero distance.
pub fn recon_3d_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("vertices", format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    Ok(((pred - gt)?.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?.mean_all()?)
}

/// Mean per-vertex Euclidean distance in meters.
pub fn recon_3d_loss(pred: &RegisteredMesh, gt: &RegisteredMesh) -> Result<f64> {
    if !pred.has_topology(gt.topology()) {
        return Err(invalid!("meshes do not share a topology"));
    }
    let total: f64 = pred.vertices().iter().zip(gt.vertices()).map(|(a, b): (&Vec3, &Vec3)| (a - b).norm()).sum();
    Ok(total / pred.vertex_count() as f64)
}

/// `softmax(logits / temperature) · codebook`: `(B, N, S)` × `(S, L)` → `(B, N, L)`.
pub fn soft_codebook_mixture(logits: &Tensor, codebook: &Tensor, temperature: f64) -> Result<Tensor> {
    let (_, _, s) = logits.dims3()?;
    let (cs, _) = codebook.dims2()?;
    if s != cs {
        return Err(Error::shape("codebook rows", s, cs));
    }
    let p = candle_nn::ops::softmax(&(logits / temperature)?, D::Minus1)?;
    Ok(p.broadcast_matmul(&codebook.to_dtype(logits.dtype())?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One step's loss terms. Disabled terms are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_ce: Option<f64>,
    pub rot_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reproj_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_3d: Option<f64>,
    pub weighted_total: f64,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    /// Builds a report whose total is `Σ weight · term` over the present terms.
    pub fn new(mesh_ce: Option<f64>, rot_mse: f64, reproj_l1: Option<f64>, recon_3d: Option<f64>, weights: BTreeMap<String, f64>) -> Self {
        let w = |k: &str| weights.get(k).copied().unwrap_or(0.0);
        let weighted_total = mesh_ce.map_or(0.0, |v| w("mesh_ce") * v)
            + w("rot") * rot_mse
            + reproj_l1.map_or(0.0, |v| w("reproj") * v)
            + recon_3d.map_or(0.0, |v| w("recon_3d") * v);
        LossReport {
            mesh_ce,
            rot_mse,
            reproj_l1,
            recon_3d,
            weighted_total,
            weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{CameraParams, JointSet, MeshTopology, Rotation};
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn t3(v: Vec<f64>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn cross_entropy_anchors() {
        let (n, sz) = (4, 512);
        let gt: Vec<u32> = vec![3, 0, 511, 100];
        let mut margin = vec![0.0; n * sz];
        for (i, &g) in gt.iter().enumerate() {
            margin[i * sz + g as usize] = 100.0;
        }
        assert!(s(&cross_entropy_mesh(&t3(margin, (1, n, sz)), &gt).unwrap()) < 1e-10);
        let uniform = t3(vec![0.37; n * sz], (1, n, sz));
        assert!((s(&cross_entropy_mesh(&uniform, &gt).unwrap()) - 512f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_mesh(&uniform, &[0, 0, 0, 512]).is_err());
        assert!(cross_entropy_mesh(&uniform, &[0, 0, 0]).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, n, sz) = (2, 5, 9);
        let v: Vec<f64> = (0..b * n * sz).map(|_| rng.random_range(-4.0..4.0)).collect();
        let gt: Vec<u32> = (0..b * n).map(|_| rng.random_range(0..sz as u32)).collect();
        let got = s(&cross_entropy_mesh(&t3(v.clone(), (b, n, sz)), &gt).unwrap());
        let mut want = 0.0;
        for (cell, &g) in gt.iter().enumerate() {
            let row = &v[cell * sz..(cell + 1) * sz];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            want += lse - row[g as usize];
        }
        want /= (b * n) as f64;
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_falls_as_the_true_logit_rises() {
        let base = vec![0.1, 0.5, -0.2, 0.3];
        let mut last = f64::INFINITY;
        for bump in [0.0, 0.5, 1.0, 2.0] {
            let mut v = base.clone();
            v[2] += bump;
            let l = s(&cross_entropy_mesh(&t3(v, (1, 1, 4)), &[2]).unwrap());
            assert!(l >= 0.0 && l < last);
            last = l;
        }
    }

    fn rot_tensor(r: &Rotation) -> Tensor {
        t3(r.to_row_major().to_vec(), (1, 3, 3))
    }

    #[test]
    fn rotation_mse_anchors() {
        let id = rot_tensor(&Rotation::identity());
        assert_eq!(s(&rotation_mse(&id, &id).unwrap()), 0.0);
        let flip = rot_tensor(&Rotation::from_axis_angle(&Vec3::z(), std::f64::consts::PI));
        assert!((s(&rotation_mse(&id, &flip).unwrap()) - 8.0 / 9.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Rotation::from_euler_xyz(rng.random(), rng.random(), rng.random());
        let b = Rotation::from_euler_xyz(rng.random(), rng.random(), rng.random());
        let want = a.to_row_major().iter().zip(b.to_row_major()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 9.0;
        assert!((s(&rotation_mse(&rot_tensor(&a), &rot_tensor(&b)).unwrap()) - want).abs() < 1e-10);
    }

    #[test]
    fn projection_anchors() {
        let j = t3(vec![0.5, 0.25, 9.0], (1, 1, 3));
        let cam = Tensor::new(&[[2.0f64, 1.0, -1.0]], &Device::Cpu).unwrap();
        assert_eq!(project_weak_perspective(&j, &cam).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0, -0.5]);
        let unit = Tensor::new(&[[1.0f64, 0.0, 0.0]], &Device::Cpu).unwrap();
        assert_eq!(project_weak_perspective(&j, &unit).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.5, 0.25]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let joints: Vec<Vec3> = (0..7).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let cp = CameraParams::new(0.8, [0.1, -0.3]).unwrap();
        let want = cp.project(&JointSet::new(joints.clone()));
        let jt = t3(joints.iter().flat_map(|v| [v.x, v.y, v.z]).collect(), (1, 7, 3));
        let ct = Tensor::new(&[[0.8f64, 0.1, -0.3]], &Device::Cpu).unwrap();
        let got = project_weak_perspective(&jt, &ct).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g[0] - w[0]).abs() < 1e-10 && (g[1] - w[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn reprojection_anchors_and_z_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let j: Vec<f64> = (0..2 * 6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jt = t3(j.clone(), (2, 6, 3));
        let cam = Tensor::new(&[[0.9f64, 0.05, 0.0], [0.7, -0.1, 0.2]], &Device::Cpu).unwrap();
        let gt = project_weak_perspective(&jt, &cam).unwrap();
        assert!(s(&reprojection_l1(&jt, &cam, &gt).unwrap()) < 1e-15);
        let shifted = (&gt + 0.1).unwrap();
        assert!((s(&reprojection_l1(&jt, &cam, &shifted).unwrap()) - 0.1).abs() < 1e-12);

        let noisy = gt.broadcast_add(&Tensor::new(&[0.03f64, -0.07], &Device::Cpu).unwrap()).unwrap();
        let mut jz = j.clone();
        for k in (2..jz.len()).step_by(3) {
            jz[k] += rng.random_range(-5.0..5.0);
        }
        let a = s(&reprojection_l1(&jt, &cam, &noisy).unwrap());
        let b = s(&reprojection_l1(&t3(jz, (2, 6, 3)), &cam, &noisy).unwrap());
        assert_eq!(a, b);
        assert!(reprojection_l1(&jt, &cam, &t3(vec![0.0; 2 * 5 * 2], (2, 5, 2))).is_err());
    }

    #[test]
    fn reprojection_oracle_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, j) = (3, 4);
        let jv: Vec<f64> = (0..b * j * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cv: Vec<f64> = (0..b).flat_map(|_| [rng.random_range(0.5..1.0), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]).collect();
        let gv: Vec<f64> = (0..b * j * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = s(&reprojection_l1(
            &t3(jv.clone(), (b, j, 3)),
            &Tensor::from_vec(cv.clone(), (b, 3), &Device::Cpu).unwrap(),
            &t3(gv.clone(), (b, j, 2)),
        )
        .unwrap());
        let mut want = 0.0;
        for bi in 0..b {
            for ji in 0..j {
                for k in 0..2 {
                    let p = cv[bi * 3] * jv[(bi * j + ji) * 3 + k] + cv[bi * 3 + 1 + k];
                    want += (p - gv[(bi * j + ji) * 2 + k]).abs();
                }
            }
        }
        assert!((got - want / (b * j * 2) as f64).abs() < 1e-9);
    }

    #[test]
    fn reprojection_camera_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let jt = t3((0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect(), (1, 5, 3));
        let gt = t3((0..5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect(), (1, 5, 2));
        let cam0 = vec![0.8, 0.05, -0.02];
        let var = Var::from_tensor(&Tensor::from_vec(cam0.clone(), (1, 3), &Device::Cpu).unwrap()).unwrap();
        let loss = reprojection_l1(&jt, var.as_tensor(), &gt).unwrap();
        let g = loss.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let eval = |delta: f64| {
                let mut c = cam0.clone();
                c[k] += delta;
                s(&reprojection_l1(&jt, &Tensor::from_vec(c, (1, 3), &Device::Cpu).unwrap(), &gt).unwrap())
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-8), "{k}: {fd} vs {}", g[k]);
        }
    }

    fn tiny_mesh(points: Vec<Vec3>) -> RegisteredMesh {
        let topo = Arc::new(MeshTopology::point_cloud(points.len()));
        RegisteredMesh::new(topo, points).unwrap()
    }

    #[test]
    fn recon_3d_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..40).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let a = tiny_mesh(pts.clone());
        assert_eq!(recon_3d_loss(&a, &a).unwrap(), 0.0);
        let up = a.translated(&Vec3::new(0.0, 0.0, 0.01)).unwrap();
        assert!((recon_3d_loss(&up, &a).unwrap() - 0.01).abs() < 1e-12);
        let b = a.map_vertices(|v| v + Vec3::new(rng.random_range(-0.1..0.1), rng.random(), 0.0)).unwrap();
        let l = recon_3d_loss(&a, &b).unwrap();
        assert!((l - crate::mesh::pve(&a, &b).unwrap() / 1000.0).abs() < 1e-12);
        assert_eq!(l, recon_3d_loss(&b, &a).unwrap());
        let flat = |m: &RegisteredMesh| t3(m.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect(), (1, 40, 3));
        assert!((s(&recon_3d_loss_tensor(&flat(&a), &flat(&b)).unwrap()) - l).abs() < 1e-9);
    }

    #[test]
    fn soft_mixture_with_peaked_logits_selects_entries() {
        let cb = Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]], &Device::Cpu).unwrap();
        let logits = t3(vec![0.0, 200.0, 0.0, 200.0, 0.0, 0.0], (1, 2, 3));
        let m = soft_codebook_mixture(&logits, &cb, 1.0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(m, vec![vec![3.0, 4.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn report_total_counts_present_terms() {
        let w: BTreeMap<String, f64> = [("mesh_ce", 1.0), ("rot", 2.0), ("reproj", 0.5), ("recon_3d", 3.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let r = LossReport::new(Some(1.0), 0.25, Some(2.0), None, w.clone());
        assert_eq!(r.weighted_total, 1.0 + 0.5 + 1.0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("recon_3d").is_none() && json.get("mesh_ce").is_some());
        let r = LossReport::new(None, 0.25, None, Some(1.0), w);
        assert_eq!(r.weighted_total, 0.5 + 3.0);
    }
}
