//! Pointmaps, rigid/similarity transforms, patch averaging and Umeyama
//! alignment.
//!
//! Conventions: quaternions are (w, x, y, z) with the Hamilton product,
//! frames are right-handed, coordinates are meters.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense H×W grid of 3D points with a validity mask and optional
/// per-pixel confidence (≥ 1 everywhere when present).
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub height: usize,
    pub width: usize,
    points: Vec<Vector3<f64>>,
    valid: Vec<bool>,
    confidence: Option<Vec<f64>>,
}

impl Pointmap {
    pub fn new(
        height: usize,
        width: usize,
        points: Vec<Vector3<f64>>,
        valid: Vec<bool>,
        confidence: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = height * width;
        if points.len() != n || valid.len() != n {
            return Err(Error::invalid(format!(
                "pointmap {height}x{width} wants {n} entries, got {} points / {} mask",
                points.len(),
                valid.len()
            )));
        }
        for (p, &v) in points.iter().zip(&valid) {
            if v && !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::invalid("valid pointmap entry is not finite"));
            }
        }
        if let Some(conf) = &confidence {
            if conf.len() != n {
                return Err(Error::invalid("confidence length mismatch"));
            }
            if conf.iter().any(|&c| !(c >= 1.0)) {
                return Err(Error::invalid("confidence must be >= 1 everywhere"));
            }
        }
        Ok(Pointmap { height, width, points, valid, confidence })
    }

    /// All-valid constructor for dense predictions.
    pub fn dense(height: usize, width: usize, points: Vec<Vector3<f64>>, confidence: Option<Vec<f64>>) -> Result<Self> {
        let valid = vec![true; height * width];
        Pointmap::new(height, width, points, valid, confidence)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn confidence(&self) -> Option<&[f64]> {
        self.confidence.as_deref()
    }

    pub fn at(&self, row: usize, col: usize) -> (Vector3<f64>, bool) {
        let i = row * self.width + col;
        (self.points[i], self.valid[i])
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(p, _)| p)
    }

    /// Map every point through `f`, keeping the mask and confidence.
    pub fn map_points(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Pointmap {
        Pointmap {
            height: self.height,
            width: self.width,
            points: self.points.iter().map(f).collect(),
            valid: self.valid.clone(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Rigid transform between the frame's own camera coordinates and the
/// global (frame-0) coordinates: `p_global = R(quat)·p + trans`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Unit quaternion, (w, x, y, z).
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { quat: [1.0, 0.0, 0.0, 0.0], trans: [0.0; 3] }
    }

    pub fn new(quat: [f64; 4], trans: [f64; 3]) -> Result<Self> {
        let norm = quat.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("quaternion norm {norm} != 1")));
        }
        Ok(CameraPose { quat, trans })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let q = rotation.quaternion();
        CameraPose { quat: [q.w, q.i, q.j, q.k], trans: [translation.x, translation.y, translation.z] }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(Quaternion::new(
            self.quat[0],
            self.quat[1],
            self.quat[2],
            self.quat[3],
        ))
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.trans[0], self.trans[1], self.trans[2])
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn inverse(&self) -> CameraPose {
        let r_inv = self.rotation().inverse();
        let t_inv = -(r_inv * self.translation());
        CameraPose::from_parts(r_inv, t_inv)
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        let r = self.rotation() * other.rotation();
        let t = self.rotation() * other.translation() + self.translation();
        CameraPose::from_parts(r, t)
    }
}

/// Similarity transform `p -> scale·R·p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Mean of the valid points in each `patch`×`patch` cell
/// (⌈H/patch⌉×⌈W/patch⌉ cells; an all-invalid cell yields `None`).
pub fn patch_average_positions(pm: &Pointmap, patch: usize) -> Vec<Vec<Option<Vector3<f64>>>> {
    assert!(patch >= 1, "patch must be >= 1");
    let gh = pm.height.div_ceil(patch);
    let gw = pm.width.div_ceil(patch);
    let mut grid = vec![vec![None; gw]; gh];
    for (gu, grid_row) in grid.iter_mut().enumerate() {
        for (gv, cell) in grid_row.iter_mut().enumerate() {
            let mut sum = Vector3::zeros();
            let mut count = 0usize;
            for i in gu * patch..((gu + 1) * patch).min(pm.height) {
                for j in gv * patch..((gv + 1) * patch).min(pm.width) {
                    let (p, v) = pm.at(i, j);
                    if v {
                        sum += p;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                *cell = Some(sum / count as f64);
            }
        }
    }
    grid
}

/// Flattened row-major view of [`patch_average_positions`].
pub fn patch_average_flat(pm: &Pointmap, patch: usize) -> Vec<Option<Vector3<f64>>> {
    patch_average_positions(pm, patch).into_iter().flatten().collect()
}

/// Apply a rigid pose to every point: `R·p + t`.
pub fn apply_pose(points: &[Vector3<f64>], pose: &CameraPose) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.transform(p)).collect()
}

/// Least-squares similarity transform minimizing Σ‖dst − (s·R·src + t)‖².
///
/// Fails when fewer than 3 points are given, when the source points are
/// (near-)coincident, or when the src/dst covariance drops below rank 2 —
/// in those cases rotation about the deficient directions is unconstrained.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!(
            "umeyama: {} src vs {} dst points",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::invalid("umeyama needs at least 3 points"));
    }
    let nf = n as f64;
    let mu_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / nf;

    let var_src: f64 = src.iter().map(|p| (p - mu_src).norm_squared()).sum::<f64>() / nf;
    if var_src < 1e-18 {
        return Err(Error::numeric("umeyama: source points are coincident"));
    }

    let mut cov = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_dst) * (s - mu_src).transpose();
    }
    cov /= nf;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numeric("umeyama: SVD failed"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::numeric("umeyama: SVD failed"))?;
    let sv = svd.singular_values;
    if sv[0] < 1e-15 || sv[1] < 1e-12 * sv[0].max(1e-300) {
        return Err(Error::numeric(
            "umeyama: rank-deficient covariance, alignment is not determined",
        ));
    }

    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = (sv.dot(&s_diag)) / var_src;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::numeric(format!("umeyama: non-positive scale {scale}")));
    }
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(Sim3 { scale, rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rand_unit_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        UnitQuaternion::from_quaternion(q)
    }

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn patch_average_constant_map() {
        let p = Vector3::new(0.5, -1.0, 2.0);
        let pm = Pointmap::dense(6, 6, vec![p; 36], None).unwrap();
        for cell in patch_average_flat(&pm, 3) {
            assert_eq!(cell.unwrap(), p);
        }
    }

    #[test]
    fn patch_average_symmetric_mean() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(2.0, 2.0, 0.0),
        ];
        let pm = Pointmap::dense(2, 2, pts, None).unwrap();
        let grid = patch_average_positions(&pm, 2);
        assert_eq!(grid[0][0].unwrap(), Vector3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn patch_average_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = rand_points(&mut rng, 64);
        let mut valid = vec![true; 64];
        for i in [3usize, 17, 18, 40] {
            valid[i] = false;
        }
        let pm = Pointmap::new(8, 8, pts.clone(), valid.clone(), None).unwrap();
        let grid = patch_average_positions(&pm, 4);
        // direct double-loop oracle
        for gu in 0..2 {
            for gv in 0..2 {
                let mut sum = Vector3::zeros();
                let mut cnt = 0;
                for i in gu * 4..gu * 4 + 4 {
                    for j in gv * 4..gv * 4 + 4 {
                        if valid[i * 8 + j] {
                            sum += pts[i * 8 + j];
                            cnt += 1;
                        }
                    }
                }
                assert_eq!(grid[gu][gv].unwrap(), sum / cnt as f64);
            }
        }
    }

    #[test]
    fn patch_all_invalid_cell_is_none() {
        let pts = vec![Vector3::zeros(); 4];
        let pm = Pointmap::new(2, 2, pts, vec![false; 4], None).unwrap();
        assert!(patch_average_positions(&pm, 2)[0][0].is_none());
    }

    #[test]
    fn patch_average_commutes_with_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = rand_points(&mut rng, 36);
        let pm = Pointmap::dense(6, 6, pts, None).unwrap();
        let shift = Vector3::new(0.25, -4.0, 1.5);
        let shifted = pm.map_points(|p| p + shift);
        let a = patch_average_flat(&pm, 2);
        let b = patch_average_flat(&shifted, 2);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x.unwrap() + shift, y.unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn apply_pose_identity() {
        let pts = vec![Vector3::new(1.0, 2.0, 3.0)];
        let out = apply_pose(&pts, &CameraPose::identity());
        assert_eq!(out, pts);
    }

    #[test]
    fn apply_pose_quarter_turn_about_z() {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let pose = CameraPose::from_parts(rot, Vector3::zeros());
        let out = apply_pose(&[Vector3::new(1.0, 0.0, 0.0)], &pose);
        assert_relative_eq!(out[0], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn apply_pose_matches_homogeneous_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let rot = rand_unit_quat(&mut rng);
            let trans = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let pose = CameraPose::from_parts(rot, trans);
            let mat = rot.to_homogeneous().fixed_view::<3, 3>(0, 0).into_owned();
            let pts = rand_points(&mut rng, 16);
            let out = apply_pose(&pts, &pose);
            for (p, o) in pts.iter().zip(&out) {
                let expect = mat * p + trans;
                assert_relative_eq!(*o, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn apply_pose_preserves_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = rand_points(&mut rng, 12);
        let pose = CameraPose::from_parts(
            rand_unit_quat(&mut rng),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let out = apply_pose(&pts, &pose);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let before = (pts[i] - pts[j]).norm();
                let after = (out[i] - out[j]).norm();
                assert!((before - after).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn umeyama_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = rand_points(&mut rng, 10);
        let sim = umeyama_sim3(&pts, &pts).unwrap();
        assert_relative_eq!(sim.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(sim.rotation, Matrix3::identity(), epsilon = 1e-9);
        assert_relative_eq!(sim.translation, Vector3::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn umeyama_recovers_constructed_similarity() {
        let src = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let rmat = rot.to_rotation_matrix().into_inner();
        let t = Vector3::new(1.0, 2.0, 3.0);
        let dst: Vec<_> = src.iter().map(|p| 2.0 * (rmat * p) + t).collect();
        let sim = umeyama_sim3(&src, &dst).unwrap();
        assert_relative_eq!(sim.scale, 2.0, epsilon = 1e-9);
        assert_relative_eq!(sim.rotation, rmat, epsilon = 1e-9);
        assert_relative_eq!(sim.translation, t, epsilon = 1e-9);
    }

    #[test]
    fn umeyama_exact_on_random_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let src = rand_points(&mut rng, 8);
            let rot = rand_unit_quat(&mut rng).to_rotation_matrix().into_inner();
            let scale = rng.random_range(0.2..4.0);
            let t = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let dst: Vec<_> = src.iter().map(|p| scale * (rot * p) + t).collect();
            let sim = umeyama_sim3(&src, &dst).unwrap();
            let rms: f64 = (src
                .iter()
                .zip(&dst)
                .map(|(s, d)| (sim.apply(s) - d).norm_squared())
                .sum::<f64>()
                / src.len() as f64)
                .sqrt();
            assert!(rms < 1e-9, "rms = {rms}");
        }
    }

    #[test]
    fn umeyama_noise_residual_bounded() {
        use rand_distr::{Distribution, Normal};
        let sigma = 0.01;
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let src = rand_points(&mut rng, 30);
            let dst: Vec<_> = src
                .iter()
                .map(|p| {
                    p + Vector3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    )
                })
                .collect();
            let sim = umeyama_sim3(&src, &dst).unwrap();
            let rms: f64 = (src
                .iter()
                .zip(&dst)
                .map(|(s, d)| (sim.apply(s) - d).norm_squared())
                .sum::<f64>()
                / src.len() as f64)
                .sqrt();
            worst = worst.max(rms);
        }
        assert!(worst <= 3.0 * sigma, "worst rms = {worst}");
    }

    #[test]
    fn umeyama_rejects_degenerate_input() {
        let p = Vector3::new(1.0, 1.0, 1.0);
        let src = vec![p; 5];
        let dst = rand_points(&mut ChaCha8Rng::seed_from_u64(1), 5);
        assert!(umeyama_sim3(&src, &dst).is_err());
        // collinear points leave the rotation unconstrained
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(umeyama_sim3(&line, &line).is_err());
    }

    #[test]
    fn pose_unit_norm_enforced() {
        assert!(CameraPose::new([1.0, 0.1, 0.0, 0.0], [0.0; 3]).is_err());
        assert!(CameraPose::new([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn confidence_below_one_rejected() {
        let pts = vec![Vector3::zeros(); 4];
        let err = Pointmap::new(2, 2, pts, vec![true; 4], Some(vec![1.0, 1.0, 0.5, 1.0]));
        assert!(err.is_err());
    }
}
