//! Training objective: L2 pose loss, confidence-aware pointmap loss and
//! scale normalization, with a metric-scale mode that pins the predicted
//! normalizer to the ground-truth one.
//!
//! Each loss exists twice: a plain-value form for evaluation and property
//! tests, and a tape form used by the trainer and the gradient checks.
//! A route-equality test keeps the two in agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Pointmap};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Confidence regularizer weight α.
    pub alpha: f64,
    /// When true the predicted scale normalizer is forced to the
    /// ground-truth one (ŝ := s), so absolute scale is learned.
    pub metric_scale: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.2, metric_scale: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::invalid(format!("alpha {} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// Mean Euclidean norm of all valid points across a sequence of pointmaps.
pub fn scale_norm(pointmaps: &[&Pointmap]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pm in pointmaps {
        for p in pm.valid_points() {
            sum += p.norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("scale_norm: no valid points in sequence"));
    }
    Ok(sum / count as f64)
}

fn check_scales(s_hat: f64, s: f64) -> Result<()> {
    if s_hat <= 0.0 || s <= 0.0 {
        return Err(Error::invalid(format!("scale factors must be positive: ŝ={s_hat}, s={s}")));
    }
    Ok(())
}

/// Flip `q_hat` to the hemisphere of `q` before subtracting; ‖q̂ − q‖ is
/// otherwise sign-ambiguous for identical rotations.
fn quat_sign(q_hat: &[f64; 4], q: &[f64; 4]) -> f64 {
    let dot: f64 = q_hat.iter().zip(q).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Σ_t ( ‖q̂_t − q_t‖₂ + ‖τ̂_t/ŝ − τ_t/s‖₂ ), plain-value form.
pub fn loss_pose(pred: &[CameraPose], gt: &[CameraPose], s_hat: f64, s: f64) -> Result<f64> {
    check_scales(s_hat, s)?;
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "pose sequences differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let sign = quat_sign(&p.quat, &g.quat);
        let dq: f64 = p
            .quat
            .iter()
            .zip(&g.quat)
            .map(|(a, b)| (sign * a - b) * (sign * a - b))
            .sum::<f64>()
            .sqrt();
        let dt = (p.translation() / s_hat - g.translation() / s).norm();
        total += dq + dt;
    }
    Ok(total)
}

/// Per-frame pose prediction living on a tape: a normalized `[1,4]`
/// quaternion and a `[1,3]` translation.
#[derive(Debug, Clone, Copy)]
pub struct PosePred {
    pub quat: Var,
    pub trans: Var,
}

/// Tape form of the pose loss.
pub fn loss_pose_tape(
    tape: &mut Tape,
    pred: &[PosePred],
    gt: &[CameraPose],
    s_hat: f64,
    s: f64,
) -> Result<Var> {
    check_scales(s_hat, s)?;
    if pred.len() != gt.len() {
        return Err(Error::invalid("pose sequences differ in length"));
    }
    let mut total: Option<Var> = None;
    for (p, g) in pred.iter().zip(gt) {
        let qv = tape.value(p.quat).data();
        let sign = quat_sign(&[qv[0], qv[1], qv[2], qv[3]], &g.quat);
        let q_flipped = tape.mul_scalar(p.quat, sign);
        let gt_q = tape.leaf(Tensor::matrix(1, 4, g.quat.to_vec())?);
        let dq = tape.sub(q_flipped, gt_q)?;
        let dq2 = tape.mul(dq, dq)?;
        let dq_sum = tape.sum_last(dq2);
        let dq_norm = tape.sqrt(dq_sum);

        let t_scaled = tape.mul_scalar(p.trans, 1.0 / s_hat);
        let gt_t = tape.leaf(Tensor::matrix(1, 3, (g.translation() / s).iter().cloned().collect())?);
        let dt = tape.sub(t_scaled, gt_t)?;
        let dt2 = tape.mul(dt, dt)?;
        let dt_sum = tape.sum_last(dt2);
        let dt_norm = tape.sqrt(dt_sum);

        let term = tape.add(dq_norm, dt_norm)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("empty pose sequence"))
}

/// Σ over valid pixels of c·‖x̂/ŝ − x/s‖₂ − α·log c, summed across all
/// supplied (pred, gt) branches (self and global weighted equally).
/// Metric mode replaces ŝ by s before evaluation.
pub fn loss_conf(
    preds: &[&Pointmap],
    gts: &[&Pointmap],
    cfg: &LossConfig,
    s_hat: f64,
    s: f64,
) -> Result<f64> {
    cfg.validate()?;
    let s_hat = if cfg.metric_scale { s } else { s_hat };
    if preds.len() != gts.len() {
        return Err(Error::invalid("pred/gt branch counts differ"));
    }
    let mut total = 0.0;
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::invalid("pred/gt pointmap sizes differ"));
        }
        let conf = pred
            .confidence()
            .ok_or_else(|| Error::invalid("loss_conf needs predicted confidence"))?;
        for i in 0..pred.points().len() {
            if !(pred.valid()[i] && gt.valid()[i]) {
                continue;
            }
            let err = (pred.points()[i] / s_hat - gt.points()[i] / s).norm();
            total += conf[i] * err - cfg.alpha * conf[i].ln();
        }
    }
    Ok(total)
}

/// One pointmap branch on a tape: `[HW,3]` points and `[HW]` confidence
/// (already ≥ 1; heads produce c = 1 + exp(raw)).
#[derive(Debug, Clone, Copy)]
pub struct PointmapPred {
    pub points: Var,
    pub confidence: Var,
}

/// Tape form of the confidence-aware loss for one or more branches.
pub fn loss_conf_tape(
    tape: &mut Tape,
    branches: &[(PointmapPred, &Pointmap)],
    cfg: &LossConfig,
    s_hat: f64,
    s: f64,
) -> Result<Var> {
    cfg.validate()?;
    let s_hat = if cfg.metric_scale { s } else { s_hat };
    let mut total: Option<Var> = None;
    for (pred, gt) in branches {
        let idx: Vec<usize> =
            (0..gt.points().len()).filter(|&i| gt.valid()[i]).collect();
        if idx.is_empty() {
            continue;
        }
        let gt_scaled: Vec<f64> = idx
            .iter()
            .flat_map(|&i| {
                let p = gt.points()[i] / s;
                [p.x, p.y, p.z]
            })
            .collect();
        let x = tape.gather_rows(pred.points, &idx)?;
        let xs = tape.mul_scalar(x, 1.0 / s_hat);
        let gt_t = tape.leaf(Tensor::matrix(idx.len(), 3, gt_scaled)?);
        let diff = tape.sub(xs, gt_t)?;
        let sq = tape.mul(diff, diff)?;
        let row_sum = tape.sum_last(sq);
        let norm = tape.sqrt(row_sum);
        let c = tape.gather_rows(pred.confidence, &idx)?;
        let weighted = tape.mul(c, norm)?;
        let w_sum = tape.sum_all(weighted);
        let log_c = tape.log(c);
        let log_sum = tape.sum_all(log_c);
        let reg = tape.mul_scalar(log_sum, cfg.alpha);
        let branch = tape.sub(w_sum, reg)?;
        total = Some(match total {
            None => branch,
            Some(acc) => tape.add(acc, branch)?,
        });
    }
    total.ok_or_else(|| Error::invalid("loss_conf: no valid pixels"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_pm(rng: &mut ChaCha8Rng, h: usize, w: usize, with_conf: bool) -> Pointmap {
        let points: Vec<Vector3<f64>> = (0..h * w)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.5..3.0),
                )
            })
            .collect();
        let conf = with_conf
            .then(|| (0..h * w).map(|_| 1.0 + rng.random_range(0.0..2.0)).collect());
        Pointmap::dense(h, w, points, conf).unwrap()
    }

    fn rand_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let rot = UnitQuaternion::from_scaled_axis(axis);
        CameraPose::from_parts(
            rot,
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    #[test]
    fn scale_norm_examples() {
        let pm = Pointmap::dense(
            1,
            2,
            vec![Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 2.0)],
            None,
        )
        .unwrap();
        assert_eq!(scale_norm(&[&pm]).unwrap(), 2.0);

        let pm2 = Pointmap::dense(
            1,
            2,
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(3.0, 0.0, 0.0)],
            None,
        )
        .unwrap();
        assert_eq!(scale_norm(&[&pm2]).unwrap(), 2.0);
    }

    #[test]
    fn scale_norm_matches_flat_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let maps: Vec<Pointmap> = (0..3).map(|_| rand_pm(&mut rng, 4, 4, false)).collect();
        let refs: Vec<&Pointmap> = maps.iter().collect();
        let got = scale_norm(&refs).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for m in &maps {
            for p in m.points() {
                sum += (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
                n += 1;
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn scale_norm_rejects_all_invalid() {
        let pm =
            Pointmap::new(1, 1, vec![Vector3::zeros()], vec![false], None).unwrap();
        assert!(scale_norm(&[&pm]).is_err());
    }

    #[test]
    fn pose_loss_zero_at_perfect_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<CameraPose> = (0..4).map(|_| rand_pose(&mut rng)).collect();
        assert_eq!(loss_pose(&poses, &poses, 1.5, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn pose_loss_three_four_five() {
        let gt = CameraPose::identity();
        let pred = CameraPose::new([1.0, 0.0, 0.0, 0.0], [3.0, 4.0, 0.0]).unwrap();
        let loss = loss_pose(&[pred], &[gt], 1.0, 1.0).unwrap();
        assert!((loss - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_sign_canonicalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = rand_pose(&mut rng);
        let mut flipped = pose;
        for q in flipped.quat.iter_mut() {
            *q = -*q;
        }
        // same rotation, opposite sign: loss must still be zero
        assert!(loss_pose(&[flipped], &[pose], 1.0, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn pose_loss_rejects_bad_scales() {
        let p = CameraPose::identity();
        assert!(loss_pose(&[p], &[p], 0.0, 1.0).is_err());
        assert!(loss_pose(&[p], &[p], 1.0, -2.0).is_err());
    }

    #[test]
    fn pose_tape_matches_value_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gt: Vec<CameraPose> = (0..3).map(|_| rand_pose(&mut rng)).collect();
        let pred: Vec<CameraPose> = (0..3).map(|_| rand_pose(&mut rng)).collect();
        let want = loss_pose(&pred, &gt, 1.3, 0.9).unwrap();

        let mut tape = Tape::new();
        let preds: Vec<PosePred> = pred
            .iter()
            .map(|p| PosePred {
                quat: tape.leaf(Tensor::matrix(1, 4, p.quat.to_vec()).unwrap()),
                trans: tape.leaf(Tensor::matrix(1, 3, p.trans.to_vec()).unwrap()),
            })
            .collect();
        let loss = loss_pose_tape(&mut tape, &preds, &gt, 1.3, 0.9).unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn pose_translation_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = vec![rand_pose(&mut rng)];
        let quat_vals = rand_pose(&mut rng).quat.to_vec();
        let point = Tensor::matrix(1, 3, vec![0.3, -1.2, 0.7]).unwrap();
        let err = grad_check(
            |tape, trans| {
                let quat = tape.leaf(Tensor::matrix(1, 4, quat_vals.clone()).unwrap());
                loss_pose_tape(tape, &[PosePred { quat, trans }], &gt, 1.1, 0.8)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn conf_loss_zero_at_perfect_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gt = rand_pm(&mut rng, 3, 3, false);
        let pred = Pointmap::dense(3, 3, gt.points().to_vec(), Some(vec![1.0; 9])).unwrap();
        let cfg = LossConfig::default();
        assert_eq!(loss_conf(&[&pred], &[&gt], &cfg, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn conf_loss_single_pixel_error_norm() {
        let gt = Pointmap::dense(1, 1, vec![Vector3::zeros()], None).unwrap();
        let e = 0.37;
        let pred =
            Pointmap::dense(1, 1, vec![Vector3::new(e, 0.0, 0.0)], Some(vec![1.0])).unwrap();
        for alpha in [0.1, 0.2, 1.0] {
            let cfg = LossConfig { alpha, metric_scale: false };
            let loss = loss_conf(&[&pred], &[&gt], &cfg, 1.0, 1.0).unwrap();
            assert!((loss - e).abs() < 1e-12, "alpha {alpha}: {loss}");
        }
    }

    #[test]
    fn conf_tape_matches_value_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gt_self = rand_pm(&mut rng, 4, 4, false);
        let gt_global = rand_pm(&mut rng, 4, 4, false);
        let pred_self = rand_pm(&mut rng, 4, 4, true);
        let pred_global = rand_pm(&mut rng, 4, 4, true);
        let cfg = LossConfig::default();
        let (s_hat, s) = (1.7, 2.1);
        let want = loss_conf(
            &[&pred_self, &pred_global],
            &[&gt_self, &gt_global],
            &cfg,
            s_hat,
            s,
        )
        .unwrap();

        let mut tape = Tape::new();
        let branch = |tape: &mut Tape, pm: &Pointmap| PointmapPred {
            points: tape.leaf(
                Tensor::matrix(
                    16,
                    3,
                    pm.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
                )
                .unwrap(),
            ),
            confidence: tape.leaf(Tensor::vector(pm.confidence().unwrap().to_vec())),
        };
        let b_self = branch(&mut tape, &pred_self);
        let b_global = branch(&mut tape, &pred_global);
        let loss = loss_conf_tape(
            &mut tape,
            &[(b_self, &gt_self), (b_global, &gt_global)],
            &cfg,
            s_hat,
            s,
        )
        .unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn conf_gradient_wrt_points_and_raw_confidence_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let gt = rand_pm(&mut rng, 2, 3, false);
        let cfg = LossConfig::default();

        // w.r.t. predicted points (full L_conf)
        let raw_conf: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let points = Tensor::matrix(
            6,
            3,
            (0..18).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let gt_cl = gt.clone();
        let rc = raw_conf.clone();
        let err = grad_check(
            |tape, pts| {
                let raw = tape.leaf(Tensor::vector(rc.clone()));
                let e = tape.exp(raw);
                let c = tape.add_scalar(e, 1.0);
                loss_conf_tape(
                    tape,
                    &[(PointmapPred { points: pts, confidence: c }, &gt_cl)],
                    &cfg,
                    1.2,
                    0.9,
                )
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "points grad err = {err}");

        // w.r.t. raw confidence
        let pts_vals = points.clone();
        let gt_cl2 = gt.clone();
        let err = grad_check(
            |tape, raw| {
                let pts = tape.leaf(pts_vals.clone());
                let e = tape.exp(raw);
                let c = tape.add_scalar(e, 1.0);
                loss_conf_tape(
                    tape,
                    &[(PointmapPred { points: pts, confidence: c }, &gt_cl2)],
                    &cfg,
                    1.2,
                    0.9,
                )
            },
            &Tensor::vector(raw_conf),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conf grad err = {err}");
    }

    #[test]
    fn non_metric_loss_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = LossConfig::default();
        for _ in 0..100 {
            let gt = rand_pm(&mut rng, 3, 3, false);
            let pred = rand_pm(&mut rng, 3, 3, true);
            let s = scale_norm(&[&gt]).unwrap();
            let s_hat = scale_norm(&[&pred]).unwrap();
            let base = loss_conf(&[&pred], &[&gt], &cfg, s_hat, s).unwrap();

            let lambda = rng.random_range(0.1..8.0);
            let scaled = Pointmap::dense(
                3,
                3,
                pred.points().iter().map(|p| lambda * p).collect(),
                pred.confidence().map(|c| c.to_vec()),
            )
            .unwrap();
            let s_hat_scaled = scale_norm(&[&scaled]).unwrap();
            let after = loss_conf(&[&scaled], &[&gt], &cfg, s_hat_scaled, s).unwrap();
            assert!(
                (base - after).abs() < 1e-10 * base.abs().max(1.0),
                "lambda {lambda}: {base} vs {after}"
            );
        }
    }

    #[test]
    fn metric_mode_breaks_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let cfg = LossConfig { alpha: 0.2, metric_scale: true };
        for _ in 0..100 {
            let gt = rand_pm(&mut rng, 3, 3, false);
            let pred = rand_pm(&mut rng, 3, 3, true);
            let s = scale_norm(&[&gt]).unwrap();
            let base = loss_conf(&[&pred], &[&gt], &cfg, 12345.0, s).unwrap();
            let lambda = rng.random_range(1.5..4.0);
            let scaled = Pointmap::dense(
                3,
                3,
                pred.points().iter().map(|p| lambda * p).collect(),
                pred.confidence().map(|c| c.to_vec()),
            )
            .unwrap();
            // ŝ argument is ignored in metric mode
            let after = loss_conf(&[&scaled], &[&gt], &cfg, 99.0, s).unwrap();
            assert!(
                (base - after).abs() > 1e-6,
                "metric loss unchanged under scaling: {base} vs {after}"
            );
        }
    }

    #[test]
    fn conf_loss_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let gt = rand_pm(&mut rng, 3, 3, false);
            let pred = rand_pm(&mut rng, 3, 3, true);
            let loss = loss_conf(&[&pred], &[&gt], &cfg, 1.0, 1.0).unwrap();
            let bound: f64 =
                -cfg.alpha * pred.confidence().unwrap().iter().map(|c| c.ln()).sum::<f64>();
            assert!(loss >= bound - 1e-12);
        }
        // equality iff every error is zero
        let gt = rand_pm(&mut rng, 2, 2, false);
        let conf: Vec<f64> = (0..4).map(|_| 1.0 + rng.random_range(0.0..1.0)).collect();
        let pred = Pointmap::dense(2, 2, gt.points().to_vec(), Some(conf.clone())).unwrap();
        let loss = loss_conf(&[&pred], &[&gt], &cfg, 1.0, 1.0).unwrap();
        let bound: f64 = -cfg.alpha * conf.iter().map(|c| c.ln()).sum::<f64>();
        assert!((loss - bound).abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let points = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(50.0, 0.0, 0.0)];
        let gt = Pointmap::new(1, 2, vec![Vector3::zeros(); 2], vec![true, false], None).unwrap();
        let pred = Pointmap::dense(1, 2, points, Some(vec![1.0, 1.0])).unwrap();
        let cfg = LossConfig::default();
        let loss = loss_conf(&[&pred], &[&gt], &cfg, 1.0, 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12, "masked pixel leaked into the loss");
    }
}
