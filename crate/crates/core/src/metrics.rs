//! Evaluation metrics: point-cloud accuracy/completion/normal-consistency,
//! depth error with per-frame median scaling, and trajectory errors after
//! Sim(3) Umeyama alignment.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{umeyama_sim3, CameraPose, Pointmap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajMetrics {
    /// RMSE of aligned positions, meters.
    pub ate: f64,
    /// RMSE of consecutive relative-translation deltas, meters.
    pub rpe_trans: f64,
    /// RMSE of consecutive relative-rotation angles, degrees.
    pub rpe_rot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub inlier_125: f64,
}

/// Median with the even-size convention: mean of the two central values.
fn median(values: &mut Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn nearest_index(query: &Vector3<f64>, cloud: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in cloud.iter().enumerate() {
        let d = (p - query).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Accuracy (pred→gt NN distance), completion (gt→pred NN distance) and
/// normal consistency (absolute cosine between a point's normal and its
/// nearest neighbor's, pooled over both directions).
pub fn cloud_metrics(
    pred: &[Vector3<f64>],
    pred_normals: &[Option<Vector3<f64>>],
    gt: &[Vector3<f64>],
    gt_normals: &[Option<Vector3<f64>>],
) -> Result<CloudMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("cloud_metrics on an empty cloud"));
    }
    if pred.len() != pred_normals.len() || gt.len() != gt_normals.len() {
        return Err(Error::invalid("normals length mismatch"));
    }
    let mut acc = Vec::with_capacity(pred.len());
    let mut comp = Vec::with_capacity(gt.len());
    let mut cosines = Vec::new();

    for (p, n) in pred.iter().zip(pred_normals) {
        let (j, d) = nearest_index(p, gt);
        acc.push(d);
        if let (Some(a), Some(b)) = (n, gt_normals[j]) {
            cosines.push(a.dot(&b).abs().min(1.0));
        }
    }
    for (p, n) in gt.iter().zip(gt_normals) {
        let (j, d) = nearest_index(p, pred);
        comp.push(d);
        if let (Some(a), Some(b)) = (n, pred_normals[j]) {
            cosines.push(a.dot(&b).abs().min(1.0));
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (nc_mean, nc_median) = if cosines.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (mean(&cosines), median(&mut cosines.clone()))
    };
    Ok(CloudMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&mut acc.clone()),
        comp_mean: mean(&comp),
        comp_median: median(&mut comp.clone()),
        nc_mean,
        nc_median,
    })
}

/// Per-pixel unit normals from central differences of the point grid.
/// Pixels whose four neighbors are not all valid get no normal.
pub fn grid_normals(pm: &Pointmap) -> Vec<Option<Vector3<f64>>> {
    let (h, w) = (pm.height, pm.width);
    let mut normals = vec![None; h * w];
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let (left, lv) = pm.at(i, j - 1);
            let (right, rv) = pm.at(i, j + 1);
            let (up, uv) = pm.at(i - 1, j);
            let (down, dv) = pm.at(i + 1, j);
            let (_, cv) = pm.at(i, j);
            if !(lv && rv && uv && dv && cv) {
                continue;
            }
            let dx = right - left;
            let dy = down - up;
            let n = dx.cross(&dy);
            let norm = n.norm();
            if norm > 1e-12 {
                normals[i * w + j] = Some(n / norm);
            }
        }
    }
    normals
}

/// Absolute relative error and δ<1.25 inlier rate over valid pixels
/// (gt > 0 and finite). Median scaling rescales pred by
/// median(gt)/median(pred) first.
pub fn depth_metrics(
    pred: &[f64],
    gt: &[f64],
    per_frame_median_scaling: bool,
) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("depth map sizes differ"));
    }
    let valid: Vec<usize> = (0..gt.len())
        .filter(|&i| gt[i] > 0.0 && gt[i].is_finite() && pred[i].is_finite())
        .collect();
    if valid.is_empty() {
        return Err(Error::invalid("depth_metrics: no valid pixels"));
    }
    let scale = if per_frame_median_scaling {
        let med_gt = median(&mut valid.iter().map(|&i| gt[i]).collect());
        let med_pred = median(&mut valid.iter().map(|&i| pred[i]).collect());
        if med_pred <= 0.0 {
            return Err(Error::numeric("median predicted depth is not positive"));
        }
        med_gt / med_pred
    } else {
        1.0
    };
    let mut abs_rel = 0.0;
    let mut inliers = 0usize;
    for &i in &valid {
        let p = pred[i] * scale;
        abs_rel += (p - gt[i]).abs() / gt[i];
        if p > 0.0 && (p / gt[i]).max(gt[i] / p) < 1.25 {
            inliers += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / valid.len() as f64,
        inlier_125: inliers as f64 / valid.len() as f64,
    })
}

/// ATE and RPE after Sim(3) Umeyama alignment of the predicted positions
/// onto the ground truth.
pub fn traj_metrics(pred: &[CameraPose], gt: &[CameraPose]) -> Result<TrajMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("trajectory lengths differ"));
    }
    if pred.len() < 3 {
        return Err(Error::invalid("traj_metrics needs at least 3 poses"));
    }
    let pred_pos: Vec<Vector3<f64>> = pred.iter().map(|p| p.translation()).collect();
    let gt_pos: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation()).collect();
    let sim = umeyama_sim3(&pred_pos, &gt_pos)?;

    let aligned_pos: Vec<Vector3<f64>> = pred_pos.iter().map(|p| sim.apply(p)).collect();
    let ate = (aligned_pos
        .iter()
        .zip(&gt_pos)
        .map(|(a, g)| (a - g).norm_squared())
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt();

    // Aligned orientation: R_align · R_i. Relative rotations cancel the
    // global factor; relative translations keep the alignment scale.
    let n_rel = pred.len() - 1;
    let mut trans_sq = 0.0;
    let mut rot_sq = 0.0;
    for i in 0..n_rel {
        let dp_pred = sim.scale
            * (pred[i].rotation().inverse() * (pred_pos[i + 1] - pred_pos[i]));
        let dp_gt = gt[i].rotation().inverse() * (gt_pos[i + 1] - gt_pos[i]);
        trans_sq += (dp_pred - dp_gt).norm_squared();

        let dr_pred = pred[i].rotation().inverse() * pred[i + 1].rotation();
        let dr_gt = gt[i].rotation().inverse() * gt[i + 1].rotation();
        let angle = (dr_pred.inverse() * dr_gt).angle();
        rot_sq += angle * angle;
    }
    Ok(TrajMetrics {
        ate,
        rpe_trans: (trans_sq / n_rel as f64).sqrt(),
        rpe_rot: (rot_sq / n_rel as f64).sqrt().to_degrees(),
    })
}
