//! The streaming reconstruction loop, the overfit trainer, evaluation and
//! the fuse-bench harness.
//!
//! Frames are consumed strictly in order: the loop fetches index t only
//! after frame t−1 is fully processed, so the memory state a frame decodes
//! against is always M_{t−1}.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Pointmap};
use crate::losses::{loss_conf_tape, loss_pose_tape, scale_norm, LossConfig};
use crate::memory::{NnBackend, SpatialPointerMemory, DEFAULT_L};
use crate::metrics::{cloud_metrics, depth_metrics, grid_normals, traj_metrics};
use crate::model::{pointmap_from_vars, pose_from_vars, Model};
use crate::synth::{oracle_frontend, Frame};
use crate::tensor::Tape;

/// Sequential frame supplier. `fetch` is called exactly once per index,
/// in increasing order; implementations may release a frame after serving
/// it.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn fetch(&mut self, idx: usize) -> Result<Frame>;
}

pub struct VecFrameSource {
    frames: Vec<Option<Frame>>,
}

impl VecFrameSource {
    pub fn new(frames: Vec<Frame>) -> Self {
        VecFrameSource { frames: frames.into_iter().map(Some).collect() }
    }
}

impl FrameSource for VecFrameSource {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn fetch(&mut self, idx: usize) -> Result<Frame> {
        self.frames
            .get_mut(idx)
            .and_then(Option::take)
            .ok_or_else(|| Error::data(format!("frame {idx} unavailable or already served")))
    }
}

/// What produces per-frame geometry: the learned model, or the oracle
/// frontend (ground truth + noise) that isolates the memory machinery.
pub enum Frontend<'a> {
    Model(&'a Model),
    Oracle { sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamOptions {
    pub fusion: bool,
    pub l: [f64; 3],
    pub nn_backend: NnBackend,
    /// Patch size for oracle-mode pointer extraction.
    pub patch: usize,
    pub snapshot_every: Option<usize>,
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            fusion: true,
            l: DEFAULT_L,
            nn_backend: NnBackend::BruteForce,
            patch: 8,
            snapshot_every: None,
            snapshot_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub pose: CameraPose,
    pub pose_fallback: bool,
    pub pointers: usize,
    pub fused: usize,
    pub appended: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub records: Vec<FrameRecord>,
    pub outputs: Vec<String>,
}

pub struct FrameResult {
    pub pose: CameraPose,
    pub self_pm: Pointmap,
    pub global_pm: Pointmap,
}

pub struct RunOutput {
    pub frames: Vec<FrameResult>,
    pub memory: SpatialPointerMemory,
    pub manifest: RunManifest,
}

fn frame_seed(base: u64, frame: usize) -> u64 {
    base ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Run the streaming loop: per frame, produce (self, global, pose), then
/// grow or fuse the spatial pointer memory.
pub fn reconstruct_stream(
    source: &mut dyn FrameSource,
    frontend: &Frontend,
    opts: &StreamOptions,
) -> Result<RunOutput> {
    if source.len() == 0 {
        return Err(Error::invalid("reconstruct_stream needs at least one frame"));
    }
    let mut memory = SpatialPointerMemory::with_l(opts.l);
    memory.backend = opts.nn_backend;
    let mut results: Vec<FrameResult> = Vec::with_capacity(source.len());
    let mut records = Vec::with_capacity(source.len());
    let mut outputs = Vec::new();
    let mut prev_global: Option<Pointmap> = None;

    for t in 0..source.len() {
        let frame = source.fetch(t)?;
        let started = Instant::now();
        let (result, pose_fallback, new_pointers, placeholder) = match frontend {
            Frontend::Oracle { sigma, seed } => {
                let (global_pm, pointers) =
                    oracle_frontend(&frame, *sigma, frame_seed(*seed, t), opts.patch)?;
                let pose = frame.gt_pose;
                let inv = pose.inverse();
                let self_pm = global_pm.map_points(|p| inv.transform(p));
                (FrameResult { pose, self_pm, global_pm }, false, pointers, None)
            }
            Frontend::Model(model) => {
                let [h, w] = model.cfg.image_size;
                if frame.height() != h || frame.width() != w {
                    return Err(Error::data(format!(
                        "frame {t}: image {}x{} does not match model {h}x{w}",
                        frame.height(),
                        frame.width()
                    )));
                }
                let mut tape = Tape::new();
                let sw = model.stage(&mut tape);
                let out = model.forward_frame(
                    &mut tape,
                    &sw,
                    &frame.pixels,
                    prev_global.as_ref(),
                    &memory,
                    t,
                )?;
                let pose = pose_from_vars(&tape, &out.pose)?;
                let self_pm = pointmap_from_vars(&tape, &out.self_pred, model.cfg.image_size)?;
                let global_pm =
                    pointmap_from_vars(&tape, &out.global_pred, model.cfg.image_size)?;
                let placeholder = out.first_memory.map(|m0| {
                    let vals = tape.value(m0).data();
                    let d = model.cfg.d_model;
                    vals.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>()
                });
                (
                    FrameResult { pose, self_pm, global_pm },
                    out.pose_fallback,
                    out.new_pointers,
                    placeholder,
                )
            }
        };

        let (fused, appended) = if t == 0 {
            if let Some(features) = placeholder {
                memory.init_placeholder(features)?;
            }
            let n = new_pointers.len();
            memory.ingest_first_frame(new_pointers)?;
            (0, n)
        } else if opts.fusion {
            let report = memory.fuse(new_pointers, t)?;
            (report.fused, report.appended)
        } else {
            let n = new_pointers.len();
            memory.append_all(new_pointers, t)?;
            (0, n)
        };

        let millis = started.elapsed().as_secs_f64() * 1e3;
        records.push(FrameRecord {
            frame: t,
            pose: result.pose,
            pose_fallback,
            pointers: memory.len(),
            fused,
            appended,
            millis,
        });

        if let (Some(every), Some(dir)) = (opts.snapshot_every, &opts.snapshot_dir) {
            if every > 0 && (t + 1) % every == 0 {
                let path = dir.join(format!("snapshot_{t:04}"));
                memory.save_snapshot(&path)?;
                outputs.push(path.display().to_string());
            }
        }

        prev_global = Some(result.global_pm.clone());
        results.push(result);
    }

    let config = serde_json::to_value(opts)?;
    Ok(RunOutput {
        frames: results,
        memory,
        manifest: RunManifest { config, records, outputs },
    })
}

/// Flat JSON evaluation report; key order is the CLI table order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
    pub abs_rel: f64,
    pub inlier_125: f64,
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let rows = [
            ("acc_mean", self.acc_mean),
            ("acc_median", self.acc_median),
            ("comp_mean", self.comp_mean),
            ("comp_median", self.comp_median),
            ("nc_mean", self.nc_mean),
            ("nc_median", self.nc_median),
            ("abs_rel", self.abs_rel),
            ("inlier_125", self.inlier_125),
            ("ate", self.ate),
            ("rpe_trans", self.rpe_trans),
            ("rpe_rot", self.rpe_rot),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<12} {value:.6}\n"));
        }
        out
    }
}

/// Merge per-frame outputs into clouds and compute the full metric suite
/// against the ground-truth scene.
pub fn evaluate(run: &RunOutput, gt: &[Frame]) -> Result<EvalReport> {
    if run.frames.len() != gt.len() {
        return Err(Error::invalid(format!(
            "run has {} frames, scene has {}",
            run.frames.len(),
            gt.len()
        )));
    }
    let mut pred_cloud = Vec::new();
    let mut pred_normals = Vec::new();
    let mut gt_cloud = Vec::new();
    let mut gt_normals = Vec::new();
    let mut abs_rel_sum = 0.0;
    let mut inlier_sum = 0.0;

    for (res, frame) in run.frames.iter().zip(gt) {
        // predictions count where both the prediction and the gt are valid
        let pn = grid_normals(&res.global_pm);
        let gn = grid_normals(&frame.gt_global);
        for i in 0..res.global_pm.points().len() {
            if res.global_pm.valid()[i] && frame.gt_global.valid()[i] {
                pred_cloud.push(res.global_pm.points()[i]);
                pred_normals.push(pn[i]);
            }
            if frame.gt_global.valid()[i] {
                gt_cloud.push(frame.gt_global.points()[i]);
                gt_normals.push(gn[i]);
            }
        }
        let pred_depth: Vec<f64> = res.self_pm.points().iter().map(|p| p.z).collect();
        let dm = depth_metrics(&pred_depth, &frame.depth, true)?;
        abs_rel_sum += dm.abs_rel;
        inlier_sum += dm.inlier_125;
    }
    let cm = cloud_metrics(&pred_cloud, &pred_normals, &gt_cloud, &gt_normals)?;
    let pred_poses: Vec<CameraPose> = run.frames.iter().map(|f| f.pose).collect();
    let gt_poses: Vec<CameraPose> = gt.iter().map(|f| f.gt_pose).collect();
    let tm = traj_metrics(&pred_poses, &gt_poses)?;
    let nf = gt.len() as f64;
    Ok(EvalReport {
        acc_mean: cm.acc_mean,
        acc_median: cm.acc_median,
        comp_mean: cm.comp_mean,
        comp_median: cm.comp_median,
        nc_mean: cm.nc_mean,
        nc_median: cm.nc_median,
        abs_rel: abs_rel_sum / nf,
        inlier_125: inlier_sum / nf,
        ate: tm.ate,
        rpe_trans: tm.rpe_trans,
        rpe_rot: tm.rpe_rot,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub stream: StreamOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 2e-3,
            loss: LossConfig { alpha: 0.2, metric_scale: true },
            stream: StreamOptions::default(),
        }
    }
}

/// Plain gradient descent on L_pose + L_conf over repeated passes of one
/// short sequence. Each pass re-runs the stream (memory rebuilt from the
/// current weights); gradients are truncated at frame boundaries — the
/// memory enters each frame as a constant.
pub fn train_overfit(model: &mut Model, frames: &[Frame], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::invalid("train_overfit needs steps >= 1"));
    }
    if frames.is_empty() {
        return Err(Error::invalid("train_overfit needs frames"));
    }
    let gt_globals: Vec<&Pointmap> = frames.iter().map(|f| &f.gt_global).collect();
    let s = scale_norm(&gt_globals)?;

    let names: Vec<String> = model.weights.names().to_vec();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: HashMap<&str, Vec<f64>> = names
            .iter()
            .map(|n| (n.as_str(), vec![0.0; model.weights.get(n).numel()]))
            .collect();
        let mut total = 0.0;

        let mut memory = SpatialPointerMemory::with_l(cfg.stream.l);
        memory.backend = cfg.stream.nn_backend;
        let mut prev_global: Option<Pointmap> = None;
        for (t, frame) in frames.iter().enumerate() {
            let mut tape = Tape::new();
            let sw = model.stage(&mut tape);
            let out = model.forward_frame(
                &mut tape,
                &sw,
                &frame.pixels,
                prev_global.as_ref(),
                &memory,
                t,
            )?;

            // In metric mode ŝ is pinned to s inside the losses; otherwise
            // normalize this frame's prediction by its own mean norm.
            let s_hat = if cfg.loss.metric_scale {
                s
            } else {
                let pm = pointmap_from_vars(&tape, &out.global_pred, model.cfg.image_size)?;
                scale_norm(&[&pm])?
            };
            let lp = loss_pose_tape(&mut tape, &[out.pose], &[frame.gt_pose], s_hat, s)?;
            let lc = loss_conf_tape(
                &mut tape,
                &[(out.self_pred, &frame.gt_self), (out.global_pred, &frame.gt_global)],
                &cfg.loss,
                s_hat,
                s,
            )?;
            let loss = tape.add(lp, lc)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at step {step}, frame {t}"
                )));
            }
            total += loss_value;
            tape.backward(loss)?;
            for name in &names {
                let g = tape.grad(sw.var(name));
                for (acc, &x) in grads.get_mut(name.as_str()).unwrap().iter_mut().zip(g) {
                    *acc += x;
                }
            }

            // memory update with detached values
            let global_pm = pointmap_from_vars(&tape, &out.global_pred, model.cfg.image_size)?;
            if t == 0 {
                if let Some(m0) = out.first_memory {
                    let d = model.cfg.d_model;
                    let feats =
                        tape.value(m0).data().chunks(d).map(|c| c.to_vec()).collect();
                    memory.init_placeholder(feats)?;
                }
                memory.ingest_first_frame(out.new_pointers)?;
            } else if cfg.stream.fusion {
                memory.fuse(out.new_pointers, t)?;
            } else {
                memory.append_all(out.new_pointers, t)?;
            }
            prev_global = Some(global_pm);
        }

        for name in &names {
            let g = &grads[name.as_str()];
            let w = model.weights.get_mut(name);
            for (wv, &gv) in w.data_mut().iter_mut().zip(g) {
                *wv -= cfg.lr * gv;
            }
        }
        curve.push(total);
    }
    Ok(curve)
}

/// CSV for the pointer-count/runtime harness: `frame,pointers,fused,appended,ms`.
pub fn write_fuse_csv(records: &[FrameRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("frame,pointers,fused,appended,ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.frame, r.pointers, r.fused, r.appended, r.millis
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
