//! Scene directory format.
//!
//! ```text
//! scene/
//!   manifest.json          spec echo, frame count, image shape
//!   poses.json             per-frame camera poses
//!   frame_0000/
//!     pixels.bin           H·W·3 f64, little-endian, row-major
//!     points_self.bin      H·W·3 f64; invalid pixels are NaN triples
//!     points_global.bin    H·W·3 f64; invalid pixels are NaN triples
//!     depth.bin            H·W f64; NaN where no hit
//! ```

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Pointmap};

use super::{Frame, SceneSpec};

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    spec: SceneSpec,
    frames: usize,
    height: usize,
    width: usize,
}

fn write_f64(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f64(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect * 8 {
        return Err(Error::data(format!(
            "{}: expected {expect} f64 values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn pointmap_values(pm: &Pointmap) -> impl Iterator<Item = f64> + '_ {
    pm.points().iter().zip(pm.valid()).flat_map(|(p, &v)| {
        if v {
            [p.x, p.y, p.z]
        } else {
            [f64::NAN; 3]
        }
    })
}

fn pointmap_from_values(h: usize, w: usize, values: &[f64]) -> Result<Pointmap> {
    let mut points = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for c in values.chunks_exact(3) {
        let p = Vector3::new(c[0], c[1], c[2]);
        let ok = p.x.is_finite() && p.y.is_finite() && p.z.is_finite();
        points.push(if ok { p } else { Vector3::zeros() });
        valid.push(ok);
    }
    Pointmap::new(h, w, points, valid, None)
}

pub fn save_scene(dir: &Path, spec: &SceneSpec, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = match frames.first() {
        Some(f) => (f.height(), f.width()),
        None => return Err(Error::invalid("cannot save an empty scene")),
    };
    let manifest = SceneManifest { spec: spec.clone(), frames: frames.len(), height: h, width: w };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let poses: Vec<CameraPose> = frames.iter().map(|f| f.gt_pose).collect();
    std::fs::write(dir.join("poses.json"), serde_json::to_string_pretty(&poses)?)?;

    for (t, frame) in frames.iter().enumerate() {
        let fdir = dir.join(format!("frame_{t:04}"));
        std::fs::create_dir_all(&fdir)?;
        write_f64(&fdir.join("pixels.bin"), frame.pixels.iter().cloned())?;
        write_f64(&fdir.join("points_self.bin"), pointmap_values(&frame.gt_self))?;
        write_f64(&fdir.join("points_global.bin"), pointmap_values(&frame.gt_global))?;
        write_f64(&fdir.join("depth.bin"), frame.depth.iter().cloned())?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<(SceneSpec, Vec<Frame>)> {
    let manifest: SceneManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let poses: Vec<CameraPose> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("poses.json"))?)?;
    if poses.len() != manifest.frames {
        return Err(Error::data("pose count does not match manifest"));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut frames = Vec::with_capacity(manifest.frames);
    for (t, pose) in poses.into_iter().enumerate() {
        let fdir = dir.join(format!("frame_{t:04}"));
        let pixels = read_f64(&fdir.join("pixels.bin"), h * w * 3)?;
        let self_vals = read_f64(&fdir.join("points_self.bin"), h * w * 3)?;
        let global_vals = read_f64(&fdir.join("points_global.bin"), h * w * 3)?;
        let depth = read_f64(&fdir.join("depth.bin"), h * w)?;
        frames.push(Frame {
            pixels,
            gt_self: pointmap_from_values(h, w, &self_vals)?,
            gt_global: pointmap_from_values(h, w, &global_vals)?,
            gt_pose: pose,
            depth,
        });
    }
    Ok((manifest.spec, frames))
}
