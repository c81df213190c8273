//! Explicit spatial pointer memory: storage, nearest-neighbor search,
//! the adaptive fusion threshold δ and the fusion update.
//!
//! Each pointer pairs a 3D position in the global frame with a feature
//! vector. New pointers from a frame either overwrite their nearest
//! neighbor (when closer than δ, positions and features replaced by the
//! mean of the newcomers that chose it) or are appended. δ is derived
//! from the memory extent: δ = √(Σ_axis ((max−min)/l_axis)²).

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One element of the spatial pointer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointer {
    /// Global-frame position; `None` only for the frame-0 placeholder.
    pub position: Option<Vector3<f64>>,
    pub feature: Vec<f64>,
    /// Frame index of the last write to this pointer.
    pub last_update: usize,
}

impl Pointer {
    pub fn new(position: Vector3<f64>, feature: Vec<f64>, frame: usize) -> Result<Self> {
        if !(position.x.is_finite() && position.y.is_finite() && position.z.is_finite()) {
            return Err(Error::invalid("pointer position must be finite"));
        }
        Ok(Pointer { position: Some(position), feature, last_update: frame })
    }

    pub fn placeholder(feature: Vec<f64>) -> Self {
        Pointer { position: None, feature, last_update: 0 }
    }
}

/// Outcome counts of one fusion batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionReport {
    pub fused: usize,
    pub appended: usize,
}

/// Nearest-neighbor backend used inside [`SpatialPointerMemory::fuse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnBackend {
    #[default]
    BruteForce,
    /// Uniform grid with cell size δ; exact, asserted against brute force.
    Grid,
}

/// The growing, fusable pointer set M_t.
#[derive(Debug, Clone)]
pub struct SpatialPointerMemory {
    pointers: Vec<Pointer>,
    /// Per-axis (min, max) over non-null positions.
    extent: Option<[(f64, f64); 3]>,
    /// Per-axis divisors (l_x, l_y, l_z) for the fusion threshold.
    pub l: [f64; 3],
    pub backend: NnBackend,
    first_frame_done: bool,
}

pub const DEFAULT_L: [f64; 3] = [20.0, 20.0, 20.0];

impl SpatialPointerMemory {
    pub fn new() -> Self {
        SpatialPointerMemory {
            pointers: Vec::new(),
            extent: None,
            l: DEFAULT_L,
            backend: NnBackend::BruteForce,
            first_frame_done: false,
        }
    }

    pub fn with_l(l: [f64; 3]) -> Self {
        SpatialPointerMemory { l, ..SpatialPointerMemory::new() }
    }

    /// Seed the memory with position-less placeholder features (M_0).
    pub fn init_placeholder(&mut self, features: Vec<Vec<f64>>) -> Result<()> {
        if !self.pointers.is_empty() || self.first_frame_done {
            return Err(Error::invalid("placeholder init on a non-empty memory"));
        }
        self.pointers = features.into_iter().map(Pointer::placeholder).collect();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pointers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pointers.is_empty()
    }

    pub fn pointers(&self) -> &[Pointer] {
        &self.pointers
    }

    pub fn extent(&self) -> Option<[(f64, f64); 3]> {
        self.extent
    }

    fn recompute_extent(&mut self) {
        self.extent = None;
        for ptr in &self.pointers {
            if let Some(p) = ptr.position {
                match &mut self.extent {
                    None => {
                        self.extent = Some([(p.x, p.x), (p.y, p.y), (p.z, p.z)]);
                    }
                    Some(ext) => {
                        for (axis, e) in ext.iter_mut().enumerate() {
                            e.0 = e.0.min(p[axis]);
                            e.1 = e.1.max(p[axis]);
                        }
                    }
                }
            }
        }
    }

    /// δ over the current memory state; `None` when no pointer has a
    /// position yet (fusion must be skipped, everything appended).
    pub fn fusion_threshold(&self) -> Option<f64> {
        self.extent.map(|ext| {
            ext.iter()
                .zip(&self.l)
                .map(|((lo, hi), l)| {
                    let d = (hi - lo) / l;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
    }

    /// Index and distance of the pointer nearest to `query`; ties break
    /// toward the lowest index. Placeholder pointers are never candidates.
    pub fn nearest_neighbor(&self, query: &Vector3<f64>) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, ptr) in self.pointers.iter().enumerate() {
            if let Some(p) = ptr.position {
                let d = (p - query).norm();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
        }
        best.ok_or_else(|| Error::invalid("nearest_neighbor on memory without positions"))
    }

    /// First frame: drop the placeholder and append every pointer as-is.
    pub fn ingest_first_frame(&mut self, pointers: Vec<Pointer>) -> Result<()> {
        if self.first_frame_done {
            return Err(Error::invalid("ingest_first_frame called twice"));
        }
        if self.pointers.iter().any(|p| p.position.is_some()) {
            return Err(Error::invalid("memory already holds positioned pointers"));
        }
        if pointers.iter().any(|p| p.position.is_none()) {
            return Err(Error::invalid("first-frame pointers must have positions"));
        }
        self.pointers = pointers;
        self.first_frame_done = true;
        self.recompute_extent();
        Ok(())
    }

    /// Append every pointer without fusion (the `--no-fusion` path).
    pub fn append_all(&mut self, new_pointers: Vec<Pointer>, frame: usize) -> Result<()> {
        if new_pointers.iter().any(|p| p.position.is_none()) {
            return Err(Error::invalid("append_all requires positioned pointers"));
        }
        for ptr in new_pointers {
            self.pointers.push(Pointer { last_update: frame, ..ptr });
        }
        self.recompute_extent();
        Ok(())
    }

    /// Fuse a batch of new pointers into the memory.
    ///
    /// δ and all nearest-neighbor queries use the pre-fusion snapshot.
    /// Newcomers within δ of their nearest neighbor are grouped onto it;
    /// that pointer is then overwritten with the plain mean of its group
    /// (old value excluded). The rest are appended in input order.
    pub fn fuse(&mut self, new_pointers: Vec<Pointer>, frame: usize) -> Result<FusionReport> {
        if new_pointers.iter().any(|p| p.position.is_none()) {
            return Err(Error::invalid("fuse requires positioned pointers"));
        }
        let delta = self.fusion_threshold();
        let snapshot_len = self.pointers.len();

        // target index per newcomer, resolved against the snapshot
        let mut targets: Vec<Option<usize>> = vec![None; new_pointers.len()];
        if let Some(delta) = delta {
            if delta > 0.0 {
                let grid = match self.backend {
                    NnBackend::Grid => Some(GridIndex::build(&self.pointers, delta)),
                    NnBackend::BruteForce => None,
                };
                for (t, ptr) in targets.iter_mut().zip(&new_pointers) {
                    let q = ptr.position.unwrap();
                    let found = match &grid {
                        Some(g) => g.nearest_within(&self.pointers, &q, delta),
                        None => {
                            let (idx, dist) = self.nearest_neighbor(&q)?;
                            (dist < delta).then_some(idx)
                        }
                    };
                    *t = found;
                }
            }
        }

        // group newcomers per target, in input order
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); snapshot_len];
        let mut appended = 0usize;
        let mut fused = 0usize;
        for (i, t) in targets.iter().enumerate() {
            match t {
                Some(idx) => {
                    groups[*idx].push(i);
                    fused += 1;
                }
                None => appended += 1,
            }
        }
        for (idx, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let k = group.len() as f64;
            let mut pos_sum = Vector3::zeros();
            let mut feat_sum = vec![0.0; new_pointers[group[0]].feature.len()];
            for &gi in group {
                pos_sum += new_pointers[gi].position.unwrap();
                for (acc, &f) in feat_sum.iter_mut().zip(&new_pointers[gi].feature) {
                    *acc += f;
                }
            }
            self.pointers[idx].position = Some(pos_sum / k);
            for f in feat_sum.iter_mut() {
                *f /= k;
            }
            self.pointers[idx].feature = feat_sum;
            self.pointers[idx].last_update = frame;
        }
        for (i, ptr) in new_pointers.into_iter().enumerate() {
            if targets[i].is_none() {
                self.pointers.push(Pointer { last_update: frame, ..ptr });
            }
        }
        self.recompute_extent();
        Ok(FusionReport { fused, appended })
    }

    // ── serialization ───────────────────────────────────────────────

    /// Write a snapshot: `manifest.json` + `positions.bin` (f64 N×3,
    /// little-endian, NaN triple for null) + `features.bin` (f64 N×d).
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let d_mem = self.pointers.first().map_or(0, |p| p.feature.len());
        if self.pointers.iter().any(|p| p.feature.len() != d_mem) {
            return Err(Error::data("inconsistent feature widths in memory"));
        }
        let manifest = SnapshotManifest {
            count: self.pointers.len(),
            d_mem,
            null_positions: self.pointers.iter().filter(|p| p.position.is_none()).count(),
            extent: self.extent.map(|e| e.map(|(lo, hi)| [lo, hi])),
            l: self.l,
            last_updates: self.pointers.iter().map(|p| p.last_update).collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

        let mut pos_bytes = Vec::with_capacity(self.pointers.len() * 24);
        for p in &self.pointers {
            let v = p.position.unwrap_or_else(|| Vector3::new(f64::NAN, f64::NAN, f64::NAN));
            for axis in 0..3 {
                pos_bytes.extend_from_slice(&v[axis].to_le_bytes());
            }
        }
        std::fs::write(dir.join("positions.bin"), pos_bytes)?;

        let mut feat_bytes = Vec::with_capacity(self.pointers.len() * d_mem * 8);
        for p in &self.pointers {
            for &f in &p.feature {
                feat_bytes.extend_from_slice(&f.to_le_bytes());
            }
        }
        std::fs::write(dir.join("features.bin"), feat_bytes)?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let manifest: SnapshotManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let pos = read_f64_file(&dir.join("positions.bin"), manifest.count * 3)?;
        let feat = read_f64_file(&dir.join("features.bin"), manifest.count * manifest.d_mem)?;
        let mut pointers = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let v = Vector3::new(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
            let position = if v.x.is_nan() { None } else { Some(v) };
            pointers.push(Pointer {
                position,
                feature: feat[i * manifest.d_mem..(i + 1) * manifest.d_mem].to_vec(),
                last_update: manifest.last_updates.get(i).copied().unwrap_or(0),
            });
        }
        let mut mem = SpatialPointerMemory {
            pointers,
            extent: None,
            l: manifest.l,
            backend: NnBackend::BruteForce,
            first_frame_done: true,
        };
        mem.recompute_extent();
        Ok(mem)
    }

    /// ASCII PLY of the positioned pointers; the feature L2 norm rides
    /// along as a scalar property.
    pub fn export_ply(&self, path: &Path) -> Result<()> {
        let positioned: Vec<&Pointer> =
            self.pointers.iter().filter(|p| p.position.is_some()).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "ply")?;
        writeln!(f, "format ascii 1.0")?;
        writeln!(f, "element vertex {}", positioned.len())?;
        writeln!(f, "property float x")?;
        writeln!(f, "property float y")?;
        writeln!(f, "property float z")?;
        writeln!(f, "property float feature_norm")?;
        writeln!(f, "end_header")?;
        for p in positioned {
            let v = p.position.unwrap();
            let norm = p.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
            writeln!(f, "{} {} {} {}", v.x, v.y, v.z, norm)?;
        }
        Ok(())
    }
}

impl Default for SpatialPointerMemory {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotManifest {
    count: usize,
    d_mem: usize,
    null_positions: usize,
    extent: Option<[[f64; 2]; 3]>,
    l: [f64; 3],
    last_updates: Vec<usize>,
}

fn read_f64_file(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect * 8 {
        return Err(Error::data(format!(
            "{}: expected {} f64 values, file holds {} bytes",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Uniform grid over the memory positions with cell size δ. A query only
/// needs its own cell plus the 26 neighbors: any match below δ lies within
/// one cell of the query in every axis.
struct GridIndex {
    cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
    inv_cell: f64,
}

impl GridIndex {
    fn build(pointers: &[Pointer], delta: f64) -> Self {
        let inv_cell = 1.0 / delta;
        let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in pointers.iter().enumerate() {
            if let Some(pos) = p.position {
                cells.entry(Self::key(&pos, inv_cell)).or_default().push(i);
            }
        }
        GridIndex { cells, inv_cell }
    }

    fn key(p: &Vector3<f64>, inv_cell: f64) -> (i64, i64, i64) {
        (
            (p.x * inv_cell).floor() as i64,
            (p.y * inv_cell).floor() as i64,
            (p.z * inv_cell).floor() as i64,
        )
    }

    /// Lowest-index nearest pointer strictly closer than δ, if any.
    fn nearest_within(
        &self,
        pointers: &[Pointer],
        query: &Vector3<f64>,
        delta: f64,
    ) -> Option<usize> {
        let (cx, cy, cz) = Self::key(query, self.inv_cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in bucket {
                            let d = (pointers[i].position.unwrap() - query).norm();
                            if d < delta && best.map_or(true, |(bi, bd)| d < bd || (d == bd && i < bi)) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ptr(x: f64, y: f64, z: f64, feature: Vec<f64>) -> Pointer {
        Pointer::new(Vector3::new(x, y, z), feature, 0).unwrap()
    }

    fn rand_ptr(rng: &mut ChaCha8Rng, d_mem: usize, span: f64) -> Pointer {
        ptr(
            rng.random_range(-span..span),
            rng.random_range(-span..span),
            rng.random_range(-span..span),
            (0..d_mem).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Brute-force reference with the same snapshot semantics, written
    /// as one independent pass over plain arrays.
    fn fuse_oracle(
        mem: &[(Vector3<f64>, Vec<f64>)],
        l: [f64; 3],
        newcomers: &[(Vector3<f64>, Vec<f64>)],
    ) -> Vec<(Vector3<f64>, Vec<f64>)> {
        let delta = if mem.is_empty() {
            None
        } else {
            let mut ext = [(f64::INFINITY, f64::NEG_INFINITY); 3];
            for (p, _) in mem {
                for a in 0..3 {
                    ext[a].0 = ext[a].0.min(p[a]);
                    ext[a].1 = ext[a].1.max(p[a]);
                }
            }
            Some(
                (0..3)
                    .map(|a| ((ext[a].1 - ext[a].0) / l[a]).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            )
        };
        let mut out: Vec<(Vector3<f64>, Vec<f64>)> = mem.to_vec();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); mem.len()];
        let mut appends = Vec::new();
        for (ni, (np, _)) in newcomers.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (mi, (mp, _)) in mem.iter().enumerate() {
                let d = (mp - np).norm();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((mi, d));
                }
            }
            match (best, delta) {
                (Some((mi, d)), Some(dl)) if d < dl => groups[mi].push(ni),
                _ => appends.push(ni),
            }
        }
        for (mi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let k = group.len() as f64;
            let mut pos = Vector3::zeros();
            let mut feat = vec![0.0; newcomers[group[0]].1.len()];
            for &gi in group {
                pos += newcomers[gi].0;
                for (acc, &f) in feat.iter_mut().zip(&newcomers[gi].1) {
                    *acc += f;
                }
            }
            out[mi] = (pos / k, feat.iter().map(|f| f / k).collect());
        }
        for ni in appends {
            out.push(newcomers[ni].clone());
        }
        out
    }

    fn mem_from(pointers: Vec<Pointer>, l: [f64; 3]) -> SpatialPointerMemory {
        let mut mem = SpatialPointerMemory::with_l(l);
        mem.ingest_first_frame(pointers).unwrap();
        mem
    }

    #[test]
    fn threshold_unit_cube() {
        let corners: Vec<Pointer> = (0..8)
            .map(|i| {
                ptr(
                    (i & 1) as f64,
                    ((i >> 1) & 1) as f64,
                    ((i >> 2) & 1) as f64,
                    vec![0.0],
                )
            })
            .collect();
        let mem = mem_from(corners, DEFAULT_L);
        let delta = mem.fusion_threshold().unwrap();
        assert!((delta - 3f64.sqrt() / 20.0).abs() < 1e-12, "delta = {delta}");
        assert!((delta - 0.08660254037844387).abs() < 1e-12);
    }

    #[test]
    fn threshold_single_pointer_is_zero_and_appends() {
        let mut mem = mem_from(vec![ptr(1.0, 2.0, 3.0, vec![1.0])], DEFAULT_L);
        assert_eq!(mem.fusion_threshold().unwrap(), 0.0);
        let report = mem.fuse(vec![ptr(1.0, 2.0, 3.0, vec![9.0])], 1).unwrap();
        assert_eq!(report, FusionReport { fused: 0, appended: 1 });
        assert_eq!(mem.len(), 2);
    }

    #[test]
    fn threshold_matches_minmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let pts: Vec<Pointer> = (0..40).map(|_| rand_ptr(&mut rng, 2, 4.0)).collect();
            let raw: Vec<(Vector3<f64>, Vec<f64>)> =
                pts.iter().map(|p| (p.position.unwrap(), p.feature.clone())).collect();
            let mem = mem_from(pts, DEFAULT_L);
            let got = mem.fusion_threshold().unwrap();
            let mut want = 0.0;
            for a in 0..3 {
                let lo = raw.iter().map(|(p, _)| p[a]).fold(f64::INFINITY, f64::min);
                let hi = raw.iter().map(|(p, _)| p[a]).fold(f64::NEG_INFINITY, f64::max);
                want += ((hi - lo) / 20.0_f64).powi(2);
            }
            assert!((got - want.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_invariant_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Pointer> = (0..25).map(|_| rand_ptr(&mut rng, 1, 2.0)).collect();
        let mem_a = mem_from(pts.clone(), DEFAULT_L);
        let mut shuffled = pts;
        shuffled.shuffle(&mut rng);
        let mem_b = mem_from(shuffled, DEFAULT_L);
        assert_eq!(mem_a.fusion_threshold(), mem_b.fusion_threshold());
    }

    #[test]
    fn nearest_neighbor_exact_and_ties() {
        let mem = mem_from(
            vec![
                ptr(0.0, 0.0, 0.0, vec![0.0]),
                ptr(2.0, 0.0, 0.0, vec![0.0]),
                ptr(-2.0, 0.0, 0.0, vec![0.0]),
            ],
            DEFAULT_L,
        );
        let (i, d) = mem.nearest_neighbor(&Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert_eq!((i, d), (1, 0.0));
        // (1,0,0) is equidistant from index 0 and index 1 -> lowest index
        let (i, _) = mem.nearest_neighbor(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn nearest_neighbor_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Pointer> = (0..1000).map(|_| rand_ptr(&mut rng, 1, 5.0)).collect();
        let raw: Vec<Vector3<f64>> = pts.iter().map(|p| p.position.unwrap()).collect();
        let mem = mem_from(pts, DEFAULT_L);
        for _ in 0..100 {
            let q = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let (gi, gd) = mem.nearest_neighbor(&q).unwrap();
            let (wi, wd) = raw
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(gi, wi);
            assert_eq!(gd, wd);
        }
    }

    #[test]
    fn nearest_neighbor_empty_rejected() {
        let mem = SpatialPointerMemory::new();
        assert!(mem.nearest_neighbor(&Vector3::zeros()).is_err());
    }

    #[test]
    fn fuse_mean_update_example() {
        // spread the memory so delta lands near 0.07 > 0.01
        let mut mem = mem_from(
            vec![
                ptr(0.0, 0.0, 0.0, vec![1.0, 1.0]),
                ptr(1.0, 1.0, 0.0, vec![0.0, 0.0]),
            ],
            DEFAULT_L,
        );
        let delta = mem.fusion_threshold().unwrap();
        assert!(delta > 0.01 && delta < 0.1, "delta = {delta}");
        let report = mem
            .fuse(
                vec![
                    ptr(0.01, 0.0, 0.0, vec![2.0, 2.0]),
                    ptr(-0.01, 0.0, 0.0, vec![4.0, 4.0]),
                ],
                1,
            )
            .unwrap();
        assert_eq!(report, FusionReport { fused: 2, appended: 0 });
        assert_eq!(mem.len(), 2);
        assert_eq!(mem.pointers()[0].position.unwrap(), Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(mem.pointers()[0].feature, vec![3.0, 3.0]);
        assert_eq!(mem.pointers()[0].last_update, 1);
    }

    #[test]
    fn fuse_far_newcomer_appends_verbatim() {
        let mut mem = mem_from(
            vec![ptr(0.0, 0.0, 0.0, vec![1.0]), ptr(1.0, 0.0, 0.0, vec![2.0])],
            DEFAULT_L,
        );
        let newcomer = ptr(5.0, 5.0, 5.0, vec![7.5]);
        let report = mem.fuse(vec![newcomer.clone()], 3).unwrap();
        assert_eq!(report, FusionReport { fused: 0, appended: 1 });
        assert_eq!(mem.pointers()[2].position, newcomer.position);
        assert_eq!(mem.pointers()[2].feature, newcomer.feature);
    }

    #[test]
    fn fuse_matches_reference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            // small l makes delta large enough that plenty of fusions occur
            let l = [4.0, 4.0, 4.0];
            let n_mem = rng.random_range(1..120);
            let n_new = rng.random_range(1..80);
            let mem_pts: Vec<Pointer> = (0..n_mem).map(|_| rand_ptr(&mut rng, 3, 2.0)).collect();
            let newcomers: Vec<Pointer> = (0..n_new).map(|_| rand_ptr(&mut rng, 3, 2.0)).collect();
            let raw_mem: Vec<_> =
                mem_pts.iter().map(|p| (p.position.unwrap(), p.feature.clone())).collect();
            let raw_new: Vec<_> =
                newcomers.iter().map(|p| (p.position.unwrap(), p.feature.clone())).collect();

            let mut mem = mem_from(mem_pts, l);
            let report = mem.fuse(newcomers, 1).unwrap();
            let want = fuse_oracle(&raw_mem, l, &raw_new);

            assert_eq!(mem.len(), want.len(), "trial {trial}");
            assert_eq!(report.fused + report.appended, n_new);
            assert_eq!(mem.len(), n_mem + report.appended);
            for (got, want) in mem.pointers().iter().zip(&want) {
                assert_eq!(got.position.unwrap(), want.0, "trial {trial}");
                assert_eq!(got.feature, want.1, "trial {trial}");
            }
        }
    }

    #[test]
    fn grid_backend_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..20 {
            let l = [5.0, 5.0, 5.0];
            let mem_pts: Vec<Pointer> = (0..200).map(|_| rand_ptr(&mut rng, 2, 3.0)).collect();
            let newcomers: Vec<Pointer> = (0..100).map(|_| rand_ptr(&mut rng, 2, 3.0)).collect();
            let mut brute = mem_from(mem_pts.clone(), l);
            let mut grid = mem_from(mem_pts, l);
            grid.backend = NnBackend::Grid;
            let ra = brute.fuse(newcomers.clone(), 1).unwrap();
            let rb = grid.fuse(newcomers, 1).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(brute.pointers().len(), grid.pointers().len());
            for (a, b) in brute.pointers().iter().zip(grid.pointers()) {
                assert_eq!(a.position, b.position);
                assert_eq!(a.feature, b.feature);
            }
        }
    }

    #[test]
    fn fuse_order_independent_within_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let l = [4.0, 4.0, 4.0];
        let mem_pts: Vec<Pointer> = (0..60).map(|_| rand_ptr(&mut rng, 2, 2.0)).collect();
        let newcomers: Vec<Pointer> = (0..40).map(|_| rand_ptr(&mut rng, 2, 2.0)).collect();

        let mut a = mem_from(mem_pts.clone(), l);
        a.fuse(newcomers.clone(), 1).unwrap();

        let mut shuffled = newcomers.clone();
        shuffled.shuffle(&mut rng);
        let mut b = mem_from(mem_pts, l);
        b.fuse(shuffled, 1).unwrap();

        // appended pointers may land in a different order; compare as sets
        assert_eq!(a.len(), b.len());
        for pa in a.pointers() {
            let hit = b.pointers().iter().any(|pb| {
                (pa.position.unwrap() - pb.position.unwrap()).norm() < 1e-12
                    && pa
                        .feature
                        .iter()
                        .zip(&pb.feature)
                        .all(|(x, y)| (x - y).abs() < 1e-12)
            });
            assert!(hit, "pointer {:?} missing after permutation", pa.position);
        }
    }

    #[test]
    fn ingest_first_frame_contract() {
        let mut mem = SpatialPointerMemory::new();
        mem.init_placeholder(vec![vec![0.5; 4]; 8]).unwrap();
        assert_eq!(mem.len(), 8);
        assert!(mem.fusion_threshold().is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Pointer> = (0..64).map(|_| rand_ptr(&mut rng, 4, 3.0)).collect();
        let features: Vec<Vec<f64>> = pts.iter().map(|p| p.feature.clone()).collect();
        let raw: Vec<Vector3<f64>> = pts.iter().map(|p| p.position.unwrap()).collect();
        mem.ingest_first_frame(pts.clone()).unwrap();
        assert_eq!(mem.len(), 64);
        assert!(mem.pointers().iter().all(|p| p.position.is_some()));
        for (p, f) in mem.pointers().iter().zip(&features) {
            assert_eq!(&p.feature, f);
        }
        // extent oracle
        let ext = mem.extent().unwrap();
        for a in 0..3 {
            let lo = raw.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(ext[a], (lo, hi));
        }
        assert!(mem.ingest_first_frame(pts).is_err());
    }

    #[test]
    fn extent_cache_tracks_mutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mem = mem_from((0..10).map(|_| rand_ptr(&mut rng, 1, 1.0)).collect(), [4.0; 3]);
        for frame in 1..6 {
            let newcomers: Vec<Pointer> =
                (0..10).map(|_| rand_ptr(&mut rng, 1, 1.0 + frame as f64)).collect();
            mem.fuse(newcomers, frame).unwrap();
            let ext = mem.extent().unwrap();
            for a in 0..3 {
                let lo = mem
                    .pointers()
                    .iter()
                    .map(|p| p.position.unwrap()[a])
                    .fold(f64::INFINITY, f64::min);
                let hi = mem
                    .pointers()
                    .iter()
                    .map(|p| p.position.unwrap()[a])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(ext[a], (lo, hi));
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mem = mem_from((0..20).map(|_| rand_ptr(&mut rng, 5, 2.0)).collect(), [7.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        mem.save_snapshot(dir.path()).unwrap();
        let loaded = SpatialPointerMemory::load_snapshot(dir.path()).unwrap();
        assert_eq!(loaded.len(), mem.len());
        assert_eq!(loaded.l, mem.l);
        assert_eq!(loaded.extent(), mem.extent());
        for (a, b) in mem.pointers().iter().zip(loaded.pointers()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.feature, b.feature);
            assert_eq!(a.last_update, b.last_update);
        }
    }

    #[test]
    fn ply_export_format() {
        let mem = mem_from(vec![ptr(1.0, 2.0, 3.0, vec![3.0, 4.0])], DEFAULT_L);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.ply");
        mem.export_ply(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ply");
        assert_eq!(lines[1], "format ascii 1.0");
        assert_eq!(lines[2], "element vertex 1");
        assert!(lines.contains(&"property float feature_norm"));
        assert_eq!(*lines.last().unwrap(), "1 2 3 5");
    }
}
