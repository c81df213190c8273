//! 3D hierarchical rotary position embedding.
//!
//! Channel pairs (2j, 2j+1) of a head vector form complex numbers. Pair j
//! is attached to axis j mod 3 (x, y, z) with frequency index t = ⌊j/3⌋ and
//! rotates by θ_t·p^axis, where θ_t = base^(−t/(d_head/6)). Rotated vectors
//! are averaged over several frequency bases, and attention scores are the
//! real part of the complex inner product of the averaged query and key.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASES: [f64; 4] = [10.0, 100.0, 1000.0, 10000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    /// Channels per attention head; must be divisible by 6.
    pub d_head: usize,
    /// Frequency bases, h = bases.len() ≥ 1.
    pub bases: Vec<f64>,
}

impl RopeConfig {
    pub fn new(d_head: usize, bases: Vec<f64>) -> Result<Self> {
        if d_head == 0 || d_head % 6 != 0 {
            return Err(Error::invalid(format!("d_head {d_head} must be a positive multiple of 6")));
        }
        if bases.is_empty() || bases.iter().any(|&b| b <= 0.0) {
            return Err(Error::invalid("bases must be non-empty and strictly positive"));
        }
        Ok(RopeConfig { d_head, bases })
    }

    pub fn with_default_bases(d_head: usize) -> Result<Self> {
        RopeConfig::new(d_head, DEFAULT_BASES.to_vec())
    }

    pub fn h(&self) -> usize {
        self.bases.len()
    }

    fn pairs(&self) -> usize {
        self.d_head / 2
    }
}

/// A token's 3D position in the global frame. Null positions (the pose
/// token, frame-0 memory placeholders) receive the identity rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenPosition {
    pub p: Vector3<f64>,
    pub is_null: bool,
}

impl TokenPosition {
    pub fn null() -> Self {
        TokenPosition { p: Vector3::zeros(), is_null: true }
    }

    pub fn at(p: Vector3<f64>) -> Self {
        TokenPosition { p, is_null: false }
    }

    pub fn from_option(p: Option<Vector3<f64>>) -> Self {
        match p {
            Some(p) => TokenPosition::at(p),
            None => TokenPosition::null(),
        }
    }
}

/// θ_t = base^(−t/(d_head/6)) for t = 0 .. d_head/6 − 1.
pub fn frequencies(cfg: &RopeConfig, base: f64) -> Vec<f64> {
    let steps = cfg.d_head / 6;
    (0..steps)
        .map(|t| base.powf(-(t as f64) / steps as f64))
        .collect()
}

/// Rotation angle of every complex pair for one base and one position;
/// d_head/2 values, zero for null positions.
pub fn pair_angles(cfg: &RopeConfig, base: f64, pos: &TokenPosition) -> Vec<f64> {
    if pos.is_null {
        return vec![0.0; cfg.pairs()];
    }
    let freqs = frequencies(cfg, base);
    (0..cfg.pairs())
        .map(|j| freqs[j / 3] * pos.p[j % 3])
        .collect()
}

/// Rotate one head vector by a single-base position embedding.
pub fn rotate3d(vec: &[f64], pos: &TokenPosition, cfg: &RopeConfig, base: f64) -> Vec<f64> {
    assert_eq!(vec.len(), cfg.d_head, "vector length != d_head");
    let angles = pair_angles(cfg, base, pos);
    let mut out = vec![0.0; vec.len()];
    for (j, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let (re, im) = (vec[2 * j], vec[2 * j + 1]);
        out[2 * j] = re * c - im * s;
        out[2 * j + 1] = re * s + im * c;
    }
    out
}

/// Mean of the single-base rotations over all configured bases.
pub fn hierarchical_rotate(vec: &[f64], pos: &TokenPosition, cfg: &RopeConfig) -> Vec<f64> {
    let mut acc = vec![0.0; vec.len()];
    for &base in &cfg.bases {
        for (a, r) in acc.iter_mut().zip(rotate3d(vec, pos, cfg, base)) {
            *a += r;
        }
    }
    let inv_h = 1.0 / cfg.h() as f64;
    for a in acc.iter_mut() {
        *a *= inv_h;
    }
    acc
}

/// Attention scores between hierarchically rotated queries and keys:
/// the real part of the complex inner product, scaled by 1/√d_head.
///
/// `q` is row-major Nq×d_head, `k` is Nk×d_head; the output is row-major
/// Nq×Nk. Positions are per token; null positions rotate by the identity.
pub fn attention_scores(
    q: &[f64],
    k: &[f64],
    pos_q: &[TokenPosition],
    pos_k: &[TokenPosition],
    cfg: &RopeConfig,
) -> Result<Vec<f64>> {
    let d = cfg.d_head;
    if q.len() != pos_q.len() * d || k.len() != pos_k.len() * d {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            lhs: vec![pos_q.len(), d],
            rhs: vec![q.len() / d.max(1), d],
        });
    }
    let rot_rows = |m: &[f64], pos: &[TokenPosition]| -> Vec<f64> {
        let mut out = Vec::with_capacity(m.len());
        for (row, p) in m.chunks(d).zip(pos) {
            out.extend(hierarchical_rotate(row, p, cfg));
        }
        out
    };
    let qr = rot_rows(q, pos_q);
    let kr = rot_rows(k, pos_k);
    let scale = 1.0 / (d as f64).sqrt();
    let (nq, nk) = (pos_q.len(), pos_k.len());
    let mut scores = vec![0.0; nq * nk];
    for i in 0..nq {
        let qrow = &qr[i * d..(i + 1) * d];
        for j in 0..nk {
            let krow = &kr[j * d..(j + 1) * d];
            // Re[q̄·k̄*] over interleaved (re, im) pairs is the plain dot product.
            scores[i * nk + j] = scale * qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<f64>();
        }
    }
    Ok(scores)
}
