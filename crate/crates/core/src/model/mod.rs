//! Toy-scale neural components: patch encoder, interaction decoders with a
//! pose token, pose/self/global heads, and the memory encoder that turns a
//! frame's features and global pointmap into new pointers.
//!
//! All blocks are pre-norm transformers on the f64 tape. Cross-attention
//! queries and keys carry the 3D hierarchical rotary embedding; image-token
//! positions come from the previous frame's global pointmap, the pose token
//! and frame-0 memory stay position-less (identity rotation).

mod weights;

pub use weights::{StagedWeights, Weights};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{patch_average_flat, CameraPose, Pointmap};
use crate::losses::{PointmapPred, PosePred};
use crate::memory::{Pointer, SpatialPointerMemory};
use crate::rope3d::{pair_angles, RopeConfig, TokenPosition};
use crate::tensor::{patchify, Tape, Tensor, Var};

use weights::Init;

pub const CHANNELS: usize = 3;
const ENC_LAYERS: usize = 2;
const GLOBAL_HEAD_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// [height, width] in pixels; both divisible by `patch`.
    pub image_size: [usize; 2],
    pub patch: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub n_heads: usize,
    pub n_dec_layers: usize,
    pub n_geo_layers: usize,
    pub rope: RopeConfig,
    /// Confidence-loss weight forwarded to the trainer.
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: [64, 64],
            patch: 8,
            d_model: 96,
            d_head: 24,
            n_heads: 4,
            n_dec_layers: 4,
            n_geo_layers: 2,
            rope: RopeConfig::with_default_bases(24).unwrap(),
            alpha: 0.2,
        }
    }
}

impl ModelConfig {
    /// Smallest config that still exercises every code path; used by the
    /// finite-difference tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: [8, 8],
            patch: 4,
            d_model: 24,
            d_head: 6,
            n_heads: 4,
            n_dec_layers: 2,
            n_geo_layers: 1,
            rope: RopeConfig::with_default_bases(6).unwrap(),
            alpha: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 6 != 0 {
            return Err(Error::invalid(format!("d_head {} not divisible by 6", self.d_head)));
        }
        if self.rope.d_head != self.d_head {
            return Err(Error::invalid("rope config disagrees with d_head"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.patch, self.image_size[1] / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

/// Per-frame token state moving through the decoder.
pub struct FrameTokens {
    /// [T, d_model]
    pub image_tokens: Var,
    /// [1, d_model]
    pub pose_token: Var,
    /// One position per image token; the pose token is always null.
    pub token_positions: Vec<TokenPosition>,
}

/// Everything one frame's forward pass produces.
pub struct FrameForward {
    pub tokens: FrameTokens,
    /// Encoder output F_t (pre-decoder).
    pub encoder_tokens: Var,
    pub pose: PosePred,
    pub pose_fallback: bool,
    pub self_pred: PointmapPred,
    pub global_pred: PointmapPred,
    /// Frame-0 only: the in-tape M_0 features.
    pub first_memory: Option<Var>,
    pub new_pointers: Vec<Pointer>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch_in = cfg.patch * cfg.patch * CHANNELS;
        let patch_out = cfg.patch * cfg.patch * 4;
        let mut w = Weights::new();
        let mut init = Init::new(seed);

        init.linear(&mut w, "enc.proj", patch_in, d);
        for i in 0..ENC_LAYERS {
            init.block(&mut w, &format!("enc.b{i}"), d);
        }
        init.linear(&mut w, "mem0", d, d);
        init.tensor(&mut w, "pose_token", vec![1, d], d);
        for i in 0..cfg.n_dec_layers {
            let p = format!("dec.b{i}");
            init.layer_norm(&mut w, &format!("{p}.ln1"), d);
            init.attention(&mut w, &format!("{p}.self"), d);
            init.layer_norm(&mut w, &format!("{p}.ln2"), d);
            init.attention(&mut w, &format!("{p}.cross"), d);
            init.layer_norm(&mut w, &format!("{p}.ln3"), d);
            init.mlp(&mut w, &format!("{p}.mlp"), d);
        }
        init.linear(&mut w, "head_pose.fc1", d, d);
        init.linear(&mut w, "head_pose.fc2", d, 7);
        init.linear(&mut w, "head_self.out", d, patch_out);
        for i in 0..GLOBAL_HEAD_LAYERS {
            let p = format!("head_global.b{i}");
            init.linear(&mut w, &format!("{p}.scale1"), d, d);
            init.linear(&mut w, &format!("{p}.shift1"), d, d);
            init.attention(&mut w, &format!("{p}.attn"), d);
            init.linear(&mut w, &format!("{p}.scale2"), d, d);
            init.linear(&mut w, &format!("{p}.shift2"), d, d);
            init.mlp(&mut w, &format!("{p}.mlp"), d);
        }
        init.linear(&mut w, "head_global.out", d, patch_out);
        init.linear(&mut w, "mem_enc.fuse.fc1", 2 * d, 2 * d);
        init.linear(&mut w, "mem_enc.fuse.fc2", 2 * d, d);
        init.linear(&mut w, "mem_enc.geo.proj", patch_in, d);
        for i in 0..cfg.n_geo_layers {
            init.block(&mut w, &format!("mem_enc.geo.b{i}"), d);
        }
        Ok(Model { cfg, weights: w })
    }

    pub fn stage(&self, tape: &mut Tape) -> StagedWeights {
        self.weights.stage(tape)
    }

    // ── building blocks ─────────────────────────────────────────────

    fn linear(&self, tape: &mut Tape, sw: &StagedWeights, prefix: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, sw.var(&format!("{prefix}.w")))?;
        tape.add_row(y, sw.var(&format!("{prefix}.b")))
    }

    fn ln_affine(&self, tape: &mut Tape, sw: &StagedWeights, prefix: &str, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let scaled = tape.mul_row(n, sw.var(&format!("{prefix}.g")))?;
        tape.add_row(scaled, sw.var(&format!("{prefix}.b")))
    }

    fn mlp(&self, tape: &mut Tape, sw: &StagedWeights, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, sw, &format!("{prefix}.fc1"), x)?;
        let g = tape.gelu(h);
        self.linear(tape, sw, &format!("{prefix}.fc2"), g)
    }

    /// Mean over bases of the per-base channel-pair rotation.
    fn hier_rotate(&self, tape: &mut Tape, x: Var, per_base: &[Vec<f64>]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for angles in per_base {
            let r = tape.rotate_pairs(x, angles)?;
            acc = Some(match acc {
                None => r,
                Some(a) => tape.add(a, r)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::invalid("no rope bases"))?;
        Ok(tape.mul_scalar(acc, 1.0 / per_base.len() as f64))
    }

    /// Multi-head attention; `rope` carries per-base pair angles for the
    /// query and key rows when position rotation is wanted.
    fn mha(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        prefix: &str,
        x_q: Var,
        kv: Var,
        rope: Option<(&[Vec<f64>], &[Vec<f64>])>,
    ) -> Result<Var> {
        let (nq, _) = tape.value(x_q).dims2()?;
        let (nk, _) = tape.value(kv).dims2()?;
        let dh = self.cfg.d_head;
        let q = self.linear(tape, sw, &format!("{prefix}.wq"), x_q)?;
        let k = self.linear(tape, sw, &format!("{prefix}.wk"), kv)?;
        let v = self.linear(tape, sw, &format!("{prefix}.wv"), kv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice2d(q, 0, nq, h * dh, dh)?;
            let kh = tape.slice2d(k, 0, nk, h * dh, dh)?;
            let vh = tape.slice2d(v, 0, nk, h * dh, dh)?;
            let (qh, kh) = match rope {
                None => (qh, kh),
                Some((aq, ak)) => (
                    self.hier_rotate(tape, qh, aq)?,
                    self.hier_rotate(tape, kh, ak)?,
                ),
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.mul_scalar(scores, scale);
            let attn = tape.softmax(scaled);
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        self.linear(tape, sw, &format!("{prefix}.wo"), cat)
    }

    /// Pre-norm self-attention + MLP block with residuals.
    fn encoder_block(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let h = self.ln_affine(tape, sw, &format!("{prefix}.ln1"), x)?;
        let attn = self.mha(tape, sw, &format!("{prefix}.attn"), h, h, None)?;
        let x = tape.add(x, attn)?;
        let h = self.ln_affine(tape, sw, &format!("{prefix}.ln2"), x)?;
        let m = self.mlp(tape, sw, &format!("{prefix}.mlp"), h)?;
        tape.add(x, m)
    }

    // ── spec operations ─────────────────────────────────────────────

    /// Patch-flatten, project, then two self-attention blocks. No
    /// position rotation inside the encoder.
    pub fn encode_image(&self, tape: &mut Tape, sw: &StagedWeights, pixels: &[f64]) -> Result<Var> {
        let [h, w] = self.cfg.image_size;
        if pixels.len() != h * w * CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: vec![h, w, CHANNELS],
                rhs: vec![pixels.len()],
            });
        }
        let tokens_in = tape.leaf(patchify(pixels, h, w, CHANNELS, self.cfg.patch));
        let mut x = self.linear(tape, sw, "enc.proj", tokens_in)?;
        for i in 0..ENC_LAYERS {
            x = self.encoder_block(tape, sw, &format!("enc.b{i}"), x)?;
        }
        Ok(x)
    }

    /// Projection output only (before the attention blocks); the patch
    /// permutation test observes this stage.
    pub fn project_patches(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        pixels: &[f64],
    ) -> Result<Var> {
        let [h, w] = self.cfg.image_size;
        let tokens_in = tape.leaf(patchify(pixels, h, w, CHANNELS, self.cfg.patch));
        self.linear(tape, sw, "enc.proj", tokens_in)
    }

    /// One linear layer mapping F_0 to the initial memory features M_0.
    pub fn embed_first_memory(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        image_tokens: Var,
        frame_idx: usize,
    ) -> Result<Var> {
        if frame_idx != 0 {
            return Err(Error::invalid(format!(
                "embed_first_memory called on frame {frame_idx}"
            )));
        }
        self.linear(tape, sw, "mem0", image_tokens)
    }

    /// Token positions for the current frame from the previous frame's
    /// global pointmap (patch means); frame 0 gets null positions.
    pub fn assign_token_positions(&self, prev_global: Option<&Pointmap>) -> Vec<TokenPosition> {
        match prev_global {
            None => vec![TokenPosition::null(); self.cfg.tokens()],
            Some(pm) => patch_average_flat(pm, self.cfg.patch)
                .into_iter()
                .map(TokenPosition::from_option)
                .collect(),
        }
    }

    /// Stage a pointer memory for cross-attention: features as a constant
    /// leaf, positions per pointer (null for the frame-0 placeholder).
    pub fn stage_memory(
        &self,
        tape: &mut Tape,
        memory: &SpatialPointerMemory,
    ) -> Result<(Var, Vec<TokenPosition>)> {
        if memory.is_empty() {
            return Err(Error::invalid("interaction_decode needs a non-empty memory"));
        }
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(memory.len() * d);
        let mut positions = Vec::with_capacity(memory.len());
        for ptr in memory.pointers() {
            if ptr.feature.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "stage_memory",
                    lhs: vec![d],
                    rhs: vec![ptr.feature.len()],
                });
            }
            data.extend_from_slice(&ptr.feature);
            positions.push(TokenPosition::from_option(ptr.position));
        }
        let features = tape.leaf(Tensor::matrix(memory.len(), d, data)?);
        Ok((features, positions))
    }

    fn decode_blocks(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        tokens: FrameTokens,
        mem_features: Var,
        mem_positions: &[TokenPosition],
        use_rope: bool,
    ) -> Result<FrameTokens> {
        let t = self.cfg.tokens();
        if tokens.token_positions.len() != t {
            return Err(Error::invalid("token position count mismatch"));
        }
        let mut x = tape.concat(&[tokens.image_tokens, tokens.pose_token], 0)?;

        let mut pos_q = tokens.token_positions.clone();
        pos_q.push(TokenPosition::null()); // pose token
        let angles = |positions: &[TokenPosition]| -> Vec<Vec<f64>> {
            self.cfg
                .rope
                .bases
                .iter()
                .map(|&b| {
                    positions
                        .iter()
                        .flat_map(|p| pair_angles(&self.cfg.rope, b, p))
                        .collect()
                })
                .collect()
        };
        let aq = angles(&pos_q);
        let ak = angles(mem_positions);
        let rope = use_rope.then_some((aq.as_slice(), ak.as_slice()));

        for i in 0..self.cfg.n_dec_layers {
            let p = format!("dec.b{i}");
            let h = self.ln_affine(tape, sw, &format!("{p}.ln1"), x)?;
            let attn = self.mha(tape, sw, &format!("{p}.self"), h, h, None)?;
            x = tape.add(x, attn)?;
            let h = self.ln_affine(tape, sw, &format!("{p}.ln2"), x)?;
            let cross = self.mha(tape, sw, &format!("{p}.cross"), h, mem_features, rope)?;
            x = tape.add(x, cross)?;
            let h = self.ln_affine(tape, sw, &format!("{p}.ln3"), x)?;
            let m = self.mlp(tape, sw, &format!("{p}.mlp"), h)?;
            x = tape.add(x, m)?;
        }
        let image_tokens = tape.slice2d(x, 0, t, 0, self.cfg.d_model)?;
        let pose_token = tape.slice2d(x, t, 1, 0, self.cfg.d_model)?;
        Ok(FrameTokens { image_tokens, pose_token, token_positions: tokens.token_positions })
    }

    /// The interaction decoders: per layer, self-attention over
    /// (image tokens ∥ pose token), cross-attention into the read-only
    /// memory with the 3D hierarchical RoPE, then an MLP.
    pub fn interaction_decode(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        tokens: FrameTokens,
        mem_features: Var,
        mem_positions: &[TokenPosition],
    ) -> Result<FrameTokens> {
        self.decode_blocks(tape, sw, tokens, mem_features, mem_positions, true)
    }

    /// Two-layer MLP to 7 values; the first 4 normalize to a unit
    /// quaternion, the rest are the translation. A zero-norm raw
    /// quaternion falls back to the identity (flagged).
    pub fn head_pose(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        pose_token: Var,
    ) -> Result<(PosePred, bool)> {
        let h = self.linear(tape, sw, "head_pose.fc1", pose_token)?;
        let g = tape.gelu(h);
        let out = self.linear(tape, sw, "head_pose.fc2", g)?;
        let q_raw = tape.slice2d(out, 0, 1, 0, 4)?;
        let trans = tape.slice2d(out, 0, 1, 4, 3)?;
        let sq = tape.mul(q_raw, q_raw)?;
        let norm_sq = tape.sum_last(sq);
        let norm = tape.sqrt(norm_sq);
        let (quat, fallback) = if tape.value(norm).data()[0] < 1e-12 {
            (tape.leaf(Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0])?), true)
        } else {
            let inv = tape.recip(norm);
            (tape.mul_scalar_var(q_raw, inv)?, false)
        };
        Ok((PosePred { quat, trans }, fallback))
    }

    fn unpatchify_head(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        prefix: &str,
        tokens: Var,
    ) -> Result<PointmapPred> {
        let (gh, gw) = self.cfg.grid();
        let out = self.linear(tape, sw, prefix, tokens)?;
        let grid = tape.unpatchify(out, gh, gw, self.cfg.patch, 4)?;
        let n = self.cfg.image_size[0] * self.cfg.image_size[1];
        let points = tape.slice2d(grid, 0, n, 0, 3)?;
        let raw_col = tape.slice2d(grid, 0, n, 3, 1)?;
        let raw = tape.sum_last(raw_col); // [n,1] -> [n]
        let e = tape.exp(raw);
        let confidence = tape.add_scalar(e, 1.0); // c = 1 + exp(raw) >= 1
        Ok(PointmapPred { points, confidence })
    }

    /// Linear unpatchify head for the camera-frame pointmap.
    pub fn head_self(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        image_tokens: Var,
    ) -> Result<PointmapPred> {
        self.unpatchify_head(tape, sw, "head_self.out", image_tokens)
    }

    fn global_blocks(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        image_tokens: Var,
        pose_token: Var,
        modulate: bool,
    ) -> Result<Var> {
        let mut x = image_tokens;
        for i in 0..GLOBAL_HEAD_LAYERS {
            let p = format!("head_global.b{i}");
            let modulated_ln = |tape: &mut Tape, x: Var, which: usize| -> Result<Var> {
                let n = tape.layer_norm(x);
                if !modulate {
                    return Ok(n);
                }
                let scale = self.linear(tape, sw, &format!("{p}.scale{which}"), pose_token)?;
                let shift = self.linear(tape, sw, &format!("{p}.shift{which}"), pose_token)?;
                let scaled = tape.mul_row(n, scale)?;
                tape.add_row(scaled, shift)
            };
            let h = modulated_ln(tape, x, 1)?;
            let attn = self.mha(tape, sw, &format!("{p}.attn"), h, h, None)?;
            x = tape.add(x, attn)?;
            let h = modulated_ln(tape, x, 2)?;
            let m = self.mlp(tape, sw, &format!("{p}.mlp"), h)?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    /// Two self-attention blocks whose layer-norm scale/shift come from
    /// the pose token, then the linear unpatchify head.
    pub fn head_global(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        image_tokens: Var,
        pose_token: Var,
    ) -> Result<PointmapPred> {
        let x = self.global_blocks(tape, sw, image_tokens, pose_token, true)?;
        self.unpatchify_head(tape, sw, "head_global.out", x)
    }

    /// New pointers from the current frame: features are
    /// MLP(concat(F_t, F'_t)) + GeoBlocks(patch-embedded pointmap),
    /// positions are patch means of the global pointmap. Tokens whose
    /// patch has no valid point are dropped.
    pub fn memory_encode(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        f_t: Var,
        f_prime: Var,
        global_pm: &Pointmap,
        frame_idx: usize,
    ) -> Result<(Var, Vec<Pointer>)> {
        let [h, w] = self.cfg.image_size;
        if global_pm.height != h || global_pm.width != w {
            return Err(Error::ShapeMismatch {
                op: "memory_encode",
                lhs: vec![h, w],
                rhs: vec![global_pm.height, global_pm.width],
            });
        }
        let cat = tape.concat(&[f_t, f_prime], 1)?;
        let hmid = self.linear(tape, sw, "mem_enc.fuse.fc1", cat)?;
        let g = tape.gelu(hmid);
        let feat = self.linear(tape, sw, "mem_enc.fuse.fc2", g)?;

        // invalid points enter the geo encoder as zeros
        let mut flat = vec![0.0; h * w * CHANNELS];
        for (i, (p, &v)) in global_pm.points().iter().zip(global_pm.valid()).enumerate() {
            if v {
                flat[i * 3..i * 3 + 3].copy_from_slice(&[p.x, p.y, p.z]);
            }
        }
        let geo_in = tape.leaf(patchify(&flat, h, w, CHANNELS, self.cfg.patch));
        let mut geo = self.linear(tape, sw, "mem_enc.geo.proj", geo_in)?;
        for i in 0..self.cfg.n_geo_layers {
            geo = self.encoder_block(tape, sw, &format!("mem_enc.geo.b{i}"), geo)?;
        }
        let features = tape.add(feat, geo)?;

        let positions = patch_average_flat(global_pm, self.cfg.patch);
        let kept: Vec<usize> = positions
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.is_some().then_some(i))
            .collect();
        let kept_features = tape.gather_rows(features, &kept)?;
        let d = self.cfg.d_model;
        let values = tape.value(kept_features).data().to_vec();
        let mut pointers = Vec::with_capacity(kept.len());
        for (row, &idx) in kept.iter().enumerate() {
            pointers.push(Pointer::new(
                positions[idx].unwrap(),
                values[row * d..(row + 1) * d].to_vec(),
                frame_idx,
            )?);
        }
        Ok((kept_features, pointers))
    }

    /// Full per-frame pass: encode, decode against the memory, run all
    /// three heads and produce the frame's new pointers.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        sw: &StagedWeights,
        pixels: &[f64],
        prev_global: Option<&Pointmap>,
        memory: &SpatialPointerMemory,
        frame_idx: usize,
    ) -> Result<FrameForward> {
        let f_t = self.encode_image(tape, sw, pixels)?;
        let token_positions = self.assign_token_positions(prev_global);

        let (mem_features, mem_positions, first_memory) = if frame_idx == 0 {
            let m0 = self.embed_first_memory(tape, sw, f_t, 0)?;
            let nulls = vec![TokenPosition::null(); self.cfg.tokens()];
            (m0, nulls, Some(m0))
        } else {
            let (feats, pos) = self.stage_memory(tape, memory)?;
            (feats, pos, None)
        };

        let tokens = FrameTokens {
            image_tokens: f_t,
            pose_token: sw.var("pose_token"),
            token_positions,
        };
        let decoded =
            self.interaction_decode(tape, sw, tokens, mem_features, &mem_positions)?;
        let (pose, pose_fallback) = self.head_pose(tape, sw, decoded.pose_token)?;
        let self_pred = self.head_self(tape, sw, decoded.image_tokens)?;
        let global_pred =
            self.head_global(tape, sw, decoded.image_tokens, decoded.pose_token)?;
        let global_pm = pointmap_from_vars(tape, &global_pred, self.cfg.image_size)?;
        let (_, new_pointers) = self.memory_encode(
            tape,
            sw,
            f_t,
            decoded.image_tokens,
            &global_pm,
            frame_idx,
        )?;
        Ok(FrameForward {
            tokens: decoded,
            encoder_tokens: f_t,
            pose,
            pose_fallback,
            self_pred,
            global_pred,
            first_memory,
            new_pointers,
        })
    }
}

/// Read a pose prediction's values off the tape.
pub fn pose_from_vars(tape: &Tape, pred: &PosePred) -> Result<CameraPose> {
    let q = tape.value(pred.quat).data();
    let t = tape.value(pred.trans).data();
    CameraPose::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])
}

/// Read a pointmap prediction's values off the tape (dense, confident).
pub fn pointmap_from_vars(
    tape: &Tape,
    pred: &PointmapPred,
    image_size: [usize; 2],
) -> Result<Pointmap> {
    let [h, w] = image_size;
    let pts = tape.value(pred.points).data();
    let conf = tape.value(pred.confidence).data().to_vec();
    let points: Vec<Vector3<f64>> = pts
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    Pointmap::dense(h, w, points, Some(conf))
}
