//! Shared text/motion embedding space.
//!
//! A text transformer and a motion transformer are trained on the neutral
//! pretraining split with a symmetric contrastive objective so that a
//! prompt and a motion clip of the same content land close together. The
//! space is frozen after pretraining; everything downstream (persona
//! extraction, conditioning, retrieval metrics, FID features) lives in it.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{crop, ChannelStats, Clip, Content, Corpus, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, AdamW, Affine, Embedding, Graph, GradStore, LayerNorm, NodeId, ParamSet,
    Tensor, TransformerBlock,
};
use crate::rng::fork;

pub const D_CLIP: usize = 32;
pub const D_MODEL: usize = 64;
pub const N_HEADS: usize = 4;
pub const N_BLOCKS: usize = 2;
const MAX_TEXT_LEN: usize = 16;
const MAX_MOTION_LEN: usize = 128;
/// Frames fed to the motion tower during contrastive training.
const TRAIN_WINDOW: usize = 32;

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
    pub proj: Affine,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamSet<f32>, vocab: usize, rng: &mut crate::rng::Rng) -> Self {
        TextEncoder {
            embed: Embedding::new(ps, "clip.txt.embed", vocab, D_MODEL, rng),
            blocks: (0..N_BLOCKS)
                .map(|i| {
                    TransformerBlock::new(ps, &format!("clip.txt.block{i}"), D_MODEL, N_HEADS, 2, rng)
                })
                .collect(),
            ln_out: LayerNorm::new(ps, "clip.txt.ln_out", D_MODEL),
            proj: Affine::new(ps, "clip.txt.proj", D_MODEL, D_CLIP, rng),
        }
    }

    fn tower(&self, g: &mut Graph<f32>, tokens: NodeId, len: usize) -> NodeId {
        assert!(len <= MAX_TEXT_LEN, "prompt too long: {len}");
        let pe = g.constant(pos_slice(len, D_MODEL));
        let x = g.add(tokens, pe);
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let x = self.ln_out.forward(g, x);
        let first = g.slice_rows(x, 0, 1);
        let p = self.proj.forward(g, first);
        g.unit_norm_rows(p)
    }

    /// Sentence feature: 1 x d_clip, unit norm.
    pub fn encode(&self, g: &mut Graph<f32>, ids: &[usize]) -> NodeId {
        let tokens = self.embed.forward(g, ids);
        self.tower(g, tokens, ids.len())
    }

    /// Encode with the token embedding at `pos` replaced by `persona`
    /// (1 x d_model). The persona row receives positional encoding like any
    /// other token: it lives in the token embedding space.
    pub fn encode_with_injection(
        &self,
        g: &mut Graph<f32>,
        ids: &[usize],
        pos: usize,
        persona: NodeId,
    ) -> NodeId {
        assert!(pos < ids.len());
        let tokens = self.embed.forward(g, ids);
        let mut parts = Vec::new();
        if pos > 0 {
            parts.push(g.slice_rows(tokens, 0, pos));
        }
        parts.push(persona);
        if pos + 1 < ids.len() {
            parts.push(g.slice_rows(tokens, pos + 1, ids.len() - pos - 1));
        }
        let spliced = g.concat_rows(&parts);
        self.tower(g, spliced, ids.len())
    }
}

#[derive(Debug, Clone)]
pub struct MotionEncoder {
    pub input: Affine,
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
    pub proj: Affine,
}

impl MotionEncoder {
    pub fn new(ps: &mut ParamSet<f32>, channels: usize, rng: &mut crate::rng::Rng) -> Self {
        MotionEncoder {
            input: Affine::new(ps, "clip.mot.input", channels, D_MODEL, rng),
            blocks: (0..N_BLOCKS)
                .map(|i| {
                    TransformerBlock::new(ps, &format!("clip.mot.block{i}"), D_MODEL, N_HEADS, 2, rng)
                })
                .collect(),
            ln_out: LayerNorm::new(ps, "clip.mot.ln_out", D_MODEL),
            proj: Affine::new(ps, "clip.mot.proj", D_MODEL, D_CLIP, rng),
        }
    }

    /// Per-frame features (frames x d_model) for a normalized clip. This is
    /// the representation the persona extractor attends over.
    pub fn frame_features(&self, g: &mut Graph<f32>, clip_norm: &Tensor<f32>) -> NodeId {
        let frames = clip_norm.rows;
        assert!(frames <= MAX_MOTION_LEN, "clip too long: {frames}");
        let x = g.constant(clip_norm.clone());
        let x = self.input.forward(g, x);
        let pe = g.constant(pos_slice(frames, D_MODEL));
        let mut x = g.add(x, pe);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        self.ln_out.forward(g, x)
    }

    /// Pooled clip feature: 1 x d_clip, unit norm (mean over frames, then
    /// projection).
    pub fn encode(&self, g: &mut Graph<f32>, clip_norm: &Tensor<f32>) -> NodeId {
        let feats = self.frame_features(g, clip_norm);
        let pooled = g.mean_rows(feats);
        let p = self.proj.forward(g, pooled);
        g.unit_norm_rows(p)
    }
}

fn pos_slice(n: usize, d: usize) -> Tensor<f32> {
    let full: Tensor<f32> = sinusoidal_positions(n, d);
    full
}

/// Symmetric contrastive loss over matched rows of two unit-norm feature
/// matrices (N x d each): cross-entropy of text->motion and motion->text
/// retrieval against the diagonal, averaged.
pub fn symmetric_info_nce(
    g: &mut Graph<f32>,
    text_feats: NodeId,
    motion_feats: NodeId,
    tau: f32,
) -> NodeId {
    let n = g.value(text_feats).rows;
    assert_eq!(g.value(motion_feats).rows, n, "batch size mismatch");
    let mt = g.transpose(motion_feats);
    let logits = g.matmul(text_feats, mt);
    let logits = g.scale(logits, 1.0 / tau);
    let diag: Vec<usize> = (0..n).collect();
    let lt = g.ce_loss(logits, &diag);
    let logits_t = g.transpose(logits);
    let lm = g.ce_loss(logits_t, &diag);
    let sum = g.add(lt, lm);
    g.scale(sum, 0.5)
}

/// The dual encoder pair plus its training temperature.
#[derive(Debug, Clone)]
pub struct ClipSpace {
    pub text: TextEncoder,
    pub motion: MotionEncoder,
    pub tau: f32,
}

impl ClipSpace {
    pub fn new(ps: &mut ParamSet<f32>, vocab: usize, channels: usize, tau: f32, rng: &mut crate::rng::Rng) -> Self {
        ClipSpace {
            text: TextEncoder::new(ps, vocab, rng),
            motion: MotionEncoder::new(ps, channels, rng),
            tau,
        }
    }

    /// Name prefix for freezing after pretraining.
    pub const PREFIX: &'static str = "clip.";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub recall_at_1: f64,
}

#[derive(Debug, Clone)]
pub struct ClipTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Gate: content retrieval recall@1 required at the end of training.
    pub min_recall: f64,
    pub seed: u64,
}

impl Default for ClipTrainConfig {
    fn default() -> Self {
        ClipTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            min_recall: 0.8,
            seed: 0,
        }
    }
}

/// Random training window: crop locomotion ramps re-zeroed, then normalize.
fn train_view(clip: &Clip, stats: &ChannelStats, rng: &mut crate::rng::Rng) -> Tensor<f32> {
    let len = TRAIN_WINDOW.min(clip.frames.rows);
    let start = if clip.frames.rows > len {
        rng.random_range(0..=clip.frames.rows - len)
    } else {
        0
    };
    stats.normalize(&crop(&clip.frames, start, len))
}

/// Content retrieval recall@1: each motion clip must be closest to a
/// canonical prompt of its own content.
pub fn content_recall_at_1(
    params: &ParamSet<f32>,
    space: &ClipSpace,
    tok: &Tokenizer,
    clips: &[&Clip],
    stats: &ChannelStats,
) -> Result<f64> {
    let mut g = Graph::new(params);
    let mut text_feats = Vec::new();
    for content in Content::ALL {
        let ids = tok.encode(crate::data::template(content, 0).text)?;
        text_feats.push(space.text.encode(&mut g, &ids));
    }
    let mut correct = 0usize;
    for clip in clips {
        let view = stats.normalize(&crop(&clip.frames, 0, TRAIN_WINDOW.min(clip.frames.rows)));
        let m = space.motion.encode(&mut g, &view);
        let mv = g.value(m).clone();
        let mut best = (f32::NEG_INFINITY, 0usize);
        for (ci, &tf) in text_feats.iter().enumerate() {
            let tv = g.value(tf);
            let sim: f32 = tv.data.iter().zip(&mv.data).map(|(a, b)| a * b).sum();
            if sim > best.0 {
                best = (sim, ci);
            }
        }
        if Content::ALL[best.1] == clip.content {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}

/// Contrastively pretrain the dual encoder on the neutral split. Fails with
/// [`Error::GateFailed`] if final content retrieval is below the gate.
pub fn train_clip(
    params: &mut ParamSet<f32>,
    space: &ClipSpace,
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &ClipTrainConfig,
) -> Result<Vec<CurvePoint>> {
    let clips: Vec<&Clip> = corpus.pretrain.iter().collect();
    if clips.len() < 2 {
        return Err(Error::Config("pretraining split is empty".into()));
    }
    let mut opt: AdamW<f32> = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = fork(cfg.seed, "clip-train", &format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a contrastive batch needs at least one negative
            }
            let mut g = Graph::new(params);
            let mut tfeats = Vec::with_capacity(chunk.len());
            let mut mfeats = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let clip = clips[idx];
                let ids = tok.encode(clip.prompt_text())?;
                tfeats.push(space.text.encode(&mut g, &ids));
                let view = train_view(clip, &corpus.stats, &mut rng);
                mfeats.push(space.motion.encode(&mut g, &view));
            }
            let tmat = g.concat_rows(&tfeats);
            let mmat = g.concat_rows(&mfeats);
            let loss = symmetric_info_nce(&mut g, tmat, mmat, space.tau);
            epoch_loss += g.scalar_value(loss) as f64;
            batches += 1;

            let mut grads = GradStore::new();
            g.backward(loss, &mut grads);
            debug_assert_eq!(grads.frozen_grad_norm(params), 0.0);
            opt.step(params, &grads);
        }

        let recall = if epoch + 1 == cfg.epochs || (epoch + 1) % 5 == 0 {
            content_recall_at_1(params, space, tok, &clips, &corpus.stats)?
        } else {
            f64::NAN
        };
        curve.push(CurvePoint {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            recall_at_1: recall,
        });
    }

    let final_recall = curve.last().map(|c| c.recall_at_1).unwrap_or(0.0);
    if final_recall < cfg.min_recall {
        return Err(Error::GateFailed(format!(
            "content retrieval recall@1 {final_recall:.3} below required {:.3}",
            cfg.min_recall
        )));
    }
    Ok(curve)
}
