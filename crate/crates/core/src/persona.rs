//! Persona extraction.
//!
//! A small transformer attends over the frozen motion-tower frame features
//! with a learned class token prepended. The class-token output `Y` is the
//! clip's persona summary; an MLP maps it into the token embedding space
//! as the persona token `P*`; a separate projection head `h` (used only by
//! the cohesion loss) maps `Y` to a compact space where clips of the same
//! persona are pulled together and different personas pushed apart.

use rand::Rng as _;

use crate::clip::{MotionEncoder, D_MODEL};
use crate::data::Clip;
use crate::nn::{Graph, Mlp, NodeId, ParamId, ParamSet, Tensor, TransformerBlock};
use crate::rng::Rng;

pub const D_PROJ: usize = 32;
pub const N_BLOCKS: usize = 2;
pub const N_HEADS: usize = 4;
/// Cohesion loss temperature.
pub const PC_TAU: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct PersonaExtractor {
    /// Learned class token, 1 x d_model.
    pub cls: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// Y -> persona token P* (token embedding space).
    pub to_token: Mlp,
    /// Y -> cohesion space; participates in the loss only.
    pub proj_head: Mlp,
}

/// Nodes produced by one extraction pass.
#[derive(Debug, Clone, Copy)]
pub struct PersonaNodes {
    /// (frames + 1) x d_model: class token output followed by per-frame
    /// persona-aware features.
    pub vstar: NodeId,
    /// 1 x d_model class-token summary.
    pub y: NodeId,
    /// 1 x d_model persona token.
    pub pstar: NodeId,
}

impl PersonaExtractor {
    pub fn new(ps: &mut ParamSet<f32>, rng: &mut Rng) -> Self {
        PersonaExtractor {
            cls: ps.add_normal("persona.cls", 1, D_MODEL, 0.02, rng),
            blocks: (0..N_BLOCKS)
                .map(|i| {
                    TransformerBlock::new(ps, &format!("persona.block{i}"), D_MODEL, N_HEADS, 2, rng)
                })
                .collect(),
            to_token: Mlp::new(ps, "persona.to_token", D_MODEL, D_MODEL, D_MODEL, rng),
            proj_head: Mlp::new(ps, "persona.proj_head", D_MODEL, D_MODEL, D_PROJ, rng),
        }
    }

    pub const PREFIX: &'static str = "persona.";

    /// Extract persona nodes from a normalized clip. The motion tower's
    /// parameters flow in through `motion` (frozen after pretraining).
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        motion: &MotionEncoder,
        clip_norm: &Tensor<f32>,
    ) -> PersonaNodes {
        let feats = motion.frame_features(g, clip_norm);
        self.forward_from_features(g, feats)
    }

    /// Same but starting from precomputed frame features (frames x d_model).
    pub fn forward_from_features(&self, g: &mut Graph<f32>, feats: NodeId) -> PersonaNodes {
        let cls = g.param(self.cls);
        let mut x = g.concat_rows(&[cls, feats]);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let y = g.slice_rows(x, 0, 1);
        let pstar = self.to_token.forward(g, y);
        PersonaNodes { vstar: x, y, pstar }
    }

    /// Projection-head output for the cohesion loss, 1 x d_proj.
    pub fn project(&self, g: &mut Graph<f32>, y: NodeId) -> NodeId {
        self.proj_head.forward(g, y)
    }
}

/// Cohesion loss over stacked projection-head outputs (2N x d_proj, raw).
/// Rows are unit-normalized, pairwise cosine similarities formed, and each
/// anchor contrasted against its positive at `pos[i]` over all other rows.
pub fn cohesion_loss(g: &mut Graph<f32>, projected: NodeId, pos: &[usize], tau: f32) -> NodeId {
    let u = g.unit_norm_rows(projected);
    let ut = g.transpose(u);
    let sims = g.matmul(u, ut);
    g.pc_loss(sims, pos, tau)
}

/// Positive index mapping for a batch laid out as N anchors followed by
/// their N positives: anchor i pairs with row N+i and vice versa.
pub fn paired_positions(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { n + i } else { i - n }).collect()
}

/// Uniformly pick another clip of the same persona (any content, any
/// mirroring), excluding the anchor itself.
pub fn sample_positive(clips: &[Clip], anchor: usize, rng: &mut Rng) -> Option<usize> {
    let persona = clips[anchor].persona?;
    let candidates: Vec<usize> = clips
        .iter()
        .enumerate()
        .filter(|(i, c)| *i != anchor && c.persona == Some(persona))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())])
}
