//! Zero-gated personalization adapters.
//!
//! Both adapters blend a personalized branch into a frozen base pathway
//! through a learned scalar gate: `out = base + s * tanh(gamma) * branch`.
//! `gamma` starts at zero, so a freshly attached adapter is an exact no-op
//! and the pretrained model's behavior is preserved at step zero; because
//! the branch parameters receive gradients scaled by `tanh(gamma)`, the
//! gate must open before the branch itself starts to train. `s` is a
//! runtime strength knob: full during finetuning, attenuated at inference
//! so personalization does not overpower content.

use crate::clip::D_MODEL;
use crate::nn::{Graph, LayerNorm, Mlp, MultiHeadSelfAttention, NodeId, ParamId, ParamSet};
use crate::rng::Rng;

/// Gate strength while training.
pub const S_TRAIN: f32 = 1.0;
/// Gate strength at sampling time.
pub const S_INFERENCE: f32 = 0.3;

const ADAPT_HEADS: usize = 4;

/// How the visual adapter mixes persona features into denoiser activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptKind {
    /// Self-attention over the concatenation of activations and persona
    /// features; the activation rows are kept.
    SelfAttn,
    /// Activations attend into the persona features (queries from z).
    CrossAttn,
    /// Feature-wise modulation: the pooled persona feature predicts a gain
    /// and bias applied to the normalized activations.
    AdaIn,
}

impl Default for AdaptKind {
    fn default() -> Self {
        AdaptKind::SelfAttn
    }
}

impl AdaptKind {
    pub const ALL: [AdaptKind; 3] = [AdaptKind::SelfAttn, AdaptKind::CrossAttn, AdaptKind::AdaIn];

    pub fn label(self) -> &'static str {
        match self {
            AdaptKind::SelfAttn => "self-attn",
            AdaptKind::CrossAttn => "cross-attn",
            AdaptKind::AdaIn => "ada-in",
        }
    }

    pub fn parse(s: &str) -> Option<AdaptKind> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }
}

/// Scalar zero-initialized gate.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub gamma: ParamId,
}

impl Gate {
    pub fn new(ps: &mut ParamSet<f32>, name: &str) -> Self {
        Gate {
            gamma: ps.add_zeros(name, 1, 1),
        }
    }

    /// Current gate opening tanh(gamma) as a plain number.
    pub fn opening(&self, ps: &ParamSet<f32>) -> f32 {
        ps.value(self.gamma).data[0].tanh()
    }

    /// out = base + s * tanh(gamma) * branch.
    pub fn apply(&self, g: &mut Graph<f32>, base: NodeId, branch: NodeId, s: f32) -> NodeId {
        let gm = g.param(self.gamma);
        let t = g.tanh(gm);
        let gated = g.scale_by_scalar(branch, t);
        let gated = g.scale(gated, s);
        g.add(base, gated)
    }
}

/// Gate for the personalized prompt feature: the personalized text feature
/// is blended into the neutral one.
#[derive(Debug, Clone, Copy)]
pub struct TextAdapter {
    pub gate: Gate,
}

impl TextAdapter {
    pub const PREFIX: &'static str = "adapt.text.";

    pub fn new(ps: &mut ParamSet<f32>) -> Self {
        TextAdapter {
            gate: Gate::new(ps, "adapt.text.gamma"),
        }
    }

    pub fn combine(
        &self,
        g: &mut Graph<f32>,
        base_feat: NodeId,
        personalized_feat: NodeId,
        s: f32,
    ) -> NodeId {
        self.gate.apply(g, base_feat, personalized_feat, s)
    }
}

/// One persona-injection point inside a denoiser block, placed between the
/// attention and feed-forward sublayers.
#[derive(Debug, Clone)]
pub struct VisualAdapter {
    pub kind: AdaptKind,
    pub gate: Gate,
    pub ln: LayerNorm,
    pub ln_ctx: LayerNorm,
    pub attn: Option<MultiHeadSelfAttention>,
    /// AdaIn only: pooled persona feature -> [gain | bias].
    pub film: Option<Mlp>,
}

impl VisualAdapter {
    pub fn new(ps: &mut ParamSet<f32>, name: &str, kind: AdaptKind, rng: &mut Rng) -> Self {
        let (attn, film) = match kind {
            AdaptKind::SelfAttn | AdaptKind::CrossAttn => (
                Some(MultiHeadSelfAttention::new(
                    ps,
                    &format!("{name}.attn"),
                    D_MODEL,
                    ADAPT_HEADS,
                    rng,
                )),
                None,
            ),
            AdaptKind::AdaIn => (
                None,
                Some(Mlp::new(
                    ps,
                    &format!("{name}.film"),
                    D_MODEL,
                    D_MODEL,
                    2 * D_MODEL,
                    rng,
                )),
            ),
        };
        VisualAdapter {
            kind,
            gate: Gate::new(ps, &format!("{name}.gamma")),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), D_MODEL),
            ln_ctx: LayerNorm::new(ps, &format!("{name}.ln_ctx"), D_MODEL),
            attn,
            film,
        }
    }

    /// z' = z + s * tanh(gamma) * branch(z, vstar). `z` is frames x d_model,
    /// `vstar` is any number of persona-feature rows x d_model.
    pub fn forward(&self, g: &mut Graph<f32>, z: NodeId, vstar: NodeId, s: f32) -> NodeId {
        let frames = g.value(z).rows;
        let zn = self.ln.forward(g, z);
        let ctx = self.ln_ctx.forward(g, vstar);
        let branch = match self.kind {
            AdaptKind::SelfAttn => {
                let cat = g.concat_rows(&[zn, ctx]);
                let mixed = self.attn.as_ref().unwrap().forward(g, cat);
                g.slice_rows(mixed, 0, frames)
            }
            AdaptKind::CrossAttn => self.attn.as_ref().unwrap().forward_kv(g, zn, ctx),
            AdaptKind::AdaIn => {
                let pooled = g.mean_rows(ctx);
                let gb = self.film.as_ref().unwrap().forward(g, pooled);
                let gain = g.slice_cols(gb, 0, D_MODEL);
                let bias = g.slice_cols(gb, D_MODEL, D_MODEL);
                let modulated = g.mul_row_broadcast(zn, gain);
                g.add_row_broadcast(modulated, bias)
            }
        };
        self.gate.apply(g, z, branch, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GradStore, Tensor};
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f32> {
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data.iter_mut() {
            *v = rng.random::<f32>() * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn gate_scalar_probe() {
        // base 0.2, strength 0.3, tanh(gamma) = 0.5, branch 0.5
        // -> 0.2 + 0.3 * 0.5 * 0.5 = 0.275
        let mut ps: ParamSet<f32> = ParamSet::new();
        let gate = Gate::new(&mut ps, "g");
        ps.get_mut(gate.gamma).value.data[0] = 0.5f32.atanh();
        let mut g = Graph::new(&ps);
        let base = g.constant(Tensor::row_vector(&[0.2]));
        let branch = g.constant(Tensor::row_vector(&[0.5]));
        let out = gate.apply(&mut g, base, branch, 0.3);
        assert!((g.value(out).data[0] - 0.275).abs() < 1e-6);
    }

    #[test]
    fn fresh_gate_is_exact_identity() {
        let mut rng = rng_for(61, "adapt-test");
        for kind in AdaptKind::ALL {
            let mut ps: ParamSet<f32> = ParamSet::new();
            let ad = VisualAdapter::new(&mut ps, "adapt.vis0", kind, &mut rng);
            let z_t = random_tensor(12, D_MODEL, &mut rng);
            let v_t = random_tensor(13, D_MODEL, &mut rng);
            let mut g = Graph::new(&ps);
            let z = g.constant(z_t.clone());
            let v = g.constant(v_t);
            let out = ad.forward(&mut g, z, v, S_TRAIN);
            let got = g.value(out);
            assert_eq!((got.rows, got.cols), (12, D_MODEL));
            for (a, b) in got.data.iter().zip(&z_t.data) {
                assert!((a - b).abs() == 0.0, "{kind:?}: {a} != {b}");
            }
        }
    }

    #[test]
    fn fresh_text_gate_returns_base_feature() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let ad = TextAdapter::new(&mut ps);
        let mut rng = rng_for(62, "adapt-test");
        let base_t = random_tensor(1, 32, &mut rng);
        let pers_t = random_tensor(1, 32, &mut rng);
        let mut g = Graph::new(&ps);
        let base = g.constant(base_t.clone());
        let pers = g.constant(pers_t);
        let out = ad.combine(&mut g, base, pers, S_TRAIN);
        assert_eq!(g.value(out).data, base_t.data);
        assert_eq!(ad.gate.opening(&ps), 0.0);
    }

    #[test]
    fn closed_gate_blocks_branch_gradients_but_not_its_own() {
        // At gamma = 0 the branch contributes nothing, so its parameters get
        // zero gradient -- but d tanh(0) = 1, so gamma itself still learns.
        let mut rng = rng_for(63, "adapt-test");
        let mut ps: ParamSet<f32> = ParamSet::new();
        let ad = VisualAdapter::new(&mut ps, "adapt.vis0", AdaptKind::SelfAttn, &mut rng);
        let z_t = random_tensor(6, D_MODEL, &mut rng);
        let v_t = random_tensor(7, D_MODEL, &mut rng);
        let mut g = Graph::new(&ps);
        let z = g.constant(z_t);
        let v = g.constant(v_t);
        let out = ad.forward(&mut g, z, v, S_TRAIN);
        let sq = g.mul(out, out);
        let loss = g.mean_all(sq);
        let mut grads = GradStore::new();
        g.backward(loss, &mut grads);

        let gamma_grad = grads.get(ad.gate.gamma).expect("gamma grad").data[0];
        assert!(gamma_grad.abs() > 0.0, "gate must receive gradient");
        let wq = ad.attn.as_ref().unwrap().wq.w;
        let wq_grad = grads.get(wq).expect("branch grad");
        assert!(wq_grad.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn open_gate_changes_output_and_kinds_differ() {
        let mut rng = rng_for(64, "adapt-test");
        let z_t = random_tensor(10, D_MODEL, &mut rng);
        let v_t = random_tensor(5, D_MODEL, &mut rng);
        let mut outs: Vec<Vec<f32>> = Vec::new();
        for kind in AdaptKind::ALL {
            let mut krng = rng_for(64, "adapt-test/params");
            let mut ps: ParamSet<f32> = ParamSet::new();
            let ad = VisualAdapter::new(&mut ps, "adapt.vis0", kind, &mut krng);
            ps.get_mut(ad.gate.gamma).value.data[0] = 0.5;
            let mut g = Graph::new(&ps);
            let z = g.constant(z_t.clone());
            let v = g.constant(v_t.clone());
            let out = ad.forward(&mut g, z, v, S_TRAIN);
            let got = g.value(out);
            assert_eq!((got.rows, got.cols), (10, D_MODEL));
            let diff: f32 = got
                .data
                .iter()
                .zip(&z_t.data)
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-3, "{kind:?} should alter activations");
            outs.push(got.data.clone());
        }
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[0], outs[2]);
        assert_ne!(outs[1], outs[2]);
    }

    #[test]
    fn inference_strength_shrinks_the_edit() {
        let mut rng = rng_for(65, "adapt-test");
        let mut ps: ParamSet<f32> = ParamSet::new();
        let ad = VisualAdapter::new(&mut ps, "adapt.vis0", AdaptKind::CrossAttn, &mut rng);
        ps.get_mut(ad.gate.gamma).value.data[0] = 1.0;
        let z_t = random_tensor(8, D_MODEL, &mut rng);
        let v_t = random_tensor(4, D_MODEL, &mut rng);
        let edit_norm = |s: f32| {
            let mut g = Graph::new(&ps);
            let z = g.constant(z_t.clone());
            let v = g.constant(v_t.clone());
            let out = ad.forward(&mut g, z, v, s);
            g.value(out)
                .data
                .iter()
                .zip(&z_t.data)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let full = edit_norm(S_TRAIN);
        let soft = edit_norm(S_INFERENCE);
        assert!((soft / full - S_INFERENCE as f64) < 1e-4);
    }
}
