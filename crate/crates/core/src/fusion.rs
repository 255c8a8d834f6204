//! Context-aware fusion of several input motions into one persona
//! conditioning signal.
//!
//! Each input clip is scored by the cosine between its motion-space feature
//! and the personalized prompt feature; only the top-k clips receive
//! weight, softmax-normalized over the selected scores. The selected
//! persona features are then combined as a weighted sum, so inputs whose
//! content matches the prompt dominate the persona conditioning while
//! irrelevant takes are ignored outright.

use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    /// Number of inputs that may carry weight.
    pub k: usize,
    /// Ablation: keep every input's exponential in the softmax denominator
    /// (weights then sum to less than one when inputs are dropped).
    pub all_inputs_denominator: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            k: 5,
            all_inputs_denominator: false,
        }
    }
}

/// Softmax-over-top-k relevance weights. Ties at the selection boundary are
/// broken toward the lower index. Returns one weight per input; inputs
/// outside the top-k get exactly zero.
pub fn caf_weights(scores: &[f32], cfg: &FusionConfig) -> Vec<f32> {
    assert!(cfg.k >= 1, "top-k must be at least 1");
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    let selected = &order[..cfg.k.min(n)];

    let max = selected
        .iter()
        .map(|&i| scores[i])
        .fold(f32::NEG_INFINITY, f32::max);
    let denom_over: Box<dyn Iterator<Item = f32>> = if cfg.all_inputs_denominator {
        Box::new(scores.iter().copied())
    } else {
        Box::new(selected.iter().map(|&i| scores[i]))
    };
    let denom: f64 = denom_over.map(|s| ((s - max) as f64).exp()).sum();

    let mut w = vec![0.0f32; n];
    for &i in selected {
        w[i] = (((scores[i] - max) as f64).exp() / denom) as f32;
    }
    w
}

/// Cosine similarity between two single-row features.
pub fn cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    assert_eq!(a.rows, 1);
    assert_eq!(b.rows, 1);
    assert_eq!(a.cols, b.cols);
    let dot: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x * y) as f64).sum();
    let na: f64 = a.data.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    let nb: f64 = b.data.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)) as f32
}

/// Bring a feature stack to exactly `rows` rows: shorter inputs are
/// zero-padded at the end, longer ones center-cropped.
pub fn resize_rows(t: &Tensor<f32>, rows: usize) -> Tensor<f32> {
    if t.rows == rows {
        return t.clone();
    }
    let mut out = Tensor::zeros(rows, t.cols);
    if t.rows < rows {
        out.data[..t.rows * t.cols].copy_from_slice(&t.data);
    } else {
        let start = (t.rows - rows) / 2;
        out.data
            .copy_from_slice(&t.data[start * t.cols..(start + rows) * t.cols]);
    }
    out
}

/// Weighted sum of feature stacks, resized to the longest stack that
/// carries weight.
pub fn fuse_features(feats: &[Tensor<f32>], weights: &[f32]) -> Tensor<f32> {
    assert_eq!(feats.len(), weights.len());
    assert!(!feats.is_empty(), "nothing to fuse");
    let cols = feats[0].cols;
    let rows = feats
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(f, _)| f.rows)
        .max()
        .unwrap_or(feats[0].rows);
    let mut out = Tensor::zeros(rows, cols);
    for (f, &w) in feats.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        assert_eq!(f.cols, cols, "feature width mismatch");
        let r = resize_rows(f, rows);
        for (o, &x) in out.data.iter_mut().zip(&r.data) {
            *o += w * x;
        }
    }
    out
}
