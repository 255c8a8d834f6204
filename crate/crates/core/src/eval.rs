//! Evaluation metrics: distribution distance (FID), prompt retrieval
//! (R-precision), sample spread (Diversity), and persona recognition
//! accuracy through an independently trained classifier.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, AdamW, Affine, GradStore, Graph, LayerNorm, ParamSet, Tensor,
    TransformerBlock,
};
use crate::rng::{fork, Rng};

/// Retrieval pool size for R-precision.
pub const POOL_SIZE: usize = 32;
/// Ranking depth reported in the metrics table (top-3 of the pool).
pub const RETRIEVAL_TOP_N: usize = 3;
/// Number of random pairs in the diversity estimate.
pub const DIVERSITY_PAIRS: usize = 300;
/// Eigenvalues of a covariance may dip this far below zero before the
/// matrix is rejected as non-PSD.
pub const NEG_EIG_TOL: f64 = -1e-8;

/// Sample mean and (unbiased) covariance of a feature set.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

pub fn feature_stats(feats: &[Vec<f64>]) -> FeatureStats {
    let n = feats.len();
    assert!(n >= 2, "need at least two samples for a covariance");
    let d = feats[0].len();
    let mut mean = vec![0.0; d];
    for f in feats {
        assert_eq!(f.len(), d);
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (f[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    FeatureStats { mean, cov }
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Mild negative eigenvalues (above `NEG_EIG_TOL`) are clipped to zero;
/// anything more negative is a real error in the input.
fn matrix_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < NEG_EIG_TOL {
            return Err(Error::Config(format!(
                "matrix is not positive semi-definite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Frechet distance between two Gaussians fitted to feature sets:
/// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2).
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    assert_eq!(a.mean.len(), b.mean.len());
    let d2: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let sa = matrix_sqrt(&a.cov)?;
    let inner = &sa * &b.cov * &sa;
    let cross = matrix_sqrt(&inner)?;
    let tr = (&a.cov + &b.cov - cross * 2.0).trace();
    Ok((d2 + tr).max(0.0))
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Top-`top_n` retrieval precision: for each (motion feature, true prompt
/// index) pair, the true prompt competes against `pool - 1` random
/// distractors; a hit requires the true prompt's cosine to rank within the
/// best `top_n` of the pool, with ties counted against it. Requires at
/// least `pool` prompts and is monotone non-decreasing in `top_n`.
///
/// When `groups` is given (one label per prompt), distractors are drawn
/// only from other groups. Prompts inside a group are paraphrases with
/// near-identical features, so treating them as rivals would turn
/// retrieval into a tie-breaking lottery instead of a consistency measure.
pub fn r_precision(
    samples: &[(Vec<f64>, usize)],
    prompts: &[Vec<f64>],
    groups: Option<&[usize]>,
    pool: usize,
    top_n: usize,
    rng: &mut Rng,
) -> f64 {
    assert!(top_n >= 1);
    if let Some(g) = groups {
        assert_eq!(g.len(), prompts.len());
    }
    if samples.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (feat, true_idx) in samples {
        let mut others: Vec<usize> = (0..prompts.len())
            .filter(|&i| match groups {
                Some(g) => g[i] != g[*true_idx],
                None => i != *true_idx,
            })
            .collect();
        assert!(
            others.len() >= pool - 1,
            "need at least {} eligible distractors, have {}",
            pool - 1,
            others.len()
        );
        others.shuffle(rng);
        let true_sim = cos64(feat, &prompts[*true_idx]);
        let better = others[..pool - 1]
            .iter()
            .filter(|&&i| cos64(feat, &prompts[i]) >= true_sim)
            .count();
        if better < top_n {
            hits += 1;
        }
    }
    hits as f64 / samples.len() as f64
}

/// Mean Euclidean distance over random feature pairs.
pub fn diversity(feats: &[Vec<f64>], pairs: usize, rng: &mut Rng) -> f64 {
    if feats.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..feats.len());
        let j = loop {
            let j = rng.random_range(0..feats.len());
            if j != i {
                break j;
            }
        };
        total += feats[i]
            .iter()
            .zip(&feats[j])
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    total / pairs as f64
}

/// Small transformer classifier for persona recognition, trained on real
/// clips and then applied to generated ones. Deliberately independent of
/// the generation stack so it can serve as a measurement instrument.
#[derive(Debug, Clone)]
pub struct PersonaClassifier {
    pub input: Affine,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub head: Affine,
    pub num_classes: usize,
}

const CLF_D_MODEL: usize = 64;
const CLF_BLOCKS: usize = 2;
const CLF_HEADS: usize = 4;

impl PersonaClassifier {
    pub const PREFIX: &'static str = "pra.";

    pub fn new(ps: &mut ParamSet<f32>, channels: usize, num_classes: usize, rng: &mut Rng) -> Self {
        PersonaClassifier {
            input: Affine::new(ps, "pra.input", channels, CLF_D_MODEL, rng),
            blocks: (0..CLF_BLOCKS)
                .map(|i| {
                    TransformerBlock::new(ps, &format!("pra.block{i}"), CLF_D_MODEL, CLF_HEADS, 2, rng)
                })
                .collect(),
            ln: LayerNorm::new(ps, "pra.ln", CLF_D_MODEL),
            head: Affine::new(ps, "pra.head", CLF_D_MODEL, num_classes, rng),
            num_classes,
        }
    }

    pub fn logits(&self, g: &mut Graph<f32>, clip_norm: &Tensor<f32>) -> crate::nn::NodeId {
        let x = g.constant(clip_norm.clone());
        let x = self.input.forward(g, x);
        let pe = g.constant(sinusoidal_positions(clip_norm.rows, CLF_D_MODEL));
        let mut x = g.add(x, pe);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let x = self.ln.forward(g, x);
        let pooled = g.mean_rows(x);
        self.head.forward(g, pooled)
    }

    pub fn predict(&self, ps: &ParamSet<f32>, clip_norm: &Tensor<f32>) -> usize {
        let mut g = Graph::new(ps);
        let l = self.logits(&mut g, clip_norm);
        let v = g.value(l);
        let mut best = 0;
        for j in 1..v.cols {
            if v.data[j] > v.data[best] {
                best = j;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Random temporal crop length during training.
    pub window: usize,
    /// Minimum accuracy on held-out real clips for the classifier to count
    /// as a usable instrument.
    pub min_val_accuracy: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            window: 32,
            min_val_accuracy: 0.9,
            seed: 0,
        }
    }
}

/// Fraction of `items` the classifier labels correctly.
pub fn classifier_accuracy(
    clf: &PersonaClassifier,
    ps: &ParamSet<f32>,
    items: &[(Tensor<f32>, usize)],
) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let correct = items
        .iter()
        .filter(|(clip, label)| clf.predict(ps, clip) == *label)
        .count();
    correct as f64 / items.len() as f64
}

/// Train the recognition classifier on labeled normalized clips. Returns
/// the classifier, its parameters, and the validation accuracy; fails if
/// validation accuracy does not reach the configured floor.
pub fn train_persona_classifier(
    train: &[(Tensor<f32>, usize)],
    val: &[(Tensor<f32>, usize)],
    channels: usize,
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(PersonaClassifier, ParamSet<f32>, f64)> {
    assert!(!train.is_empty());
    let mut init_rng = fork(cfg.seed, "pra", "init");
    let mut ps: ParamSet<f32> = ParamSet::new();
    let clf = PersonaClassifier::new(&mut ps, channels, num_classes, &mut init_rng);
    let mut opt = AdamW::new(cfg.lr as f64, cfg.weight_decay as f64);

    for epoch in 0..cfg.epochs {
        let mut rng = fork(cfg.seed, "pra", &format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&ps);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (clip, label) = &train[idx];
                let view = if clip.rows > cfg.window {
                    let start = rng.random_range(0..=clip.rows - cfg.window);
                    slice_frames(clip, start, cfg.window)
                } else {
                    clip.clone()
                };
                rows.push(clf.logits(&mut g, &view));
                labels.push(*label);
            }
            let stacked = g.concat_rows(&rows);
            let loss = g.ce_loss(stacked, &labels);
            let mut grads = GradStore::new();
            g.backward(loss, &mut grads);
            grads.scale_all(1.0 / chunk.len() as f32);
            opt.step(&mut ps, &grads);
        }
    }

    let val_acc = classifier_accuracy(&clf, &ps, val);
    if val_acc < cfg.min_val_accuracy {
        return Err(Error::GateFailed(format!(
            "persona classifier validation accuracy {val_acc:.3} below floor {:.3}",
            cfg.min_val_accuracy
        )));
    }
    Ok((clf, ps, val_acc))
}

fn slice_frames(t: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(len, t.cols);
    out.data
        .copy_from_slice(&t.data[start * t.cols..(start + len) * t.cols]);
    out
}

/// One metrics row; written with fixed six-decimal formatting so repeated
/// runs produce byte-identical files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub protocol: String,
    pub variant: String,
    pub fid: f64,
    pub r_precision: f64,
    pub diversity: f64,
    pub pra: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("protocol,variant,fid,r_precision,diversity,pra\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.protocol, r.variant, r.fid, r.r_precision, r.diversity, r.pra
        ));
    }
    s
}
