//! Stage orchestration: data generation, the two pretraining stages,
//! personalization finetuning, guided sampling, and metric evaluation.
//!
//! Every stage reads and writes artifacts under one run directory, so
//! stages can be executed individually (and out-of-order attempts fail
//! with a pointer to the missing prerequisite):
//!
//! ```text
//! run/
//!   config.json             resolved configuration
//!   corpus/                 synthetic motion corpus
//!   ckpt/                   parameter checkpoints (blob + manifest)
//!   curves/                 per-epoch training records
//!   samples/                generated motion sets
//!   metrics.csv             deterministic metric table
//!   results.csv             wall-clock times (not deterministic)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapt::{TextAdapter, VisualAdapter};
use crate::clip::{content_recall_at_1, train_clip, ClipSpace, ClipTrainConfig, CurvePoint};
use crate::config::{Protocol, RunConfig};
use crate::data::{
    build_corpus, crop, personalize, template, Clip, Content, Corpus, Tokenizer,
    CH_CONTACT_L, CH_CONTACT_R, NUM_CHANNELS, VARIANTS_PER_CONTENT,
};
use crate::diffusion::{
    cfg_combine, denoise_loss, gaussian_tensor, make_adapters, q_sample, CfgWeights, Denoiser,
    PersonaCond, Schedule,
};
use crate::error::{Error, Result};
use crate::eval::{
    classifier_accuracy, diversity, feature_stats, fid, metrics_csv, r_precision,
    train_persona_classifier, ClassifierTrainConfig, MetricsRow, DIVERSITY_PAIRS, POOL_SIZE,
    RETRIEVAL_TOP_N,
};
use crate::fusion::{caf_weights, cosine, fuse_features, FusionConfig};
use crate::io;
use crate::nn::{AdamW, GradStore, Graph, NodeId, ParamSet, Tensor};
use crate::persona::{cohesion_loss, paired_positions, sample_positive, PersonaExtractor};
use crate::rng::{fork, Rng};

// ---- run directory layout -----------------------------------------------

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.json")
}

pub fn corpus_dir(dir: &Path) -> PathBuf {
    dir.join("corpus")
}

fn ckpt_dir(dir: &Path) -> PathBuf {
    dir.join("ckpt")
}

fn curves_dir(dir: &Path) -> PathBuf {
    dir.join("curves")
}

fn samples_dir(dir: &Path) -> PathBuf {
    dir.join("samples")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn results_path(dir: &Path) -> PathBuf {
    dir.join("results.csv")
}

/// Load the resolved config written by `gen_data`.
pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = config_path(dir);
    if !path.exists() {
        return Err(Error::MissingStage {
            missing: "gen-data".into(),
            hint: format!("no config at {}", path.display()),
        });
    }
    let cfg: RunConfig = io::read_json(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let cdir = corpus_dir(dir);
    if !cdir.join("manifest.json").exists() {
        return Err(Error::MissingStage {
            missing: "gen-data".into(),
            hint: format!("no corpus under {}", cdir.display()),
        });
    }
    Corpus::load(&cdir)
}

// ---- checkpoints ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    records: Vec<ParamRecord>,
    blob_file: String,
    blob_len: usize,
    blob_sha256: String,
}

/// Save every parameter whose name starts with one of `prefixes`
/// (everything when `prefixes` is empty).
pub fn save_params(dir: &Path, name: &str, ps: &ParamSet<f32>, prefixes: &[&str]) -> Result<()> {
    let cdir = ckpt_dir(dir);
    std::fs::create_dir_all(&cdir).map_err(|e| Error::io(cdir.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    for (_, p) in ps.iter() {
        if !(prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre))) {
            continue;
        }
        records.push(ParamRecord {
            name: p.name.clone(),
            rows: p.value.rows,
            cols: p.value.cols,
            offset: blob.len(),
        });
        blob.extend_from_slice(&p.value.data);
    }
    let blob_file = format!("{name}.bin");
    let sha = io::write_f32_blob(&cdir.join(&blob_file), &blob)?;
    io::write_json(
        &cdir.join(format!("{name}.json")),
        &CheckpointManifest {
            version: 1,
            records,
            blob_file,
            blob_len: blob.len(),
            blob_sha256: sha,
        },
    )
}

/// Load a checkpoint into an already-built parameter set by name. Every
/// record must match an existing parameter with the same shape; returns the
/// number of parameters overwritten.
pub fn load_params(dir: &Path, name: &str, ps: &mut ParamSet<f32>, stage: &str) -> Result<usize> {
    let cdir = ckpt_dir(dir);
    let mpath = cdir.join(format!("{name}.json"));
    if !mpath.exists() {
        return Err(Error::MissingStage {
            missing: stage.into(),
            hint: format!("checkpoint `{name}` not found at {}", mpath.display()),
        });
    }
    let manifest: CheckpointManifest = io::read_json(&mpath)?;
    let blob = io::read_f32_blob(&cdir.join(&manifest.blob_file), &manifest.blob_sha256)?;
    if blob.len() != manifest.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    for rec in &manifest.records {
        let id = ps.id_of(&rec.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "checkpoint parameter `{}` does not exist in this model",
                rec.name
            ))
        })?;
        let value = &mut ps.get_mut(id).value;
        if (value.rows, value.cols) != (rec.rows, rec.cols) {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{}`: checkpoint {}x{}, model {}x{}",
                rec.name, rec.rows, rec.cols, value.rows, value.cols
            )));
        }
        let n = rec.rows * rec.cols;
        value
            .data
            .copy_from_slice(&blob[rec.offset..rec.offset + n]);
    }
    Ok(manifest.records.len())
}

// ---- model assembly ------------------------------------------------------

/// Every network in the system over one shared parameter table, built in a
/// fixed order so parameter names and initial values are reproducible.
pub struct Models {
    pub tokenizer: Tokenizer,
    pub clip: ClipSpace,
    pub denoiser: Denoiser,
    pub extractor: PersonaExtractor,
    pub adapters: Vec<VisualAdapter>,
    pub text_gate: TextAdapter,
    pub params: ParamSet<f32>,
}

pub fn build_models(cfg: &RunConfig) -> Models {
    let tokenizer = Tokenizer::new();
    let mut params = ParamSet::new();
    let clip = ClipSpace::new(
        &mut params,
        tokenizer.vocab_size(),
        NUM_CHANNELS,
        cfg.clip_tau,
        &mut fork(cfg.seed, "init", "clip"),
    );
    let denoiser = Denoiser::new(
        &mut params,
        NUM_CHANNELS,
        crate::clip::D_CLIP,
        &mut fork(cfg.seed, "init", "denoise"),
    );
    let extractor = PersonaExtractor::new(&mut params, &mut fork(cfg.seed, "init", "persona"));
    let adapters = make_adapters(&mut params, cfg.adapt_kind, &mut fork(cfg.seed, "init", "adapt"));
    let text_gate = TextAdapter::new(&mut params);
    Models {
        tokenizer,
        clip,
        denoiser,
        extractor,
        adapters,
        text_gate,
        params,
    }
}

// ---- shared helpers ------------------------------------------------------

/// Random training window: crop (ramps re-zeroed), then normalize.
fn window_view(clip: &Clip, corpus: &Corpus, window: usize, rng: &mut Rng) -> Tensor<f32> {
    let len = window.min(clip.frames.rows);
    let start = if clip.frames.rows > len {
        rng.random_range(0..=clip.frames.rows - len)
    } else {
        0
    };
    corpus.stats.normalize(&crop(&clip.frames, start, len))
}

/// Feature of every neutral prompt, keyed by (content index, variant).
fn neutral_prompt_features(
    models: &Models,
    graph_params: &ParamSet<f32>,
) -> Result<BTreeMap<(usize, usize), Tensor<f32>>> {
    let mut out = BTreeMap::new();
    let mut g = Graph::new(graph_params);
    for content in Content::ALL {
        for variant in 0..VARIANTS_PER_CONTENT {
            let ids = models.tokenizer.encode(template(content, variant).text)?;
            let node = models.clip.text.encode(&mut g, &ids);
            out.insert((content.index(), variant), g.value(node).clone());
        }
    }
    Ok(out)
}

/// Pooled motion feature of a normalized clip as a plain tensor.
fn motion_feature(models: &Models, clip_norm: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new(&models.params);
    let node = models.clip.motion.encode(&mut g, clip_norm);
    g.value(node).clone()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPoint {
    pub epoch: usize,
    pub loss: f64,
    /// L2 norm of gradient that reached frozen parameters this epoch
    /// (maximum over batches). Must be exactly zero.
    pub frozen_grad_norm: f64,
}

// ---- stage 1: data -------------------------------------------------------

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let corpus = build_corpus(&cfg.corpus_spec());
    corpus.save(&corpus_dir(dir))?;
    io::write_json(&config_path(dir), cfg)?;
    Ok(corpus)
}

// ---- stage 2: contrastive pretraining ------------------------------------

pub fn pretrain_clip(cfg: &RunConfig, dir: &Path) -> Result<Vec<CurvePoint>> {
    let corpus = load_corpus(dir)?;
    let mut models = build_models(cfg);
    let ccfg = ClipTrainConfig {
        epochs: cfg.clip_epochs,
        batch_size: cfg.clip_batch,
        lr: cfg.clip_lr,
        weight_decay: cfg.weight_decay,
        min_recall: cfg.min_recall,
        seed: cfg.seed,
    };
    let curve = train_clip(
        &mut models.params,
        &models.clip,
        &corpus,
        &models.tokenizer,
        &ccfg,
    )?;
    save_params(dir, "clip", &models.params, &[ClipSpace::PREFIX])?;
    let cdir = curves_dir(dir);
    std::fs::create_dir_all(&cdir).map_err(|e| Error::io(cdir.display().to_string(), e))?;
    io::write_json(&cdir.join("clip.json"), &curve)?;
    Ok(curve)
}

// ---- stage 3: denoiser pretraining ----------------------------------------

pub fn pretrain_diffusion(cfg: &RunConfig, dir: &Path) -> Result<Vec<TrainPoint>> {
    let corpus = load_corpus(dir)?;
    let mut models = build_models(cfg);
    load_params(dir, "clip", &mut models.params, "pretrain-clip")?;
    models.params.freeze_prefix(ClipSpace::PREFIX);

    let prompt_feats = neutral_prompt_features(&models, &models.params)?;
    let sched = Schedule::new(cfg.schedule, cfg.t_steps);
    let mut opt: AdamW<f32> = AdamW::new(cfg.diffusion_lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.diffusion_epochs);

    for epoch in 0..cfg.diffusion_epochs {
        let mut rng = fork(cfg.seed, "diff-train", &format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..corpus.pretrain.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        let mut frozen_norm = 0.0f64;

        for chunk in order.chunks(cfg.diffusion_batch) {
            let mut store = GradStore::new();
            let mut batch_loss = 0.0f64;
            for &idx in chunk {
                let clip = &corpus.pretrain[idx];
                let view = window_view(clip, &corpus, cfg.train_window, &mut rng);
                let t = rng.random_range(1..=sched.t_steps());
                let eps = gaussian_tensor(view.rows, view.cols, &mut rng);
                let x_t = q_sample(&view, t, &eps, &sched);
                let dropped = rng.random::<f64>() < cfg.cond_drop;

                let mut g = Graph::new(&models.params);
                let text = if dropped {
                    None
                } else {
                    let feat = &prompt_feats[&(clip.content.index(), clip.template_variant)];
                    Some(g.constant(feat.clone()))
                };
                let pred = models.denoiser.forward(&mut g, &x_t, t, text, None);
                let loss = denoise_loss(&mut g, pred, &view);
                batch_loss += g.scalar_value(loss) as f64;
                let seed = Tensor::from_vec(1, 1, vec![1.0f32 / chunk.len() as f32]);
                g.backward_seeded(loss, &seed, &mut store);
            }
            frozen_norm = frozen_norm.max(store.frozen_grad_norm(&models.params));
            opt.step(&mut models.params, &store);
            epoch_loss += batch_loss / chunk.len() as f64;
            batches += 1;
        }

        if frozen_norm != 0.0 {
            return Err(Error::GateFailed(format!(
                "gradient leaked into frozen parameters (epoch {epoch}, norm {frozen_norm})"
            )));
        }
        curve.push(TrainPoint {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            frozen_grad_norm: frozen_norm,
        });
    }

    save_params(
        dir,
        "pretrained",
        &models.params,
        &[ClipSpace::PREFIX, Denoiser::PREFIX],
    )?;
    let cdir = curves_dir(dir);
    std::fs::create_dir_all(&cdir).map_err(|e| Error::io(cdir.display().to_string(), e))?;
    io::write_json(&cdir.join("pretrained.json"), &curve)?;
    Ok(curve)
}

// ---- stage 4: personalization finetune ------------------------------------

/// Finetune the persona stack (extractor, adapters, gates) on the persona
/// split with the base networks frozen. `tag` names the resulting
/// checkpoint `finetuned-{tag}`.
pub fn finetune(cfg: &RunConfig, dir: &Path, tag: &str) -> Result<Vec<TrainPoint>> {
    let corpus = load_corpus(dir)?;
    let mut models = build_models(cfg);
    load_params(dir, "pretrained", &mut models.params, "pretrain-diffusion")?;
    models.params.freeze_prefix(ClipSpace::PREFIX);
    models.params.freeze_prefix(Denoiser::PREFIX);

    let prompt_feats = neutral_prompt_features(&models, &models.params)?;
    let sched = Schedule::new(cfg.schedule, cfg.t_steps);
    let mut opt: AdamW<f32> = AdamW::new(cfg.finetune_lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.finetune_epochs);
    let clips = &corpus.finetune;
    if clips.len() < 2 {
        return Err(Error::Config("finetune split is empty".into()));
    }

    for epoch in 0..cfg.finetune_epochs {
        let mut rng = fork(cfg.seed, &format!("finetune/{tag}"), &format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        let mut frozen_norm = 0.0f64;

        for chunk in order.chunks(cfg.finetune_batch) {
            let mut store = GradStore::new();
            let mut batch_loss = 0.0f64;
            {
                // phase 1: per-sample graphs; denoiser loss backpropagated
                // immediately, persona summaries kept for phase 2
                let mut anchor_graphs: Vec<(Graph<f32>, NodeId)> = Vec::new();
                let mut positive_graphs: Vec<(Graph<f32>, NodeId)> = Vec::new();
                for &idx in chunk {
                    let clip = &clips[idx];
                    let view = window_view(clip, &corpus, cfg.train_window, &mut rng);
                    let t = rng.random_range(1..=sched.t_steps());
                    let eps = gaussian_tensor(view.rows, view.cols, &mut rng);
                    let x_t = q_sample(&view, t, &eps, &sched);
                    let drop_text = rng.random::<f64>() < cfg.cond_drop;
                    let drop_persona = rng.random::<f64>() < cfg.cond_drop;

                    let mut g = Graph::new(&models.params);
                    let nodes = models.extractor.forward(&mut g, &models.clip.motion, &view);
                    let neutral =
                        prompt_feats[&(clip.content.index(), clip.template_variant)].clone();
                    let text = if drop_text {
                        None
                    } else if drop_persona {
                        Some(g.constant(neutral))
                    } else {
                        let (ptext, insert_pos, _) =
                            personalize(template(clip.content, clip.template_variant));
                        let ids = models.tokenizer.encode(&ptext)?;
                        let injected = models.clip.text.encode_with_injection(
                            &mut g,
                            &ids,
                            insert_pos,
                            nodes.pstar,
                        );
                        let base = g.constant(neutral);
                        Some(models.text_gate.combine(&mut g, base, injected, cfg.s_train))
                    };
                    let cond = if drop_persona {
                        None
                    } else {
                        Some(PersonaCond {
                            adapters: &models.adapters,
                            vstar: nodes.vstar,
                            strength: cfg.s_train,
                        })
                    };
                    let pred = models.denoiser.forward(&mut g, &x_t, t, text, cond.as_ref());
                    let loss = denoise_loss(&mut g, pred, &view);
                    batch_loss += g.scalar_value(loss) as f64;
                    let seed = Tensor::from_vec(1, 1, vec![1.0f32 / chunk.len() as f32]);
                    g.backward_seeded(loss, &seed, &mut store);
                    anchor_graphs.push((g, nodes.y));

                    if cfg.lambda_pc != 0.0 {
                        let pos_idx = sample_positive(clips, idx, &mut rng)
                            .expect("every persona clip has a positive");
                        let pview = window_view(&clips[pos_idx], &corpus, cfg.train_window, &mut rng);
                        let mut pg = Graph::new(&models.params);
                        let pnodes =
                            models.extractor.forward(&mut pg, &models.clip.motion, &pview);
                        positive_graphs.push((pg, pnodes.y));
                    }
                }

                // phase 2: batch cohesion loss over the summaries; seeds are
                // pushed back through each per-sample tape
                if cfg.lambda_pc != 0.0 {
                    let n = anchor_graphs.len();
                    let mut gc = Graph::new(&models.params);
                    let mut leaves = Vec::with_capacity(2 * n);
                    for (g, y) in anchor_graphs.iter() {
                        leaves.push(gc.input(g.value(*y).clone()));
                    }
                    for (g, y) in positive_graphs.iter() {
                        leaves.push(gc.input(g.value(*y).clone()));
                    }
                    let stacked = gc.concat_rows(&leaves);
                    let projected = models.extractor.proj_head.forward(&mut gc, stacked);
                    let pc = cohesion_loss(&mut gc, projected, &paired_positions(n), cfg.pc_tau);
                    batch_loss += cfg.lambda_pc as f64 * gc.scalar_value(pc) as f64;
                    let scaled = gc.scale(pc, cfg.lambda_pc);
                    let buf = gc.backward_with_node_grads(scaled, &mut store);
                    for (slot, (g, y)) in anchor_graphs
                        .iter_mut()
                        .chain(positive_graphs.iter_mut())
                        .enumerate()
                    {
                        let seed = buf[leaves[slot].0]
                            .as_ref()
                            .expect("cohesion gradient for every summary");
                        g.backward_seeded(*y, seed, &mut store);
                    }
                }
            }
            frozen_norm = frozen_norm.max(store.frozen_grad_norm(&models.params));
            opt.step(&mut models.params, &store);
            epoch_loss += batch_loss / chunk.len() as f64;
            batches += 1;
        }

        if frozen_norm != 0.0 {
            return Err(Error::GateFailed(format!(
                "gradient leaked into frozen parameters (epoch {epoch}, norm {frozen_norm})"
            )));
        }
        curve.push(TrainPoint {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            frozen_grad_norm: frozen_norm,
        });
    }

    save_params(
        dir,
        &format!("finetuned-{tag}"),
        &models.params,
        &[
            ClipSpace::PREFIX,
            Denoiser::PREFIX,
            PersonaExtractor::PREFIX,
            "adapt.",
        ],
    )?;
    let cdir = curves_dir(dir);
    std::fs::create_dir_all(&cdir).map_err(|e| Error::io(cdir.display().to_string(), e))?;
    io::write_json(&cdir.join(format!("finetuned-{tag}.json")), &curve)?;
    Ok(curve)
}

// ---- stage 5: sampling -----------------------------------------------------

/// What conditioning the sampler personalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Personalization {
    /// Personalized prompt feature and visual adapters.
    Full,
    /// Visual adapters only; the prompt stays neutral.
    VisualOnly,
    /// No persona conditioning at all (pretrained behavior).
    Baseline,
}

impl Personalization {
    pub fn label(self) -> &'static str {
        match self {
            Personalization::Full => "full",
            Personalization::VisualOnly => "visual-only",
            Personalization::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Full, Self::VisualOnly, Self::Baseline]
            .into_iter()
            .find(|p| p.label() == s)
    }
}

/// How multiple input motions are combined (multi-input protocol only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Relevance-weighted top-k fusion.
    Caf,
    /// Uniform mean over all inputs.
    Mean,
}

impl FusionMode {
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Caf => "caf",
            FusionMode::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Caf, Self::Mean].into_iter().find(|m| m.label() == s)
    }
}

#[derive(Debug, Clone)]
pub struct GenClip {
    pub persona: usize,
    pub content: Content,
    pub template_variant: usize,
    /// frames x 32, raw channel scale, contacts binarized.
    pub frames: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub protocol: Protocol,
    pub personalization: Personalization,
    pub clips: Vec<GenClip>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenRecord {
    persona: usize,
    content_index: usize,
    template_variant: usize,
    rows: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleManifest {
    version: u32,
    protocol: Protocol,
    personalization: Personalization,
    fusion: FusionMode,
    ckpt: String,
    records: Vec<GenRecord>,
    blob_file: String,
    blob_sha256: String,
}

pub fn save_samples(dir: &Path, tag: &str, set: &SampleSet, fusion: FusionMode, ckpt: &str) -> Result<()> {
    let sdir = samples_dir(dir);
    std::fs::create_dir_all(&sdir).map_err(|e| Error::io(sdir.display().to_string(), e))?;
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for c in &set.clips {
        records.push(GenRecord {
            persona: c.persona,
            content_index: c.content.index(),
            template_variant: c.template_variant,
            rows: c.frames.rows,
            offset: blob.len(),
        });
        blob.extend_from_slice(&c.frames.data);
    }
    let blob_file = format!("{tag}.bin");
    let sha = io::write_f32_blob(&sdir.join(&blob_file), &blob)?;
    io::write_json(
        &sdir.join(format!("{tag}.json")),
        &SampleManifest {
            version: 1,
            protocol: set.protocol,
            personalization: set.personalization,
            fusion,
            ckpt: ckpt.to_string(),
            records,
            blob_file,
            blob_sha256: sha,
        },
    )
}

pub fn load_samples(dir: &Path, tag: &str) -> Result<SampleSet> {
    let sdir = samples_dir(dir);
    let mpath = sdir.join(format!("{tag}.json"));
    if !mpath.exists() {
        return Err(Error::MissingStage {
            missing: "sample".into(),
            hint: format!("no sample set `{tag}` at {}", mpath.display()),
        });
    }
    let manifest: SampleManifest = io::read_json(&mpath)?;
    let blob = io::read_f32_blob(&sdir.join(&manifest.blob_file), &manifest.blob_sha256)?;
    let mut clips = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let n = r.rows * NUM_CHANNELS;
        clips.push(GenClip {
            persona: r.persona,
            content: Content::ALL[r.content_index],
            template_variant: r.template_variant,
            frames: Tensor::from_vec(r.rows, NUM_CHANNELS, blob[r.offset..r.offset + n].to_vec()),
        });
    }
    Ok(SampleSet {
        protocol: manifest.protocol,
        personalization: manifest.personalization,
        clips,
    })
}

/// Persona features extracted from one input clip (values, not nodes).
struct ExtractedPersona {
    vstar: Tensor<f32>,
    pstar: Tensor<f32>,
    /// Pooled motion feature of the same clip (for relevance scoring).
    motion_feat: Tensor<f32>,
}

fn extract_persona(models: &Models, clip_norm: &Tensor<f32>) -> ExtractedPersona {
    let mut g = Graph::new(&models.params);
    let nodes = models.extractor.forward(&mut g, &models.clip.motion, clip_norm);
    let m = models.clip.motion.encode(&mut g, clip_norm);
    ExtractedPersona {
        vstar: g.value(nodes.vstar).clone(),
        pstar: g.value(nodes.pstar).clone(),
        motion_feat: g.value(m).clone(),
    }
}

/// Personalized prompt feature: neutral feature blended with the
/// persona-injected encoding through the (trained) text gate.
fn personalized_text_feature(
    models: &Models,
    neutral: &Tensor<f32>,
    content: Content,
    variant: usize,
    pstar: &Tensor<f32>,
    strength: f32,
) -> Result<Tensor<f32>> {
    let (ptext, insert_pos, _) = personalize(template(content, variant));
    let ids = models.tokenizer.encode(&ptext)?;
    let mut g = Graph::new(&models.params);
    let pnode = g.constant(pstar.clone());
    let injected = models.clip.text.encode_with_injection(&mut g, &ids, insert_pos, pnode);
    let base = g.constant(neutral.clone());
    let out = models.text_gate.combine(&mut g, base, injected, strength);
    Ok(g.value(out).clone())
}

/// Everything one sampling pass needs. `new` fills the knobs from the run
/// config; ablations override individual fields before the call.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    /// Checkpoint to sample from (`pretrained` or `finetuned-{tag}`).
    pub ckpt: String,
    pub protocol: Protocol,
    pub personalization: Personalization,
    pub fusion: FusionMode,
    /// Name of the stored sample set.
    pub out_tag: String,
    /// Gate strength for the personalized prompt feature.
    pub s_text: f32,
    /// Gate strength for the visual adapters.
    pub s_visual: f32,
    pub weights: CfgWeights,
    pub fusion_cfg: FusionConfig,
}

impl SamplePlan {
    pub fn new(
        cfg: &RunConfig,
        ckpt: &str,
        protocol: Protocol,
        personalization: Personalization,
        fusion: FusionMode,
        out_tag: &str,
    ) -> Self {
        SamplePlan {
            ckpt: ckpt.to_string(),
            protocol,
            personalization,
            fusion,
            out_tag: out_tag.to_string(),
            s_text: cfg.s_inference,
            s_visual: cfg.s_inference,
            weights: cfg.cfg_weights(protocol),
            fusion_cfg: cfg.fusion(),
        }
    }
}

/// Generate one sample set according to `plan` and store it under
/// `plan.out_tag`.
pub fn sample_stage(cfg: &RunConfig, dir: &Path, plan: &SamplePlan) -> Result<SampleSet> {
    let protocol = plan.protocol;
    let pers = plan.personalization;
    let fusion_mode = plan.fusion;
    let out_tag = plan.out_tag.as_str();
    let weights = plan.weights;

    let corpus = load_corpus(dir)?;
    let mut models = build_models(cfg);
    let stage = if plan.ckpt == "pretrained" {
        "pretrain-diffusion"
    } else {
        "finetune"
    };
    load_params(dir, &plan.ckpt, &mut models.params, stage)?;

    let prompt_feats = neutral_prompt_features(&models, &models.params)?;
    let null_text = models.params.value(models.denoiser.null_text).clone();
    let sched = Schedule::new(cfg.schedule, cfg.t_steps);

    let mut clips = Vec::new();
    for persona in 0..cfg.num_personas {
        // input motions for this persona (the model never sees eval takes)
        let pool: Vec<&Clip> = corpus
            .finetune
            .iter()
            .filter(|c| c.persona == Some(persona))
            .collect();
        assert!(!pool.is_empty(), "no input clips for persona {persona}");

        // multi-input: extract persona features from a fixed input set once;
        // each sample then weights them by relevance to its own prompt
        let mi_inputs: Option<(Vec<ExtractedPersona>, Tensor<f32>)> = if protocol
            == Protocol::MultiInput
            && pers != Personalization::Baseline
        {
            let mut rng = fork(cfg.seed, "sample-inputs", &format!("{out_tag}/p{persona}"));
            let mut idxs: Vec<usize> = (0..pool.len()).collect();
            idxs.shuffle(&mut rng);
            idxs.truncate(cfg.multi_inputs.min(pool.len()));
            idxs.sort_unstable();
            let extracted: Vec<ExtractedPersona> = idxs
                .iter()
                .map(|&i| extract_persona(&models, &corpus.stats.normalize(&pool[i].frames)))
                .collect();
            // circularity breaker: score prompts with the plain mean token
            let mut mean_pstar = Tensor::zeros(1, extracted[0].pstar.cols);
            for e in &extracted {
                mean_pstar.add_scaled(&e.pstar, 1.0 / extracted.len() as f32);
            }
            Some((extracted, mean_pstar))
        } else {
            None
        };

        for content in Content::ALL {
            for j in 0..cfg.samples_per_content {
                let mut rng = fork(
                    cfg.seed,
                    "sample",
                    &format!("{out_tag}/p{persona}/{}/{j}", content.label()),
                );
                let variant = rng.random_range(0..VARIANTS_PER_CONTENT);
                let neutral = prompt_feats[&(content.index(), variant)].clone();

                let persona_feats: Option<(Tensor<f32>, Tensor<f32>)> = match pers {
                    Personalization::Baseline => None,
                    _ => match protocol {
                        Protocol::SingleInput => {
                            let pick = rng.random_range(0..pool.len());
                            let view = corpus.stats.normalize(&pool[pick].frames);
                            let e = extract_persona(&models, &view);
                            Some((e.vstar, e.pstar))
                        }
                        Protocol::MultiInput => {
                            let (extracted, mean_pstar) =
                                mi_inputs.as_ref().expect("inputs extracted above");
                            let w = match fusion_mode {
                                FusionMode::Caf => {
                                    // relevance of each input to this prompt
                                    let target = match pers {
                                        Personalization::Full => personalized_text_feature(
                                            &models,
                                            &neutral,
                                            content,
                                            variant,
                                            mean_pstar,
                                            plan.s_text,
                                        )?,
                                        _ => neutral.clone(),
                                    };
                                    let scores: Vec<f32> = extracted
                                        .iter()
                                        .map(|e| cosine(&e.motion_feat, &target))
                                        .collect();
                                    caf_weights(&scores, &plan.fusion_cfg)
                                }
                                FusionMode::Mean => {
                                    vec![1.0 / extracted.len() as f32; extracted.len()]
                                }
                            };
                            let vstars: Vec<Tensor<f32>> =
                                extracted.iter().map(|e| e.vstar.clone()).collect();
                            let pstars: Vec<Tensor<f32>> =
                                extracted.iter().map(|e| e.pstar.clone()).collect();
                            Some((fuse_features(&vstars, &w), fuse_features(&pstars, &w)))
                        }
                    },
                };

                let text_full = match (&persona_feats, pers) {
                    (Some((_, pstar)), Personalization::Full) => personalized_text_feature(
                        &models,
                        &neutral,
                        content,
                        variant,
                        pstar,
                        plan.s_text,
                    )?,
                    _ => neutral.clone(),
                };

                let frames = cfg.sample_frames;
                let out = crate::diffusion::sample(
                    &sched,
                    frames,
                    NUM_CHANNELS,
                    &mut rng,
                    |x_t, t| {
                        let run = |text: Option<&Tensor<f32>>, with_persona: bool| {
                            let mut g = Graph::new(&models.params);
                            let tnode = text.map(|f| g.constant(f.clone()));
                            let cond = match (&persona_feats, with_persona) {
                                (Some((vstar, _)), true) => Some((g.constant(vstar.clone()), ())),
                                _ => None,
                            };
                            let pc = cond.map(|(vnode, _)| PersonaCond {
                                adapters: &models.adapters,
                                vstar: vnode,
                                strength: plan.s_visual,
                            });
                            let pred = models.denoiser.forward(&mut g, x_t, t, tnode, pc.as_ref());
                            g.value(pred).clone()
                        };
                        let d_full = run(Some(&text_full), true);
                        let d_text_null = run(Some(&null_text), true);
                        let d_persona_null = run(Some(&neutral), false);
                        cfg_combine(&d_full, &d_text_null, &d_persona_null, weights)
                    },
                );

                let mut raw = corpus.stats.denormalize(&out);
                for i in 0..raw.rows {
                    for c in [CH_CONTACT_L, CH_CONTACT_R] {
                        let v = raw.get(i, c);
                        raw.set(i, c, if v > 0.5 { 1.0 } else { 0.0 });
                    }
                }
                clips.push(GenClip {
                    persona,
                    content,
                    template_variant: variant,
                    frames: raw,
                });
            }
        }
    }

    let set = SampleSet {
        protocol,
        personalization: pers,
        clips,
    };
    save_samples(dir, out_tag, &set, fusion_mode, &plan.ckpt)?;
    Ok(set)
}

// ---- stage 6: evaluation ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalSpec {
    /// Sample-set tag to load.
    pub tag: String,
    /// Variant column in the metrics table.
    pub variant: String,
}

/// Evaluate sample sets against the held-out split and write `metrics.csv`.
pub fn evaluate(cfg: &RunConfig, dir: &Path, specs: &[EvalSpec]) -> Result<Vec<MetricsRow>> {
    let rows = evaluate_rows(cfg, dir, specs)?;
    let csv = metrics_csv(&rows);
    std::fs::write(metrics_path(dir), csv)
        .map_err(|e| Error::io(metrics_path(dir).display().to_string(), e))?;
    Ok(rows)
}

/// Compute metric rows without touching `metrics.csv` (used by ablations).
/// The persona classifier is trained once (on real clips only) and reused
/// for every set.
pub fn evaluate_rows(cfg: &RunConfig, dir: &Path, specs: &[EvalSpec]) -> Result<Vec<MetricsRow>> {
    let corpus = load_corpus(dir)?;
    let mut models = build_models(cfg);
    load_params(dir, "clip", &mut models.params, "pretrain-clip")?;

    // measurement instruments: retrieval prompts, real-clip features,
    // persona classifier
    let prompt_feats = neutral_prompt_features(&models, &models.params)?;
    let prompts: Vec<Vec<f64>> = prompt_feats
        .values()
        .map(|t| t.data.iter().map(|&x| x as f64).collect())
        .collect();
    // paraphrase variants of one content are a single retrieval group
    let prompt_groups: Vec<usize> = prompt_feats.keys().map(|&(content, _)| content).collect();
    let prompt_index =
        |content: Content, variant: usize| content.index() * VARIANTS_PER_CONTENT + variant;

    let gt_features: Vec<Vec<f64>> = corpus
        .eval
        .iter()
        .map(|c| {
            let f = motion_feature(&models, &corpus.stats.normalize(&c.frames));
            f.data.iter().map(|&x| x as f64).collect()
        })
        .collect();
    let gt_stats = feature_stats(&gt_features);

    let pack = |clips: &[Clip]| -> Vec<(Tensor<f32>, usize)> {
        clips
            .iter()
            .map(|c| (corpus.stats.normalize(&c.frames), c.persona.unwrap()))
            .collect()
    };
    let clf_cfg = ClassifierTrainConfig {
        epochs: cfg.classifier_epochs,
        window: cfg.train_window,
        min_val_accuracy: cfg.classifier_min_accuracy,
        seed: cfg.seed,
        ..Default::default()
    };
    let (clf, clf_params, _val_acc) = train_persona_classifier(
        &pack(&corpus.finetune),
        &pack(&corpus.eval),
        NUM_CHANNELS,
        cfg.num_personas,
        &clf_cfg,
    )?;

    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let set = load_samples(dir, &spec.tag)?;
        let gen_norm: Vec<Tensor<f32>> = set
            .clips
            .iter()
            .map(|c| corpus.stats.normalize(&c.frames))
            .collect();
        let gen_features: Vec<Vec<f64>> = gen_norm
            .iter()
            .map(|v| {
                motion_feature(&models, v)
                    .data
                    .iter()
                    .map(|&x| x as f64)
                    .collect()
            })
            .collect();

        let fid_v = fid(&feature_stats(&gen_features), &gt_stats)?;

        let retrieval: Vec<(Vec<f64>, usize)> = gen_features
            .iter()
            .zip(&set.clips)
            .map(|(f, c)| (f.clone(), prompt_index(c.content, c.template_variant)))
            .collect();
        let mut rrng = fork(cfg.seed, "eval/rprec", &spec.tag);
        let r_prec = r_precision(
            &retrieval,
            &prompts,
            Some(&prompt_groups),
            POOL_SIZE,
            RETRIEVAL_TOP_N,
            &mut rrng,
        );

        let mut drng = fork(cfg.seed, "eval/div", &spec.tag);
        let div = diversity(&gen_features, DIVERSITY_PAIRS, &mut drng);

        let labeled: Vec<(Tensor<f32>, usize)> = gen_norm
            .into_iter()
            .zip(&set.clips)
            .map(|(v, c)| (v, c.persona))
            .collect();
        let pra = classifier_accuracy(&clf, &clf_params, &labeled);

        rows.push(MetricsRow {
            protocol: set.protocol.label().to_string(),
            variant: spec.variant.clone(),
            fid: fid_v,
            r_precision: r_prec,
            diversity: div,
            pra,
        });
    }

    Ok(rows)
}

/// Append one wall-clock entry to `results.csv` (timings live apart from
/// the metrics so the metrics file stays byte-reproducible).
pub fn append_result(dir: &Path, stage: &str, wall_time_s: f64) -> Result<()> {
    let path = results_path(dir);
    let mut body = if path.exists() {
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?
    } else {
        String::from("stage,wall_time_s\n")
    };
    body.push_str(&format!("{stage},{wall_time_s:.3}\n"));
    std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Sanity check used by tests and the CLI: recall of the stored encoder on
/// the pretraining split.
pub fn stored_clip_recall(cfg: &RunConfig, dir: &Path) -> Result<f64> {
    let corpus = load_corpus(dir)?;
    let mut models = build_models(cfg);
    load_params(dir, "clip", &mut models.params, "pretrain-clip")?;
    let clips: Vec<&Clip> = corpus.pretrain.iter().collect();
    content_recall_at_1(
        &models.params,
        &models.clip,
        &models.tokenizer,
        &clips,
        &corpus.stats,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.num_personas = 2;
        cfg.takes_per_content = 1;
        cfg.pretrain_takes = 2;
        cfg.eval_takes = 1;
        cfg.clip_epochs = 2;
        cfg.min_recall = 0.0;
        cfg.diffusion_epochs = 1;
        cfg.finetune_epochs = 1;
        cfg.finetune_batch = 4;
        cfg.samples_per_content = 1;
        cfg.sample_frames = 16;
        cfg.t_steps = 6;
        cfg.classifier_epochs = 2;
        cfg.classifier_min_accuracy = 0.0;
        cfg
    }

    #[test]
    fn checkpoint_round_trip_and_subset() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let models = build_models(&cfg);
        save_params(tmp.path(), "clip", &models.params, &["clip."]).unwrap();

        let mut models2 = build_models(&cfg);
        // perturb one clip parameter, then restore from the checkpoint
        let id = models2.params.id_of("clip.txt.proj.w").unwrap();
        models2.params.get_mut(id).value.data[0] += 1.0;
        let n = load_params(tmp.path(), "clip", &mut models2.params, "pretrain-clip").unwrap();
        assert!(n > 0);
        assert_eq!(
            models2.params.value(id).data,
            models.params.value(id).data
        );
    }

    #[test]
    fn missing_checkpoint_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let mut models = build_models(&cfg);
        let err = load_params(tmp.path(), "pretrained", &mut models.params, "pretrain-diffusion")
            .unwrap_err();
        match err {
            Error::MissingStage { missing, .. } => assert_eq!(missing, "pretrain-diffusion"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn stages_refuse_to_run_out_of_order() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        match pretrain_clip(&cfg, tmp.path()) {
            Err(Error::MissingStage { missing, .. }) => assert_eq!(missing, "gen-data"),
            other => panic!("expected missing-stage error, got {other:?}"),
        }
    }

    #[test]
    fn model_construction_is_deterministic() {
        let cfg = tiny_config();
        let a = build_models(&cfg);
        let b = build_models(&cfg);
        assert_eq!(a.params.len(), b.params.len());
        for (id, pa) in a.params.iter() {
            let pb = b.params.get(id);
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data, pb.value.data, "param {} differs", pa.name);
        }
    }

    #[test]
    fn sample_set_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let set = SampleSet {
            protocol: Protocol::SingleInput,
            personalization: Personalization::Full,
            clips: vec![GenClip {
                persona: 1,
                content: Content::ALL[2],
                template_variant: 3,
                frames: Tensor::filled(4, NUM_CHANNELS, 0.25),
            }],
        };
        save_samples(tmp.path(), "test", &set, FusionMode::Caf, "finetuned-full").unwrap();
        let back = load_samples(tmp.path(), "test").unwrap();
        assert_eq!(back.clips.len(), 1);
        assert_eq!(back.clips[0].persona, 1);
        assert_eq!(back.clips[0].content, Content::ALL[2]);
        assert_eq!(back.clips[0].frames.data, set.clips[0].frames.data);
        assert!(load_samples(tmp.path(), "absent").is_err());
    }

    #[test]
    fn tiny_pipeline_runs_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        gen_data(&cfg, tmp.path()).unwrap();
        pretrain_clip(&cfg, tmp.path()).unwrap();
        let curve = pretrain_diffusion(&cfg, tmp.path()).unwrap();
        assert_eq!(curve.len(), 1);
        assert!(curve[0].frozen_grad_norm == 0.0);
        let ft = finetune(&cfg, tmp.path(), "full").unwrap();
        assert!(ft[0].frozen_grad_norm == 0.0);
        let plan = SamplePlan::new(
            &cfg,
            "finetuned-full",
            Protocol::SingleInput,
            Personalization::Full,
            FusionMode::Caf,
            "si-full",
        );
        let set = sample_stage(&cfg, tmp.path(), &plan).unwrap();
        assert_eq!(set.clips.len(), cfg.num_personas * Content::ALL.len());
        assert_eq!(set.clips[0].frames.rows, cfg.sample_frames);
        // contacts binarized
        for c in &set.clips {
            for i in 0..c.frames.rows {
                let l = c.frames.get(i, CH_CONTACT_L);
                assert!(l == 0.0 || l == 1.0);
            }
        }
        let rows = evaluate(
            &cfg,
            tmp.path(),
            &[EvalSpec {
                tag: "si-full".into(),
                variant: "full".into(),
            }],
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].fid.is_finite());
        assert!(metrics_path(tmp.path()).exists());

        append_result(tmp.path(), "sample", 1.25).unwrap();
        append_result(tmp.path(), "eval", 0.5).unwrap();
        let body = std::fs::read_to_string(results_path(tmp.path())).unwrap();
        assert!(body.starts_with("stage,wall_time_s\n"));
        assert_eq!(body.lines().count(), 3);
    }
}
