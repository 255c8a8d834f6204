//! Corpus assembly: splits, channel statistics, and the on-disk format.
//!
//! Three splits come out of one seed:
//! * `pretrain`  — neutral persona only, used for both encoder and denoiser
//!   pretraining;
//! * `finetune`  — every persona x content x take, used for personalization;
//! * `eval`      — held-out takes, used as ground truth for the metrics and
//!   as input motions at sampling time.
//!
//! Every take also appears mirrored, so clip counts are
//! `personas x contents x takes x 2`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::persona::{sample_personas, PersonaParams};
use super::synth::{flip_lr, synthesize_take, Content, CH_CONTACT_L, CH_CONTACT_R, NUM_CHANNELS};
use super::text::{template, VARIANTS_PER_CONTENT};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::Tensor;
use crate::rng::fork;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_personas: usize,
    /// Finetune takes per (persona, content).
    pub takes_per: usize,
    /// Neutral pretraining takes per content.
    pub pretrain_takes: usize,
    /// Held-out takes per (persona, content).
    pub eval_takes: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            num_personas: 4,
            takes_per: 4,
            pretrain_takes: 16,
            eval_takes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `None` = neutral persona (pretraining split).
    pub persona: Option<usize>,
    pub content: Content,
    pub take: usize,
    pub mirrored: bool,
    pub template_variant: usize,
    /// frames x 32, raw (unnormalized) channels.
    pub frames: Tensor<f32>,
}

impl Clip {
    pub fn prompt_text(&self) -> &'static str {
        template(self.content, self.template_variant).text
    }
}

/// Per-channel mean/std over the corpus. Contact channels are pinned to
/// identity (mean 0, std 1) so they stay binary through normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn compute<'a>(clips: impl Iterator<Item = &'a Clip> + Clone) -> Self {
        let mut sum = vec![0.0f64; NUM_CHANNELS];
        let mut count = 0usize;
        for clip in clips.clone() {
            for i in 0..clip.frames.rows {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += clip.frames.get(i, c) as f64;
                }
            }
            count += clip.frames.rows;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
        let mut var = vec![0.0f64; NUM_CHANNELS];
        for clip in clips {
            for i in 0..clip.frames.rows {
                for (c, v) in var.iter_mut().enumerate() {
                    let d = clip.frames.get(i, c) as f64 - mean[c];
                    *v += d * d;
                }
            }
        }
        let mut stats = ChannelStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var
                .iter()
                .map(|v| ((v / count.max(1) as f64).sqrt().max(1e-6)) as f32)
                .collect(),
        };
        for c in [CH_CONTACT_L, CH_CONTACT_R] {
            stats.mean[c] = 0.0;
            stats.std[c] = 1.0;
        }
        stats
    }

    pub fn normalize(&self, clip: &Tensor<f32>) -> Tensor<f32> {
        let mut out = clip.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, clip: &Tensor<f32>) -> Tensor<f32> {
        let mut out = clip.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub personas: Vec<PersonaParams>,
    pub pretrain: Vec<Clip>,
    pub finetune: Vec<Clip>,
    pub eval: Vec<Clip>,
    pub stats: ChannelStats,
}

fn make_pair(
    seed: u64,
    scope: &str,
    persona_idx: Option<usize>,
    persona: &PersonaParams,
    content: Content,
    take: usize,
) -> [Clip; 2] {
    let mut rng = fork(seed, "corpus", scope);
    let frames = synthesize_take(content, persona, &mut rng);
    let template_variant = rng.random_range(0..VARIANTS_PER_CONTENT);
    let mirrored_frames = flip_lr(&frames);
    [
        Clip {
            persona: persona_idx,
            content,
            take,
            mirrored: false,
            template_variant,
            frames,
        },
        Clip {
            persona: persona_idx,
            content,
            take,
            mirrored: true,
            template_variant,
            frames: mirrored_frames,
        },
    ]
}

/// Build all three splits deterministically from the spec.
pub fn build_corpus(spec: &CorpusSpec) -> Corpus {
    let personas = sample_personas(spec.seed, spec.num_personas);

    let mut pretrain = Vec::new();
    let neutral = PersonaParams::neutral();
    for content in Content::ALL {
        for take in 0..spec.pretrain_takes {
            let scope = format!("pretrain/{}/{}", content.label(), take);
            pretrain.extend(make_pair(spec.seed, &scope, None, &neutral, content, take));
        }
    }

    let mut finetune = Vec::new();
    let mut eval = Vec::new();
    for (pid, persona) in personas.iter().enumerate() {
        for content in Content::ALL {
            for take in 0..spec.takes_per {
                let scope = format!("finetune/{}/{}/{}", pid, content.label(), take);
                finetune.extend(make_pair(spec.seed, &scope, Some(pid), persona, content, take));
            }
            for take in 0..spec.eval_takes {
                let scope = format!("eval/{}/{}/{}", pid, content.label(), take);
                eval.extend(make_pair(spec.seed, &scope, Some(pid), persona, content, take));
            }
        }
    }

    let stats = ChannelStats::compute(pretrain.iter().chain(finetune.iter()));
    Corpus {
        spec: spec.clone(),
        personas,
        pretrain,
        finetune,
        eval,
        stats,
    }
}

// ---- on-disk format ----------------------------------------------------

const CORPUS_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "clips.bin";

#[derive(Debug, Serialize, Deserialize)]
struct ClipRecord {
    persona: Option<usize>,
    content: Content,
    take: usize,
    mirrored: bool,
    template_variant: usize,
    rows: usize,
    /// f32 offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    version: u32,
    spec: CorpusSpec,
    personas: Vec<PersonaParams>,
    stats: ChannelStats,
    pretrain: Vec<ClipRecord>,
    finetune: Vec<ClipRecord>,
    eval: Vec<ClipRecord>,
    blob_file: String,
    blob_sha256: String,
    blob_len: usize,
}

fn record_split(clips: &[Clip], blob: &mut Vec<f32>) -> Vec<ClipRecord> {
    clips
        .iter()
        .map(|c| {
            let offset = blob.len();
            blob.extend_from_slice(&c.frames.data);
            ClipRecord {
                persona: c.persona,
                content: c.content,
                take: c.take,
                mirrored: c.mirrored,
                template_variant: c.template_variant,
                rows: c.frames.rows,
                offset,
            }
        })
        .collect()
}

fn restore_split(records: &[ClipRecord], blob: &[f32]) -> Result<Vec<Clip>> {
    records
        .iter()
        .map(|r| {
            let len = r.rows * NUM_CHANNELS;
            let end = r.offset + len;
            if end > blob.len() {
                return Err(Error::Corpus(format!(
                    "clip record overruns blob: offset {} + {} > {}",
                    r.offset,
                    len,
                    blob.len()
                )));
            }
            Ok(Clip {
                persona: r.persona,
                content: r.content,
                take: r.take,
                mirrored: r.mirrored,
                template_variant: r.template_variant,
                frames: Tensor::from_vec(r.rows, NUM_CHANNELS, blob[r.offset..end].to_vec()),
            })
        })
        .collect()
}

impl Corpus {
    /// Write `manifest.json` + `clips.bin` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut blob = Vec::new();
        let pretrain = record_split(&self.pretrain, &mut blob);
        let finetune = record_split(&self.finetune, &mut blob);
        let eval = record_split(&self.eval, &mut blob);
        let blob_sha256 = io::write_f32_blob(&dir.join(BLOB_FILE), &blob)?;
        let manifest = CorpusManifest {
            version: CORPUS_VERSION,
            spec: self.spec.clone(),
            personas: self.personas.clone(),
            stats: self.stats.clone(),
            pretrain,
            finetune,
            eval,
            blob_file: BLOB_FILE.to_string(),
            blob_sha256,
            blob_len: blob.len(),
        };
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest: CorpusManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.version != CORPUS_VERSION {
            return Err(Error::Corpus(format!(
                "unsupported corpus version {}",
                manifest.version
            )));
        }
        let blob = io::read_f32_blob(&dir.join(&manifest.blob_file), &manifest.blob_sha256)?;
        if blob.len() != manifest.blob_len {
            return Err(Error::Corpus(format!(
                "blob length {} does not match manifest {}",
                blob.len(),
                manifest.blob_len
            )));
        }
        Ok(Corpus {
            pretrain: restore_split(&manifest.pretrain, &blob)?,
            finetune: restore_split(&manifest.finetune, &blob)?,
            eval: restore_split(&manifest.eval, &blob)?,
            spec: manifest.spec,
            personas: manifest.personas,
            stats: manifest.stats,
        })
    }
}
