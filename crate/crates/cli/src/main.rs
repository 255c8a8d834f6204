//! Command-line driver for the persona-conditioned motion pipeline.
//!
//! A run lives in one directory; each subcommand executes one stage against
//! it. `run-all` chains the standard stages for a quick full run:
//!
//! ```text
//! personadiff gen-data           --run runs/a
//! personadiff pretrain-clip      --run runs/a
//! personadiff pretrain-diffusion --run runs/a
//! personadiff finetune           --run runs/a
//! personadiff sample             --run runs/a --protocol si
//! personadiff eval               --run runs/a
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use personadiff_core::config::{Protocol, RunConfig};
use personadiff_core::eval::{metrics_csv, MetricsRow};
use personadiff_core::pipeline::{
    self, EvalSpec, FusionMode, Personalization, SamplePlan,
};
use personadiff_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "personadiff",
    version,
    about = "Persona-conditioned motion generation: synthetic corpus, pretraining, \
             persona finetuning, guided sampling and evaluation"
)]
struct Cli {
    /// Run directory holding corpus, checkpoints, samples and metrics.
    #[arg(long, global = true, default_value = "runs/default")]
    run: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration preset (`desk` fits on a laptop, `reference` is the
    /// full-scale recipe).
    #[arg(long, default_value = "desk")]
    preset: String,

    /// Override one configuration field, e.g. `--set num_personas=6`.
    /// May be given multiple times.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the motion corpus and freeze the resolved configuration.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train the text/motion encoder pair on the neutral split.
    PretrainClip {
        #[arg(long)]
        force: bool,
    },
    /// Train the denoiser with the encoders frozen.
    PretrainDiffusion {
        #[arg(long)]
        force: bool,
    },
    /// Train the persona extractor and adapters on the persona split.
    Finetune {
        /// Checkpoint tag; the result is stored as `finetuned-{tag}`.
        #[arg(long, default_value = "full")]
        tag: String,
        /// Override the cohesion-loss weight for this run.
        #[arg(long)]
        lambda_pc: Option<f32>,
        #[arg(long)]
        force: bool,
    },
    /// Generate a sample set from a stored checkpoint.
    Sample {
        /// Evaluation protocol: `si` (one input motion) or `mi` (several).
        #[arg(long, default_value = "si")]
        protocol: String,
        /// Conditioning variant: `full`, `visual-only` or `baseline`.
        #[arg(long, default_value = "full")]
        personalization: String,
        /// Input fusion for `mi`: `caf` or `mean`.
        #[arg(long, default_value = "caf")]
        fusion: String,
        /// Checkpoint to sample from.
        #[arg(long, default_value = "finetuned-full")]
        ckpt: String,
        /// Name of the stored sample set (defaults to a name derived from
        /// the other options).
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Score stored sample sets and write `metrics.csv`.
    Eval {
        /// Sample set to score, as `tag` or `tag=variant-label`. May be
        /// given multiple times; defaults to every stored set.
        #[arg(long = "spec", value_name = "TAG[=VARIANT]")]
        specs: Vec<String>,
    },
    /// Sweep one knob, re-sampling (and re-finetuning when necessary) per
    /// value, and write `ablation-{axis}.csv`.
    Ablate {
        /// One of: s_t, s_v, g_t, g_v, b, k, lambda, adapt_kind.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; each axis has sensible defaults.
        #[arg(long)]
        values: Option<String>,
    },
    /// Run every standard stage in order.
    RunAll {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let dir = cli.run.as_path();
    match cli.cmd {
        Cmd::GenData { config, force } => {
            let cfg = resolve_config(&config)?;
            guard(&pipeline::corpus_dir(dir).join("manifest.json"), force, "corpus")?;
            timed(dir, "gen-data", || {
                let corpus = pipeline::gen_data(&cfg, dir)?;
                println!(
                    "corpus: {} pretrain / {} finetune / {} eval clips ({} personas)",
                    corpus.pretrain.len(),
                    corpus.finetune.len(),
                    corpus.eval.len(),
                    cfg.num_personas
                );
                Ok(())
            })
        }
        Cmd::PretrainClip { force } => {
            let cfg = pipeline::load_config(dir)?;
            guard(&ckpt_manifest(dir, "clip"), force, "encoder checkpoint")?;
            timed(dir, "pretrain-clip", || {
                let curve = pipeline::pretrain_clip(&cfg, dir)?;
                if let Some(last) = curve.last() {
                    println!(
                        "encoder: {} epochs, loss {:.4}, recall@1 {:.3}",
                        curve.len(),
                        last.loss,
                        last.recall_at_1
                    );
                }
                Ok(())
            })
        }
        Cmd::PretrainDiffusion { force } => {
            let cfg = pipeline::load_config(dir)?;
            guard(&ckpt_manifest(dir, "pretrained"), force, "denoiser checkpoint")?;
            timed(dir, "pretrain-diffusion", || {
                let curve = pipeline::pretrain_diffusion(&cfg, dir)?;
                if let Some(last) = curve.last() {
                    println!("denoiser: {} epochs, loss {:.4}", curve.len(), last.loss);
                }
                Ok(())
            })
        }
        Cmd::Finetune { tag, lambda_pc, force } => {
            let mut cfg = pipeline::load_config(dir)?;
            if let Some(l) = lambda_pc {
                cfg.lambda_pc = l;
            }
            guard(
                &ckpt_manifest(dir, &format!("finetuned-{tag}")),
                force,
                "finetuned checkpoint",
            )?;
            timed(dir, &format!("finetune-{tag}"), || {
                let curve = pipeline::finetune(&cfg, dir, &tag)?;
                if let Some(last) = curve.last() {
                    println!(
                        "persona stack `{tag}`: {} epochs, loss {:.4} (lambda_pc {})",
                        curve.len(),
                        last.loss,
                        cfg.lambda_pc
                    );
                }
                Ok(())
            })
        }
        Cmd::Sample {
            protocol,
            personalization,
            fusion,
            ckpt,
            tag,
            force,
        } => {
            let cfg = pipeline::load_config(dir)?;
            let protocol = parse_protocol(&protocol)?;
            let pers = Personalization::parse(&personalization).ok_or_else(|| {
                Error::Config(format!(
                    "unknown personalization `{personalization}` \
                     (expected full, visual-only or baseline)"
                ))
            })?;
            let fusion = FusionMode::parse(&fusion).ok_or_else(|| {
                Error::Config(format!("unknown fusion `{fusion}` (expected caf or mean)"))
            })?;
            let tag = tag.unwrap_or_else(|| default_sample_tag(protocol, pers, fusion));
            guard(&sample_manifest(dir, &tag), force, "sample set")?;
            let plan = SamplePlan::new(&cfg, &ckpt, protocol, pers, fusion, &tag);
            timed(dir, &format!("sample-{tag}"), || {
                let set = pipeline::sample_stage(&cfg, dir, &plan)?;
                println!("sample set `{tag}`: {} clips from `{ckpt}`", set.clips.len());
                Ok(())
            })
        }
        Cmd::Eval { specs } => {
            let cfg = pipeline::load_config(dir)?;
            let specs = if specs.is_empty() {
                stored_sample_specs(dir)?
            } else {
                specs.iter().map(|s| parse_eval_spec(s)).collect()
            };
            if specs.is_empty() {
                return Err(Error::MissingStage {
                    missing: "sample".into(),
                    hint: "no sample sets stored in this run".into(),
                });
            }
            timed(dir, "eval", || {
                let rows = pipeline::evaluate(&cfg, dir, &specs)?;
                print!("{}", metrics_csv(&rows));
                println!("wrote {}", pipeline::metrics_path(dir).display());
                Ok(())
            })
        }
        Cmd::Ablate { axis, values } => {
            let cfg = pipeline::load_config(dir)?;
            timed(dir, &format!("ablate-{axis}"), || ablate(&cfg, dir, &axis, values.as_deref()))
        }
        Cmd::RunAll { config, force } => run_all(&resolve_config(&config)?, dir, force),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&args.preset)?;
    for kv in &args.set {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("expected KEY=VALUE, got `{kv}`"))
        })?;
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_protocol(s: &str) -> Result<Protocol> {
    Protocol::parse(s)
        .ok_or_else(|| Error::Config(format!("unknown protocol `{s}` (expected si or mi)")))
}

fn default_sample_tag(protocol: Protocol, pers: Personalization, fusion: FusionMode) -> String {
    let mut tag = format!("{}-{}", protocol.label(), pers.label());
    if protocol == Protocol::MultiInput && fusion == FusionMode::Mean {
        tag.push_str("-mean");
    }
    tag
}

fn ckpt_manifest(dir: &Path, name: &str) -> PathBuf {
    dir.join("ckpt").join(format!("{name}.json"))
}

fn sample_manifest(dir: &Path, tag: &str) -> PathBuf {
    dir.join("samples").join(format!("{tag}.json"))
}

fn guard(path: &Path, force: bool, what: &str) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{what} already exists at {}; pass --force to redo this stage",
            path.display()
        )));
    }
    Ok(())
}

/// Run a stage, print its wall time and append it to `results.csv`.
fn timed(dir: &Path, stage: &str, f: impl FnOnce() -> Result<()>) -> Result<()> {
    let start = Instant::now();
    f()?;
    let secs = start.elapsed().as_secs_f64();
    println!("[{stage}] {secs:.1}s");
    pipeline::append_result(dir, stage, secs)
}

/// Every stored sample set, scored under its own tag.
fn stored_sample_specs(dir: &Path) -> Result<Vec<EvalSpec>> {
    let sdir = dir.join("samples");
    let mut tags = Vec::new();
    if sdir.is_dir() {
        let entries =
            std::fs::read_dir(&sdir).map_err(|e| Error::io(sdir.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(sdir.display().to_string(), e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(tag) = name.strip_suffix(".json") {
                tags.push(tag.to_string());
            }
        }
    }
    tags.sort();
    Ok(tags
        .into_iter()
        .map(|tag| EvalSpec {
            variant: tag.clone(),
            tag,
        })
        .collect())
}

fn parse_eval_spec(s: &str) -> EvalSpec {
    match s.split_once('=') {
        Some((tag, variant)) => EvalSpec {
            tag: tag.to_string(),
            variant: variant.to_string(),
        },
        None => EvalSpec {
            tag: s.to_string(),
            variant: s.to_string(),
        },
    }
}

fn run_all(cfg: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    guard(&pipeline::corpus_dir(dir).join("manifest.json"), force, "corpus")?;
    timed(dir, "gen-data", || pipeline::gen_data(cfg, dir).map(|_| ()))?;
    timed(dir, "pretrain-clip", || {
        pipeline::pretrain_clip(cfg, dir).map(|_| ())
    })?;
    timed(dir, "pretrain-diffusion", || {
        pipeline::pretrain_diffusion(cfg, dir).map(|_| ())
    })?;
    timed(dir, "finetune-full", || {
        pipeline::finetune(cfg, dir, "full").map(|_| ())
    })?;

    let plans = [
        (Protocol::SingleInput, Personalization::Full, FusionMode::Caf, "finetuned-full"),
        (Protocol::SingleInput, Personalization::VisualOnly, FusionMode::Caf, "finetuned-full"),
        (Protocol::SingleInput, Personalization::Baseline, FusionMode::Caf, "pretrained"),
        (Protocol::MultiInput, Personalization::Full, FusionMode::Caf, "finetuned-full"),
        (Protocol::MultiInput, Personalization::Full, FusionMode::Mean, "finetuned-full"),
    ];
    let mut specs = Vec::new();
    for (protocol, pers, fusion, ckpt) in plans {
        let tag = default_sample_tag(protocol, pers, fusion);
        let plan = SamplePlan::new(cfg, ckpt, protocol, pers, fusion, &tag);
        timed(dir, &format!("sample-{tag}"), || {
            pipeline::sample_stage(cfg, dir, &plan).map(|_| ())
        })?;
        specs.push(EvalSpec {
            variant: format!(
                "{}{}",
                pers.label(),
                if fusion == FusionMode::Mean { "-mean" } else { "" }
            ),
            tag,
        });
    }

    timed(dir, "eval", || {
        let rows = pipeline::evaluate(cfg, dir, &specs)?;
        print!("{}", metrics_csv(&rows));
        Ok(())
    })
}

// ---- ablations -------------------------------------------------------------

fn parse_values<T: std::str::FromStr>(axis: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for axis `{axis}`")))
        })
        .collect()
}

/// Sweep one knob. Sampling-side knobs reuse the stored `finetuned-full`
/// checkpoint; `lambda` and `adapt_kind` retrain the persona stack per value.
fn ablate(cfg: &RunConfig, dir: &Path, axis: &str, values: Option<&str>) -> Result<()> {
    let mut out_rows: Vec<(String, MetricsRow)> = Vec::new();
    let mut score = |cfg: &RunConfig, value: String, plan: &SamplePlan| -> Result<()> {
        println!("[ablate {axis}={value}] sampling `{}`", plan.out_tag);
        pipeline::sample_stage(cfg, dir, plan)?;
        let spec = EvalSpec {
            tag: plan.out_tag.clone(),
            variant: format!("{axis}={value}"),
        };
        let rows = pipeline::evaluate_rows(cfg, dir, &[spec])?;
        out_rows.push((value, rows.into_iter().next().expect("one row per spec")));
        Ok(())
    };

    match axis {
        "s_t" | "s_v" | "g_t" | "g_v" | "b" => {
            let defaults = match axis {
                "s_t" | "s_v" => "0.0,0.3,1.0",
                "g_t" => "1,5,10,15",
                "g_v" => "1,5,15,25",
                _ => "0.0,0.5,0.7,1.0",
            };
            let vals: Vec<f32> = parse_values(axis, values.unwrap_or(defaults))?;
            for v in vals {
                let tag = format!("ablate-{axis}-{v}");
                let mut plan = SamplePlan::new(
                    cfg,
                    "finetuned-full",
                    Protocol::SingleInput,
                    Personalization::Full,
                    FusionMode::Caf,
                    &tag,
                );
                match axis {
                    "s_t" => plan.s_text = v,
                    "s_v" => plan.s_visual = v,
                    "g_t" => plan.weights.g_t = v,
                    "g_v" => plan.weights.g_v = v,
                    _ => plan.weights.blend = v,
                }
                score(cfg, format!("{v}"), &plan)?;
            }
        }
        "k" => {
            let vals: Vec<usize> = parse_values(axis, values.unwrap_or("1,3,5"))?;
            for v in vals {
                let tag = format!("ablate-k-{v}");
                let mut plan = SamplePlan::new(
                    cfg,
                    "finetuned-full",
                    Protocol::MultiInput,
                    Personalization::Full,
                    FusionMode::Caf,
                    &tag,
                );
                plan.fusion_cfg.k = v;
                score(cfg, format!("{v}"), &plan)?;
            }
        }
        "lambda" => {
            let vals: Vec<f32> = parse_values(axis, values.unwrap_or("0.0,0.01,0.1"))?;
            for v in vals {
                let mut vcfg = cfg.clone();
                vcfg.lambda_pc = v;
                let ckpt_tag = format!("lambda-{v}");
                println!("[ablate lambda={v}] finetuning `{ckpt_tag}`");
                pipeline::finetune(&vcfg, dir, &ckpt_tag)?;
                let plan = SamplePlan::new(
                    &vcfg,
                    &format!("finetuned-{ckpt_tag}"),
                    Protocol::SingleInput,
                    Personalization::Full,
                    FusionMode::Caf,
                    &format!("ablate-lambda-{v}"),
                );
                score(&vcfg, format!("{v}"), &plan)?;
            }
        }
        "adapt_kind" => {
            let raw = values.unwrap_or("self-attn,cross-attn,ada-in");
            for name in raw.split(',') {
                let name = name.trim();
                let mut vcfg = cfg.clone();
                vcfg.set("adapt_kind", name)?;
                let ckpt_tag = format!("adapt-{name}");
                println!("[ablate adapt_kind={name}] finetuning `{ckpt_tag}`");
                pipeline::finetune(&vcfg, dir, &ckpt_tag)?;
                let plan = SamplePlan::new(
                    &vcfg,
                    &format!("finetuned-{ckpt_tag}"),
                    Protocol::SingleInput,
                    Personalization::Full,
                    FusionMode::Caf,
                    &format!("ablate-adapt-{name}"),
                );
                score(&vcfg, name.to_string(), &plan)?;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation axis `{other}` \
                 (expected s_t, s_v, g_t, g_v, b, k, lambda or adapt_kind)"
            )))
        }
    }

    let mut csv = String::from("axis,value,protocol,variant,fid,r_precision,diversity,pra\n");
    for (value, r) in &out_rows {
        csv.push_str(&format!(
            "{axis},{value},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.protocol, r.variant, r.fid, r.r_precision, r.diversity, r.pra
        ));
    }
    let path = dir.join(format!("ablation-{axis}.csv"));
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("wrote {}", path.display());
    Ok(())
}
