use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::Serialize;
use serde_json::json;

use super::stage1::{run_stage1, Stage1Report};
use super::stage2::{prepare_stage2, run_stage2, Stage2Report};
use super::state::ModelState;
use super::{EpochLog, Recipe};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_FILE};
use crate::config::{DomainConfig, Method, RunConfig};
use crate::data::{
    load_domain, AccessAuditor, ClothingState, DomainDataset, ImageSource, SampleRecord, Split,
};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_domain, DomainEntry, EvalReport, EvalSettings, Visibility};
use crate::rng::{derive_seed, tag};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";

/// A loaded domain together with its audited image access.
#[derive(Debug, Clone)]
pub struct DomainSource {
    pub config: DomainConfig,
    pub source: Arc<ImageSource>,
}

impl DomainSource {
    pub fn dataset(&self) -> &DomainDataset {
        self.source.dataset()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue after the last step checkpoint found in the run directory.
    pub resume: bool,
    /// Stop once this step is complete.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepResult {
    pub step: usize,
    pub domain: String,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub report: Option<EvalReport>,
    pub stage1: Option<Stage1Report>,
    pub stage2: Option<Stage2Report>,
    /// Loaded from disk instead of trained in this call.
    pub resumed: bool,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub steps: Vec<StepResult>,
    pub auditor: Arc<AccessAuditor>,
    pub state: ModelState,
}

pub fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("step{step}"))
}

/// Loads the training stream and the unseen domains, all reporting to `auditor`.
pub fn load_sources(
    cfg: &RunConfig,
    auditor: &Arc<AccessAuditor>,
) -> Result<(Vec<DomainSource>, Vec<DomainSource>)> {
    let load = |d: &DomainConfig| -> Result<DomainSource> {
        let root = d.resolved_root(&cfg.data.root);
        let ds = load_domain(&root).map_err(|e| e.context(format!("domain `{}`", d.name)))?;
        if ds.name != d.name || ds.clothing_state != d.clothing_state {
            return Err(Error::Schema(format!(
                "{} holds {} ({}), config expects {} ({})",
                root.display(),
                ds.name,
                ds.clothing_state,
                d.name,
                d.clothing_state
            )));
        }
        Ok(DomainSource {
            config: d.clone(),
            source: Arc::new(ImageSource::new(Arc::new(ds), Arc::clone(auditor))),
        })
    };
    let seen = cfg
        .data
        .domains
        .iter()
        .map(load)
        .collect::<Result<Vec<_>>>()?;
    let unseen = cfg
        .eval
        .unseen
        .iter()
        .map(load)
        .collect::<Result<Vec<_>>>()?;
    Ok((seen, unseen))
}

/// Union of all train splits with identities offset per domain.
fn merge_train_sets(domains: &[DomainSource], auditor: &Arc<AccessAuditor>) -> Result<ImageSource> {
    let first = domains
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training domains".into()))?;
    let mut records = Vec::new();
    let mut offset = 0;
    let mut clothing = 0;
    for d in domains {
        let ds = d.dataset();
        for r in ds.records.iter().filter(|r| r.split == Split::Train) {
            records.push(SampleRecord {
                image_path: ds.root.join(&r.image_path).to_string_lossy().into_owned(),
                identity: r.identity + offset,
                camera: r.camera,
                clothing_id: r.clothing_id + clothing,
                split: Split::Train,
            });
        }
        offset += ds.num_identities;
        clothing += ds
            .records
            .iter()
            .map(|r| r.clothing_id + 1)
            .max()
            .unwrap_or(0);
    }
    let any_cc = domains
        .iter()
        .any(|d| d.dataset().clothing_state == ClothingState::CC);
    let merged = DomainDataset {
        name: "joint".into(),
        clothing_state: if any_cc {
            ClothingState::CC
        } else {
            ClothingState::SC
        },
        num_identities: offset,
        records,
        image_height: first.dataset().image_height,
        image_width: first.dataset().image_width,
        root: PathBuf::new(),
    };
    Ok(ImageSource::new(Arc::new(merged), Arc::clone(auditor)))
}

/// Scores the image encoder on every seen and unseen domain.
pub fn evaluate_state(
    image: &ImageEncoder,
    seen: &[&DomainSource],
    unseen: &[&DomainSource],
    settings: &EvalSettings,
    step: usize,
) -> Result<EvalReport> {
    let mut entries = Vec::new();
    for (group, visibility) in [(seen, Visibility::Seen), (unseen, Visibility::Unseen)] {
        for d in group {
            let report = evaluate_domain(image, &d.source, settings)
                .map_err(|e| e.context(format!("evaluating `{}`", d.config.name)))?;
            entries.push(DomainEntry {
                report,
                clothing_state: d.dataset().clothing_state,
                visibility,
            });
        }
    }
    aggregate(entries, step)
}

fn write_reports(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    for e in &report.entries {
        fs::write(
            dir.join(format!("{}.json", e.report.domain)),
            serde_json::to_string_pretty(&e.report)?,
        )?;
    }
    fs::write(
        dir.join(AGGREGATE_FILE),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}

struct RunLog {
    file: File,
}

impl RunLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self { file })
    }

    fn event(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.file, "{value}")?;
        Ok(())
    }
}

fn last_completed_step(run_dir: &Path, steps: usize) -> usize {
    (1..=steps)
        .take_while(|&t| {
            step_dir(run_dir, t)
                .join("checkpoint")
                .join(CHECKPOINT_FILE)
                .exists()
        })
        .last()
        .unwrap_or(0)
}

/// Runs the whole stream into `run_dir`.
///
/// Writes `config.toml`, one checkpoint and report set per step, and
/// `log.jsonl`. For sequential methods each domain is closed in the auditor
/// once its step ends, so any later train read fails.
pub fn run_plan(cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> Result<PlanOutcome> {
    cfg.validate()?;
    if cfg.data.domains.is_empty() {
        return Err(Error::Config {
            key: "data.domains".into(),
            message: "at least one training domain is required".into(),
        });
    }
    let config_hash = cfg.hash()?;
    fs::create_dir_all(run_dir)?;
    let config_path = run_dir.join(CONFIG_FILE);
    if opts.resume && config_path.exists() {
        let existing = RunConfig::load(&config_path, &[])?;
        if existing.hash()? != config_hash {
            return Err(Error::Config {
                key: CONFIG_FILE.into(),
                message: "resume config differs from the run directory's config".into(),
            });
        }
    } else {
        fs::write(&config_path, cfg.to_toml()?)?;
    }
    let mut log = RunLog::open(&run_dir.join(LOG_FILE), opts.resume)?;

    let auditor = AccessAuditor::new();
    let (seen_all, unseen) = load_sources(cfg, &auditor)?;
    let train = &cfg.train;
    let recipe = Recipe::for_method(train.method);
    let stream: Vec<DomainSource> = match train.method {
        Method::Joint => vec![DomainSource {
            config: DomainConfig {
                name: "joint".into(),
                ..seen_all[0].config.clone()
            },
            source: Arc::new(merge_train_sets(&seen_all, &auditor)?),
        }],
        Method::Teata | Method::Sft => seen_all.clone(),
    };

    let device = Device::Cpu;
    let mut state = ModelState::new(
        &cfg.model,
        train.seed,
        recipe.text_guided,
        DType::F32,
        &device,
    )?;
    let done = if opts.resume {
        last_completed_step(run_dir, stream.len())
    } else {
        0
    };
    let mut steps = Vec::new();
    if done > 0 {
        let dir = step_dir(run_dir, done).join("checkpoint");
        let ck = load_checkpoint(&dir, &device)?;
        if ck.meta.config_hash != config_hash {
            return Err(Error::VersionMismatch(format!(
                "{} was written by a different config",
                dir.display()
            )));
        }
        state.restore(&ck.tensors, train.init_mode)?;
        for (i, d) in stream.iter().take(done).enumerate() {
            let t = i + 1;
            auditor.close(&d.dataset().name);
            let aggregate_path = step_dir(run_dir, t).join("reports").join(AGGREGATE_FILE);
            let report = match fs::read_to_string(&aggregate_path) {
                Ok(text) => Some(serde_json::from_str(&text)?),
                Err(_) => None,
            };
            steps.push(StepResult {
                step: t,
                domain: d.config.name.clone(),
                checkpoint: step_dir(run_dir, t).join("checkpoint"),
                checkpoint_digest: crate::checkpoint::read_meta(
                    &step_dir(run_dir, t).join("checkpoint"),
                )?
                .tensors_sha256,
                report,
                stage1: None,
                stage2: None,
                resumed: true,
            });
        }
        log.event(json!({"event": "resume", "after_step": done}))?;
    }

    let prompt_seed = derive_seed(train.seed, &[tag("prompts")]);
    for (i, d) in stream.iter().enumerate().skip(done) {
        let t = i + 1;
        let name = d.dataset().name.clone();
        log::info!("step {t}/{}: {name} ({})", stream.len(), train.method);
        log.event(json!({"event": "step_start", "step": t, "domain": name, "method": train.method.to_string()}))?;
        let mut sink = |e: EpochLog| {
            let _ = log.event(
                json!({"event": "epoch", "step": e.step, "stage": e.stage, "epoch": e.epoch,
                "loss": e.loss, "lr": e.lr, "head_lr": e.head_lr}),
            );
        };
        let stage1 = if recipe.text_guided {
            let store = state
                .prompts
                .as_mut()
                .expect("text-guided state has prompts");
            store.init_domain_prompts(t, d.dataset().num_identities, prompt_seed)?;
            Some(
                run_stage1(
                    &mut state,
                    &d.source,
                    t,
                    train,
                    train.stage1_epochs,
                    &mut sink,
                )
                .map_err(|e| e.context(format!("step {t} stage 1")))?,
            )
        } else {
            None
        };
        let init = prepare_stage2(&state, &d.source, t, train, recipe)?;
        let stage2 = run_stage2(
            &mut state,
            &d.source,
            t,
            t,
            init,
            train,
            recipe,
            train.stage2_epochs,
            &mut sink,
        )
        .map_err(|e| e.context(format!("step {t} stage 2")))?;
        if train.method != Method::Joint {
            auditor.close(&name);
        }

        let ck_dir = step_dir(run_dir, t).join("checkpoint");
        let digest = save_checkpoint(
            &ck_dir,
            &CheckpointHeader {
                config_hash: config_hash.clone(),
                step: t,
                method: train.method.to_string(),
                model: cfg.model.clone(),
            },
            &state.tensors(),
        )?;

        let last = t == stream.len();
        let report = if train.eval_after_each_step || last {
            let seen: Vec<&DomainSource> = match train.method {
                Method::Joint => seen_all.iter().collect(),
                _ => seen_all.iter().take(t).collect(),
            };
            let unseen: Vec<&DomainSource> = unseen.iter().collect();
            let report = evaluate_state(&state.image, &seen, &unseen, &cfg.eval.settings(), t)?;
            write_reports(&step_dir(run_dir, t).join("reports"), &report)?;
            let maps: serde_json::Map<String, serde_json::Value> = report
                .entries
                .iter()
                .map(|e| (e.report.domain.clone(), json!(e.report.map)))
                .collect();
            for e in &report.entries {
                log::info!(
                    "step {t}: {} mAP {:.4} rank1 {:.4}",
                    e.report.domain,
                    e.report.map,
                    e.report.rank1
                );
            }
            log.event(json!({"event": "eval", "step": t, "mAP": maps}))?;
            Some(report)
        } else {
            None
        };
        log.event(
            json!({"event": "step_done", "step": t, "domain": name, "checkpoint_sha256": digest}),
        )?;
        steps.push(StepResult {
            step: t,
            domain: d.config.name.clone(),
            checkpoint: ck_dir,
            checkpoint_digest: digest,
            report,
            stage1,
            stage2: Some(stage2),
            resumed: false,
        });
        if opts.stop_after == Some(t) {
            break;
        }
    }
    Ok(PlanOutcome {
        steps,
        auditor,
        state,
    })
}
