use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use teata_core::checkpoint::{assign_named, load_checkpoint, read_meta};
use teata_core::config::{Method, RunConfig};
use teata_core::data::{generate_synthetic_domain, AccessAuditor};
use teata_core::encoders::ImageEncoder;
use teata_core::eval::{
    export_embeddings, forgetting_matrix, EvalReport, ForgettingMatrix, Metric,
};
use teata_core::lifelong::{
    evaluate_state, load_sources, run_plan, step_dir, DomainSource, RunOptions, AGGREGATE_FILE,
    CONFIG_FILE,
};
use teata_core::rng::rng_for;
use teata_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(
    name = "teata",
    version,
    about = "Lifelong person re-identification on synthetic SC/CC domains"
)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "TEATA_RUN_DIR", default_value = "runs", global = true)]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a dotted config key, e.g. `train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        match (&self.config, fallback) {
            (Some(path), _) => RunConfig::load(path, &self.overrides),
            (None, Some(path)) if path.exists() => RunConfig::load(path, &self.overrides),
            (None, _) => Err(Error::Config {
                key: "--config".into(),
                message: "no configuration file given".into(),
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate every configured synthetic domain.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the configured domain stream.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to `<run-root>/<run name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run name under the run root; defaults to the config file stem.
        #[arg(long)]
        name: Option<String>,
        /// Continue after the last completed step in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this step.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured domains.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Score every domain with the cloth-changing protocol.
        #[arg(long)]
        cc_protocol: bool,
        /// Keep same-camera gallery items.
        #[arg(long)]
        keep_same_camera: bool,
        /// Output directory for reports; defaults to `<checkpoint>/../eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run: final table and forgetting matrices.
    Report {
        /// Run directory.
        run: PathBuf,
    },
    /// Write per-sample and per-identity embeddings as JSON lines.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Runtime => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => gen_data(&config.load(None)?),
        Command::Train {
            config,
            out,
            name,
            resume,
            stop_after,
        } => {
            let run_dir = match (&out, &name, &config.config) {
                (Some(dir), _, _) => dir.clone(),
                (None, Some(n), _) => cli.run_root.join(n),
                (None, None, Some(path)) => cli.run_root.join(
                    path.file_stem()
                        .map_or("run".into(), |s| s.to_string_lossy().into_owned()),
                ),
                (None, None, None) => {
                    return Err(Error::Config {
                        key: "--out".into(),
                        message: "give --config, --name or --out".into(),
                    })
                }
            };
            let fallback = resume.then(|| run_dir.join(CONFIG_FILE));
            let cfg = config.load(fallback.as_deref())?;
            let outcome = run_plan(&cfg, &run_dir, &RunOptions { resume, stop_after })?;
            println!("run directory: {}", run_dir.display());
            for s in &outcome.steps {
                let status = if s.resumed { "resumed" } else { "trained" };
                println!(
                    "step {} ({}): {status}, checkpoint {}",
                    s.step,
                    s.domain,
                    &s.checkpoint_digest[..12]
                );
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            cc_protocol,
            keep_same_camera,
            out,
        } => eval(&checkpoint, &config, cc_protocol, keep_same_camera, out),
        Command::Report { run } => report(&run),
        Command::ExportEmbeddings {
            checkpoint,
            config,
            out,
        } => {
            let cfg = config.load(run_config_of(&checkpoint).as_deref())?;
            let image = load_image_encoder(&checkpoint)?;
            let auditor = AccessAuditor::new();
            let (seen, unseen) = load_sources(&cfg, &auditor)?;
            let sources: Vec<_> = seen
                .iter()
                .chain(&unseen)
                .map(|d| d.source.as_ref())
                .collect();
            let summary = export_embeddings(&image, &sources, &out, cfg.eval.batch_size)?;
            println!(
                "wrote {} sample rows and {} prototype rows to {}",
                summary.samples,
                summary.prototypes,
                out.display()
            );
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    for d in cfg.data.domains.iter().chain(&cfg.eval.unseen) {
        let root = d.resolved_root(&cfg.data.root);
        let ds = generate_synthetic_domain(&d.generator_params(&cfg.model), &root)
            .map_err(|e| e.context(format!("domain `{}`", d.name)))?;
        println!(
            "{}: {} ({} identities, {} images) -> {}",
            ds.name,
            ds.clothing_state,
            ds.num_identities,
            ds.records.len(),
            root.display()
        );
    }
    Ok(())
}

/// `<run>/config.toml` for a checkpoint at `<run>/step{t}/checkpoint`.
fn run_config_of(checkpoint: &Path) -> Option<PathBuf> {
    Some(checkpoint.parent()?.parent()?.join(CONFIG_FILE))
}

fn load_image_encoder(checkpoint: &Path) -> Result<ImageEncoder> {
    let device = candle_core::Device::Cpu;
    let ck = load_checkpoint(checkpoint, &device)?;
    let mut image = ImageEncoder::new(
        &ck.meta.model,
        &mut rng_for(0, &[]),
        candle_core::DType::F32,
        &device,
    )?;
    image.freeze();
    assign_named(&image.named_params(), &ck.tensors, true)?;
    Ok(image)
}

fn eval(
    checkpoint: &Path,
    config: &ConfigArgs,
    cc_protocol: bool,
    keep_same_camera: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let meta = read_meta(checkpoint)?;
    let mut cfg = config.load(run_config_of(checkpoint).as_deref())?;
    cfg.eval.force_cc_protocol |= cc_protocol;
    cfg.eval.exclude_same_camera &= !keep_same_camera;
    let image = load_image_encoder(checkpoint)?;
    let auditor = AccessAuditor::new();
    let (stream, unseen) = load_sources(&cfg, &auditor)?;
    let trained = if meta.method == Method::Joint.to_string() {
        stream.len()
    } else {
        meta.step.min(stream.len())
    };
    let seen: Vec<&DomainSource> = stream.iter().take(trained).collect();
    let unseen: Vec<&DomainSource> = stream.iter().skip(trained).chain(&unseen).collect();
    let report = evaluate_state(&image, &seen, &unseen, &cfg.eval.settings(), meta.step)?;
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    fs::create_dir_all(&out)?;
    for e in &report.entries {
        fs::write(
            out.join(format!("{}.json", e.report.domain)),
            serde_json::to_string_pretty(&e.report)?,
        )?;
        println!(
            "{:<16} {:<6} {:<8} mAP {:.4}  rank1 {:.4}  dropped {}",
            e.report.domain,
            e.clothing_state.to_string(),
            format!("{:?}", e.visibility).to_lowercase(),
            e.report.map,
            e.report.rank1,
            e.report.dropped_queries
        );
    }
    fs::write(
        out.join(AGGREGATE_FILE),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("reports written to {}", out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct Summary<'a> {
    final_step: usize,
    final_report: &'a EvalReport,
    forgetting_map: ForgettingMatrix,
    forgetting_rank1: ForgettingMatrix,
}

fn report(run: &Path) -> Result<()> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for t in 1.. {
        let dir = step_dir(run, t);
        if !dir.exists() {
            break;
        }
        let path = dir.join("reports").join(AGGREGATE_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => reports.push(serde_json::from_str(&text)?),
            Err(_) => continue,
        }
    }
    let last = reports
        .last()
        .ok_or_else(|| Error::MissingReports(format!("no step reports under {}", run.display())))?;
    let summary = Summary {
        final_step: last.step,
        final_report: last,
        forgetting_map: forgetting_matrix(&reports, Metric::Map),
        forgetting_rank1: forgetting_matrix(&reports, Metric::Rank1),
    };
    print!("{}", render(&summary));
    fs::write(
        run.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn render(s: &Summary<'_>) -> String {
    let mut out = format!("final step {}\n", s.final_step);
    out += &format!(
        "{:<16} {:<4} {:<7} {:>8} {:>8}\n",
        "domain", "type", "group", "mAP", "rank1"
    );
    for e in &s.final_report.entries {
        out += &format!(
            "{:<16} {:<4} {:<7} {:>8.4} {:>8.4}\n",
            e.report.domain,
            e.clothing_state.to_string(),
            format!("{:?}", e.visibility).to_lowercase(),
            e.report.map,
            e.report.rank1
        );
    }
    let r = s.final_report;
    for (label, group) in [
        ("seen SC avg", &r.seen_sc),
        ("seen CC avg", &r.seen_cc),
        ("unseen SC avg", &r.unseen_sc),
        ("unseen CC avg", &r.unseen_cc),
    ] {
        if let Some(g) = group {
            out += &format!("{label:<29} {:>8.4} {:>8.4}\n", g.map, g.rank1);
        }
    }
    let m = &s.forgetting_map;
    if m.values.len() > 1 {
        out += "\nmAP after each step (rows: step, columns: domain)\n";
        out += &format!("{:<6}", "");
        for d in &m.domains {
            out += &format!(" {d:>10}");
        }
        out.push('\n');
        for (t, row) in m.values.iter().enumerate() {
            out += &format!("{:<6}", format!("{}", t + 1));
            for v in row {
                match v {
                    Some(v) => out += &format!(" {v:>10.4}"),
                    None => out += &format!(" {:>10}", "-"),
                }
            }
            out.push('\n');
        }
    }
    out += &format!("{:<6}", "F");
    for f in &m.forgetting {
        out += &format!(" {f:>10.4}");
    }
    out.push('\n');
    out
}
