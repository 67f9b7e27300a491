use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cia_core::checkpoint::Checkpoint;
use cia_core::config::{CiaMode, TrainConfig};
use cia_core::diagnostics::{
    export_credit_timeseries, greedy_alternation, kl_matrix, write_credit_csv, write_kl_csv,
};
use cia_core::env::TurnEnv;
use cia_core::mixer::MixerKind;
use cia_core::model::Model;
use cia_core::rng::{stream_rng, Stream};
use cia_core::trainer::{evaluate, evaluate_oracle, load_model, rollout, Trainer, CHECKPOINT_DIR, LATEST_CHECKPOINT};
use cia_core::Exec;

#[derive(Parser)]
#[command(name = "cia", version, about = "Value-decomposition MARL with contrastive credit learning")]
struct Cli {
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the Turn game.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint (or the scripted oracle).
    Eval(EvalArgs),
    /// KL matrix and credit time series for trained checkpoints.
    Analyze(AnalyzeArgs),
    /// Credit time series of one greedy episode.
    ExportCredits(ExportArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<CiaMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mixer: Option<MixerKind>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Any other setting, as `section.key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Print a progress line every this many episodes (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the scripted oracle instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the summary as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Labels for the checkpoints (defaults to file names).
    #[arg(long, num_args = 1..)]
    names: Vec<String>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Skip the KL matrix; only write credit time series.
    #[arg(long)]
    credits_only: bool,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the greedy episode to export.
    #[arg(long, default_value_t = 0)]
    episode: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Analyze(a) => cmd_analyze(a, exec),
        Command::ExportCredits(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<cia_core::Error>()
                .map_or("error", cia_core::Error::kind);
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut overrides = Vec::new();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((key.to_string(), v));
        }
    };
    flag("run.seed", a.seed.map(|v| v.to_string()));
    flag("run.mode", a.mode.map(|v| format!("\"{v}\"")));
    flag("run.alpha", a.alpha.map(|v| format!("{v:?}")));
    flag("run.mixer", a.mixer.map(|v| format!("\"{v}\"")));
    flag("run.total_env_steps", a.steps.map(|v| v.to_string()));
    for s in &a.set {
        let Some((k, v)) = s.split_once('=') else {
            bail!(cia_core::Error::Config(format!("--set {s} must look like section.key=value")));
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(TrainConfig::resolve(text.as_deref(), std::env::vars(), &overrides)?)
}

fn cmd_train(a: TrainArgs, exec: Exec) -> anyhow::Result<()> {
    let latest = a.out.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT);
    let mut trainer = if a.resume && latest.exists() {
        let t = Trainer::resume_dir(&a.out, exec)?;
        eprintln!("resuming at {} env steps", t.counters.env_steps);
        t
    } else {
        Trainer::new(train_config(&a)?, exec)?
    };
    let every = a.log_every;
    if every > 0 {
        trainer.on_progress(move |r| {
            if r.episode % every == 0 || r.eval_return.is_some() {
                let eval = r.eval_return.map_or(String::new(), |v| format!(" eval={v:.2}"));
                eprintln!(
                    "episode={} steps={} eps={:.3} return={:.1} td={} cl={}{eval}",
                    r.episode,
                    r.env_steps,
                    r.epsilon,
                    r.episode_return,
                    r.td_loss.map_or("-".into(), |v| format!("{v:.4}")),
                    r.cl_loss.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
        });
    }
    let manifest = trainer.run(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn read_model(path: &Path) -> anyhow::Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = load_model(&ck).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, ck))
}

fn cmd_eval(a: EvalArgs, exec: Exec) -> anyhow::Result<()> {
    let summary = if a.oracle {
        evaluate_oracle(a.episodes, a.seed, exec)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        evaluate(&read_model(path)?.0, a.episodes, a.seed, exec)?
    };
    let text = serde_json::to_string_pretty(&summary)?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, text + "\n")?;
    }
    Ok(())
}

fn run_seed(ck: &Checkpoint) -> String {
    ck.meta("config")
        .ok()
        .and_then(|c| TrainConfig::from_toml_str(c).ok())
        .map_or("unknown".into(), |c| c.run.seed.to_string())
}

fn cmd_analyze(a: AnalyzeArgs, exec: Exec) -> anyhow::Result<()> {
    if a.episodes == 0 {
        bail!(cia_core::Error::InvalidArgument("--episodes must be >= 1".into()));
    }
    let names: Vec<String> = if a.names.is_empty() {
        a.checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect()
    } else if a.names.len() == a.checkpoints.len() {
        a.names.clone()
    } else {
        bail!(cia_core::Error::InvalidArgument(format!(
            "{} names for {} checkpoints",
            a.names.len(),
            a.checkpoints.len()
        )));
    };
    let mut models = Vec::new();
    let mut header = Vec::new();
    for (name, path) in names.iter().zip(&a.checkpoints) {
        let (m, ck) = read_model(path)?;
        header.push(format!(
            "model {name}: checkpoint={} seed={} mixer={}",
            path.display(),
            run_seed(&ck),
            m.mixer.kind
        ));
        models.push(m);
    }
    header.push(format!("episodes_per_model={} analysis_seed={}", a.episodes, a.seed));
    fs::create_dir_all(&a.out)?;

    let mut summary = serde_json::Map::new();
    if !a.credits_only {
        if models.len() < 2 {
            bail!(cia_core::Error::InvalidArgument(
                "the KL matrix needs at least two checkpoints (or pass --credits-only)".into()
            ));
        }
        let kl = kl_matrix(&models, a.episodes, a.seed, exec)?;
        let mut h = header.clone();
        h.push(format!(
            "pooled_episodes={} pooled_steps={}",
            kl.pooled_episodes, kl.pooled_steps
        ));
        write_kl_csv(fs::File::create(a.out.join("kl.csv"))?, &h, &names, &kl)?;
        summary.insert(
            "kl".into(),
            serde_json::json!((0..names.len()).map(|i| kl.lambda.row_slice(i).to_vec()).collect::<Vec<_>>()),
        );
    }
    let mut alternation = serde_json::Map::new();
    for (i, (name, m)) in names.iter().zip(&models).enumerate() {
        let mut rng = stream_rng(a.seed, Stream::Analysis, (i * a.episodes) as u64);
        let ep = rollout(&mut TurnEnv::new(), m, 0.0, &mut rng)?;
        let rows = export_credit_timeseries(&ep, m)?;
        let mut h = header.clone();
        h.push(format!("credits of {name} on its first greedy episode"));
        write_credit_csv(fs::File::create(a.out.join(format!("credits_{i}.csv")))?, &h, &rows)?;
        let (score, ret) = greedy_alternation(m, a.episodes, a.seed, exec)?;
        alternation.insert(name.clone(), serde_json::json!({ "alternation": score, "mean_return": ret }));
    }
    summary.insert("models".into(), serde_json::Value::Object(alternation));
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(a.out.join("summary.json"), text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}

fn cmd_export(a: ExportArgs) -> anyhow::Result<()> {
    let (model, ck) = read_model(&a.checkpoint)?;
    let mut rng = stream_rng(a.seed, Stream::Analysis, a.episode);
    let ep = rollout(&mut TurnEnv::new(), &model, 0.0, &mut rng)?;
    let rows = export_credit_timeseries(&ep, &model)?;
    let header = vec![format!(
        "model: checkpoint={} seed={} episode={} analysis_seed={}",
        a.checkpoint.display(),
        run_seed(&ck),
        a.episode,
        a.seed
    )];
    write_credit_csv(fs::File::create(&a.out)?, &header, &rows)?;
    Ok(())
}
