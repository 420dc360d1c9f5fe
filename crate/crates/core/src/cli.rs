//! Command-line front end: trace synthesis and ingestion, predictor and
//! agent training/evaluation, and baseline pipelines. Every pipeline is a
//! pure function of its config and seed; reruns produce byte-identical
//! metric files and checkpoints.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::agent::{evaluate_policy, train_peto, EvalSummary, PetoAgent, PetoSource};
use crate::baselines::{train_pawp, vanilla_config, BaselineKind, LstmPredictor, RuecPolicy};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::geo;
use crate::metrics::{write_metrics, ColumnKind, Schema, Value};
use crate::predictor::{test_rmse, train_sequence_model, EpochStats, Predictor};
use crate::scenario::{RunConfig, TraceSource};
use crate::tensor::Tensor;

/// Anchor used when emitting synthetic traces as geodetic CSV.
const SYNTH_ANCHOR: (f64, f64) = (39.9, 116.3);

#[derive(Parser)]
#[command(
    name = "amec",
    about = "UAV edge-computing lab: simulator, trajectory prediction, offloading agent",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic GPS traces and write them as CSV.
    Synth {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        seed: u64,
        /// Output CSV path (defaults to <out>/traces.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output directory when --out is not given.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Clean a raw trace CSV and store per-user Cartesian traces.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_gap: i64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Train the hierarchical trajectory predictor.
    TrainPredictor {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report test RMSE of a stored predictor.
    EvalPredictor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the prediction-augmented offloading agent.
    TrainAgent {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a stored agent with deterministic mean actions.
    EvalAgent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a comparison method named in the config's `baseline` section.
    Baseline {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            users,
            length,
            seed,
            out,
            out_dir,
        } => synth(users, length, seed, out, out_dir),
        Command::Ingest {
            input,
            max_gap,
            out,
            out_dir,
        } => ingest(&input, max_gap, out, out_dir),
        Command::TrainPredictor { config } => train_predictor_cmd(&config),
        Command::EvalPredictor { config, checkpoint } => eval_predictor_cmd(&config, checkpoint),
        Command::TrainAgent { config } => train_agent_cmd(&config),
        Command::EvalAgent {
            config,
            checkpoint,
            episodes,
        } => eval_agent_cmd(&config, checkpoint, episodes),
        Command::Baseline { config } => baseline_cmd(&config),
    }
}

/// `AMEC_OUT` overrides any configured output directory.
fn out_dir_from(configured: &Path) -> PathBuf {
    match std::env::var_os("AMEC_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => configured.to_path_buf(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn synth(users: usize, length: usize, seed: u64, out: Option<PathBuf>, out_dir: PathBuf) -> Result<()> {
    let out_dir = out_dir_from(&out_dir);
    let path = match out {
        Some(p) => p,
        None => {
            ensure_dir(&out_dir)?;
            out_dir.join("traces.csv")
        }
    };
    let traces = geo::gen_synthetic_traces(users, length, seed);
    let mut text = String::from("user_id,timestamp,lat,lon\n");
    for (u, trace) in traces.iter().enumerate() {
        for (t, &p) in trace.iter().enumerate() {
            let (lat, lon) = geo::local_to_geodetic(p, SYNTH_ANCHOR);
            text.push_str(&format!("u{u:03},{t},{lat:.9},{lon:.9}\n"));
        }
    }
    std::fs::write(&path, text)?;
    println!(
        "synth: wrote {} users x {} points to {}",
        users,
        length,
        path.display()
    );
    Ok(())
}

fn ingest(input: &Path, max_gap: i64, out: Option<PathBuf>, out_dir: PathBuf) -> Result<()> {
    let out_dir = out_dir_from(&out_dir);
    let path = match out {
        Some(p) => p,
        None => {
            ensure_dir(&out_dir)?;
            out_dir.join("traces.bin")
        }
    };
    let file = std::fs::File::open(input)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", input.display())))?;
    let (users, stats) = geo::parse_and_clean(file, max_gap)?;
    if users.is_empty() {
        return Err(Error::config("no usable rows in input".to_string()));
    }
    let mut entries = Vec::new();
    let mut origin = None;
    for user in &users {
        let segment = user
            .segments
            .iter()
            .max_by_key(|s| s.len())
            .expect("cleaned users have segments");
        let anchor = *origin.get_or_insert((segment[0].lat, segment[0].lon));
        let trace = geo::project_to_local(segment, anchor)?;
        let data: Vec<f64> = trace.points.iter().flatten().copied().collect();
        entries.push((
            format!("trace/{}", user.user_id),
            Tensor::new(vec![trace.points.len(), 2], data)?,
        ));
    }
    save_checkpoint(&path, &entries)?;
    println!(
        "ingest: {} users, {} segments, {} interpolated points, {} malformed rows, {} duplicates -> {}",
        users.len(),
        stats.segments,
        stats.interpolated_points,
        stats.malformed_rows,
        stats.duplicate_rows,
        path.display()
    );
    Ok(())
}

fn loss_schema(with_method: bool) -> Schema {
    let mut cols = vec![];
    if with_method {
        cols.push(("method", ColumnKind::Text));
    }
    cols.extend([
        ("epoch", ColumnKind::Int),
        ("train_rmse", ColumnKind::Real),
        ("val_rmse", ColumnKind::Real),
    ]);
    Schema::new(&cols)
}

fn loss_rows(history: &[EpochStats], method: Option<&str>) -> Vec<Vec<Value>> {
    history
        .iter()
        .map(|e| {
            let mut row = vec![];
            if let Some(m) = method {
                row.push(Value::Text(m.to_string()));
            }
            row.extend([
                Value::Int(e.epoch as i64),
                Value::Real(e.train_rmse),
                Value::Real(e.val_rmse),
            ]);
            row
        })
        .collect()
}

fn predictor_dataset(rc: &RunConfig) -> Result<(crate::geo::DatasetSplit, usize, usize)> {
    let trace = rc
        .trace
        .as_ref()
        .ok_or_else(|| Error::config("config is missing the `trace` field".to_string()))?;
    let pcfg = rc
        .predictor
        .clone()
        .ok_or_else(|| Error::config("config is missing the `predictor` field".to_string()))?;
    let base = std::env::current_dir()?;
    let traces = match trace {
        TraceSource::Csv { .. } => trace.load(rc.trace_users, &base)?,
        TraceSource::Synthetic { .. } => trace.load(rc.trace_users, &base)?,
    };
    let data = geo::build_dataset(&traces, pcfg.history_len, pcfg.horizon, rc.stride);
    Ok((data, pcfg.history_len, pcfg.horizon))
}

fn train_predictor_cmd(config: &Path) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let out = out_dir_from(Path::new(&rc.out_dir));
    ensure_dir(&out)?;
    let pcfg = rc
        .predictor
        .clone()
        .ok_or_else(|| Error::config("config is missing the `predictor` field".to_string()))?;
    let (data, _, _) = predictor_dataset(&rc)?;
    let mut rng = crate::rng::stream(rc.seed, "predictor-init");
    let mut model = Predictor::new(pcfg.clone(), &mut rng)?;
    let history = train_sequence_model(
        &mut model,
        &data,
        pcfg.learning_rate,
        pcfg.batch_size,
        pcfg.max_epochs,
        pcfg.patience,
        rc.seed,
    )?;
    write_metrics(&out.join("predictor_loss.csv"), &loss_schema(false), &loss_rows(&history, None))?;
    save_checkpoint(&out.join("predictor.bin"), &model.to_checkpoint_entries())?;
    let rmse = test_rmse(&model, &data.test)?;
    println!(
        "train-predictor: {} epochs, best val {:.6}, test rmse {:.6} m -> {}",
        history.len(),
        history.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min),
        rmse,
        out.display()
    );
    Ok(())
}

fn eval_predictor_cmd(config: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let Some(ckpt) = checkpoint else {
        return Err(Error::config(
            "missing required flag --checkpoint".to_string(),
        ));
    };
    let rc = RunConfig::load(config)?;
    let out = out_dir_from(Path::new(&rc.out_dir));
    ensure_dir(&out)?;
    let model = Predictor::from_checkpoint_entries(&load_checkpoint(&ckpt)?)?;
    let (data, _, _) = predictor_dataset(&rc)?;
    let rmse = test_rmse(&model, &data.test)?;
    let schema = Schema::new(&[("method", ColumnKind::Text), ("test_rmse", ColumnKind::Real)]);
    write_metrics(
        &out.join("predictor_eval.csv"),
        &schema,
        &[vec![Value::Text("hierarchical".to_string()), Value::Real(rmse)]],
    )?;
    println!("eval-predictor: test rmse {rmse:.6} m over {} windows", data.test.len());
    Ok(())
}

fn episode_schema(with_method: bool) -> Schema {
    let mut cols = vec![];
    if with_method {
        cols.push(("method", ColumnKind::Text));
    }
    cols.extend([
        ("episode", ColumnKind::Int),
        ("weighted_avg_completion", ColumnKind::Real),
        ("remaining_energy", ColumnKind::Real),
        ("violations", ColumnKind::Int),
    ]);
    Schema::new(&cols)
}

fn episode_rows(metrics: &[crate::agent::EpisodeMetrics], method: Option<&str>) -> Vec<Vec<Value>> {
    metrics
        .iter()
        .map(|m| {
            let mut row = vec![];
            if let Some(label) = method {
                row.push(Value::Text(label.to_string()));
            }
            row.extend([
                Value::Int(m.episode as i64),
                Value::Real(m.weighted_avg_completion),
                Value::Real(m.remaining_energy),
                Value::Int(m.violations as i64),
            ]);
            row
        })
        .collect()
}

fn summary_schema() -> Schema {
    Schema::new(&[
        ("method", ColumnKind::Text),
        ("episodes", ColumnKind::Int),
        ("mean_completion", ColumnKind::Real),
        ("std_completion", ColumnKind::Real),
        ("violation_rate", ColumnKind::Real),
        ("mean_energy_used", ColumnKind::Real),
        ("mean_reward", ColumnKind::Real),
    ])
}

fn summary_row(method: &str, s: &EvalSummary) -> Vec<Value> {
    vec![
        Value::Text(method.to_string()),
        Value::Int(s.episodes as i64),
        Value::Real(s.mean_completion),
        Value::Real(s.std_completion),
        Value::Real(s.violation_rate),
        Value::Real(s.mean_energy_used),
        Value::Real(s.mean_reward),
    ]
}

fn load_predictor_for_agent(rc: &RunConfig) -> Result<Predictor> {
    let p = rc.predictor_checkpoint.as_ref().ok_or_else(|| {
        Error::config("config is missing the `predictor_checkpoint` field".to_string())
    })?;
    Predictor::from_checkpoint_entries(&load_checkpoint(&rc.resolve(p))?)
}

fn train_agent_cmd(config: &Path) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let out = out_dir_from(Path::new(&rc.out_dir));
    ensure_dir(&out)?;
    let acfg = rc
        .agent
        .clone()
        .ok_or_else(|| Error::config("config is missing the `agent` field".to_string()))?;
    let predictor = load_predictor_for_agent(&rc)?;
    let mut env = rc.scenario()?.build_env(rc.seed)?;
    let (agent, metrics) = train_peto(&mut env, Some(&predictor), &acfg, rc.seed)?;
    write_metrics(&out.join("agent_train.csv"), &episode_schema(false), &episode_rows(&metrics, None))?;
    save_checkpoint(&out.join("agent.bin"), &agent.to_checkpoint_entries())?;
    let last = metrics.last().expect("at least one episode");
    println!(
        "train-agent: {} episodes, final weighted completion {:.6} s, remaining energy {:.1} J -> {}",
        metrics.len(),
        last.weighted_avg_completion,
        last.remaining_energy,
        out.display()
    );
    Ok(())
}

fn eval_agent_cmd(config: &Path, checkpoint: Option<PathBuf>, episodes: Option<usize>) -> Result<()> {
    let Some(ckpt) = checkpoint else {
        return Err(Error::config(
            "missing required flag --checkpoint".to_string(),
        ));
    };
    let rc = RunConfig::load(config)?;
    let out = out_dir_from(Path::new(&rc.out_dir));
    ensure_dir(&out)?;
    let agent = PetoAgent::from_checkpoint_entries(&load_checkpoint(&ckpt)?)?;
    let mut env = rc.scenario()?.build_env(rc.seed)?;
    let needs_predictor = agent.obs_dim > env.state_dim();
    let predictor = if needs_predictor {
        Some(load_predictor_for_agent(&rc)?)
    } else {
        None
    };
    let episodes = episodes.unwrap_or(rc.eval_episodes);
    let mut source = PetoSource {
        agent: &agent,
        predictor: predictor.as_ref(),
    };
    let summary = evaluate_policy(&mut source, &mut env, episodes)?;
    write_metrics(
        &out.join("agent_eval.csv"),
        &summary_schema(),
        &[summary_row("peto", &summary)],
    )?;
    println!(
        "eval-agent: mean weighted completion {:.6} s over {} episodes, violation rate {:.3}",
        summary.mean_completion, episodes, summary.violation_rate
    );
    Ok(())
}

fn baseline_cmd(config: &Path) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let out = out_dir_from(Path::new(&rc.out_dir));
    ensure_dir(&out)?;
    let spec = rc
        .baseline
        .clone()
        .ok_or_else(|| Error::config("config is missing the `baseline` field".to_string()))?;
    let seed = spec.seed.unwrap_or(rc.seed);
    match spec.kind {
        BaselineKind::Ruec => {
            let mut env = rc.scenario()?.build_env(rc.seed)?;
            let mut policy = RuecPolicy::new(seed);
            let summary = evaluate_policy(&mut policy, &mut env, rc.eval_episodes)?;
            write_metrics(
                &out.join("baseline_ruec.csv"),
                &summary_schema(),
                &[summary_row("ruec", &summary)],
            )?;
            println!(
                "baseline ruec: mean weighted completion {:.6} s, violation rate {:.3}",
                summary.mean_completion, summary.violation_rate
            );
        }
        BaselineKind::Pawp => {
            let acfg = rc
                .agent
                .clone()
                .ok_or_else(|| Error::config("config is missing the `agent` field".to_string()))?;
            let mut env = rc.scenario()?.build_env(rc.seed)?;
            let (agent, metrics) = train_pawp(&mut env, &acfg, seed)?;
            write_metrics(
                &out.join("baseline_pawp_train.csv"),
                &episode_schema(true),
                &episode_rows(&metrics, Some("pawp")),
            )?;
            save_checkpoint(&out.join("agent_pawp.bin"), &agent.to_checkpoint_entries())?;
            let mut source = PetoSource {
                agent: &agent,
                predictor: None,
            };
            let summary = evaluate_policy(&mut source, &mut env, rc.eval_episodes)?;
            write_metrics(
                &out.join("baseline_pawp.csv"),
                &summary_schema(),
                &[summary_row("pawp", &summary)],
            )?;
            println!(
                "baseline pawp: mean weighted completion {:.6} s after {} episodes",
                summary.mean_completion,
                metrics.len()
            );
        }
        BaselineKind::LstmPred => {
            let pcfg = rc
                .predictor
                .clone()
                .ok_or_else(|| Error::config("config is missing the `predictor` field".to_string()))?;
            let (data, t_h, t_p) = predictor_dataset(&rc)?;
            let mut rng = crate::rng::stream(seed, "lstm-init");
            let mut model = LstmPredictor::new(t_h, t_p, 128, 64, &mut rng);
            let history = train_sequence_model(
                &mut model,
                &data,
                pcfg.learning_rate,
                pcfg.batch_size,
                pcfg.max_epochs,
                pcfg.patience,
                seed,
            )?;
            write_metrics(
                &out.join("baseline_lstm_loss.csv"),
                &loss_schema(true),
                &loss_rows(&history, Some("lstm")),
            )?;
            save_checkpoint(&out.join("predictor_lstm.bin"), &model.to_checkpoint_entries())?;
            let rmse = test_rmse(&model, &data.test)?;
            println!("baseline lstm: test rmse {rmse:.6} m after {} epochs", history.len());
        }
        BaselineKind::VanillaPred => {
            let pcfg = rc
                .predictor
                .clone()
                .ok_or_else(|| Error::config("config is missing the `predictor` field".to_string()))?;
            let vcfg = vanilla_config(&pcfg);
            let (data, _, _) = predictor_dataset(&rc)?;
            let mut rng = crate::rng::stream(seed, "predictor-init");
            let mut model = Predictor::new(vcfg.clone(), &mut rng)?;
            let history = train_sequence_model(
                &mut model,
                &data,
                vcfg.learning_rate,
                vcfg.batch_size,
                vcfg.max_epochs,
                vcfg.patience,
                seed,
            )?;
            write_metrics(
                &out.join("baseline_vanilla_loss.csv"),
                &loss_schema(true),
                &loss_rows(&history, Some("vanilla")),
            )?;
            save_checkpoint(&out.join("predictor_vanilla.bin"), &model.to_checkpoint_entries())?;
            let rmse = test_rmse(&model, &data.test)?;
            println!("baseline vanilla: test rmse {rmse:.6} m after {} epochs", history.len());
        }
    }
    Ok(())
}
