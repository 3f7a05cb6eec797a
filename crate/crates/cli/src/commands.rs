use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use socialcircle::config::Settings;
use socialcircle::data::Unit;
use socialcircle::metrics::{case_seed, evaluate, MetricError};
use socialcircle::model::{sample_k, ModelError, ParameterStore};
use socialcircle::probe::{run_probe, ManualNeighborSpec, ProbeError};
use socialcircle::synthetic::{avoidance_scenes, linear_scenes, to_text};
use socialcircle::train::{format_loss_curve, train_from, TrainError};
use socialcircle::{Checkpoint, ModelConfig, Point, ProbeRequest};
use socialcircle_service::{AppState, CaseIndex, LoadError, LoadedModel};

use crate::{Command, Common, SynthKind};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::Config(_) | ModelError::Circle(_) => usage(e),
        _ => data(e),
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => usage(e),
            TrainError::Model(m) => model_error(m),
            TrainError::EmptyDataset | TrainError::Callback(_) => data(e),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Model(m) => model_error(m),
            other => data(other),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Invalid { .. } => usage(e),
            ProbeError::Model(m) => model_error(m),
            other => data(other),
        }
    }
}

/// Run settings echoed into the output directory.
#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: Option<&'a Path>,
    seed: u64,
    out: Option<&'a Path>,
    data: &'a [PathBuf],
    checkpoint: Option<&'a Path>,
    settings: BTreeMap<&'static str, String>,
}

/// Defaults, then the config file, then explicit flags.
pub fn settings(common: &Common) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        let text =
            fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        s.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    let mut set = |key: &str, value: String| s.set(key, &value).map_err(usage);
    if let Some(v) = common.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = common.n_partitions {
        set("n_partitions", v.to_string())?;
    }
    if let Some(v) = &common.factors {
        set("factors", v.clone())?;
    }
    if common.no_socialcircle {
        set("use_socialcircle", "false".into())?;
    }
    if let Some(v) = common.k {
        set("k", v.to_string())?;
    }
    if let Some(v) = common.epochs {
        set("epochs", v.to_string())?;
    }
    if let Some(v) = common.lr {
        set("lr", format!("{v:?}"))?;
    }
    if let Some(v) = common.batch_size {
        set("batch_size", v.to_string())?;
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got `{pair}`")))?;
        set(k.trim(), v.trim().to_string())?;
    }
    Ok(s)
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| data(format!("{}: {e}", out.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).map_err(data)?;
    write(&out.join("manifest.json"), text + "\n")
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Checkpoint config with the partition-count override applied.
fn effective_config(checkpoint: &Checkpoint, common: &Common) -> Result<ModelConfig, CliError> {
    let mut config = checkpoint.config.clone();
    if let Some(n) = common.n_partitions {
        if !config.use_socialcircle {
            return Err(usage(
                "--n-partitions needs a model with the SocialCircle branch",
            ));
        }
        config.partition.n_partitions = n;
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

pub fn run(common: &Common, command: Command) -> Result<(), CliError> {
    let s = settings(common)?;
    match command {
        Command::Train { data, out } => cmd_train(common, &s, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            out,
            dump_samples,
        } => cmd_eval(common, &s, &checkpoint, &data, &out, dump_samples),
        Command::Probe {
            checkpoint,
            data,
            case_id,
            manual,
            out,
            plot_data,
        } => cmd_probe(
            common,
            &s,
            ProbeArgs {
                checkpoint,
                data,
                case_id,
                manual,
                out,
                plot_data,
            },
        ),
        Command::Serve {
            data,
            checkpoint,
            addr,
        } => cmd_serve(&s, &data, checkpoint, addr),
        Command::Synth { kind, n, out } => cmd_synth(&s, kind, n, &out),
    }
}

fn cmd_train(common: &Common, s: &Settings, paths: &[PathBuf], out: &Path) -> Result<(), CliError> {
    s.model.validate().map_err(usage)?;
    s.train.validate()?;
    let index = CaseIndex::from_files(paths, s.unit, s.model.t_h, s.model.t_f, s.stride)?;
    if index.is_empty() {
        return Err(data("the data files contain no complete windows"));
    }
    create_out(out)?;
    write_manifest(
        out,
        &RunManifest {
            subcommand: "train",
            config: common.config.as_deref(),
            seed: s.train.seed,
            out: Some(out),
            data: paths,
            checkpoint: None,
            settings: s.to_map(),
        },
    )?;
    write(&out.join("settings.txt"), s.to_text())?;

    let cases: Vec<_> = index.cases().into_iter().cloned().collect();
    let params = ParameterStore::init(&s.model, s.train.seed).map_err(model_error)?;
    let final_epoch = s.train.epochs;
    let outcome = train_from(&cases, &s.model, &s.train, params, |epoch, params| {
        if epoch == final_epoch {
            return Ok(());
        }
        let ckpt = Checkpoint::new(s.model.clone(), params.clone()).map_err(|e| e.to_string())?;
        ckpt.save(out.join(format!("checkpoint-epoch{epoch:04}.json")))
            .map_err(|e| e.to_string())
    })?;
    let ckpt = Checkpoint::new(s.model.clone(), outcome.params).map_err(data)?;
    ckpt.save(out.join("checkpoint.json")).map_err(data)?;
    write(
        &out.join("loss_curve.txt"),
        format_loss_curve(&outcome.loss_curve),
    )?;
    println!(
        "trained {} cases for {} epochs: loss {:.6e} -> {:.6e}; {}",
        cases.len(),
        outcome.loss_curve.len(),
        outcome.loss_curve[0],
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        ckpt.checksum()
    );
    Ok(())
}

#[derive(Serialize)]
struct CaseSamples<'a> {
    case_id: &'a str,
    seed: u64,
    samples: Vec<Vec<Point>>,
}

fn cmd_eval(
    common: &Common,
    s: &Settings,
    checkpoint_path: &Path,
    paths: &[PathBuf],
    out: &Path,
    dump_samples: bool,
) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let config = effective_config(&checkpoint, common)?;
    if s.k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let index = CaseIndex::from_files(paths, s.unit, config.t_h, config.t_f, s.stride)?;
    let cases: Vec<_> = index.cases().into_iter().cloned().collect();
    let mut report = evaluate(&checkpoint.params, &config, &cases, s.k, s.train.seed)?;
    report.unit = s.unit;

    create_out(out)?;
    write_manifest(
        out,
        &RunManifest {
            subcommand: "eval",
            config: common.config.as_deref(),
            seed: s.train.seed,
            out: Some(out),
            data: paths,
            checkpoint: Some(checkpoint_path),
            settings: s.to_map(),
        },
    )?;
    write(&out.join("report.txt"), report.to_text())?;
    write(&out.join("per_case.tsv"), report.per_case_table())?;
    if dump_samples {
        let mut dump = Vec::with_capacity(cases.len());
        for case in &cases {
            let seed = case_seed(s.train.seed, &case.case_id);
            let output =
                sample_k(case, &checkpoint.params, &config, s.k, seed).map_err(model_error)?;
            dump.push(CaseSamples {
                case_id: &case.case_id,
                seed,
                samples: output.denormalized.expect("sample_k denormalizes"),
            });
        }
        write(
            &out.join("samples.json"),
            serde_json::to_string(&dump).map_err(data)? + "\n",
        )?;
    }
    print!("{}", report.to_text());
    Ok(())
}

struct ProbeArgs {
    checkpoint: PathBuf,
    data: Vec<PathBuf>,
    case_id: String,
    manual: Vec<ManualNeighborSpec>,
    out: Option<PathBuf>,
    plot_data: Option<PathBuf>,
}

fn cmd_probe(common: &Common, s: &Settings, args: ProbeArgs) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let config = &checkpoint.config;
    let index = CaseIndex::from_files(&args.data, s.unit, config.t_h, config.t_f, s.stride)?;
    let case = index
        .get(&args.case_id)
        .ok_or_else(|| data(format!("unknown case `{}`", args.case_id)))?;
    let factors = match &common.factors {
        Some(f) => Some(f.parse().map_err(|e| usage(format!("--factors: {e}")))?),
        None => None,
    };
    let request = ProbeRequest {
        case_id: args.case_id.clone(),
        manual_neighbors: args.manual.clone(),
        // A probe looks at one future unless asked for more.
        k: common.k.unwrap_or(1),
        seed: s.train.seed,
        n_partitions: common.n_partitions,
        factors,
    };
    let response = run_probe(&checkpoint, case, &request)?;
    let json = serde_json::to_string_pretty(&response).map_err(data)? + "\n";

    if let Some(out) = &args.out {
        create_out(out)?;
        write_manifest(
            out,
            &RunManifest {
                subcommand: "probe",
                config: common.config.as_deref(),
                seed: s.train.seed,
                out: Some(out),
                data: &args.data,
                checkpoint: Some(&args.checkpoint),
                settings: s.to_map(),
            },
        )?;
        write(
            &out.join("request.json"),
            serde_json::to_string_pretty(&request).map_err(data)? + "\n",
        )?;
        write(&out.join("probe.json"), &json)?;
    }
    if let Some(path) = &args.plot_data {
        write(path, response.plot_data())?;
    }
    print!("{json}");
    Ok(())
}

fn cmd_serve(
    s: &Settings,
    paths: &[PathBuf],
    checkpoint: Option<PathBuf>,
    addr: std::net::SocketAddr,
) -> Result<(), CliError> {
    let model = match checkpoint {
        Some(path) => Some(LoadedModel::new(load_checkpoint(&path)?, Some(path))),
        None => None,
    };
    let (t_h, t_f) = model.as_ref().map_or((s.model.t_h, s.model.t_f), |m| {
        (m.checkpoint.config.t_h, m.checkpoint.config.t_f)
    });
    let index = CaseIndex::from_files(paths, s.unit, t_h, t_f, s.stride)?;
    let state = AppState::new(index, model);
    let runtime = tokio::runtime::Runtime::new().map_err(data)?;
    eprintln!("listening on http://{addr}");
    runtime
        .block_on(socialcircle_service::serve(addr, state))
        .map_err(|e| data(format!("{addr}: {e}")))
}

fn cmd_synth(s: &Settings, kind: SynthKind, n: usize, out: &Path) -> Result<(), CliError> {
    let (t_h, t_f, dt, seed) = (
        s.model.t_h,
        s.model.t_f,
        s.model.partition.step_seconds,
        s.train.seed,
    );
    let tracks = match kind {
        SynthKind::Linear => linear_scenes(n, t_h, t_f, dt, seed),
        SynthKind::Avoidance => avoidance_scenes(n, t_h, t_f, dt, seed),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    let mut text = to_text(&tracks);
    if s.unit == Unit::Pixels {
        text = format!("# unit: pixels\n{text}");
    }
    write(out, text)
}
