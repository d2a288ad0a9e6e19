use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use servicetime::config::{RunConfig, RunManifest};
use servicetime::eval::{
    baseline_predictions, challenge_plots, evaluate_baseline, evaluate_by_type, evaluate_model, request_centroids,
    run_ablation, MetricReport,
};
use servicetime::ingest::{discover_regions, parse_requests, write_requests, Dataset, IngestReport, RegionMap};
use servicetime::panel::{build_panel, build_panel_with_fallback};
use servicetime::predictor::{
    load_checkpoint, predict_samples, prepare, save_checkpoint, train, PreparedData, ServiceTimeModel, Variant,
};
use servicetime::service::{serve, ServiceState};
use servicetime::synth::{simulate, verify_phenomena};
use servicetime::workload::{read_workloads, write_workloads, WorkloadScorer};
use servicetime::Error;

use crate::{AblateArgs, Cli, Command, EvaluateArgs, PredictArgs, ServeArgs, SimulateArgs, SweepArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.output {
        config.paths.output = out;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.data.seed = seed;
        config.train.seed = seed;
    }
    if let Command::Train(TrainArgs { variant: Some(v) }) = &cli.command {
        config.train.variant = v.parse()?;
    }
    let name = command_name(&cli.command);
    let out = config.paths.output.clone();
    let manifest = RunManifest::new(name, std::env::args().collect(), &config)?;
    manifest.write(&out).context("writing run manifest")?;

    match cli.command {
        Command::Ingest => ingest(&config, &out),
        Command::ScoreWorkloads => score_workloads(&config, &out),
        Command::Train(_) => train_cmd(&config, &out),
        Command::Evaluate(a) => evaluate(&config, &out, a),
        Command::Ablate(a) => ablate(&config, &out, a),
        Command::Sweep(a) => sweep(&config, &out, a),
        Command::Analyze => analyze(&config, &out),
        Command::Simulate(a) => simulate_cmd(&config, &out, a),
        Command::Serve(a) => serve_cmd(&config, a),
        Command::Predict(a) => predict(&config, a),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest => "ingest",
        Command::ScoreWorkloads => "score-workloads",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Ablate(_) => "ablate",
        Command::Sweep(_) => "sweep",
        Command::Analyze => "analyze",
        Command::Simulate(_) => "simulate",
        Command::Serve(_) => "serve",
        Command::Predict(_) => "predict",
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")).into())
}

fn load_regions(config: &RunConfig) -> Result<RegionMap> {
    match &config.paths.regions {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RegionMap::from_geojson(&text, &config.paths.region_property)?)
        }
        None => {
            let data = required(&config.paths.data, "paths.data")?;
            let file = File::open(data).with_context(|| format!("opening {}", data.display()))?;
            Ok(discover_regions(file, &config.schema)?)
        }
    }
}

fn load_dataset(config: &RunConfig) -> Result<(Dataset, IngestReport, RegionMap)> {
    let regions = load_regions(config)?;
    let data = required(&config.paths.data, "paths.data")?;
    let file = File::open(data).with_context(|| format!("opening {}", data.display()))?;
    let (ds, report) = parse_requests(file, &regions, &config.schema)?;
    info!(
        "{} rows read, {} retained, {} skipped, {} unassigned",
        report.total_rows, report.retained, report.skipped, report.unassigned
    );
    if ds.is_empty() {
        bail!("no usable requests in {}", data.display());
    }
    Ok((ds, report, regions))
}

fn load_workload_map(config: &RunConfig) -> Result<HashMap<String, f64>> {
    let Some(p) = &config.paths.workloads else {
        return Ok(HashMap::new());
    };
    let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(read_workloads(file)?.into_iter().map(|(k, v)| (k, v.w)).collect())
}

fn prepare_data(config: &RunConfig) -> Result<(PreparedData, Dataset, RegionMap)> {
    let (ds, _, regions) = load_dataset(config)?;
    let workloads = load_workload_map(config)?;
    let data = prepare(&ds, &regions.labels, &workloads, &config.data)?;
    info!("{} train and {} test samples", data.train.len(), data.test.len());
    Ok((data, ds, regions))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(config: &RunConfig, arg: Option<PathBuf>, out: &Path) -> PathBuf {
    arg.or_else(|| config.paths.checkpoint.clone())
        .unwrap_or_else(|| out.join("model.ckpt"))
}

fn ingest(config: &RunConfig, out: &Path) -> Result<()> {
    let (ds, report, regions) = load_dataset(config)?;
    write_requests(
        BufWriter::new(File::create(out.join("requests.csv"))?),
        &ds.requests,
        &regions,
    )?;
    write_json(
        &out.join("regions.geojson"),
        &regions.to_geojson(&config.paths.region_property),
    )?;
    write_json(&out.join("ingest_report.json"), &report)?;
    let panel = build_panel(&ds, regions.len(), &ds.type_vocabulary)?;
    panel.write_to(BufWriter::new(File::create(out.join("panel.bin"))?))?;
    println!(
        "{} requests, {} types, {} regions, {} days",
        ds.len(),
        ds.type_vocabulary.len(),
        regions.len(),
        panel.days
    );
    Ok(())
}

fn score_workloads(config: &RunConfig, out: &Path) -> Result<()> {
    let (ds, _, _) = load_dataset(config)?;
    let scorer = WorkloadScorer::from_config(&config.llm)?;
    let items: Vec<_> = ds
        .requests
        .iter()
        .map(|r| (r.description.as_deref(), r.request_type.as_str(), r.created_day()))
        .collect();
    let scores = scorer.score_all(&items);
    let rows: Vec<_> = ds.requests.iter().map(|r| r.request_id.clone()).zip(scores).collect();
    let path = out.join("workloads.csv");
    write_workloads(BufWriter::new(File::create(&path)?), &rows)?;
    println!(
        "{} scores written to {} ({} model calls)",
        rows.len(),
        path.display(),
        scorer.backend_calls()
    );
    Ok(())
}

fn train_cmd(config: &RunConfig, out: &Path) -> Result<()> {
    let (data, _, _) = prepare_data(config)?;
    let (model, log) = train(&data, &config.model, &config.train)?;
    let ckpt = checkpoint_path(config, None, out);
    save_checkpoint(&ckpt, &model)?;
    write_json(&out.join("training_log.json"), &log)?;
    let mut report = evaluate_baseline(&data)?;
    report.extend(evaluate_model(&model, &data)?);
    report.save(out, "metrics")?;
    println!("checkpoint {} (best epoch {})", ckpt.display(), log.best_epoch);
    print!("{}", report.table());
    Ok(())
}

fn evaluate(config: &RunConfig, out: &Path, args: EvaluateArgs) -> Result<()> {
    let ckpt = checkpoint_path(config, args.checkpoint, out);
    let model = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (mut ds, _, regions) = load_dataset(config)?;
    check_regions(&model, &regions)?;
    ds.type_vocabulary = model.manifest.type_vocabulary.clone();
    let workloads = load_workload_map(config)?;
    let data = prepare(&ds, &regions.labels, &workloads, &model.manifest.data)?;
    let samples = match args.split.as_str() {
        "train" => &data.train,
        _ => &data.test,
    };
    if samples.is_empty() {
        bail!("the {} split has no evaluable requests", args.split);
    }
    let mut report = evaluate_by_type(
        &data.vocabulary,
        samples,
        &baseline_predictions(&data, samples),
        servicetime::eval::BASELINE_LABEL,
    )?;
    let predicted = predict_samples(&model, &data, samples)?;
    report.extend(evaluate_by_type(
        &data.vocabulary,
        samples,
        &predicted,
        model.variant().label(),
    )?);
    report.save(out, &format!("evaluation_{}", args.split))?;
    print!("{}", report.table());
    Ok(())
}

fn check_regions(model: &ServiceTimeModel, regions: &RegionMap) -> Result<()> {
    if model.manifest.region_labels != regions.labels {
        bail!(
            "region map ({} regions) does not match the checkpoint ({} regions)",
            regions.len(),
            model.manifest.region_labels.len()
        );
    }
    Ok(())
}

fn ablate(config: &RunConfig, out: &Path, args: AblateArgs) -> Result<()> {
    let variants = args
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<servicetime::Result<Vec<_>>>()?;
    let (data, _, _) = prepare_data(config)?;
    let (report, models) = run_ablation(&data, &config.model, &config.train, &variants)?;
    for m in &models {
        save_checkpoint(&out.join(format!("model{}.ckpt", variant_suffix(m.variant()))), m)?;
    }
    report.save(out, "ablation")?;
    print!("{}", report.table());
    Ok(())
}

fn variant_suffix(v: Variant) -> String {
    match v {
        Variant::Full => String::new(),
        other => format!("_{}", other.label().trim_start_matches('-')),
    }
}

/// Applies one sweep value to a copy of the configuration.
fn with_param(config: &RunConfig, param: &str, value: &str) -> Result<RunConfig> {
    let mut c = config.clone();
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("`{param}` value `{value}`: {e}"));
    match param {
        "T" | "window" => {
            let t: usize = value.parse().map_err(|e| bad(&e))?;
            c.data.window = t;
            c.model.window = t;
        }
        "learning_rate" => c.train.learning_rate = value.parse().map_err(|e| bad(&e))?,
        "hidden_width" => c.model.hidden_width = value.parse().map_err(|e| bad(&e))?,
        "model_dim" => c.model.temporal.model_dim = value.parse().map_err(|e| bad(&e))?,
        "alpha" => c.data.gpr.alpha_fraction = value.parse().map_err(|e| bad(&e))?,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected T, learning_rate, hidden_width, model_dim or alpha)"
            ))
            .into())
        }
    }
    c.validate()?;
    Ok(c)
}

fn sweep(config: &RunConfig, out: &Path, args: SweepArgs) -> Result<()> {
    let configs = args
        .values
        .iter()
        .map(|v| with_param(config, &args.param, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let (ds, _, regions) = load_dataset(config)?;
    let workloads = load_workload_map(config)?;
    let mut report = MetricReport::new();
    for (value, c) in configs {
        info!("{} = {value}", args.param);
        let data = prepare(&ds, &regions.labels, &workloads, &c.data)?;
        let (model, _) = train(&data, &c.model, &c.train)?;
        let mut r = evaluate_model(&model, &data)?;
        for row in &mut r.rows {
            row.variant = format!("{}={value}", args.param);
        }
        report.extend(r);
    }
    report.save(out, "sweep")?;
    print!("{}", report.table());
    Ok(())
}

fn analyze(config: &RunConfig, out: &Path) -> Result<()> {
    let (ds, _, regions) = load_dataset(config)?;
    let panel = build_panel(&ds, regions.len(), &ds.type_vocabulary)?;
    let files = challenge_plots(&panel, &regions, &ds, &out.join("analysis"))?;
    for f in &files.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn simulate_cmd(config: &RunConfig, out: &Path, args: SimulateArgs) -> Result<()> {
    let sim = if args.separate_departments {
        config.simulate.with_separate_departments()
    } else {
        config.simulate.clone()
    };
    let output = simulate(&sim)?;
    output.write_csv(BufWriter::new(File::create(out.join("requests.csv"))?))?;
    output.write_truth(BufWriter::new(File::create(out.join("truth.csv"))?))?;
    write_json(&out.join("regions.geojson"), &output.geojson())?;
    let phenomena = verify_phenomena(&output);
    write_json(&out.join("phenomena.json"), &phenomena)?;
    println!(
        "{} arrivals, {} completed, {} pending",
        output.arrivals, output.completed, output.pending
    );
    if phenomena.passed() {
        println!("phenomena: pass");
    } else {
        for f in &phenomena.failures {
            warn!("phenomenon missing: {f}");
        }
    }
    Ok(())
}

fn service_state(config: &RunConfig, checkpoint: Option<PathBuf>) -> Result<ServiceState> {
    let ckpt = checkpoint_path(config, checkpoint, &config.paths.output);
    let model = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (ds, _, regions) = load_dataset(config)?;
    check_regions(&model, &regions)?;
    let m = &model.manifest;
    let panel = build_panel_with_fallback(&ds, regions.len(), &m.type_vocabulary, &m.type_means, None)?;
    let anchors = request_centroids(&ds, regions.len());
    let scorer = WorkloadScorer::from_config(&config.llm)?;
    Ok(ServiceState::new(model, panel, regions, anchors, scorer)?)
}

fn serve_cmd(config: &RunConfig, args: ServeArgs) -> Result<()> {
    let state = Arc::new(service_state(config, args.checkpoint)?);
    let host = args.host.unwrap_or_else(|| config.serve.host.clone());
    let port = args.port.unwrap_or(config.serve.port);
    let addr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::Config(format!("`serve.host` `{host}`: {e}")))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(state, addr))?;
    Ok(())
}

fn predict(config: &RunConfig, args: PredictArgs) -> Result<()> {
    let body = match args.json.as_deref() {
        Some(s) if s != "-" => s.to_string(),
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let state = service_state(config, args.checkpoint)?;
    let (status, value) = state.handle(body.as_bytes());
    println!("{}", serde_json::to_string_pretty(&value)?);
    if !status.is_success() {
        return Err(anyhow!("request rejected with status {status}"));
    }
    Ok(())
}
