//! Command implementations behind the `topoloc` binary.

pub mod manifest;
pub mod synthetic;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use topoloc::experiments::{self, Benchmark};
use topoloc::geometry::{CameraIntrinsics, Pose};
use topoloc::mapping::ingest::{IngestError, IngestedSequence};
use topoloc::mapping::{self, FormatError, MapBuildParams, MapBuilder, MapError, NodeSpacingPolicy};
use topoloc::pipeline::{
    evaluate, localize_queries, write_trajectory_csv, LocalizationParams, QueryFrame,
};
use topoloc::synthworld::{self, generate_world, Sequence};

use manifest::Manifest;
use synthetic::Synthetic;

pub const MAP_FILE: &str = "map.tmap";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, inconsistent inputs or a failed precondition.
    #[error("{0}")]
    Config(String),
    /// A file could not be read, written or decoded.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Io(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "topoloc", version, about = "Topo-metric mapping and monocular relocalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a topo-metric map from a posed sequence.
    Map(MapArgs),
    /// Localize a sequence against a map.
    Localize(LocalizeArgs),
    /// Build maps over a range of node spacings and localize against each.
    SweepNodes(SweepArgs),
    /// Run the offset or weather protocol.
    Experiment(ExperimentArgs),
    /// Write a synthetic sequence in the ingestion layout.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Ingestion directory (intrinsics.txt, frame_*.pgm, frame_*.txt).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Preset name (default, query, small, small-query) or JSON config path.
    #[arg(long)]
    pub synthetic: Option<String>,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Node spacing threshold, meters.
    #[arg(long, default_value_t = 20.0)]
    pub d_thresh: f64,
    /// Rotation weight, meters per radian.
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    /// Neighbours consulted by the node classifier.
    #[arg(long, default_value_t = topoloc::coarse::DEFAULT_K)]
    pub knn_k: usize,
}

#[derive(Debug, Args)]
pub struct LocalizerArgs {
    /// Descriptor ratio test threshold.
    #[arg(long, default_value_t = 0.7)]
    pub ratio: f64,
    /// RANSAC inlier threshold, pixels.
    #[arg(long, default_value_t = 2.0)]
    pub inlier_px: f64,
    /// Largest accepted frame-to-frame translation, meters.
    #[arg(long, default_value_t = 2.0)]
    pub max_step: f64,
    /// RANSAC seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Detect on raw images instead of patch-normalized ones.
    #[arg(long)]
    pub no_normalize: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Map file written by `topoloc map`.
    #[arg(long)]
    pub map: PathBuf,
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub localizer: LocalizerArgs,
    /// Detect on raw images instead of patch-normalized ones.
    #[arg(long)]
    pub no_normalize: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// World preset or JSON config; only the world part is used.
    #[arg(long, default_value = "default")]
    pub synthetic: String,
    #[command(flatten)]
    pub localizer: LocalizerArgs,
    /// Rotation weight, meters per radian.
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    /// Neighbours consulted by the node classifier.
    #[arg(long, default_value_t = topoloc::coarse::DEFAULT_K)]
    pub knn_k: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated node spacing thresholds, meters.
    #[arg(long, value_delimiter = ',', default_values_t = experiments::SWEEP_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[command(flatten)]
    pub bench: BenchArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentMode {
    Offset,
    Weather,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    pub mode: ExperimentMode,
    /// Node spacing threshold, meters.
    #[arg(long, default_value_t = experiments::BENCHMARK_D_THRESH)]
    pub d_thresh: f64,
    #[command(flatten)]
    pub bench: BenchArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Preset name or JSON config path.
    #[arg(long, default_value = "default")]
    pub synthetic: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Map(a) => cmd_map(&a),
        Command::Localize(a) => cmd_localize(&a),
        Command::SweepNodes(a) => cmd_sweep_nodes(&a),
        Command::Experiment(a) => cmd_experiment(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn policy(d_thresh: f64, lambda: f64) -> Result<NodeSpacingPolicy, CliError> {
    Ok(NodeSpacingPolicy::new(d_thresh, lambda)?)
}

fn map_params(policy: NodeSpacingPolicy, knn_k: usize, normalize: bool) -> MapBuildParams {
    let mut p = MapBuildParams {
        policy,
        knn_k,
        ..MapBuildParams::default()
    };
    p.preprocessing.normalize = normalize;
    p
}

fn localization_params(a: &LocalizerArgs, normalize: bool) -> Result<LocalizationParams, CliError> {
    let mut p = LocalizationParams::default();
    p.preprocessing.normalize = normalize;
    p.ratio = a.ratio;
    p.pnp.inlier_threshold = a.inlier_px;
    p.jump.max_step = a.max_step;
    p.seed = a.seed;
    if !(a.ratio > 0.0 && a.ratio <= 1.0) {
        return Err(CliError::Config(format!("--ratio must lie in (0, 1], got {}", a.ratio)));
    }
    if !(a.max_step > 0.0) {
        return Err(CliError::Config(format!("--max-step must be positive, got {}", a.max_step)));
    }
    p.pnp
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(p)
}

fn resolve_synthetic(arg: &str) -> Result<Synthetic, CliError> {
    let s = Synthetic::resolve(arg)?;
    s.validate().map_err(CliError::Config)?;
    Ok(s)
}

fn source_json(source: &Source, synth: Option<&Synthetic>) -> serde_json::Value {
    match (&source.input, synth) {
        (Some(dir), _) => json!({ "input": dir }),
        (_, Some(s)) => json!({ "synthetic": source.synthetic, "resolved": s }),
        _ => serde_json::Value::Null,
    }
}

fn cmd_map(a: &MapArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let policy = policy(a.policy.d_thresh, a.policy.lambda)?;
    if a.policy.knn_k == 0 {
        return Err(CliError::Config("--knn-k must be at least 1".into()));
    }
    let params = map_params(policy, a.policy.knn_k, !a.no_normalize);
    let synth = a.source.synthetic.as_deref().map(resolve_synthetic).transpose()?;
    create_dir(&a.out)?;

    let build = Instant::now();
    let map = match (&a.source.input, &synth) {
        (Some(dir), _) => {
            let seq = IngestedSequence::open(dir)?;
            let mut builder = MapBuilder::new(seq.intrinsics, params)?;
            for i in 0..seq.len() {
                builder.push(&seq.read_posed(i)?)?;
            }
            builder.finish()?
        }
        (_, Some(s)) => {
            let world = generate_world(&s.world_config());
            let k = CameraIntrinsics::default();
            let seq = Sequence::new(&world, k, s.sequence_config());
            mapping::build_map(seq.frames(), k, &params)?
        }
        _ => unreachable!("clap requires a source"),
    };
    let build_time = build.elapsed();

    let path = a.out.join(MAP_FILE);
    let bytes = mapping::to_bytes(&map);
    fs::write(&path, &bytes).map_err(io_err(&path))?;
    let stats = mapping::map_stats(&map);
    log::info!("{} nodes, {} landmarks, {} bytes", stats.nodes, stats.landmarks, stats.bytes);
    println!("nodes={}\nlandmarks={}\nmap_bytes={}", stats.nodes, stats.landmarks, stats.bytes);

    let mut m = Manifest::new("map");
    m.config = json!({
        "source": source_json(&a.source, synth.as_ref()),
        "d_thresh": a.policy.d_thresh,
        "lambda": a.policy.lambda,
        "knn_k": a.policy.knn_k,
        "normalize": !a.no_normalize,
    });
    if let Some(s) = &synth {
        m.seeds.insert("world".into(), s.world.seed);
        m.seeds.insert("sequence".into(), s.sequence.seed);
    }
    m.outputs.push(path);
    m.results = json!({ "nodes": stats.nodes, "landmarks": stats.landmarks, "map_bytes": stats.bytes });
    m.timing("build", build_time);
    m.timing("total", started.elapsed());
    m.write(&a.out)
}

fn load_map(path: &Path) -> Result<mapping::TopoMetricMap, CliError> {
    mapping::load_map(path).map_err(|e| match e {
        FormatError::Io(e) => CliError::Io(format!("{}: {e}", path.display())),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn check_intrinsics(map: &CameraIntrinsics, seq: &CameraIntrinsics) -> Result<(), CliError> {
    if map != seq {
        return Err(CliError::Config(format!(
            "sequence intrinsics {seq:?} do not match the map's {map:?}"
        )));
    }
    Ok(())
}

fn cmd_localize(a: &LocalizeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let params = localization_params(&a.localizer, !a.no_normalize)?;
    let synth = a.source.synthetic.as_deref().map(resolve_synthetic).transpose()?;
    let load = Instant::now();
    let map = load_map(&a.map)?;
    let load_time = load.elapsed();
    create_dir(&a.out)?;

    // Queries are prepared one at a time; only their features stay resident.
    let mut queries = Vec::new();
    let mut truth: Vec<Option<Pose>> = Vec::new();
    match (&a.source.input, &synth) {
        (Some(dir), _) => {
            let seq = IngestedSequence::open(dir)?;
            check_intrinsics(&map.intrinsics, &seq.intrinsics)?;
            for i in 0..seq.len() {
                let f = seq.read(i)?;
                queries.push(QueryFrame::prepare(f.id, &f.image, &params.preprocessing));
                truth.push(f.truth.map(|t| t.0));
            }
        }
        (_, Some(s)) => {
            let k = CameraIntrinsics::default();
            check_intrinsics(&map.intrinsics, &k)?;
            let world = generate_world(&s.world_config());
            for f in Sequence::new(&world, k, s.sequence_config()).frames() {
                queries.push(QueryFrame::prepare(f.id, &f.image, &params.preprocessing));
                truth.push(Some(f.pose));
            }
        }
        _ => unreachable!("clap requires a source"),
    }
    if queries.is_empty() {
        return Err(CliError::Config("query sequence is empty".into()));
    }
    let (results, timings) = localize_queries(&map, &queries, &params);

    let csv = a.out.join(TRAJECTORY_FILE);
    write_file(&csv, |w| write_trajectory_csv(w, &results))?;

    let metrics = if truth.iter().all(Option::is_some) {
        let truth: Vec<(Pose, u32)> = truth
            .into_iter()
            .flatten()
            .map(|p| (p, map.nearest_node(&p)))
            .collect();
        let m = evaluate(&results, &truth);
        println!("{}", m.to_key_values());
        Some(m)
    } else {
        log::warn!("some frames have no ground truth; metrics skipped");
        None
    };
    let localized = results.iter().filter(|r| r.pose.is_some()).count();
    let rejected = results.iter().filter(|r| r.jump_rejected).count();
    log::info!("{localized}/{} frames with a pose, {rejected} jumps rejected", results.len());

    let mut m = Manifest::new("localize");
    m.config = json!({
        "source": source_json(&a.source, synth.as_ref()),
        "ratio": a.localizer.ratio,
        "inlier_px": a.localizer.inlier_px,
        "max_step": a.localizer.max_step,
        "normalize": !a.no_normalize,
    });
    m.seeds.insert("ransac".into(), a.localizer.seed);
    if let Some(s) = &synth {
        m.seeds.insert("world".into(), s.world.seed);
        m.seeds.insert("sequence".into(), s.sequence.seed);
    }
    m.inputs.push(a.map.clone());
    if let Some(dir) = &a.source.input {
        m.inputs.push(dir.clone());
    }
    m.outputs.push(csv);
    m.results = json!({
        "frames": results.len(),
        "with_pose": localized,
        "jump_rejected": rejected,
        "metrics": metrics.map(|m| manifest::metrics_json(&m)),
    });
    m.timing("load_map", load_time);
    m.stage_timings(&timings, results.len());
    m.timing("wall", started.elapsed());
    m.write(&a.out)
}

fn benchmark(a: &BenchArgs, d_thresh: f64) -> Result<(Benchmark, Synthetic), CliError> {
    let s = resolve_synthetic(&a.synthetic)?;
    let mut b = Benchmark::new(&s.world_config());
    if a.knn_k == 0 {
        return Err(CliError::Config("--knn-k must be at least 1".into()));
    }
    b.map_params = map_params(policy(d_thresh, a.lambda)?, a.knn_k, true);
    b.localization = localization_params(&a.localizer, true)?;
    Ok((b, s))
}

fn bench_manifest(name: &str, a: &BenchArgs, s: &Synthetic, b: &Benchmark) -> Manifest {
    let mut m = Manifest::new(name);
    m.config = json!({
        "synthetic": a.synthetic,
        "world": s.world,
        "mapping_sequence": synthetic::SequenceSpec::from(b.mapping),
        "query_sequence": synthetic::SequenceSpec::from(b.query),
        "lambda": a.lambda,
        "knn_k": a.knn_k,
        "ratio": a.localizer.ratio,
        "inlier_px": a.localizer.inlier_px,
        "max_step": a.localizer.max_step,
    });
    m.seeds.insert("world".into(), s.world.seed);
    m.seeds.insert("mapping_sequence".into(), b.mapping.seed);
    m.seeds.insert("query_sequence".into(), b.query.seed);
    m.seeds.insert("ransac".into(), a.localizer.seed);
    m
}

fn cmd_sweep_nodes(a: &SweepArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.thresholds.len() < 2 {
        return Err(CliError::Config("--thresholds needs at least two values".into()));
    }
    for &t in &a.thresholds {
        policy(t, a.bench.lambda)?;
    }
    let (b, s) = benchmark(&a.bench, a.thresholds[0])?;
    create_dir(&a.bench.out)?;
    let rows = experiments::run_sweep(&b, &a.thresholds)?;
    let csv = a.bench.out.join("sweep.csv");
    let svg = a.bench.out.join("sweep.svg");
    write_file(&csv, |w| experiments::write_sweep_csv(w, &rows))?;
    fs::write(&svg, experiments::sweep_svg(&rows)).map_err(io_err(&svg))?;
    experiments::write_sweep_csv(io::stdout().lock(), &rows).map_err(io_err(Path::new("stdout")))?;

    let mut m = bench_manifest("sweep-nodes", &a.bench, &s, &b);
    m.config["thresholds"] = json!(a.thresholds);
    m.outputs.extend([csv, svg]);
    m.results = json!(rows
        .iter()
        .map(|r| json!({
            "d_thresh": r.d_thresh,
            "nodes": r.stats.nodes,
            "map_bytes": r.stats.bytes,
            "metrics": manifest::metrics_json(&r.metrics),
        }))
        .collect::<Vec<_>>());
    for r in &rows {
        m.timing(&format!("localize_d{}", r.d_thresh), r.timings.total);
    }
    m.timing("wall", started.elapsed());
    m.write(&a.bench.out)
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (b, s) = benchmark(&a.bench, a.d_thresh)?;
    create_dir(&a.bench.out)?;
    let out = &a.bench.out;
    let mut m = bench_manifest("experiment", &a.bench, &s, &b);
    m.config["d_thresh"] = json!(a.d_thresh);
    match a.mode {
        ExperimentMode::Offset => {
            m.config["mode"] = json!("offset");
            m.config["offsets"] = json!(experiments::OFFSETS);
            let rows = experiments::run_offset(&b, &experiments::OFFSETS)?;
            let csv = out.join("offset.csv");
            let svg = out.join("offset.svg");
            write_file(&csv, |w| experiments::write_offset_csv(w, &rows))?;
            fs::write(&svg, experiments::offset_svg(&rows)).map_err(io_err(&svg))?;
            experiments::write_offset_csv(io::stdout().lock(), &rows)
                .map_err(io_err(Path::new("stdout")))?;
            m.outputs.extend([csv, svg]);
            m.results = json!(rows
                .iter()
                .map(|r| json!({ "offset": r.offset, "metrics": manifest::metrics_json(&r.metrics) }))
                .collect::<Vec<_>>());
            for r in &rows {
                m.timing(&format!("localize_offset{}", r.offset), r.timings.total);
            }
        }
        ExperimentMode::Weather => {
            m.config["mode"] = json!("weather");
            let rows = experiments::run_weather(&b, &experiments::WEATHER)?;
            let csv = out.join("weather.csv");
            write_file(&csv, |w| experiments::write_weather_csv(w, &rows))?;
            experiments::write_weather_csv(io::stdout().lock(), &rows)
                .map_err(io_err(Path::new("stdout")))?;
            m.outputs.push(csv);
            m.results = json!(rows
                .iter()
                .map(|r| json!({
                    "condition": r.condition.name,
                    "normalization": r.normalization,
                    "metrics": manifest::metrics_json(&r.metrics),
                }))
                .collect::<Vec<_>>());
            for r in &rows {
                let tag = if r.normalization { "on" } else { "off" };
                m.timing(&format!("localize_{}_{tag}", r.condition.name), r.timings.total);
            }
        }
    }
    m.timing("wall", started.elapsed());
    m.write(out)
}

fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let s = resolve_synthetic(&a.synthetic)?;
    let world = generate_world(&s.world_config());
    let seq = Sequence::new(&world, CameraIntrinsics::default(), s.sequence_config());
    create_dir(&a.out)?;
    let n = synthworld::export_sequence(&seq, &a.out).map_err(io_err(&a.out))?;
    println!("frames={n}");
    let mut m = Manifest::new("export");
    m.config = json!({ "synthetic": a.synthetic, "resolved": s });
    m.seeds.insert("world".into(), s.world.seed);
    m.seeds.insert("sequence".into(), s.sequence.seed);
    m.outputs.push(a.out.clone());
    m.results = json!({ "frames": n });
    m.timing("wall", started.elapsed());
    m.write(&a.out)
}
