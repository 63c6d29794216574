use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use wdpose::fusion::{fuse, CountRounding, FusionResult, SizeMode};
use wdpose::geometry::{CameraIntrinsics, Keypoint3D, Pose};
use wdpose::gradcheck;
use wdpose::grid::PyramidPrediction;
use wdpose::metrics::{adi_accuracy, bucket_by_depth, MetricsRow, ModelCloud, METRICS_CSV_HEADER};
use wdpose::sampling::sample_counts;
use wdpose::simulator::{
    evaluate_scene, position_sensitivity, read_simulation, run_benchmark, shard_range, simulate_scene,
    write_simulation, BenchConfig, BenchRow, BenchSummary, SceneRecord, BENCH_CSV_HEADER, SENSITIVITY_CSV_HEADER,
};
use wdpose::{Error, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "wdpose", about = "Wide-depth-range 6D pose estimation toolkit")]
struct Cli {
    /// JSON configuration file; command-line flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-level sample counts for an object size
    SamplePlan(SamplePlanArgs),
    /// Check analytic loss gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Write simulated scenes and predictions as JSON lines
    Simulate(SimulateArgs),
    /// Fuse pyramid predictions into a pose
    Fuse(FuseArgs),
    /// Run the simulator benchmark and write per-scene results as CSV
    Bench(BenchArgs),
    /// Score estimated poses against ground truth
    Metrics(MetricsArgs),
    /// Pixel and 3D loss for a fixed pixel error as the object moves over the image
    LossSurface(LossSurfaceArgs),
}

#[derive(Args, Default)]
struct Common {
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when absent
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SamplingFlags {
    /// Total sample budget alpha [default: 10]
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Level concentration lambda, >= 0 [default: 1]
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Comma-separated reference sizes s_k in pixels [default: 16,32,64,128,256]
    #[arg(long, value_delimiter = ',')]
    reference_sizes: Option<Vec<f64>>,
}

#[derive(Args, Default)]
struct FusionFlags {
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Objectness threshold tau in (0, 1) [default: 0.3]
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// RANSAC inlier threshold in pixels [default: 5]
    #[arg(long)]
    inlier_threshold: Option<f64>,
    /// RANSAC iteration cap [default: 200]
    #[arg(long)]
    ransac_iterations: Option<usize>,
    /// Round plan counts stochastically instead of half-up
    #[arg(long)]
    stochastic_counts: bool,
    /// Estimate the size from every confident cell instead of the best one
    #[arg(long)]
    mean_size: bool,
    /// Weight correspondences by cell objectness
    #[arg(long)]
    objectness_weights: bool,
}

#[derive(Args, Default)]
struct NoiseFlags {
    /// Offset noise in strides [default: 0.15]
    #[arg(long)]
    sigma: Option<f64>,
    /// Fraction of cells with random offsets [default: 0.05]
    #[arg(long)]
    outlier_rate: Option<f64>,
}

#[derive(Args)]
struct SamplePlanArgs {
    /// Object size S in pixels
    #[arg(long, required_unless_present = "range")]
    size: Option<f64>,
    /// Size sweep as start:stop:step, inclusive of stop
    #[arg(long, conflicts_with = "size")]
    range: Option<String>,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Output file; standard output when absent
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random configurations per loss
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct LossSurfaceArgs {
    /// Positions per image axis
    #[arg(long, default_value_t = 9)]
    grid: usize,
    /// Comma-separated distances in object diameters
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "2,5,8")]
    depths: Vec<f64>,
    /// Pixel error applied to every predicted keypoint
    #[arg(long, allow_negative_numbers = true, default_value_t = 2.0)]
    pixel_error: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of scenes [default: 10]
    #[arg(long)]
    scenes: Option<u64>,
    #[command(flatten)]
    noise: NoiseFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FuseArgs {
    /// Simulation JSON lines, or a JSON object with intrinsics, keypoints and prediction
    #[arg(long, short)]
    input: PathBuf,
    /// Skip the per-level standalone solves
    #[arg(long)]
    no_per_level: bool,
    #[command(flatten)]
    fusion: FusionFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of scenes [default: 1000]
    #[arg(long)]
    scenes: Option<u64>,
    /// Evaluate a saved simulation instead of simulating
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Evaluate only block i of n, written as i/n
    #[arg(long)]
    shard: Option<String>,
    /// Worker threads; all cores when absent
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write the per-band accuracy table to this file
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionFlags,
    #[command(flatten)]
    noise: NoiseFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MetricsArgs {
    /// Ground-truth poses as JSON lines (simulation files work)
    #[arg(long)]
    gt: PathBuf,
    /// Estimated poses as JSON lines (fuse output works)
    #[arg(long)]
    est: PathBuf,
    /// Model cloud (.obj or .ply); the configured cube otherwise
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write ADI-0.1d per depth band as JSON to this file
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Failure classes, mapped onto exit codes.
enum Failure {
    Usage(String),
    Domain(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(path: Option<&Path>) -> Outcome<BenchConfig> {
    let Some(path) = path else {
        return Ok(BenchConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn apply_sampling(cfg: &mut BenchConfig, f: &SamplingFlags) {
    let s = &mut cfg.fusion.sampling;
    if let Some(a) = f.alpha {
        s.alpha = a;
    }
    if let Some(l) = f.lambda {
        s.lambda = l;
    }
    if let Some(r) = &f.reference_sizes {
        s.reference_sizes = r.clone();
    }
}

fn apply_fusion(cfg: &mut BenchConfig, f: &FusionFlags) {
    apply_sampling(cfg, &f.sampling);
    if let Some(t) = f.tau {
        cfg.fusion.objectness_threshold = t;
    }
    if let Some(t) = f.inlier_threshold {
        cfg.fusion.ransac.inlier_threshold_px = t;
    }
    if let Some(n) = f.ransac_iterations {
        cfg.fusion.ransac.max_iterations = n;
    }
    if f.stochastic_counts {
        cfg.fusion.rounding = CountRounding::Stochastic;
    }
    if f.mean_size {
        cfg.fusion.size_mode = SizeMode::ConfidentMean;
    }
    if f.objectness_weights {
        cfg.fusion.objectness_weights = true;
    }
}

fn apply_noise(cfg: &mut BenchConfig, f: &NoiseFlags) {
    if let Some(s) = f.sigma {
        cfg.noise.offset_sigma = s;
    }
    if let Some(r) = f.outlier_rate {
        cfg.noise.outlier_rate = r;
    }
}

fn apply_common(cfg: &mut BenchConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
}

fn open_output(path: Option<&Path>) -> Outcome<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::Domain(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open_input(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

fn parse_range(text: &str) -> Outcome<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(':')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(format!("bad range {text}: {e}")))?;
    let [start, stop, step] = parts[..] else {
        return Err(usage(format!("range must be start:stop:step, got {text}")));
    };
    if !(step > 0.0) || stop < start {
        return Err(usage("range needs a positive step and stop >= start"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn sample_plan(args: &SamplePlanArgs, mut cfg: BenchConfig) -> Outcome {
    apply_sampling(&mut cfg, &args.sampling);
    let params = cfg.fusion.sampling;
    params.validate().map_err(usage)?;
    let sizes = match (&args.range, args.size) {
        (Some(r), _) => parse_range(r)?,
        (None, Some(s)) => vec![s],
        (None, None) => unreachable!("clap requires one of them"),
    };
    let mut out = open_output(args.output.as_deref())?;
    let cols: Vec<String> = (1..=params.reference_sizes.len()).map(|k| format!("N{k}")).collect();
    writeln!(out, "size,lambda,{}", cols.join(","))?;
    for s in sizes {
        let plan = sample_counts(s, &params).map_err(usage)?;
        let vals: Vec<String> = plan.expected.iter().map(|n| format!("{n:.6}")).collect();
        writeln!(out, "{s},{},{}", params.lambda, vals.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs, mut cfg: BenchConfig) -> Outcome {
    apply_common(&mut cfg, &args.common);
    if args.configs == 0 {
        return Err(usage("need at least one configuration"));
    }
    let report = gradcheck::run(cfg.seed, args.configs);
    let mut out = open_output(args.common.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(Error::from)?;
    writeln!(out)?;
    out.flush()?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Domain("gradient check failed".into()))
    }
}

fn simulate(args: &SimulateArgs, mut cfg: BenchConfig) -> Outcome {
    apply_common(&mut cfg, &args.common);
    apply_noise(&mut cfg, &args.noise);
    cfg.scenes = args.scenes.unwrap_or(10);
    cfg.validate().map_err(usage)?;
    let cloud = cfg.scenario.model_cloud()?;
    let mut out = open_output(args.common.output.as_deref())?;
    let header = cfg.header();
    write_simulation(&mut out, &header, &[])?;
    for id in 0..cfg.scenes {
        let (scene, prediction) = simulate_scene(id, cfg.seed, &cfg.scenario, &cloud, &cfg.spec, &cfg.noise)?;
        write_simulation_record(&mut out, &SceneRecord { scene, prediction })?;
    }
    out.flush()?;
    Ok(())
}

fn write_simulation_record(out: &mut dyn Write, rec: &SceneRecord) -> Outcome {
    serde_json::to_writer(&mut *out, rec).map_err(Error::from)?;
    writeln!(out)?;
    Ok(())
}

/// Standalone `fuse` input.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FuseInput {
    intrinsics: CameraIntrinsics,
    keypoints: Vec<Keypoint3D>,
    prediction: PyramidPrediction,
}

#[derive(Serialize)]
struct FuseOutput<'a> {
    schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene_id: Option<u64>,
    result: Option<&'a FusionResult>,
    error: Option<String>,
}

fn run_fuse(args: &FuseArgs, mut cfg: BenchConfig) -> Outcome {
    if let Some(s) = args.common.seed {
        cfg.fusion.ransac.seed = s;
    }
    apply_fusion(&mut cfg, &args.fusion);
    cfg.fusion.per_level = !args.no_per_level;
    cfg.fusion.validate().map_err(usage)?;
    let text = std::fs::read_to_string(&args.input).map_err(|e| Failure::Domain(format!("{}: {e}", args.input.display())))?;
    let mut out = open_output(args.common.output.as_deref())?;
    // a simulation file starts with its header line
    if let Ok((_, records)) = read_simulation(text.as_bytes()) {
        for rec in &records {
            let s = &rec.scene;
            let (result, error) = match fuse(&rec.prediction, &s.keypoints, &s.intrinsics, &cfg.fusion) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let line = FuseOutput {
                schema_version: SCHEMA_VERSION,
                scene_id: Some(s.scene_id),
                result: result.as_ref(),
                error,
            };
            serde_json::to_writer(&mut out, &line).map_err(Error::from)?;
            writeln!(out)?;
        }
        out.flush()?;
        return Ok(());
    }
    let input: FuseInput = serde_json::from_str(&text).map_err(|e| Failure::Domain(format!("{}: {e}", args.input.display())))?;
    let result = fuse(&input.prediction, &input.keypoints, &input.intrinsics, &cfg.fusion)?;
    let doc = FuseOutput {
        schema_version: SCHEMA_VERSION,
        scene_id: None,
        result: Some(&result),
        error: None,
    };
    serde_json::to_writer_pretty(&mut out, &doc).map_err(Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn parse_shard(text: &str) -> Outcome<(u64, u64)> {
    let (i, n) = text.split_once('/').ok_or_else(|| usage(format!("shard must be i/n, got {text}")))?;
    let i: u64 = i.trim().parse().map_err(usage)?;
    let n: u64 = n.trim().parse().map_err(usage)?;
    if n == 0 || i >= n {
        return Err(usage(format!("shard index must be below the count, got {text}")));
    }
    Ok((i, n))
}

fn bench(args: &BenchArgs, mut cfg: BenchConfig) -> Outcome {
    apply_common(&mut cfg, &args.common);
    apply_fusion(&mut cfg, &args.fusion);
    apply_noise(&mut cfg, &args.noise);
    if let Some(n) = args.scenes {
        cfg.scenes = n;
    }
    let shard = args.shard.as_deref().map(parse_shard).transpose()?;
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(usage("--jobs must be positive"));
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let rows: Vec<BenchRow> = match &args.input {
        None => {
            cfg.validate().map_err(usage)?;
            let (i, n) = shard.unwrap_or((0, 1));
            run_benchmark(&cfg, shard_range(cfg.scenes, i, n)?)?
        }
        Some(path) => {
            let (header, records) = read_simulation(open_input(path)?)?;
            cfg.scenario = header.scenario;
            cfg.noise = header.noise;
            cfg.spec = header.spec;
            cfg.seed = header.seed;
            cfg.scenes = records.len() as u64;
            cfg.validate().map_err(usage)?;
            let (i, n) = shard.unwrap_or((0, 1));
            let range = shard_range(cfg.scenes, i, n)?;
            let cloud = cfg.scenario.model_cloud()?;
            let picked = &records[range.start as usize..range.end as usize];
            use rayon::prelude::*;
            let per: Vec<Vec<BenchRow>> = picked
                .par_iter()
                .map(|r| evaluate_scene(&r.scene, &r.prediction, &cloud, &cfg))
                .collect::<wdpose::Result<_>>()?;
            per.into_iter().flatten().collect()
        }
    };
    let mut out = open_output(args.common.output.as_deref())?;
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in &rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    out.flush()?;
    if let Some(path) = &args.summary {
        let summary = BenchSummary::from_rows(&rows, &cfg.methods(), &cfg.bands);
        std::fs::write(path, summary.to_csv())?;
    }
    Ok(())
}

/// `scene_id` and a pose from one JSON line, wherever the pose sits.
fn pose_of(v: &serde_json::Value) -> Option<(u64, Option<Pose>)> {
    let id = v.get("scene_id")?.as_u64()?;
    let candidates = [
        v.get("pose"),
        v.get("gt_pose"),
        v.get("result").and_then(|r| r.get("pose")).and_then(|p| p.get("pose")),
    ];
    let pose = candidates
        .into_iter()
        .flatten()
        .find_map(|p| serde_json::from_value::<Pose>(p.clone()).ok());
    Some((id, pose))
}

fn read_poses(path: &Path) -> Outcome<Vec<(u64, Option<Pose>)>> {
    let mut out = Vec::new();
    for (i, line) in open_input(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Failure::Domain(format!("{}:{}: {e}", path.display(), i + 1)))?;
        // header lines carry no scene id
        if let Some(p) = pose_of(&v) {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricsSummary {
    schema_version: u32,
    diameter: f64,
    threshold: f64,
    bands: Vec<BandAccuracy>,
    all: wdpose::metrics::Accuracy,
    missing: usize,
}

#[derive(Serialize)]
struct BandAccuracy {
    name: String,
    #[serde(flatten)]
    accuracy: wdpose::metrics::Accuracy,
}

fn metrics(args: &MetricsArgs, cfg: BenchConfig) -> Outcome {
    cfg.bands.validate().map_err(usage)?;
    let cloud = match &args.model {
        Some(p) => match p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("obj") => ModelCloud::from_obj(open_input(p)?)?,
            Some("ply") => ModelCloud::from_ply(open_input(p)?)?,
            _ => return Err(usage(format!("{}: expected a .obj or .ply model", p.display()))),
        },
        None => cfg.scenario.model_cloud()?,
    };
    let gt = read_poses(&args.gt)?;
    let est = read_poses(&args.est)?;
    let mut out = open_output(args.output.as_deref())?;
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    let mut depths = Vec::new();
    let mut adis = Vec::new();
    let mut missing = 0;
    for (id, gt_pose) in &gt {
        let Some(gt_pose) = gt_pose else {
            return Err(Failure::Domain(format!("scene {id} has no ground-truth pose")));
        };
        let found = est.iter().find(|(e, _)| e == id).and_then(|(_, p)| p.as_ref());
        depths.push(gt_pose.translation.norm() / cloud.diameter);
        match found {
            Some(p) => {
                let row = MetricsRow::evaluate(*id, gt_pose, p, &cloud)?;
                adis.push(row.adi);
                writeln!(out, "{}", row.csv_line())?;
            }
            None => {
                // no estimate counts as a miss
                adis.push(f64::INFINITY);
                missing += 1;
            }
        }
    }
    out.flush()?;
    if let Some(path) = &args.summary {
        let buckets = bucket_by_depth(&depths, &cfg.bands)?;
        let threshold = cfg.adi_threshold;
        let bands = cfg
            .bands
            .names
            .iter()
            .zip(&buckets)
            .map(|(name, idx)| {
                let errs: Vec<f64> = idx.iter().map(|&i| adis[i]).collect();
                Ok(BandAccuracy {
                    name: name.clone(),
                    accuracy: adi_accuracy(&errs, cloud.diameter, threshold)?,
                })
            })
            .collect::<wdpose::Result<Vec<_>>>()?;
        let summary = MetricsSummary {
            schema_version: SCHEMA_VERSION,
            diameter: cloud.diameter,
            threshold,
            bands,
            all: adi_accuracy(&adis, cloud.diameter, threshold)?,
            missing,
        };
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &summary).map_err(Error::from)?;
        writeln!(f)?;
        f.flush()?;
    }
    Ok(())
}

fn loss_surface(args: &LossSurfaceArgs, mut cfg: BenchConfig) -> Outcome {
    apply_common(&mut cfg, &args.common);
    let rows = position_sensitivity(&cfg.scenario, &args.depths, args.grid, args.pixel_error, cfg.seed).map_err(usage)?;
    let mut out = open_output(args.common.output.as_deref())?;
    writeln!(out, "{SENSITIVITY_CSV_HEADER}")?;
    for r in &rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::SamplePlan(a) => sample_plan(a, cfg),
        Command::Gradcheck(a) => run_gradcheck(a, cfg),
        Command::Simulate(a) => simulate(a, cfg),
        Command::Fuse(a) => run_fuse(a, cfg),
        Command::Bench(a) => bench(a, cfg),
        Command::Metrics(a) => metrics(a, cfg),
        Command::LossSurface(a) => loss_surface(a, cfg),
    }
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(
        format!("{} (schema {SCHEMA_VERSION})", env!("CARGO_PKG_VERSION")).into_boxed_str(),
    );
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
