//! Command-line entry point. Every command reads a run configuration, works
//! inside the configured output directory and records what it wrote in the
//! directory's `manifest.json`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 pipeline failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{self, GridGraph};
use crate::config::{Pattern, RunConfig};
use crate::error::Error;
use crate::eval::{self, Series};
use crate::gaze::{self, TrackRecord};
use crate::image::Image;
use crate::phantom::{self, AppearanceParams, Frame, GazeAngle, GridScan, RetinaPhantom};
use crate::seed;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "retina-track", version, about = "Retinal-image gaze tracking through a canonical feature space")]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set calibration.ppd_x=40.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the phantom, the grid scan and the test sequences.
    Phantom,
    /// Register the scan and write the canonical feature space.
    BuildSpace,
    /// Track every test sequence against the space.
    Track,
    /// Summarize track results and write coverage curves.
    Eval,
    /// Run a simulation study.
    Simulate {
        #[arg(long, value_enum)]
        kind: SimKind,
    },
    /// Time each tracking stage.
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimKind {
    Noise,
    EdgeRemoval,
    Ablation,
}

#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Pipeline(e) => write!(f, "pipeline failure: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Pipeline(e.into())
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config(anyhow!("--config is required")))?;
    let cfg = RunConfig::load(path, &cli.overrides)
        .map_err(|e| CliError::Config(anyhow::Error::new(e).context(format!("loading {}", path.display()))))?;
    let run = RunDir::create(&cfg)?;
    let start = Instant::now();
    let (name, artifacts) = match &cli.command {
        Command::Phantom => ("phantom", cmd_phantom(&cfg, &run)?),
        Command::BuildSpace => ("build-space", cmd_build_space(&cfg, &run)?),
        Command::Track => ("track", cmd_track(&cfg, &run)?),
        Command::Eval => ("eval", cmd_eval(&cfg, &run)?),
        Command::Simulate { kind } => ("simulate", cmd_simulate(&cfg, &run, *kind)?),
        Command::Bench => ("bench", cmd_bench(&cfg, &run)?),
    };
    run.record(name, &artifacts, start.elapsed().as_secs_f64())?;
    Ok(())
}

/// The output directory of a run.
pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RunManifest {
    config: String,
    commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CommandRecord {
    artifacts: Vec<String>,
    elapsed_s: f64,
}

impl RunDir {
    /// Creates the directory and writes the resolved configuration.
    pub fn create(cfg: &RunConfig) -> anyhow::Result<Self> {
        let root = cfg.output_dir.clone();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        std::fs::write(root.join("config.resolved.toml"), cfg.to_toml())?;
        Ok(Self { root })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn subdir(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.root.join(rel);
        std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn record(&self, command: &str, artifacts: &[String], elapsed_s: f64) -> anyhow::Result<()> {
        let path = self.path("manifest.json");
        let mut m: RunManifest = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(_) => RunManifest::default(),
        };
        m.config = "config.resolved.toml".into();
        m.commands.insert(
            command.to_string(),
            CommandRecord {
                artifacts: artifacts.to_vec(),
                elapsed_s,
            },
        );
        std::fs::write(&path, serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

/// Dataset description written by `phantom` and read by later commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub phantom_path: String,
    pub phantom_seed: u64,
    pub vessel_density: f64,
    pub vessel_count: usize,
    pub central_node: usize,
    pub edges: Vec<(usize, usize)>,
    pub scan: Vec<FrameEntry>,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub path: String,
    pub trial: Option<usize>,
    pub yaw: f64,
    pub pitch: f64,
    pub appearance: AppearanceParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub trial: usize,
    pub pattern: Pattern,
    pub frames: Vec<FrameEntry>,
}

pub fn generate_phantom(cfg: &RunConfig) -> crate::Result<RetinaPhantom> {
    phantom::generate_phantom(&cfg.phantom_config(), &cfg.calibration)
}

/// Grid scan with configured blank nodes replaced by a constant frame.
pub fn render_scan(ph: &RetinaPhantom, cfg: &RunConfig) -> crate::Result<GridScan> {
    let model = cfg.appearance.model(cfg.appearance.seed);
    let mut scan = phantom::grid_scan(ph, &cfg.calibration, &model, cfg.grid.spec())?;
    for &n in &cfg.grid.blank_nodes {
        let f = &mut scan.frames[n];
        f.image = Image::filled(f.width(), f.height(), 0.5);
    }
    Ok(scan)
}

/// Gaze targets of test sequence `trial`.
pub fn sequence_targets(cfg: &RunConfig, trial: usize) -> Vec<GazeAngle> {
    let s = &cfg.sequences;
    let range = cfg.phantom.gaze_range_deg;
    match s.patterns[trial % s.patterns.len()] {
        Pattern::Grid => {
            let steps = (2.0 * range / s.grid_step_deg).floor() as usize + 1;
            let span = (steps - 1) as f64 * s.grid_step_deg;
            (0..s.frames)
                .map(|i| {
                    let k = i % (steps * steps);
                    let (r, c) = (k / steps, k % steps);
                    GazeAngle::new(
                        -span / 2.0 + c as f64 * s.grid_step_deg,
                        span / 2.0 - r as f64 * s.grid_step_deg,
                    )
                })
                .collect()
        }
        Pattern::Random => {
            let mut rng = seed::rng(s.seed, trial as u64);
            (0..s.frames)
                .map(|_| GazeAngle::new(rng.random_range(-range..=range), rng.random_range(-range..=range)))
                .collect()
        }
    }
}

/// Appearance model of test sequence `trial`.
pub fn sequence_appearance(cfg: &RunConfig, trial: usize) -> phantom::AppearanceModel {
    cfg.appearance
        .model(seed::derive_seed(cfg.appearance.seed, trial as u64 + 1))
}

/// Renders test sequence `trial`. With steering enabled the hardware offset
/// shifts the imaged region, so frames are rendered at `target - offset`
/// while the recorded truth stays at the target.
pub fn render_sequence(ph: &RetinaPhantom, cfg: &RunConfig, trial: usize) -> crate::Result<Vec<Frame>> {
    let model = sequence_appearance(cfg, trial);
    let off = if cfg.tracking.steering_enabled {
        cfg.calibration.steering_offset
    } else {
        (0.0, 0.0)
    };
    sequence_targets(cfg, trial)
        .into_iter()
        .enumerate()
        .map(|(i, target)| {
            let shown = GazeAngle::new(target.yaw - off.0, target.pitch - off.1);
            let mut f = phantom::render_frame(ph, shown, &cfg.calibration, &model.sample(i as u64))?;
            f.id = i as u64;
            f.true_gaze = Some(target);
            Ok(f)
        })
        .collect()
}

fn cmd_phantom(cfg: &RunConfig, run: &RunDir) -> Result<Vec<String>, CliError> {
    let ph = generate_phantom(cfg)?;
    let dir = run.subdir("dataset")?;
    let mut artifacts = Vec::new();
    let ph_path = dir.join("phantom.pgm");
    ph.intensity.write_pgm(&ph_path)?;
    artifacts.push(run.rel(&ph_path));

    let scan = render_scan(&ph, cfg)?;
    let scan_dir = run.subdir("dataset/scan")?;
    let model = cfg.appearance.model(cfg.appearance.seed);
    let mut scan_entries = Vec::new();
    for (i, f) in scan.frames.iter().enumerate() {
        let p = scan_dir.join(format!("node_{i:02}.pgm"));
        f.image.write_pgm(&p)?;
        let g = scan.spec.node_gaze(i);
        scan_entries.push(FrameEntry {
            frame_id: f.id,
            path: run.rel(&p),
            trial: None,
            yaw: g.yaw,
            pitch: g.pitch,
            appearance: model.sample(i as u64),
        });
        artifacts.push(run.rel(&p));
    }

    let mut sequences = Vec::new();
    for trial in 0..cfg.sequences.count {
        let frames = render_sequence(&ph, cfg, trial)?;
        let seq_dir = run.subdir(&format!("dataset/sequences/seq_{trial:02}"))?;
        let model = sequence_appearance(cfg, trial);
        let mut entries = Vec::new();
        for f in &frames {
            let p = seq_dir.join(format!("frame_{:04}.pgm", f.id));
            f.image.write_pgm(&p)?;
            let g = f.true_gaze.expect("rendered frames carry truth");
            entries.push(FrameEntry {
                frame_id: f.id,
                path: run.rel(&p),
                trial: Some(trial),
                yaw: g.yaw,
                pitch: g.pitch,
                appearance: model.sample(f.id),
            });
        }
        artifacts.push(run.rel(&seq_dir));
        sequences.push(SequenceEntry {
            trial,
            pattern: cfg.sequences.patterns[trial % cfg.sequences.patterns.len()],
            frames: entries,
        });
    }

    let manifest = DatasetManifest {
        phantom_path: run.rel(&ph_path),
        phantom_seed: ph.texture_seed,
        vessel_density: ph.vessel_density,
        vessel_count: ph.vessel_count,
        central_node: scan.central_node,
        edges: scan.edges.clone(),
        scan: scan_entries,
        sequences,
    };
    let mp = dir.join("manifest.json");
    std::fs::write(&mp, serde_json::to_vec_pretty(&manifest).context("serializing dataset manifest")?)?;
    artifacts.push(run.rel(&mp));
    println!(
        "phantom {}x{} with {} vessels, {} scan frames, {} sequences",
        ph.width(),
        ph.height(),
        ph.vessel_count,
        scan.frames.len(),
        cfg.sequences.count
    );
    Ok(artifacts)
}

fn load_dataset(run: &RunDir) -> anyhow::Result<DatasetManifest> {
    let p = run.path("dataset/manifest.json");
    let bytes = std::fs::read(&p).with_context(|| format!("reading {} (run `phantom` first)", p.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
}

fn load_frame(run: &RunDir, e: &FrameEntry) -> anyhow::Result<Frame> {
    let image = Image::read_pgm(&run.path(&e.path)).with_context(|| format!("reading {}", e.path))?;
    let mut f = Frame::new(e.frame_id, image);
    f.true_gaze = Some(GazeAngle::new(e.yaw, e.pitch));
    Ok(f)
}

fn cmd_build_space(cfg: &RunConfig, run: &RunDir) -> Result<Vec<String>, CliError> {
    let ds = load_dataset(run)?;
    let frames = ds
        .scan
        .iter()
        .map(|e| load_frame(run, e))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let graph = GridGraph::new(frames.len(), ds.edges.clone(), ds.central_node)?;
    let start = Instant::now();
    let build = match canonical::build_space(&frames, &graph, &cfg.space_build()) {
        Ok(b) => b,
        Err(e @ Error::SpaceConstruction { .. }) => {
            if let Error::SpaceConstruction { failed_edges, .. } = &e {
                for &k in failed_edges {
                    let (a, b) = graph.edges[k];
                    eprintln!("edge {k} ({a} -> {b}) failed to register");
                }
            }
            return Err(CliError::Pipeline(e.into()));
        }
        Err(e) => return Err(e.into()),
    };
    let elapsed = start.elapsed();

    let space_path = run.path("space.json");
    canonical::save_space(&build.space, &space_path)?;

    #[derive(Serialize)]
    struct NodeRow {
        node: usize,
        x: f64,
        y: f64,
    }
    let nodes: Vec<NodeRow> = build
        .positions
        .iter()
        .enumerate()
        .map(|(node, p)| NodeRow { node, x: p[0], y: p[1] })
        .collect();
    let nodes_path = run.path("nodes.csv");
    eval::write_csv(&nodes, &nodes_path)?;

    #[derive(Serialize)]
    struct EdgeRow {
        edge: usize,
        from: usize,
        to: usize,
        registered: bool,
        dx: f64,
        dy: f64,
        weight: f64,
        inliers: usize,
    }
    let mut edges: Vec<EdgeRow> = build
        .registration
        .measurements
        .iter()
        .map(|m| EdgeRow {
            edge: m.edge,
            from: m.from,
            to: m.to,
            registered: true,
            dx: m.mu.dx,
            dy: m.mu.dy,
            weight: m.weight,
            inliers: m.correspondences.len(),
        })
        .collect();
    for (k, reason) in &build.registration.failed {
        let (from, to) = graph.edges[*k];
        eprintln!("edge {k} ({from} -> {to}) dropped: {reason}");
        edges.push(EdgeRow {
            edge: *k,
            from,
            to,
            registered: false,
            dx: f64::NAN,
            dy: f64::NAN,
            weight: 0.0,
            inliers: 0,
        });
    }
    edges.sort_by_key(|r| r.edge);
    let edges_path = run.path("edges.csv");
    eval::write_csv(&edges, &edges_path)?;
    println!(
        "space: {} entries from {} edges ({} failed), built in {:.2} s",
        build.space.len(),
        build.registration.measurements.len(),
        build.registration.failed.len(),
        elapsed.as_secs_f64()
    );
    Ok(vec![run.rel(&space_path), run.rel(&nodes_path), run.rel(&edges_path)])
}

fn cmd_track(cfg: &RunConfig, run: &RunDir) -> Result<Vec<String>, CliError> {
    let ds = load_dataset(run)?;
    let space_path = run.path("space.json");
    let space = canonical::load_space(&space_path)
        .map_err(|e| anyhow::Error::new(e).context("loading space.json (run `build-space` first)"))?;
    let tracker = cfg.tracker();
    let dir = run.subdir("tracks")?;
    let mut artifacts = Vec::new();
    for seq in &ds.sequences {
        let frames = seq
            .frames
            .iter()
            .map(|e| load_frame(run, e))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let est = gaze::track_sequence(&frames, &space, &tracker)?;
        let rows: Vec<TrackRecord> = frames
            .iter()
            .zip(&est)
            .map(|(f, e)| TrackRecord::new(f.id, e, f.true_gaze.unwrap_or_default()))
            .collect();
        let p = dir.join(format!("seq_{:02}.csv", seq.trial));
        gaze::write_track_csv(&rows, &p)?;
        let valid = rows.iter().filter(|r| r.valid).count();
        println!("sequence {}: {valid}/{} valid", seq.trial, rows.len());
        artifacts.push(run.rel(&p));
    }
    Ok(artifacts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceStats {
    pub sequence: String,
    pub mean: f64,
    pub std: f64,
    pub e50: f64,
    pub e75: f64,
    pub e95: f64,
    pub count: usize,
    pub invalid: usize,
}

impl SequenceStats {
    fn new(sequence: String, records: &[TrackRecord]) -> Self {
        let errors: Vec<f64> = records
            .iter()
            .filter_map(|r| eval::angular_error(&r.estimate(), r.truth()))
            .collect();
        let invalid = records.len() - errors.len();
        match eval::percentile_stats(&errors) {
            Ok(s) => Self {
                sequence,
                mean: s.mean,
                std: s.std,
                e50: s.e50,
                e75: s.e75,
                e95: s.e95,
                count: s.count,
                invalid,
            },
            Err(_) => Self {
                sequence,
                mean: f64::NAN,
                std: f64::NAN,
                e50: f64::NAN,
                e75: f64::NAN,
                e95: f64::NAN,
                count: 0,
                invalid,
            },
        }
    }

    fn stats(&self) -> Option<eval::ErrorStats> {
        (self.count > 0).then_some(eval::ErrorStats {
            mean: self.mean,
            std: self.std,
            e50: self.e50,
            e75: self.e75,
            e95: self.e95,
            count: self.count,
        })
    }
}

fn cmd_eval(cfg: &RunConfig, run: &RunDir) -> Result<Vec<String>, CliError> {
    let tracks = run.path("tracks");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&tracks)
        .with_context(|| format!("reading {} (run `track` first)", tracks.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Pipeline(anyhow!("no track files in {}", tracks.display())));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for f in &files {
        let recs = gaze::read_track_csv(f)?;
        let name = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        rows.push(SequenceStats::new(name, &recs));
        all.extend(recs);
    }
    let per_trial: Vec<eval::ErrorStats> = rows.iter().filter_map(SequenceStats::stats).collect();
    rows.push(SequenceStats::new("all".into(), &all));
    let dir = run.subdir("eval")?;
    let stats_path = dir.join("stats.csv");
    eval::write_csv(&rows, &stats_path)?;
    let mut artifacts = vec![run.rel(&stats_path)];
    for r in &rows {
        println!(
            "{}: mean {:.4} std {:.4} E50 {:.4} E75 {:.4} E95 {:.4} ({} valid, {} invalid)",
            r.sequence, r.mean, r.std, r.e50, r.e75, r.e95, r.count, r.invalid
        );
    }
    if !per_trial.is_empty() {
        let cov = eval::coverage_curve(&per_trial, &cfg.eval.thresholds)?;
        let cov_path = dir.join("coverage.csv");
        eval::write_csv(&cov, &cov_path)?;
        let svg_path = dir.join("coverage.svg");
        eval::write_line_plot(
            &svg_path,
            "Population coverage",
            "error threshold (deg)",
            "fraction of sequences",
            &[
                Series {
                    name: "mean error",
                    points: cov.iter().map(|c| (c.threshold, c.mean_coverage)).collect(),
                },
                Series {
                    name: "E95",
                    points: cov.iter().map(|c| (c.threshold, c.e95_coverage)).collect(),
                },
            ],
        )?;
        artifacts.push(run.rel(&cov_path));
        artifacts.push(run.rel(&svg_path));
    }
    Ok(artifacts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: usize,
    pub canonical_mean: f64,
    pub canonical_e95: f64,
    pub blended_mean: f64,
    pub blended_e95: f64,
    pub canonical_invalid: usize,
    pub blended_invalid: usize,
}

/// One paired comparison: a fresh phantom and scan derived from the run
/// index, tracked against the canonical space and against the blended map.
pub fn ablation_run(cfg: &RunConfig, run: usize) -> crate::Result<AblationRow> {
    let mut c = cfg.clone();
    c.phantom.seed = seed::derive_seed(cfg.phantom.seed, run as u64);
    c.appearance.seed = seed::derive_seed(cfg.appearance.seed, run as u64);
    c.sequences.seed = seed::derive_seed(cfg.sequences.seed, run as u64);
    c.sequences.frames = cfg.simulate.ablation_frames;
    c.sequences.patterns = vec![Pattern::Random];
    let ph = generate_phantom(&c)?;
    let scan = render_scan(&ph, &c)?;
    let graph = GridGraph::from_scan(&scan);
    let build = canonical::build_space(&scan.frames, &graph, &c.space_build())?;
    let frames = render_sequence(&ph, &c, 0)?;
    let tracker = c.tracker();
    let (cs, ci) = eval::tracking_errors(&frames, &build.space, &tracker)?;
    let map_space = eval::blended_map_baseline(&scan.frames, &build.positions, &tracker)?;
    let (bs, bi) = eval::tracking_errors(&frames, &map_space, &tracker)?;
    Ok(AblationRow {
        run,
        canonical_mean: cs.mean,
        canonical_e95: cs.e95,
        blended_mean: bs.mean,
        blended_e95: bs.e95,
        canonical_invalid: ci,
        blended_invalid: bi,
    })
}

fn cmd_simulate(cfg: &RunConfig, run: &RunDir, kind: SimKind) -> Result<Vec<String>, CliError> {
    let dir = run.subdir("simulate")?;
    let spec = cfg.grid.spec();
    let sim = &cfg.simulate;
    match kind {
        SimKind::Noise => {
            let rows = eval::robustness_noise_sim(&spec, &cfg.calibration, &sim.noise_stds, sim.trials, sim.seed)?;
            let p = dir.join("robustness.csv");
            eval::write_csv(&rows, &p)?;
            let svg = dir.join("robustness.svg");
            eval::write_line_plot(
                &svg,
                "Bundle adjustment under edge noise",
                "edge noise std (px)",
                "max node error (deg)",
                &[Series {
                    name: "mean over trials",
                    points: rows.iter().map(|r| (r.noise_std, r.max_node_error_mean)).collect(),
                }],
            )?;
            for r in &rows {
                println!(
                    "noise {:>5.2} px: max node error {:.4} +/- {:.4} deg",
                    r.noise_std, r.max_node_error_mean, r.max_node_error_std
                );
            }
            Ok(vec![run.rel(&p), run.rel(&svg)])
        }
        SimKind::EdgeRemoval => {
            let graph = eval::grid_graph(&spec)?;
            let mut rng = seed::rng(sim.seed, 0);
            let ms = eval::noisy_grid_measurements(&spec, &cfg.calibration, sim.edge_noise_std, &mut rng)?;
            let rows = eval::edge_removal_sim(&graph, &ms, &cfg.calibration)?;
            let p = dir.join("edge_removal.csv");
            eval::write_csv(&rows, &p)?;
            let connected = rows.iter().filter(|r| r.connected).count();
            let worst = rows
                .iter()
                .filter(|r| r.connected)
                .map(|r| r.max_shift_deg)
                .fold(0.0, f64::max);
            println!(
                "{connected}/{} removals keep the graph connected; worst node shift {worst:.5} deg",
                rows.len()
            );
            Ok(vec![run.rel(&p)])
        }
        SimKind::Ablation => {
            let rows = (0..sim.ablation_runs)
                .map(|k| ablation_run(cfg, k))
                .collect::<crate::Result<Vec<_>>>()?;
            let p = dir.join("ablation.csv");
            eval::write_csv(&rows, &p)?;
            let wins = rows.iter().filter(|r| r.canonical_e95 <= r.blended_e95).count();
            println!("canonical space E95 <= blended map E95 in {wins}/{} runs", rows.len());
            Ok(vec![run.rel(&p)])
        }
    }
}

fn cmd_bench(cfg: &RunConfig, run: &RunDir) -> Result<Vec<String>, CliError> {
    let ph = generate_phantom(cfg)?;
    let scan = render_scan(&ph, cfg)?;
    let graph = GridGraph::from_scan(&scan);
    let build = canonical::build_space(&scan.frames, &graph, &cfg.space_build())?;
    let mut c = cfg.clone();
    c.sequences.frames = cfg.bench.frames;
    c.sequences.patterns = vec![Pattern::Random];
    let frames = render_sequence(&ph, &c, 0)?;
    let rows = eval::bench_stages(&frames, &build.space, &cfg.tracker())?;
    let dir = run.subdir("bench")?;
    let p = dir.join("bench.csv");
    eval::write_csv(&rows, &p)?;
    for r in &rows {
        println!("{:<24} {:>9.3} ms", r.stage, r.mean_ms);
    }
    if let Some(total) = rows.iter().find(|r| r.stage == "total") {
        println!("throughput {:.1} frames/s", 1e3 / total.mean_ms);
    }
    Ok(vec![run.rel(&p)])
}
