//! Run configuration: a TOML file with mandatory seeds plus `key=value`
//! overrides on the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EnhanceConfig;
use crate::gaze::TrackerConfig;
use crate::canonical::SpaceBuildConfig;
use crate::matching::ConsensusParams;
use crate::phantom::{AppearanceModel, Calibration, FrameGeometry, GazeAngle, GridSpec, PhantomConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub phantom: PhantomSection,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub grid: GridSection,
    pub appearance: AppearanceSection,
    #[serde(default)]
    pub consensus: ConsensusParams,
    #[serde(default)]
    pub tracking: TrackingSection,
    pub sequences: SequenceSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub simulate: SimulateSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub seed: u64,
    #[serde(default = "default_density")]
    pub vessel_density: f64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_range")]
    pub gaze_range_deg: f64,
    #[serde(default)]
    pub frame: FrameGeometry,
}

fn default_density() -> f64 {
    0.5
}
fn default_width() -> usize {
    1200
}
fn default_height() -> usize {
    1100
}
fn default_range() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub rows: usize,
    pub cols: usize,
    pub spacing_deg: f64,
    /// Scan nodes replaced by a blank frame, for failure injection.
    pub blank_nodes: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            rows: g.rows,
            cols: g.cols,
            spacing_deg: g.spacing_deg,
            blank_nodes: Vec::new(),
        }
    }
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            rows: self.rows,
            cols: self.cols,
            spacing_deg: self.spacing_deg,
        }
    }
}

/// Appearance variation of rendered frames. The scan uses `seed` directly;
/// test sequence `k` uses a seed derived from `seed` and `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceSection {
    pub seed: u64,
    #[serde(default = "nominal_gamma")]
    pub gamma_jitter: f64,
    #[serde(default = "nominal_noise")]
    pub noise_std: f64,
    #[serde(default = "nominal_blur")]
    pub blur_max: f64,
    #[serde(default = "nominal_vignette")]
    pub vignette_strength: f64,
}

fn nominal_gamma() -> f64 {
    AppearanceModel::nominal(0).gamma_jitter
}
fn nominal_noise() -> f64 {
    AppearanceModel::nominal(0).noise_std
}
fn nominal_blur() -> f64 {
    AppearanceModel::nominal(0).blur_max
}
fn nominal_vignette() -> f64 {
    AppearanceModel::nominal(0).vignette_strength
}

impl AppearanceSection {
    pub fn model(&self, seed: u64) -> AppearanceModel {
        AppearanceModel {
            gamma_jitter: self.gamma_jitter,
            noise_std: self.noise_std,
            blur_max: self.blur_max,
            vignette_strength: self.vignette_strength,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    pub use_enhancement: bool,
    pub steering_enabled: bool,
    pub enhance: EnhanceConfig,
}

impl Default for TrackingSection {
    fn default() -> Self {
        Self {
            use_enhancement: true,
            steering_enabled: false,
            enhance: EnhanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Targets cycle through a rectangular lattice spanning the gaze range.
    Grid,
    /// Targets uniform over the gaze range.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSection {
    pub seed: u64,
    #[serde(default = "default_sequences")]
    pub count: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Sequence `k` uses `patterns[k % patterns.len()]`.
    #[serde(default = "default_patterns")]
    pub patterns: Vec<Pattern>,
    #[serde(default = "default_lattice_step")]
    pub grid_step_deg: f64,
}

fn default_sequences() -> usize {
    2
}
fn default_frames() -> usize {
    100
}
fn default_patterns() -> Vec<Pattern> {
    vec![Pattern::Grid, Pattern::Random]
}
fn default_lattice_step() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            thresholds: (0..=20).map(|i| i as f64 * 0.025).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub seed: u64,
    #[serde(default = "default_noise_stds")]
    pub noise_stds: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_edge_noise")]
    pub edge_noise_std: f64,
    #[serde(default = "default_ablation_runs")]
    pub ablation_runs: usize,
    #[serde(default = "default_ablation_frames")]
    pub ablation_frames: usize,
}

fn default_noise_stds() -> Vec<f64> {
    vec![1.0, 2.0, 5.0, 10.0]
}
fn default_trials() -> usize {
    200
}
fn default_edge_noise() -> f64 {
    0.5
}
fn default_ablation_runs() -> usize {
    20
}
fn default_ablation_frames() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub frames: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { frames: 100 }
    }
}

impl RunConfig {
    /// Reads `path` and applies `overrides`, each `dotted.key=value` with the
    /// value in TOML syntax (bare words are taken as strings).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Parameter(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.phantom.seed,
            vessel_density: self.phantom.vessel_density,
            width: self.phantom.width,
            height: self.phantom.height,
            frame: self.phantom.frame,
            gaze_range_deg: self.phantom.gaze_range_deg,
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            cal: self.calibration,
            consensus: self.consensus,
            use_enhancement: self.tracking.use_enhancement,
            enhance: self.tracking.enhance,
            steering_enabled: self.tracking.steering_enabled,
        }
    }

    pub fn space_build(&self) -> SpaceBuildConfig {
        SpaceBuildConfig {
            cal: self.calibration,
            consensus: self.consensus,
            use_enhancement: self.tracking.use_enhancement,
            enhance: self.tracking.enhance,
        }
    }

    /// Checks every section against the preconditions of the stage that
    /// consumes it.
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        self.phantom_config().validate(&self.calibration)?;
        self.consensus.validate()?;
        self.appearance.model(self.appearance.seed).validate()?;
        if !self.tracking.enhance.kappa.is_finite() {
            return Err(Error::Parameter("enhance.kappa must be finite".into()));
        }

        let g = self.grid.spec();
        if g.rows == 0 || g.cols == 0 || !(g.spacing_deg > 0.0) {
            return Err(Error::Parameter("grid needs rows, cols >= 1 and spacing > 0".into()));
        }
        let range = self.phantom.gaze_range_deg;
        let reach = |n: usize| (n / 2).max(n - 1 - n / 2) as f64 * g.spacing_deg;
        if reach(g.cols) > range || reach(g.rows) > range {
            return Err(Error::Coverage(format!(
                "a {}x{} grid at {} deg exceeds the +/-{range} deg range",
                g.rows, g.cols, g.spacing_deg
            )));
        }
        if let Some(n) = self.grid.blank_nodes.iter().find(|&&n| n >= g.node_count()) {
            return Err(Error::Parameter(format!("blank node {n} is outside the grid")));
        }
        let steer = self.calibration.steering_offset;
        if self.tracking.steering_enabled && (steer.0.abs() > 0.0 || steer.1.abs() > 0.0) {
            // Rendering happens at target - offset; the lattice corners must stay covered.
            let corner = GazeAngle::new(range + steer.0.abs(), range + steer.1.abs());
            let (px, py) = corner.to_pixels(&self.calibration);
            let f = self.phantom.frame;
            if f.width as f64 + 2.0 * px.abs() > self.phantom.width as f64
                || f.height as f64 + 2.0 * py.abs() > self.phantom.height as f64
            {
                return Err(Error::Coverage("steering offset pushes targets outside the phantom".into()));
            }
        }

        let s = &self.sequences;
        if s.frames == 0 || s.patterns.is_empty() {
            return Err(Error::Parameter("sequences need frames >= 1 and at least one pattern".into()));
        }
        if !(s.grid_step_deg > 0.0) {
            return Err(Error::Parameter("sequences.grid_step_deg must be > 0".into()));
        }
        if self.eval.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Parameter("eval thresholds must be finite".into()));
        }
        let sim = &self.simulate;
        if sim.trials < 30 {
            return Err(Error::Parameter(format!("simulate.trials must be >= 30, got {}", sim.trials)));
        }
        if sim.noise_stds.iter().chain([&sim.edge_noise_std]).any(|v| !(*v >= 0.0)) {
            return Err(Error::Parameter("simulation noise levels must be >= 0".into()));
        }
        if sim.ablation_runs == 0 || sim.ablation_frames == 0 {
            return Err(Error::Parameter("ablation needs at least one run and one frame".into()));
        }
        if self.bench.frames < 100 {
            return Err(Error::Parameter(format!("bench.frames must be >= 100, got {}", self.bench.frames)));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Parameter(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Parameter(format!("override key {key:?} is empty")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Parameter(format!("override key {key:?}: {p} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "runs/x"
[phantom]
seed = 7
[appearance]
seed = 8
[sequences]
seed = 9
[simulate]
seed = 10
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.calibration.ppd_x, 40.18);
        assert_eq!(c.grid.spec(), GridSpec::default());
        assert_eq!(c.appearance.model(8), AppearanceModel::nominal(8));
        assert_eq!(c.simulate.noise_stds, vec![1.0, 2.0, 5.0, 10.0]);
    }

    #[test]
    fn seeds_are_mandatory() {
        let text = MINIMAL.replace("seed = 9\n", "");
        assert!(RunConfig::parse(&text, &[]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse(
            MINIMAL,
            &[
                "calibration.ppd_x=41.5".into(),
                "output_dir=elsewhere".into(),
                "sequences.patterns=[\"random\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.calibration.ppd_x, 41.5);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.sequences.patterns, vec![Pattern::Random]);
    }

    #[test]
    fn invalid_values_rejected() {
        for o in ["calibration.ppd_x=0", "phantom.width=300", "simulate.trials=5", "nonsense.key=1", "grid.spacing_deg=4"] {
            assert!(RunConfig::parse(MINIMAL, &[o.into()]).is_err(), "{o}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml(), &[]).unwrap(), c);
    }
}
