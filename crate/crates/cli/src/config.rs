use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Stochastic,
    Both,
}

/// Fully resolved settings of one run. Embedded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mortality: Option<PathBuf>,
    pub portfolio: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub discount_rate: f64,
    pub terminal_age: i32,
    pub sims: usize,
    pub outer: usize,
    pub inner: usize,
    pub sigma_scales: Vec<f64>,
    pub size_scales: Vec<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub raw_bias: bool,
    pub drift_uncertainty: bool,
    pub threads: Option<usize>,
    pub age_range: Option<(i32, i32)>,
    pub valuation_year: Option<i32>,
    pub mode: Mode,
    pub bins: Option<usize>,
    pub convergence_threshold: f64,
    pub max_rounds: usize,
    pub scenario: Option<u64>,
    pub synth_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mortality: None,
            portfolio: None,
            model: None,
            discount_rate: 0.025,
            terminal_age: 120,
            sims: 20_000,
            outer: 100,
            inner: 200,
            sigma_scales: vec![1.0],
            size_scales: vec![1],
            seed: 0,
            out_dir: PathBuf::from("out"),
            raw_bias: false,
            drift_uncertainty: false,
            threads: None,
            age_range: None,
            valuation_year: None,
            mode: Mode::Both,
            bins: None,
            convergence_threshold: 1e-3,
            max_rounds: 8,
            scenario: None,
            synth_size: 374,
        }
    }
}

fn parse_age_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("expected FROM-TO, got {s:?}"))?;
    let a: i32 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: i32 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

/// Command-line flags; any flag given overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON file with default settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mortality CSV with columns age,year,qx.
    #[arg(long)]
    pub mortality: Option<PathBuf>,
    /// Portfolio CSV with columns id,age,rent.
    #[arg(long)]
    pub portfolio: Option<PathBuf>,
    /// Model JSON written by `fit`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub discount_rate: Option<f64>,
    #[arg(long)]
    pub terminal_age: Option<i32>,
    /// Number of liability realisations.
    #[arg(long)]
    pub sims: Option<usize>,
    /// Initial number of outer (scenario) draws.
    #[arg(long)]
    pub outer: Option<usize>,
    /// Initial number of inner runs per scenario.
    #[arg(long)]
    pub inner: Option<usize>,
    /// Multiplier(s) on the time-index volatility, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sigma_scale: Option<Vec<f64>>,
    /// Portfolio replication factor(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub size_scale: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Stochastic surfaces without the volatility correction.
    #[arg(long)]
    pub raw_bias: bool,
    /// Redraw the drift parameters per scenario (experimental).
    #[arg(long)]
    pub drift_uncertainty: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Ages to fit, e.g. 30-100.
    #[arg(long, value_parser = parse_age_range)]
    pub age_range: Option<(i32, i32)>,
    /// First projection year; defaults to the year after the fit window.
    #[arg(long)]
    pub valuation_year: Option<i32>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Histogram bin count; Freedman-Diaconis when absent.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Scenario index to export instead of the deterministic projection.
    #[arg(long)]
    pub scenario: Option<u64>,
    /// Number of annuitants generated by `synth`.
    #[arg(long)]
    pub synth_size: Option<usize>,
}

fn read_config_file(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

impl Flags {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => read_config_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($flag:ident => $field:ident) => {
                if let Some(v) = &self.$flag {
                    c.$field = v.clone().into();
                }
            };
        }
        take!(mortality => mortality);
        take!(portfolio => portfolio);
        take!(model => model);
        take!(discount_rate => discount_rate);
        take!(terminal_age => terminal_age);
        take!(sims => sims);
        take!(outer => outer);
        take!(inner => inner);
        take!(sigma_scale => sigma_scales);
        take!(size_scale => size_scales);
        take!(seed => seed);
        take!(out_dir => out_dir);
        take!(threads => threads);
        take!(age_range => age_range);
        take!(valuation_year => valuation_year);
        take!(mode => mode);
        take!(bins => bins);
        take!(threshold => convergence_threshold);
        take!(max_rounds => max_rounds);
        take!(scenario => scenario);
        take!(synth_size => synth_size);
        c.raw_bias |= self.raw_bias;
        c.drift_uncertainty |= self.drift_uncertainty;
        c.validate()?;
        Ok(c)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::Input(m));
        if !(self.discount_rate > -1.0 && self.discount_rate.is_finite()) {
            return bad(format!(
                "discount rate {} must exceed -1",
                self.discount_rate
            ));
        }
        if self.sims == 0 {
            return bad("--sims must be at least 1".into());
        }
        if self.outer < 2 || self.inner < 2 {
            return bad("--outer and --inner must be at least 2".into());
        }
        if self.sigma_scales.is_empty() || self.size_scales.is_empty() {
            return bad("scale lists must not be empty".into());
        }
        if let Some(s) = self
            .sigma_scales
            .iter()
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return bad(format!("sigma scale {s} must be finite and non-negative"));
        }
        if self.size_scales.contains(&0) {
            return bad("size scales must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("--threads must be at least 1".into());
        }
        if let Some((a, b)) = self.age_range {
            if a > b {
                return bad(format!("empty age range {a}-{b}"));
            }
        }
        if self.bins == Some(0) {
            return bad("--bins must be at least 1".into());
        }
        if !(self.convergence_threshold > 0.0) {
            return bad("--threshold must be positive".into());
        }
        if self.max_rounds < 2 {
            return bad("--max-rounds must be at least 2".into());
        }
        if self.synth_size == 0 {
            return bad("--synth-size must be at least 1".into());
        }
        Ok(())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
        path.as_deref()
            .ok_or_else(|| Failure::Input(format!("--{flag} is required")))
    }
}
