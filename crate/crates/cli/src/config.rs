//! Run configuration: one structured TOML file per experiment.
//!
//! Unknown keys are errors everywhere (strict mode); every run states its
//! seed in the file or on the command line, never from the clock.

use ambsde_core::lattice::{DelayFn, DelaySpec};
use ambsde_core::noise::LevyModel;
use ambsde_core::registry::Params;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub numerics: NumericsConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Horizon `T`.
    pub horizon: f64,
    /// Window length `M`.
    #[serde(default)]
    pub window: f64,
    /// Total steps over `[0, T+M]`.
    pub n_steps: usize,
    /// Brownian dimension.
    #[serde(default = "one_usize")]
    pub d: usize,
    /// Declared driver Lipschitz constant; defaults to the registry value
    /// for the selected driver.
    pub lipschitz_c: Option<f64>,
    #[serde(default)]
    pub delays: DelaysConfig,
    pub levy: Option<LevyConfig>,
    pub driver: SelectorConfig,
    pub terminal: SelectorConfig,
    /// Second pair for `compare` and `monotone`.
    pub driver2: Option<SelectorConfig>,
    pub terminal2: Option<SelectorConfig>,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaysConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub delta1: DelayFnConfig,
    #[serde(default)]
    pub delta2: DelayFnConfig,
    #[serde(default)]
    pub delta3: DelayFnConfig,
}

impl Default for DelaysConfig {
    fn default() -> Self {
        DelaysConfig {
            rho: default_rho(),
            delta1: DelayFnConfig::default(),
            delta2: DelayFnConfig::default(),
            delta3: DelayFnConfig::default(),
        }
    }
}

fn default_rho() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayFnConfig {
    Constant { value: f64 },
    Affine { a: f64, b: f64 },
    /// Values per grid index of `[0, T]` with a declared substitution
    /// constant.
    Tabulated { values: Vec<f64>, l: f64 },
}

impl Default for DelayFnConfig {
    fn default() -> Self {
        DelayFnConfig::Constant { value: 0.0 }
    }
}

impl DelayFnConfig {
    fn to_delay(&self) -> DelayFn {
        match self {
            DelayFnConfig::Constant { value } => DelayFn::Constant(*value),
            DelayFnConfig::Affine { a, b } => DelayFn::Affine { a: *a, b: *b },
            DelayFnConfig::Tabulated { values, l } => DelayFn::Tabulated {
                values: values.clone(),
                declared_l: *l,
            },
        }
    }
}

impl DelaysConfig {
    pub fn to_spec(&self) -> DelaySpec {
        DelaySpec {
            delta1: self.delta1.to_delay(),
            delta2: self.delta2.to_delay(),
            delta3: self.delta3.to_delay(),
            rho: self.rho,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyConfig {
    pub marks: Vec<f64>,
    pub intensities: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default = "default_weight_bound")]
    pub weight_bound: f64,
}

fn default_weight_bound() -> f64 {
    1.0
}

impl LevyConfig {
    pub fn to_model(&self) -> ambsde_core::Result<LevyModel> {
        LevyModel::new(
            self.marks.clone(),
            self.intensities.clone(),
            self.weights.clone(),
            self.weight_bound,
        )
    }
}

/// A registry entry by name plus numeric parameters.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl SelectorConfig {
    pub fn params(&self) -> Params {
        self.params.clone()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    pub n_particles: usize,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// `"auto"` solves the weight equation; a number fixes the weight.
    #[serde(default)]
    pub beta: BetaMode,
    /// Chain stages for `monotone`.
    #[serde(default = "default_n_rounds")]
    pub n_rounds: usize,
}

fn default_degree() -> usize {
    2
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    25
}
fn default_damping() -> f64 {
    1.0
}
fn default_n_rounds() -> usize {
    6
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum BetaMode {
    Fixed(f64),
    Named(String),
}

impl Default for BetaMode {
    fn default() -> Self {
        BetaMode::Fixed(0.0)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional statement of intent; must match the invoked subcommand.
    pub command: Option<String>,
    pub seed: u64,
    pub out_dir: Option<String>,
}

/// Parse and structurally validate a config file.
pub fn load(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| format!("config {}: {e}", path.display()))?;
    if let BetaMode::Named(name) = &config.numerics.beta {
        if name != "auto" {
            return Err(format!(
                "config {}: numerics.beta must be a number or \"auto\", got \"{name}\"",
                path.display()
            ));
        }
    }
    if config.problem.driver2.is_some() != config.problem.terminal2.is_some() {
        return Err(format!(
            "config {}: driver2 and terminal2 must be given together",
            path.display()
        ));
    }
    Ok(config)
}
