//! Scenario files: `key = value` lines grouped under `[section]` headers.
//!
//! Every key is unique across sections, so command-line overrides may give
//! either `key=value` or `section.key=value`. `#` and `;` start comments.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::bsde::{truncate_payoff, BsdeConfig, Payoff, TruncatedPayoff};
use crate::error::LabError;
use crate::kernel::{CorrelationDecomposition, TimeGrid};
use crate::ledger::{default_family, StrategyRule};
use crate::model::{GammaMap, ModelParams, VolFn};
use crate::swaps::{SwapLiquidity, SwapSpec, SwapTermSheet};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("override `{text}`: {message}")]
    Override { text: String, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<LabError> for ConfigError {
    fn from(e: LabError) -> Self {
        ConfigError::Validation(e.to_string())
    }
}

pub const EXPERIMENTS: [&str; 6] = ["simulate", "ledger", "swaps", "bsde", "replicate", "arbitrage-test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoffKind {
    ClippedCall,
    Identity,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    // [model]
    pub gamma: f64,
    pub eta: f64,
    pub alpha: f64,
    pub a: f64,
    pub epsilon: f64,
    pub lambda_impact: f64,
    /// `identity` or `square`.
    pub gamma_map: String,
    pub phi_coef: f64,
    pub phi_exponent: f64,
    pub theta_coef: f64,
    pub theta_exponent: f64,
    pub s0: f64,
    pub u0: f64,
    pub v0: f64,
    pub rho12: f64,
    pub rho13: f64,
    pub rho23: f64,
    // [grid]
    pub horizon: f64,
    pub n_steps: usize,
    // [swaps]
    pub maturity1: f64,
    pub strike1: f64,
    pub depth1: f64,
    pub lambda1: f64,
    pub maturity2: f64,
    pub strike2: f64,
    pub depth2: f64,
    pub lambda2: f64,
    // [bsde]
    pub l: f64,
    pub n_trunc: f64,
    pub degree: usize,
    pub picard_iters: usize,
    pub picard_tol: f64,
    pub min_paths_per_regression: usize,
    pub position: f64,
    // [payoff]
    pub payoff: PayoffKind,
    pub strike: f64,
    pub cap: f64,
    pub payoff_constant: f64,
    // [replicate]
    pub xs: Vec<f64>,
    // [ledger]
    pub strategy_index: usize,
    pub swap_units: f64,
    // [arbitrage]
    pub admissibility_bound: f64,
    // [run]
    pub experiment: String,
    pub n_paths: usize,
    pub seed: u64,
    pub out: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let m = ModelParams::default();
        let b = BsdeConfig::default();
        let liq = SwapLiquidity::default();
        Self {
            gamma: m.gamma,
            eta: m.eta,
            alpha: m.alpha,
            a: m.a,
            epsilon: m.epsilon,
            lambda_impact: m.lambda_impact,
            gamma_map: "identity".into(),
            phi_coef: 0.1,
            phi_exponent: 0.5,
            theta_coef: 0.1,
            theta_exponent: 0.5,
            s0: m.s0,
            u0: m.u0,
            v0: m.v0,
            rho12: 0.0,
            rho13: 0.0,
            rho23: 0.0,
            horizon: 1.0,
            n_steps: 64,
            maturity1: 1.5,
            strike1: 0.05,
            depth1: liq.depth[0],
            lambda1: liq.lambda[0],
            maturity2: 2.0,
            strike2: 0.08,
            depth2: liq.depth[1],
            lambda2: liq.lambda[1],
            l: b.l,
            n_trunc: b.n_trunc,
            degree: b.degree,
            picard_iters: b.picard_iters,
            picard_tol: b.picard_tol,
            min_paths_per_regression: b.min_paths_per_regression,
            position: 1.0,
            payoff: PayoffKind::ClippedCall,
            strike: 100.0,
            cap: 20.0,
            payoff_constant: 1.0,
            xs: vec![4.0, 2.0, 1.0, 0.5],
            strategy_index: 17,
            swap_units: 0.0,
            admissibility_bound: 1000.0,
            experiment: "simulate".into(),
            n_paths: 10_000,
            seed: 42,
            out: "out".into(),
        }
    }
}

fn num(v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn int<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn payoff_name(p: PayoffKind) -> &'static str {
    match p {
        PayoffKind::ClippedCall => "clipped_call",
        PayoffKind::Identity => "identity",
        PayoffKind::Constant => "constant",
    }
}

impl ScenarioConfig {
    /// Sections with their keys and current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let f = |v: f64| format!("{v:?}");
        vec![
            (
                "model",
                vec![
                    ("gamma", f(self.gamma)),
                    ("eta", f(self.eta)),
                    ("alpha", f(self.alpha)),
                    ("a", f(self.a)),
                    ("epsilon", f(self.epsilon)),
                    ("lambda_impact", f(self.lambda_impact)),
                    ("gamma_map", self.gamma_map.clone()),
                    ("phi_coef", f(self.phi_coef)),
                    ("phi_exponent", f(self.phi_exponent)),
                    ("theta_coef", f(self.theta_coef)),
                    ("theta_exponent", f(self.theta_exponent)),
                    ("s0", f(self.s0)),
                    ("u0", f(self.u0)),
                    ("v0", f(self.v0)),
                    ("rho12", f(self.rho12)),
                    ("rho13", f(self.rho13)),
                    ("rho23", f(self.rho23)),
                ],
            ),
            ("grid", vec![("horizon", f(self.horizon)), ("n_steps", self.n_steps.to_string())]),
            (
                "swaps",
                vec![
                    ("maturity1", f(self.maturity1)),
                    ("strike1", f(self.strike1)),
                    ("depth1", f(self.depth1)),
                    ("lambda1", f(self.lambda1)),
                    ("maturity2", f(self.maturity2)),
                    ("strike2", f(self.strike2)),
                    ("depth2", f(self.depth2)),
                    ("lambda2", f(self.lambda2)),
                ],
            ),
            (
                "bsde",
                vec![
                    ("l", f(self.l)),
                    ("n_trunc", f(self.n_trunc)),
                    ("degree", self.degree.to_string()),
                    ("picard_iters", self.picard_iters.to_string()),
                    ("picard_tol", f(self.picard_tol)),
                    ("min_paths_per_regression", self.min_paths_per_regression.to_string()),
                    ("position", f(self.position)),
                ],
            ),
            (
                "payoff",
                vec![
                    ("payoff", payoff_name(self.payoff).into()),
                    ("strike", f(self.strike)),
                    ("cap", f(self.cap)),
                    ("payoff_constant", f(self.payoff_constant)),
                ],
            ),
            (
                "replicate",
                vec![("xs", self.xs.iter().map(|&x| f(x)).collect::<Vec<_>>().join(", "))],
            ),
            (
                "ledger",
                vec![
                    ("strategy_index", self.strategy_index.to_string()),
                    ("swap_units", f(self.swap_units)),
                ],
            ),
            ("arbitrage", vec![("admissibility_bound", f(self.admissibility_bound))]),
            (
                "run",
                vec![
                    ("experiment", self.experiment.clone()),
                    ("n_paths", self.n_paths.to_string()),
                    ("seed", self.seed.to_string()),
                    ("out", self.out.clone()),
                ],
            ),
        ]
    }

    /// Section owning `key`, if the key exists.
    pub fn section_of(key: &str) -> Option<&'static str> {
        Self::default()
            .entries()
            .into_iter()
            .find(|(_, kv)| kv.iter().any(|(k, _)| *k == key))
            .map(|(s, _)| s)
    }

    /// Sets one key from its textual value; no cross-field validation.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "gamma" => self.gamma = num(v)?,
            "eta" => self.eta = num(v)?,
            "alpha" => self.alpha = num(v)?,
            "a" => self.a = num(v)?,
            "epsilon" => self.epsilon = num(v)?,
            "lambda_impact" => self.lambda_impact = num(v)?,
            "gamma_map" => match v {
                "identity" | "square" => self.gamma_map = v.into(),
                _ => return Err(format!("gamma_map must be identity or square, got `{v}`")),
            },
            "phi_coef" => self.phi_coef = num(v)?,
            "phi_exponent" => self.phi_exponent = num(v)?,
            "theta_coef" => self.theta_coef = num(v)?,
            "theta_exponent" => self.theta_exponent = num(v)?,
            "s0" => self.s0 = num(v)?,
            "u0" => self.u0 = num(v)?,
            "v0" => self.v0 = num(v)?,
            "rho12" => self.rho12 = num(v)?,
            "rho13" => self.rho13 = num(v)?,
            "rho23" => self.rho23 = num(v)?,
            "horizon" => self.horizon = num(v)?,
            "n_steps" => self.n_steps = int(v)?,
            "maturity1" => self.maturity1 = num(v)?,
            "strike1" => self.strike1 = num(v)?,
            "depth1" => self.depth1 = num(v)?,
            "lambda1" => self.lambda1 = num(v)?,
            "maturity2" => self.maturity2 = num(v)?,
            "strike2" => self.strike2 = num(v)?,
            "depth2" => self.depth2 = num(v)?,
            "lambda2" => self.lambda2 = num(v)?,
            "l" => self.l = num(v)?,
            "n_trunc" => self.n_trunc = num(v)?,
            "degree" => self.degree = int(v)?,
            "picard_iters" => self.picard_iters = int(v)?,
            "picard_tol" => self.picard_tol = num(v)?,
            "min_paths_per_regression" => self.min_paths_per_regression = int(v)?,
            "position" => self.position = num(v)?,
            "payoff" => {
                self.payoff = match v {
                    "clipped_call" => PayoffKind::ClippedCall,
                    "identity" => PayoffKind::Identity,
                    "constant" => PayoffKind::Constant,
                    _ => return Err(format!("payoff must be clipped_call, identity or constant, got `{v}`")),
                }
            }
            "strike" => self.strike = num(v)?,
            "cap" => self.cap = num(v)?,
            "payoff_constant" => self.payoff_constant = num(v)?,
            "xs" => self.xs = list(v)?,
            "strategy_index" => self.strategy_index = int(v)?,
            "swap_units" => self.swap_units = num(v)?,
            "admissibility_bound" => self.admissibility_bound = num(v)?,
            "experiment" => self.experiment = v.into(),
            "n_paths" => self.n_paths = int(v)?,
            "seed" => self.seed = int(v)?,
            "out" => self.out = v.into(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses file contents; defaults fill missing keys. Does not validate.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| ConfigError::Parse { line: line_no, message };
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                    .trim();
                if !cfg.entries().iter().any(|(s, _)| *s == name) {
                    return Err(err(format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match (Self::section_of(key), &section) {
                (None, _) => return Err(err(format!("unknown key `{key}`"))),
                (Some(owner), Some(s)) if owner != s => {
                    return Err(err(format!("key `{key}` belongs to [{owner}], not [{s}]")))
                }
                _ => {}
            }
            cfg.set(key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Applies `key=value` or `section.key=value`.
    pub fn apply_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let fail = |message: String| ConfigError::Override { text: text.into(), message };
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| fail("expected KEY=VALUE".into()))?;
        let key = key.trim();
        let key = match key.split_once('.') {
            Some((section, k)) => {
                if Self::section_of(k) != Some(section) {
                    return Err(fail(format!("no key `{k}` in [{section}]")));
                }
                k
            }
            None => key,
        };
        self.set(key, value.trim()).map_err(fail)
    }

    /// Canonical file form; parsing it yields an identical config.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        for (i, (section, kv)) in self.entries().into_iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{section}]");
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn model_params(&self) -> Result<ModelParams, ConfigError> {
        let vol = |coef: f64, exponent: f64| {
            if coef == 0.0 {
                VolFn::Zero
            } else if exponent == 1.0 {
                VolFn::Linear { coef }
            } else {
                VolFn::Power { coef, exponent }
            }
        };
        Ok(ModelParams {
            gamma: self.gamma,
            eta: self.eta,
            alpha: self.alpha,
            a: self.a,
            epsilon: self.epsilon,
            lambda_impact: self.lambda_impact,
            gamma_map: if self.gamma_map == "square" { GammaMap::Square } else { GammaMap::Identity },
            phi: vol(self.phi_coef, self.phi_exponent),
            theta: vol(self.theta_coef, self.theta_exponent),
            s0: self.s0,
            u0: self.u0,
            v0: self.v0,
            decomp: CorrelationDecomposition::from_correlations(self.rho12, self.rho13, self.rho23)?,
        })
    }

    pub fn grid(&self) -> Result<TimeGrid, ConfigError> {
        Ok(TimeGrid::new(self.horizon, self.n_steps)?)
    }

    pub fn term_sheet(&self) -> SwapTermSheet {
        SwapTermSheet {
            swaps: [
                SwapSpec { maturity: self.maturity1, strike: self.strike1 },
                SwapSpec { maturity: self.maturity2, strike: self.strike2 },
            ],
            liquidity: SwapLiquidity {
                depth: [self.depth1, self.depth2],
                lambda: [self.lambda1, self.lambda2],
            },
        }
    }

    pub fn bsde_config(&self) -> BsdeConfig {
        BsdeConfig {
            l: self.l,
            n_trunc: self.n_trunc,
            degree: self.degree,
            picard_iters: self.picard_iters,
            picard_tol: self.picard_tol,
            min_paths_per_regression: self.min_paths_per_regression,
        }
    }

    pub fn truncated_payoff(&self) -> TruncatedPayoff {
        let p = match self.payoff {
            PayoffKind::ClippedCall => Payoff::ClippedCall { strike: self.strike, cap: self.cap },
            PayoffKind::Identity => Payoff::Identity,
            PayoffKind::Constant => Payoff::Constant(self.payoff_constant),
        };
        truncate_payoff(p, self.n_trunc)
    }

    pub fn strategy_rule(&self) -> StrategyRule {
        default_family()[self.strategy_index].clone()
    }

    /// Checks every module precondition relevant to `experiment`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Validation(m));
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return bad(format!("experiment must be one of {}, got `{}`", EXPERIMENTS.join(", "), self.experiment));
        }
        let params = self.model_params()?;
        params.validate()?;
        if !(self.phi_exponent >= 0.0 && self.theta_exponent >= 0.0) {
            return bad("phi_exponent and theta_exponent must be non-negative".into());
        }
        self.grid()?;
        self.term_sheet().validate(self.horizon)?;
        self.bsde_config().validate()?;
        if self.n_paths == 0 {
            return Err(LabError::ZeroPaths.into());
        }
        if self.payoff == PayoffKind::ClippedCall && !(self.cap > 0.0) {
            return bad("cap must be positive".into());
        }
        if self.strategy_index >= default_family().len() {
            return bad(format!("strategy_index must be below {}", default_family().len()));
        }
        if !(self.admissibility_bound > 0.0) {
            return bad("admissibility_bound must be positive".into());
        }
        if self.position == 0.0 {
            return bad("position must be nonzero".into());
        }
        match self.experiment.as_str() {
            "replicate" => {
                if self.alpha == self.gamma {
                    return bad(format!(
                        "alpha = gamma = {}: the swap loading matrix psi is singular at every node",
                        self.alpha
                    ));
                }
                if self.xs.is_empty() || self.xs.iter().any(|&x| x == 0.0) {
                    return bad("xs must be a non-empty list of nonzero sizes".into());
                }
            }
            "arbitrage-test" if !params.submartingale_flag() => {
                return Err(LabError::NotSubmartingaleParams.into());
            }
            _ => {}
        }
        Ok(())
    }
}
