//! Subcommand dispatch behind the `liqlab` binary.
//!
//! Every run writes `config.ini` (the resolved scenario) and `version.txt` into
//! the output directory before any experiment output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::bsde::{
    hedge_from_solution_holding, solve_quadratic_bsde, stock_hedge, stopping_index, terminal_condition, DriverState,
};
use crate::config::{ConfigError, ScenarioConfig};
use crate::error::LabError;
use crate::lab::{hat_solution, replication_on_bundle};
use crate::ledger::{default_family, harness_on_bundle, run_ledger, Strategy};
use crate::model::simulate_paths;
use crate::report::{fmt17, version_string};
use crate::swaps::{psi_matrix, swap_mc_check, swap_price_paths, NodeState};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 2 for invalid input, 3 for numerical failure, 1 for i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Lab(e) if e.is_numerical() => 3,
            RunError::Lab(_) => 2,
            RunError::Io { .. } => 1,
        }
    }
}

/// Files written and a one-paragraph summary for the terminal.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.display().to_string(), source })?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write<F>(&mut self, name: &str, body: F) -> Result<(), RunError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let io = |source| RunError::Io { path: path.display().to_string(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        body(&mut w).and_then(|_| w.flush()).map_err(io)?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(value).expect("summaries are serialisable");
        self.write(name, |w| writeln!(w, "{text}"))
    }
}

fn mean(a: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = a.collect();
    crate::par::mean_stderr(&v).0
}

/// Validates `cfg` for `command`, runs it and writes outputs under `cfg.out`.
///
/// On a numerical failure `failure.txt` is written with the error before returning it.
pub fn run(command: &str, cfg: &ScenarioConfig) -> Result<Outcome, RunError> {
    let cfg = ScenarioConfig { experiment: command.to_string(), ..cfg.clone() };
    cfg.validate()?;
    let mut out = Out::new(Path::new(&cfg.out))?;
    out.write("config.ini", |w| w.write_all(cfg.to_ini().as_bytes()))?;
    out.write("version.txt", |w| writeln!(w, "{}", version_string()))?;
    let result = dispatch(&cfg, &mut out);
    match result {
        Ok(summary) => Ok(Outcome { files: out.files, summary }),
        Err(e) => {
            if e.exit_code() == 3 {
                let msg = e.to_string();
                out.write("failure.txt", |w| writeln!(w, "{msg}"))?;
            }
            Err(e)
        }
    }
}

fn dispatch(cfg: &ScenarioConfig, out: &mut Out) -> Result<String, RunError> {
    let params = cfg.model_params()?;
    let grid = cfg.grid()?;
    let bundle = simulate_paths(&params, &grid, cfg.n_paths, cfg.seed)?;
    match cfg.experiment.as_str() {
        "simulate" => {
            out.write("paths.csv", |w| bundle.write_csv(w))?;
            let n = bundle.n_steps();
            Ok(format!(
                "simulated {} paths x {} steps; mean S_T = {}",
                bundle.n_paths(),
                n,
                fmt17(mean(bundle.s.row(n).iter().copied()))
            ))
        }
        "ledger" => {
            let sheet = cfg.term_sheet();
            let rule = cfg.strategy_rule();
            let mut strategy = rule.build(&bundle, params.lambda_impact, None);
            let n = bundle.n_steps();
            for chi in strategy.chi.iter_mut() {
                for k in 0..n {
                    chi.row_mut(k).fill(cfg.swap_units);
                }
            }
            let report = run_ledger(&bundle, &params, &strategy, &sheet)?;
            out.write("ledger.csv", |w| report.write_csv(w, &grid, &strategy, bundle.first_path))?;
            let last = |a: &Array2<f64>| mean(a.row(n).iter().copied());
            #[derive(Serialize)]
            struct Summary {
                strategy: String,
                swap_units: f64,
                n_paths: usize,
                max_discrepancy: f64,
                mean_final_cash_direct: f64,
                mean_final_cash_decomposed: f64,
                mean_gains: f64,
                mean_impact_term: f64,
                mean_quad_cost: f64,
                mean_swap_quad_cost: f64,
            }
            let s = Summary {
                strategy: rule.name(),
                swap_units: cfg.swap_units,
                n_paths: bundle.n_paths(),
                max_discrepancy: report.max_discrepancy(),
                mean_final_cash_direct: last(&report.y_direct),
                mean_final_cash_decomposed: last(&report.y_decomposed),
                mean_gains: last(&report.gains),
                mean_impact_term: last(&report.impact_term),
                mean_quad_cost: last(&report.quad_cost),
                mean_swap_quad_cost: last(&report.swap_quad_cost),
            };
            out.json("ledger_summary.json", &s)?;
            Ok(format!(
                "ledger for {}: max direct/decomposed discrepancy {:e}",
                s.strategy, s.max_discrepancy
            ))
        }
        "swaps" => {
            let sheet = cfg.term_sheet();
            let prices = swap_price_paths(&bundle, &params, &sheet)?;
            let mats = sheet.maturities();
            out.write("swap_prices.csv", |w| {
                writeln!(w, "path,step,t,G1,G2")?;
                for p in 0..bundle.n_paths() {
                    for k in 0..bundle.n_nodes() {
                        writeln!(
                            w,
                            "{},{},{},{},{}",
                            bundle.first_path + p,
                            k,
                            fmt17(grid.time(k)),
                            fmt17(prices[0][[k, p]]),
                            fmt17(prices[1][[k, p]])
                        )?;
                    }
                }
                Ok(())
            })?;
            let mut min_scaled = f64::INFINITY;
            let mut degenerate = 0usize;
            out.write("psi.csv", |w| {
                writeln!(w, "path,step,t,det,scaled_det,same_rates,degenerate")?;
                for p in 0..bundle.n_paths() {
                    for k in 0..bundle.n_steps() {
                        let psi = psi_matrix(&NodeState::of(&bundle, k, p), &params, mats);
                        min_scaled = min_scaled.min(psi.scaled_det().abs());
                        degenerate += psi.degenerate as usize;
                        writeln!(
                            w,
                            "{},{},{},{},{},{},{}",
                            bundle.first_path + p,
                            k,
                            fmt17(grid.time(k)),
                            fmt17(psi.det()),
                            fmt17(psi.scaled_det()),
                            psi.same_rates as u8,
                            psi.degenerate as u8
                        )?;
                    }
                }
                Ok(())
            })?;
            let steps_per_unit = ((grid.n_steps() as f64 / grid.horizon()).ceil() as usize).max(1);
            let checks = sheet
                .swaps
                .iter()
                .map(|spec| swap_mc_check(&params, spec, steps_per_unit, cfg.n_paths, cfg.seed))
                .collect::<Result<Vec<_>, _>>()?;
            #[derive(Serialize)]
            struct Summary {
                checks: Vec<crate::swaps::SwapCheck>,
                min_abs_scaled_det: f64,
                degenerate_nodes: usize,
                same_rates: bool,
            }
            let s = Summary {
                checks,
                min_abs_scaled_det: min_scaled,
                degenerate_nodes: degenerate,
                same_rates: params.alpha == params.gamma,
            };
            out.json("swaps_summary.json", &s)?;
            Ok(format!(
                "swaps: G1_0 = {} (MC {}), G2_0 = {} (MC {}), min |scaled det psi| = {:e}",
                fmt17(s.checks[0].closed_form),
                fmt17(s.checks[0].mc_mean),
                fmt17(s.checks[1].closed_form),
                fmt17(s.checks[1].mc_mean),
                s.min_abs_scaled_det
            ))
        }
        "bsde" => {
            let payoff = cfg.truncated_payoff();
            let config = cfg.bsde_config();
            let lambda = params.lambda_impact;
            let hat = if lambda != 0.0 {
                Some(hat_solution(&bundle, &params, &payoff, &config, None)?)
            } else {
                None
            };
            let x = cfg.position;
            let terminal = terminal_condition(&bundle, &payoff, x, lambda, hat.as_ref().map(|h| &h.x))?;
            let sol = solve_quadratic_bsde(&bundle, &DriverState::new(&params), &terminal.values, &config)?;
            out.write("bsde_diagnostics.csv", |w| sol.write_diagnostics(w))?;
            let (hedge, held) = if params.alpha != params.gamma {
                hedge_from_solution_holding(&sol, &bundle, &params, cfg.term_sheet().maturities())?
            } else {
                (Strategy::stock_only(stock_hedge(&sol, &bundle, &params)), 0)
            };
            out.write("hedge.csv", |w| {
                writeln!(w, "path,step,t,X,chi1,chi2,Y")?;
                for p in 0..bundle.n_paths() {
                    for k in 0..bundle.n_nodes() {
                        writeln!(
                            w,
                            "{},{},{},{},{},{},{}",
                            bundle.first_path + p,
                            k,
                            fmt17(grid.time(k)),
                            fmt17(hedge.x[[k, p]]),
                            fmt17(hedge.chi[0][[k, p]]),
                            fmt17(hedge.chi[1][[k, p]]),
                            fmt17(sol.y[[k, p]])
                        )?;
                    }
                }
                Ok(())
            })?;
            let stop = stopping_index(&bundle, config.l);
            #[derive(Serialize)]
            struct Summary {
                position: f64,
                y0: f64,
                y0_stderr: f64,
                h0: f64,
                plain_mc_mean: Option<f64>,
                plain_mc_stderr: Option<f64>,
                stopped_fraction: f64,
                degenerate_run: bool,
                max_lambda: f64,
                held_swap_nodes: usize,
                max_principle: Option<bool>,
            }
            let s = Summary {
                position: x,
                y0: sol.y0,
                y0_stderr: sol.y0_stderr,
                h0: sol.y0 / x,
                plain_mc_mean: hat.as_ref().map(|h| h.plain_mean),
                plain_mc_stderr: hat.as_ref().map(|h| h.plain_stderr),
                stopped_fraction: stop.iter().filter(|&&k| k < bundle.n_steps()).count() as f64
                    / bundle.n_paths() as f64,
                degenerate_run: sol.degenerate_run,
                max_lambda: sol.max_lambda,
                held_swap_nodes: held,
                max_principle: sol.max_principle_check(x, lambda, payoff.bound()),
            };
            out.json("bsde_summary.json", &s)?;
            Ok(format!("bsde: Y0 = {} +- {}", fmt17(s.y0), fmt17(s.y0_stderr)))
        }
        "replicate" => {
            let payoff = cfg.truncated_payoff();
            let config = cfg.bsde_config();
            let hat = hat_solution(&bundle, &params, &payoff, &config, None)?;
            let report = replication_on_bundle(&bundle, &params, &payoff, &cfg.xs, &config, &hat)?;
            out.write("replication.csv", |w| report.write_csv(w))?;
            let text = report.to_json();
            out.write("replication.json", |w| writeln!(w, "{text}"))?;
            let mut s = format!(
                "replicate: H0_limit = {} +- {}, H'0 analytic = {} +- {}, finite difference = {} +- {}",
                fmt17(report.h0_limit),
                fmt17(report.h0_limit_stderr),
                fmt17(report.hprime0_analytic),
                fmt17(report.hprime0_analytic_stderr),
                fmt17(report.hprime0_fd),
                fmt17(report.hprime0_fd_stderr)
            );
            for w in &report.warnings {
                s.push_str("\nwarning: ");
                s.push_str(w);
            }
            Ok(s)
        }
        "arbitrage-test" => {
            let report = harness_on_bundle(&default_family(), &params, &bundle, cfg.admissibility_bound)?;
            out.write("harness.csv", |w| {
                writeln!(w, "strategy,mean,stderr,violates,admissible_fraction")?;
                for r in &report.rows {
                    writeln!(
                        w,
                        "\"{}\",{},{},{},{}",
                        r.strategy,
                        fmt17(r.mean),
                        fmt17(r.stderr),
                        r.violates as u8,
                        fmt17(r.admissible_fraction)
                    )?;
                }
                Ok(())
            })?;
            out.json("harness.json", &report)?;
            let worst = report
                .rows
                .iter()
                .map(|r| r.mean / r.stderr.max(f64::MIN_POSITIVE))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(format!(
                "arbitrage-test: {} strategies, {} violations, largest mean/stderr {:.3}",
                report.rows.len(),
                report.rows.iter().filter(|r| r.violates).count(),
                worst
            ))
        }
        other => Err(ConfigError::Validation(format!("unknown experiment `{other}`")).into()),
    }
}
