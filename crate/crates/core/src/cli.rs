//! Command surface of the `xfund` binary.
//!
//! Every command writes a JSON summary into the output directory. With
//! `--format csv` the detail goes to a CSV file beside it; with `json` the
//! detail is embedded in the summary. Exit codes: 0 success, 1 failed
//! validation tests, 2 bad input or config, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::adjustments::{
    counterparty_funding_adjustment, pure_funding_adjustment, redundancy_example,
    total_funding_adjustment, AdjustmentReport, RedundancySetup,
};
use crate::arbitrage::{detect_arbitrage, ArbitrageOptions};
use crate::bsde::{
    price_endogenous_collateral, price_partial_netting, EndogenousMarket, PartialNettingMarket,
};
use crate::config::{
    build_contract, build_convention, build_strategy, AdjustmentChoice, Format, Method, Scenario,
    ScenarioConfig,
};
use crate::contracts::{CollateralSpec, Contract};
use crate::linear::{
    gamma_measure_price, max_level_diff, price_fully_collateralized, price_linear,
    single_rate_funding, PricePath,
};
use crate::market::{
    calibrate_lattice, calibrate_lattice_against, Lattice, LatticeProcess, MarketPath, ScenarioSet,
};
use crate::report::{adjustment_csv, price_csv, wealth_csv, write_file, Report};
use crate::validate::{criteria, run_suite, SuiteOptions};
use crate::wealth::{
    evolve_collateralized, evolve_wealth, Strategy, TradingConvention, WealthPath,
};
use crate::{Error, Result};

/// Stated in every summary file.
pub const SIGN_CONVENTION: &str = "flows are seen by the hedger and positive when received; \
S is the extra endowment the hedger needs to replicate the remaining flows, so a liability has a positive price";

#[derive(Debug, Parser)]
#[command(
    name = "xfund",
    version,
    about = "Pricing and hedging under funding, netting and collateral conventions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `solver.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `grid.steps`.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Overrides `solver.tol`.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `output.format`.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Price the contract on the lattice.
    Price {
        /// Overrides `solver.method`.
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Run the strategy forward along simulated paths.
    Simulate,
    /// Look for an arbitrage of the strategy against the benchmark.
    CheckArbitrage,
    /// Funding adjustment between the scenario and its `[adjustments]` twin.
    Adjustments,
    /// Run the validation suite and write `report.json` and `report.csv`.
    ValidatePaper {
        /// `all` or one criterion name.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

/// What a finished command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub files: Vec<PathBuf>,
    pub message: String,
}

/// Parse `argv`, run, print, and return the exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            if out.code == 0 {
                println!("{}", out.message);
            } else {
                eprintln!("{}", out.message);
            }
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    scn: Scenario,
    seed: u64,
    tol: Option<f64>,
    out: PathBuf,
    format: Format,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Ctx> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| Error::config("--config", "a scenario file is required"))?;
        let cfg = ScenarioConfig::load(path)?;
        let scn = cfg.build(cli.steps)?;
        Ok(Ctx {
            seed: cli.seed.unwrap_or(scn.config.solver.seed),
            tol: cli.tol.or(scn.config.solver.tol),
            out: cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&scn.config.output.dir)),
            format: cli.format.unwrap_or(scn.config.output.format),
            scn,
        })
    }

    fn x(&self) -> f64 {
        self.scn.config.solver.x
    }

    fn lattice(&self) -> Result<Lattice> {
        if self.scn.assets.is_empty() {
            Ok(Lattice::deterministic(&self.scn.grid))
        } else {
            calibrate_lattice(&self.scn.assets, &self.scn.accounts, &self.scn.grid)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    if let Command::ValidatePaper { suite } = &cli.command {
        return validate_paper(cli, suite);
    }
    let ctx = Ctx::load(cli)?;
    match &cli.command {
        Command::Price { method } => {
            cmd_price(&ctx, method.unwrap_or(ctx.scn.config.solver.method))
        }
        Command::Simulate => cmd_simulate(&ctx),
        Command::CheckArbitrage => cmd_check_arbitrage(&ctx),
        Command::Adjustments => cmd_adjustments(&ctx),
        Command::ValidatePaper { .. } => unreachable!("handled above"),
    }
}

fn to_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn levels_json(p: &LatticeProcess) -> Value {
    json!(p.levels)
}

/// Price with the chosen method. Returns the price and whether the BSDE
/// layout applies to its dump.
pub fn price_scenario(
    scn: &Scenario,
    method: Method,
    lattice: &Lattice,
) -> Result<(PricePath, bool)> {
    let acc = &scn.accounts;
    let solver = &scn.config.solver;
    match method {
        Method::Linear => Ok((
            price_linear(
                &scn.contract,
                &scn.collateral,
                scn.margin.as_ref(),
                &scn.convention,
                lattice,
                acc,
            )?,
            false,
        )),
        Method::FullyCollateralized => {
            let label = solver
                .collateral_account
                .clone()
                .or_else(|| scn.margin.as_ref().map(|m| m.lend.clone()))
                .ok_or_else(|| {
                    Error::config(
                        "solver.collateral_account",
                        "fully-collateralized pricing needs a collateral account",
                    )
                })?;
            Ok((
                price_fully_collateralized(&scn.contract, acc.get(&label)?, lattice, acc)?,
                false,
            ))
        }
        Method::Gamma => {
            let label = solver.gamma_account.as_deref().ok_or_else(|| {
                Error::config(
                    "solver.gamma_account",
                    "gamma pricing needs a discount account",
                )
            })?;
            if !scn.collateral.is_none() {
                return Err(Error::NotApplicable(
                    "gamma pricing covers uncollateralized contracts only".into(),
                ));
            }
            let (cash_label, funding) = single_rate_funding(&scn.convention)?;
            if funding
                .iter()
                .chain(scn.assets.iter().map(|a| &a.funding))
                .any(|f| *f != cash_label)
            {
                return Err(Error::NotApplicable(
                    "gamma pricing needs every asset funded in the cash account (k = d)".into(),
                ));
            }
            let linear = price_linear(
                &scn.contract,
                &scn.collateral,
                scn.margin.as_ref(),
                &scn.convention,
                lattice,
                acc,
            )?;
            let bg = acc.get(label)?;
            let cash = acc.get(&cash_label)?;
            let glat = if scn.assets.is_empty() {
                Lattice::deterministic(&scn.grid)
            } else {
                calibrate_lattice_against(&scn.assets, &vec![bg; scn.assets.len()], &scn.grid)?
            };
            let pi = gamma_measure_price(&scn.contract, &linear, &glat, cash, bg)?;
            let mut out = linear.clone();
            out.diagnostics.cross_check = Some(max_level_diff(&pi, &linear.s));
            out.method = "gamma".into();
            out.s = pi;
            Ok((out, false))
        }
        Method::Bsde => {
            let x = solver.x;
            if let TradingConvention::PartialNetting {
                lend,
                borrow,
                repo_borrow,
            } = &scn.convention
            {
                let market = PartialNettingMarket {
                    lend: lend.clone(),
                    borrow: borrow.clone(),
                    repo_borrow: repo_borrow.clone(),
                    margin_lend: scn.margin.as_ref().map_or(lend.clone(), |m| m.lend.clone()),
                    margin_borrow: scn
                        .margin
                        .as_ref()
                        .map_or(borrow.clone(), |m| m.borrow.clone()),
                };
                return Ok((
                    price_partial_netting(
                        &scn.contract,
                        &scn.collateral,
                        &market,
                        x,
                        lattice,
                        acc,
                    )?,
                    true,
                ));
            }
            if let CollateralSpec::Haircut { delta1, delta2, .. } = &scn.collateral {
                let margin = scn.margin.as_ref().ok_or_else(|| {
                    Error::config("margin", "haircut collateral needs a margin table")
                })?;
                let market = EndogenousMarket {
                    cash: scn.convention.lend_account().to_string(),
                    collateral: margin.lend.clone(),
                    delta1: *delta1,
                    delta2: *delta2,
                };
                return Ok((
                    price_endogenous_collateral(&scn.contract, &market, x, lattice, acc)?,
                    true,
                ));
            }
            let linear = price_linear(
                &scn.contract,
                &scn.collateral,
                scn.margin.as_ref(),
                &scn.convention,
                lattice,
                acc,
            )?;
            Ok((linear, true))
        }
    }
}

fn cmd_price(ctx: &Ctx, method: Method) -> Result<Outcome> {
    let lattice = ctx.lattice()?;
    let (p, bsde) = price_scenario(&ctx.scn, method, &lattice)?;
    let d = &p.diagnostics;
    let mut summary = json!({
        "command": "price",
        "method": p.method,
        "sign_convention": SIGN_CONVENTION,
        "steps": ctx.scn.grid.n_steps(),
        "x": ctx.x(),
        "s0": p.s0(),
        "approximate": p.approximate,
        "max_picard_iterations": d.max_picard_iterations,
        "max_residual": d.max_residual,
        "representation_error": d.representation_error,
        "cross_check": d.cross_check,
    });
    let mut files = Vec::new();
    match ctx.format {
        Format::Csv => files.push(write_file(
            &ctx.out,
            "price.csv",
            &price_csv(&p, &lattice, bsde),
        )?),
        Format::Json => {
            summary["times"] = json!(ctx.scn.grid.times());
            summary[if bsde { "Y" } else { "S" }] = levels_json(&p.s);
            summary[if bsde { "Z" } else { "xi" }] =
                Value::Array(p.xi.iter().map(levels_json).collect());
        }
    }
    files.insert(0, write_file(&ctx.out, "price.json", &to_json(&summary))?);
    Ok(Outcome {
        code: 0,
        files,
        message: format!("S_0 = {} ({})", p.s0(), p.method),
    })
}

fn evolve(
    scn: &Scenario,
    strategy: &Strategy,
    contract: &Contract,
    x: f64,
    path: &MarketPath,
    conv: &TradingConvention,
) -> Result<WealthPath> {
    match &scn.margin {
        Some(m) => evolve_collateralized(
            conv,
            m,
            strategy,
            contract,
            &scn.collateral,
            x,
            path,
            &scn.accounts,
        ),
        None => evolve_wealth(conv, strategy, contract, x, path, &scn.accounts),
    }
}

/// Strategy of a `[strategy]`-like block. A `bsde` block trades the hedge of
/// the solver price, so it runs on lattice paths with the price paid.
fn resolve_strategy(
    ctx: &Ctx,
    block_strategy: Option<Strategy>,
    contract: &Contract,
    lattice: &Lattice,
) -> Result<(Strategy, Contract)> {
    match block_strategy {
        Some(s) => Ok((s, contract.clone())),
        None => {
            let mut scn = ctx.scn.clone();
            scn.contract = contract.clone();
            let (p, _) = price_scenario(&scn, ctx.scn.config.solver.method, lattice)?;
            let mut priced = contract.clone();
            priced.p = p.s0();
            Ok((Strategy::from_lattice(p.xi), priced))
        }
    }
}

fn cmd_simulate(ctx: &Ctx) -> Result<Outcome> {
    let scn = &ctx.scn;
    let d = scn.assets.len();
    let lattice = ctx.lattice()?;
    let open = build_strategy(&scn.config.strategy, d, "strategy")?;
    let n_paths = scn.config.solver.paths;
    let paths: Vec<MarketPath> = if d == 0 {
        lattice.all_paths()?
    } else if open.is_some() {
        ScenarioSet::generate(&scn.assets, &scn.grid, n_paths, ctx.seed, None)?.paths
    } else {
        lattice.sample_paths(n_paths, ctx.seed)?
    };
    let (strategy, contract) = resolve_strategy(ctx, open, &scn.contract, &lattice)?;
    let x = ctx.x();
    let records: Vec<WealthPath> = crate::with_pool(|| {
        paths
            .par_iter()
            .map(|p| evolve(scn, &strategy, &contract, x, p, &scn.convention))
            .collect::<Result<Vec<_>>>()
    })?;
    let lend = scn.accounts.get(scn.convention.lend_account())?;
    let max_residual = records.iter().map(|w| w.residual).fold(0.0, f64::max);
    let mean_terminal =
        records.iter().map(|w| w.terminal()).sum::<f64>() / records.len().max(1) as f64;
    let mut summary = json!({
        "command": "simulate",
        "sign_convention": SIGN_CONVENTION,
        "steps": scn.grid.n_steps(),
        "paths": records.len(),
        "seed": ctx.seed,
        "x": x,
        "p": contract.p,
        "mean_terminal_wealth": mean_terminal,
        "max_self_financing_residual": max_residual,
    });
    let mut files = Vec::new();
    match ctx.format {
        Format::Csv => files.push(write_file(
            &ctx.out,
            "wealth.csv",
            &wealth_csv(&records, lend),
        )?),
        Format::Json => {
            summary["times"] = json!(scn.grid.times());
            summary["B_l"] = json!(lend.values());
            summary["records"] = Value::Array(
                records
                    .iter()
                    .map(|w| json!({"V": w.v, "V^p": w.vp, "G": w.g, "F": w.f, "C": w.c, "psi_l": w.psi_l(), "psi_b": w.psi_b()}))
                    .collect(),
            );
        }
    }
    files.insert(
        0,
        write_file(&ctx.out, "simulate.json", &to_json(&summary))?,
    );
    Ok(Outcome {
        code: 0,
        files,
        message: format!(
            "{} paths, mean V_T = {mean_terminal}, max residual {max_residual:e}",
            records.len()
        ),
    })
}

fn cmd_check_arbitrage(ctx: &Ctx) -> Result<Outcome> {
    let scn = &ctx.scn;
    let lattice = ctx.lattice()?;
    let open = build_strategy(&scn.config.strategy, scn.assets.len(), "strategy")?;
    let (strategy, contract) = resolve_strategy(ctx, open, &scn.contract, &lattice)?;
    let opts = ArbitrageOptions {
        tol: ctx.tol,
        lower_bound: scn.config.solver.lower_bound,
        samples: scn.config.solver.samples,
        seed: ctx.seed,
    };
    let v = detect_arbitrage(
        &scn.convention,
        &strategy,
        &contract,
        ctx.x(),
        &lattice,
        &scn.accounts,
        &opts,
    )?;
    let mut summary = serde_json::to_value(&v).expect("verdict serializes");
    summary["command"] = json!("check-arbitrage");
    summary["sign_convention"] = json!(SIGN_CONVENTION);
    let mut files = vec![write_file(&ctx.out, "verdict.json", &to_json(&summary))?];
    if ctx.format == Format::Csv {
        let outcome = summary["outcome"].as_str().unwrap_or_default().to_string();
        let csv = format!(
            "outcome,gap_min,gap_max,witness,paths,exhaustive\n{outcome},{},{},{},{},{}\n",
            v.gap_min,
            v.gap_max,
            v.witness.clone().unwrap_or_default(),
            v.paths,
            v.exhaustive
        );
        files.push(write_file(&ctx.out, "verdict.csv", &csv)?);
    }
    let outcome = summary["outcome"].as_str().unwrap_or_default().to_string();
    Ok(Outcome {
        code: 0,
        files,
        message: format!("{outcome} over {} paths", v.paths),
    })
}

fn cmd_adjustments(ctx: &Ctx) -> Result<Outcome> {
    let scn = &ctx.scn;
    let adj =
        scn.config.adjustments.as_ref().ok_or_else(|| {
            Error::config("adjustments", "the command needs an [adjustments] table")
        })?;
    let d = scn.assets.len();
    let x = ctx.x();
    let rep: AdjustmentReport = if adj.kind == AdjustmentChoice::Redundancy {
        let lend = scn.accounts.get(scn.convention.lend_account())?;
        let mut setup =
            RedundancySetup::new(lend.rate().rate_at(scn.grid.t0()), scn.grid, ctx.seed);
        setup.r = lend.rate().clone();
        let ex = redundancy_example(&setup)?;
        let c = match &adj.contract {
            Some(c) => build_contract(c, 3, &scn.grid, "adjustments.contract")?,
            None => Contract::new(0.0),
        };
        ex.augmented_pfa(&Strategy::zero(3), &c, adj.x.unwrap_or(x))?
    } else {
        let lattice = ctx.lattice()?;
        let path = lattice
            .sample_paths(1, ctx.seed)?
            .pop()
            .ok_or_else(|| Error::invalid("no lattice path"))?;
        let open1 = build_strategy(&scn.config.strategy, d, "strategy")?;
        let (s1, c1) = resolve_strategy(ctx, open1, &scn.contract, &lattice)?;
        let conv2 = match &adj.convention {
            Some(c) => build_convention(c, d, &scn.accounts, "adjustments.convention")?,
            None => scn.convention.clone(),
        };
        let contract2 = match &adj.contract {
            Some(c) => build_contract(c, d, &scn.grid, "adjustments.contract")?,
            None => scn.contract.clone(),
        };
        let open2 = build_strategy(
            adj.strategy.as_ref().unwrap_or(&scn.config.strategy),
            d,
            "adjustments.strategy",
        )?;
        let mut scn2 = ctx.scn.clone();
        scn2.convention = conv2.clone();
        let ctx2 = Ctx {
            scn: scn2,
            seed: ctx.seed,
            tol: ctx.tol,
            out: ctx.out.clone(),
            format: ctx.format,
        };
        let (s2, c2) = resolve_strategy(&ctx2, open2, &contract2, &lattice)?;
        let p1 = evolve(scn, &s1, &c1, x, &path, &scn.convention)?;
        let p2 = evolve(scn, &s2, &c2, adj.x.unwrap_or(x), &path, &conv2)?;
        match adj.kind {
            AdjustmentChoice::Tfa => total_funding_adjustment(&p1, &p2)?,
            AdjustmentChoice::Pfa => pure_funding_adjustment(&p1, &p2)?,
            _ => counterparty_funding_adjustment(&p1, &p2)?,
        }
    };
    let mut summary = json!({
        "command": "adjustments",
        "kind": rep.kind.name(),
        "sign_convention": SIGN_CONVENTION,
        "terminal": rep.terminal(),
        "caveat_different_contracts": rep.caveat,
        "single_account_gap": rep.single_account_gap,
    });
    let mut files = Vec::new();
    match ctx.format {
        Format::Csv => files.push(write_file(
            &ctx.out,
            "adjustments.csv",
            &adjustment_csv(&rep),
        )?),
        Format::Json => {
            summary["times"] = json!(rep.times);
            summary["values"] = json!(rep.values);
            if let Some(s) = &rep.single_account {
                summary["single_account"] = json!(s);
            }
        }
    }
    files.insert(
        0,
        write_file(&ctx.out, "adjustments.json", &to_json(&summary))?,
    );
    Ok(Outcome {
        code: 0,
        files,
        message: format!("{} at T = {}", rep.kind.name(), rep.terminal()),
    })
}

fn validate_paper(cli: &Cli, suite: &str) -> Result<Outcome> {
    let mut out_dir = cli.out.clone();
    let mut opts = SuiteOptions::default();
    if let Some(path) = cli.config.as_deref() {
        let cfg = ScenarioConfig::load(path)?;
        cfg.build(cli.steps)?;
        out_dir = out_dir.or_else(|| Some(PathBuf::from(&cfg.output.dir)));
    }
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    let report = if suite == "all" {
        run_suite(&opts)
    } else {
        let c = criteria()
            .into_iter()
            .find(|c| c.name == suite)
            .ok_or_else(|| Error::config("--suite", format!("unknown suite `{suite}`")))?;
        let mut r = Report::new();
        for t in c.run(&opts) {
            r.push(t);
        }
        r
    };
    let dir = out_dir.unwrap_or_else(|| PathBuf::from("out"));
    let files = report.write(Path::new(&dir))?;
    let (code, message) = suite_outcome(&report);
    Ok(Outcome {
        code,
        files,
        message,
    })
}

/// Exit code and console text of a validation run: 1 with the failing list
/// when any test failed.
pub fn suite_outcome(report: &Report) -> (i32, String) {
    let mut lines: Vec<String> = report
        .tests
        .iter()
        .map(|t| format!("{} {}", if t.passed { "PASS" } else { "FAIL" }, t.name))
        .collect();
    let failed = report.failed_names();
    if failed.is_empty() {
        (0, lines.join("\n"))
    } else {
        lines.push(format!("failing tests: {}", failed.join(", ")));
        (1, lines.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::TestResult;

    #[test]
    fn failed_suite_exits_one_with_names() {
        let mut r = Report::new();
        r.push(TestResult::close("fine", "x", 1.0, 1.0, 1e-9));
        r.push(TestResult::close("broken", "x", 1.0, 2.0, 1e-9));
        let (code, msg) = suite_outcome(&r);
        assert_eq!(code, 1);
        assert!(msg.ends_with("failing tests: broken"), "{msg}");
        r.tests.pop();
        assert_eq!(suite_outcome(&r).0, 0);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "xfund",
            "price",
            "--method",
            "fully-collateralized",
            "--seed",
            "3",
            "--format",
            "csv",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert_eq!(cli.format, Some(Format::Csv));
        assert!(matches!(
            cli.command,
            Command::Price {
                method: Some(Method::FullyCollateralized)
            }
        ));
        assert!(Cli::try_parse_from(["xfund", "frobnicate"]).is_err());
    }
}
