//! Scenario files.
//!
//! A scenario is a TOML document with the tables `market`, `grid`,
//! `contract`, `collateral`, `margin`, `convention`, `strategy`, `solver`,
//! `output` and, for the `adjustments` command, `adjustments`. Unknown keys
//! are rejected and every error names the offending field.

use std::path::Path;

use serde::Deserialize;

use crate::contracts::{Amount, CollateralSpec, Contract, HaircutForm, Margin, PayoffKind};
use crate::market::{build_account, AccountSet, AssetModel, RateFn, TimeGrid};
use crate::wealth::{Strategy, TradingConvention};
use crate::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub market: MarketConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub contract: ContractConfig,
    #[serde(default)]
    pub collateral: CollateralConfig,
    pub margin: Option<MarginConfig>,
    pub convention: ConventionConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub adjustments: Option<AdjustmentsConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub accounts: Vec<AccountConfig>,
    #[serde(default)]
    pub assets: Vec<AssetConfig>,
}

/// Either a constant `rate` or `segments = [[start, rate], ...]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountConfig {
    pub label: String,
    pub rate: Option<f64>,
    pub segments: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetConfig {
    /// 1-based position of the asset.
    pub index: usize,
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
    #[serde(default)]
    pub kappa: f64,
    pub funding: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractConfig {
    /// Initial price `p = A_0`.
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub flows: Vec<FlowConfig>,
}

/// A fixed `amount`, or `notional * payoff(S^asset)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub t: f64,
    pub amount: Option<f64>,
    pub payoff: Option<PayoffKind>,
    pub asset: Option<usize>,
    pub strike: Option<f64>,
    #[serde(default = "one")]
    pub notional: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CollateralConfig {
    #[default]
    None,
    /// `values` per grid node, or `constant` at every node before maturity.
    Exogenous {
        values: Option<Vec<f64>>,
        constant: Option<f64>,
    },
    /// Without `offset_account` the haircut applies to `V^0(x) - V`.
    Haircut {
        #[serde(default)]
        delta1: f64,
        #[serde(default)]
        delta2: f64,
        offset_account: Option<String>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginConfig {
    Rehypothecated {
        lend: String,
        borrow: String,
        posting: Option<String>,
    },
    Segregated {
        lend: String,
        borrow: String,
        posting: String,
        holding: String,
    },
    Risky {
        asset: usize,
        lend: String,
        borrow: String,
        posting: String,
        holding: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConventionConfig {
    Basic {
        cash: String,
        repo: Vec<String>,
    },
    CommonUnsecured {
        cash: String,
        repo: Vec<String>,
        k: usize,
    },
    SplitCashRates {
        lend: String,
        borrow: String,
        repo: Vec<String>,
        k: usize,
    },
    Offsetting {
        lend: String,
        borrow: String,
        repo_lend: Vec<String>,
        repo_borrow: Vec<String>,
    },
    PartialNetting {
        lend: String,
        borrow: String,
        repo_borrow: Vec<String>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    #[default]
    Zero,
    BuyAndHold {
        units: Vec<f64>,
        #[serde(default)]
        from: f64,
    },
    /// Piecewise-constant units, each row applying from its `from` time on.
    CashSchedule { schedule: Vec<ScheduleRow> },
    /// Hedge extracted from the pricer selected by `solver.method`.
    Bsde,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRow {
    pub from: f64,
    pub units: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Linear,
    FullyCollateralized,
    Gamma,
    Bsde,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Initial endowment `x`.
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Simulated paths for `simulate`.
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Sampled lattice paths when enumeration is too large.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Arbitrage gain tolerance; scaled from the inputs when absent.
    pub tol: Option<f64>,
    #[serde(default = "default_lower_bound")]
    pub lower_bound: f64,
    /// Collateral account `B^c` for fully-collateralized pricing.
    pub collateral_account: Option<String>,
    /// Discount account `B^γ` for γ-pricing.
    pub gamma_account: Option<String>,
}

fn default_paths() -> usize {
    100
}
fn default_samples() -> usize {
    2000
}
fn default_lower_bound() -> f64 {
    -1e6
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            x: 0.0,
            method: Method::Linear,
            seed: 0,
            paths: default_paths(),
            samples: default_samples(),
            tol: None,
            lower_bound: default_lower_bound(),
            collateral_account: None,
            gamma_account: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub format: Format,
    #[serde(default = "default_dir")]
    pub dir: String,
}

fn default_dir() -> String {
    "out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            format: Format::Json,
            dir: default_dir(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjustmentChoice {
    Tfa,
    Pfa,
    Cfa,
    Redundancy,
}

/// Second record of an adjustment; missing fields are copied from the
/// main scenario.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustmentsConfig {
    pub kind: AdjustmentChoice,
    pub x: Option<f64>,
    pub convention: Option<ConventionConfig>,
    pub strategy: Option<StrategyConfig>,
    pub contract: Option<ContractConfig>,
}

/// Validated, ready-to-run scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: TimeGrid,
    pub accounts: AccountSet,
    pub assets: Vec<AssetModel>,
    pub contract: Contract,
    pub collateral: CollateralSpec,
    pub margin: Option<Margin>,
    pub convention: TradingConvention,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.to_string().trim()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." {
                    "<document>".into()
                } else {
                    path
                },
                e.inner().to_string().trim(),
            )
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Validate and resolve; `steps` overrides `grid.steps`.
    pub fn build(&self, steps: Option<usize>) -> Result<Scenario> {
        let g = &self.grid;
        let n = steps.unwrap_or(g.steps);
        let grid = TimeGrid::new(g.t0, g.t_end, n).map_err(|e| Error::config("grid", strip(e)))?;

        let mut accounts = AccountSet::new();
        if self.market.accounts.is_empty() {
            return Err(Error::config(
                "market.accounts",
                "at least one account is required",
            ));
        }
        for (i, a) in self.market.accounts.iter().enumerate() {
            let at = format!("market.accounts[{i}]");
            let rate = match (a.rate, &a.segments) {
                (Some(r), None) => RateFn::constant(r),
                (None, Some(s)) => RateFn::piecewise(s)
                    .map_err(|e| Error::config(format!("{at}.segments"), strip(e)))?,
                _ => {
                    return Err(Error::config(
                        &at,
                        "give exactly one of `rate` and `segments`",
                    ))
                }
            };
            if !rate.is_finite() {
                return Err(Error::config(&at, "rates must be finite"));
            }
            let acc =
                build_account(&a.label, rate, &grid).map_err(|e| Error::config(&at, strip(e)))?;
            accounts
                .insert(acc)
                .map_err(|e| Error::config(format!("{at}.label"), strip(e)))?;
        }

        let mut assets = Vec::new();
        for (i, a) in self.market.assets.iter().enumerate() {
            let at = format!("market.assets[{i}]");
            if a.index != i + 1 {
                return Err(Error::config(
                    format!("{at}.index"),
                    format!("expected {}", i + 1),
                ));
            }
            if !accounts.contains(&a.funding) {
                return Err(Error::config(
                    format!("{at}.funding"),
                    format!("unknown account `{}`", a.funding),
                ));
            }
            let m = AssetModel::new(a.index, a.s0, a.mu, a.sigma, a.kappa, &a.funding);
            m.validate().map_err(|e| Error::config(&at, strip(e)))?;
            assets.push(m);
        }
        let d = assets.len();

        let contract = build_contract(&self.contract, d, &grid, "contract")?;
        let convention = build_convention(&self.convention, d, &accounts, "convention")?;
        let collateral = match &self.collateral {
            CollateralConfig::None => CollateralSpec::None,
            CollateralConfig::Exogenous { values, constant } => match (values, constant) {
                (Some(v), None) => {
                    if v.len() != n + 1 {
                        return Err(Error::config(
                            "collateral.values",
                            format!("expected {} entries", n + 1),
                        ));
                    }
                    CollateralSpec::Path(v.clone())
                }
                (None, Some(c)) => CollateralSpec::Path(vec![*c; n + 1]),
                _ => {
                    return Err(Error::config(
                        "collateral",
                        "give exactly one of `values` and `constant`",
                    ))
                }
            },
            CollateralConfig::Haircut {
                delta1,
                delta2,
                offset_account,
            } => {
                if !(*delta1 >= 0.0 && *delta2 >= 0.0) {
                    return Err(Error::config("collateral", "haircuts must be nonnegative"));
                }
                let form = match offset_account {
                    None => HaircutForm::MarkToMarket,
                    Some(a) => {
                        check_account(&accounts, a, "collateral.offset_account")?;
                        HaircutForm::WealthOffset { account: a.clone() }
                    }
                };
                CollateralSpec::Haircut {
                    delta1: *delta1,
                    delta2: *delta2,
                    form,
                }
            }
        };
        let margin = match &self.margin {
            None => None,
            Some(m) => {
                let margin = match m {
                    MarginConfig::Rehypothecated {
                        lend,
                        borrow,
                        posting,
                    } => Margin::cash_rehypothecated(lend, borrow, posting.as_deref()),
                    MarginConfig::Segregated {
                        lend,
                        borrow,
                        posting,
                        holding,
                    } => Margin::cash_segregated(lend, borrow, posting, holding),
                    MarginConfig::Risky {
                        asset,
                        lend,
                        borrow,
                        posting,
                        holding,
                    } => {
                        if *asset == 0 || *asset > d {
                            return Err(Error::config("margin.asset", "no such asset"));
                        }
                        Margin::risky(asset - 1, lend, borrow, posting, holding)
                    }
                };
                margin
                    .validate(&accounts)
                    .map_err(|e| Error::config("margin", strip(e)))?;
                Some(margin)
            }
        };
        if !collateral.is_none() && margin.is_none() {
            return Err(Error::config("margin", "collateral needs a margin table"));
        }
        for (field, acc) in [
            ("solver.collateral_account", &self.solver.collateral_account),
            ("solver.gamma_account", &self.solver.gamma_account),
        ] {
            if let Some(a) = acc {
                check_account(&accounts, a, field)?;
            }
        }
        build_strategy(&self.strategy, d, "strategy")?;
        if let Some(adj) = &self.adjustments {
            if let Some(c) = &adj.contract {
                build_contract(c, d, &grid, "adjustments.contract")?;
            }
            if let Some(c) = &adj.convention {
                build_convention(c, d, &accounts, "adjustments.convention")?;
            }
            if let Some(s) = &adj.strategy {
                build_strategy(s, d, "adjustments.strategy")?;
            }
        }
        Ok(Scenario {
            config: self.clone(),
            grid,
            accounts,
            assets,
            contract,
            collateral,
            margin,
            convention,
        })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidInput(m) => m,
        other => other.to_string(),
    }
}

fn check_account(accounts: &AccountSet, label: &str, at: &str) -> Result<()> {
    if accounts.contains(label) {
        Ok(())
    } else {
        Err(Error::config(at, format!("unknown account `{label}`")))
    }
}

pub fn build_contract(c: &ContractConfig, d: usize, grid: &TimeGrid, at: &str) -> Result<Contract> {
    let mut contract = Contract::new(c.p);
    for (i, f) in c.flows.iter().enumerate() {
        let here = format!("{at}.flows[{i}]");
        let amount = match (f.amount, f.payoff) {
            (Some(x), None) => Amount::Fixed(x),
            (None, Some(kind)) => {
                let asset = f.asset.ok_or_else(|| {
                    Error::config(format!("{here}.asset"), "payoff flows need an asset")
                })?;
                if asset == 0 || asset > d {
                    return Err(Error::config(format!("{here}.asset"), "no such asset"));
                }
                let strike = f.strike.ok_or_else(|| {
                    Error::config(format!("{here}.strike"), "payoff flows need a strike")
                })?;
                Amount::Vanilla {
                    asset: asset - 1,
                    strike,
                    kind,
                    notional: f.notional,
                }
            }
            _ => {
                return Err(Error::config(
                    &here,
                    "give exactly one of `amount` and `payoff`",
                ))
            }
        };
        contract = contract.with_flow(f.t, amount);
    }
    contract
        .schedule(grid)
        .map_err(|e| Error::config(at, strip(e)))?;
    Ok(contract)
}

pub fn build_convention(
    c: &ConventionConfig,
    d: usize,
    accounts: &AccountSet,
    at: &str,
) -> Result<TradingConvention> {
    let mut labels: Vec<(&str, &String)> = Vec::new();
    let mut lists: Vec<(&str, &Vec<String>)> = Vec::new();
    let conv = match c {
        ConventionConfig::Basic { cash, repo } => {
            labels.push(("cash", cash));
            lists.push(("repo", repo));
            TradingConvention::Basic {
                cash: cash.clone(),
                repo: repo.clone(),
            }
        }
        ConventionConfig::CommonUnsecured { cash, repo, k } => {
            labels.push(("cash", cash));
            lists.push(("repo", repo));
            TradingConvention::CommonUnsecured {
                cash: cash.clone(),
                repo: repo.clone(),
                k: *k,
            }
        }
        ConventionConfig::SplitCashRates {
            lend,
            borrow,
            repo,
            k,
        } => {
            labels.extend([("lend", lend), ("borrow", borrow)]);
            lists.push(("repo", repo));
            TradingConvention::SplitCashRates {
                lend: lend.clone(),
                borrow: borrow.clone(),
                repo: repo.clone(),
                k: *k,
            }
        }
        ConventionConfig::Offsetting {
            lend,
            borrow,
            repo_lend,
            repo_borrow,
        } => {
            labels.extend([("lend", lend), ("borrow", borrow)]);
            lists.extend([("repo_lend", repo_lend), ("repo_borrow", repo_borrow)]);
            TradingConvention::Offsetting {
                lend: lend.clone(),
                borrow: borrow.clone(),
                repo_lend: repo_lend.clone(),
                repo_borrow: repo_borrow.clone(),
            }
        }
        ConventionConfig::PartialNetting {
            lend,
            borrow,
            repo_borrow,
        } => {
            labels.extend([("lend", lend), ("borrow", borrow)]);
            lists.push(("repo_borrow", repo_borrow));
            TradingConvention::PartialNetting {
                lend: lend.clone(),
                borrow: borrow.clone(),
                repo_borrow: repo_borrow.clone(),
            }
        }
    };
    for (field, label) in labels {
        check_account(accounts, label, &format!("{at}.{field}"))?;
    }
    for (field, list) in lists {
        if list.len() != d {
            return Err(Error::config(
                format!("{at}.{field}"),
                format!("expected {d} entries, one per asset"),
            ));
        }
        for (i, label) in list.iter().enumerate() {
            check_account(accounts, label, &format!("{at}.{field}[{i}]"))?;
        }
    }
    if let ConventionConfig::CommonUnsecured { k, .. }
    | ConventionConfig::SplitCashRates { k, .. } = c
    {
        if *k > d {
            return Err(Error::config(
                format!("{at}.k"),
                "k exceeds the number of assets",
            ));
        }
    }
    Ok(conv)
}

/// Open-loop strategy of the block; `None` for `bsde`, which needs a price.
pub fn build_strategy(s: &StrategyConfig, d: usize, at: &str) -> Result<Option<Strategy>> {
    let check = |units: &[f64], field: String| {
        if units.len() != d {
            Err(Error::config(
                field,
                format!("expected {d} entries, one per asset"),
            ))
        } else {
            Ok(())
        }
    };
    match s {
        StrategyConfig::Zero => Ok(Some(Strategy::zero(d))),
        StrategyConfig::BuyAndHold { units, from } => {
            check(units, format!("{at}.units"))?;
            Ok(Some(Strategy::buy_and_hold(units.clone(), *from)))
        }
        StrategyConfig::CashSchedule { schedule } => {
            for (i, row) in schedule.iter().enumerate() {
                check(&row.units, format!("{at}.schedule[{i}].units"))?;
                if i > 0 && !(row.from > schedule[i - 1].from) {
                    return Err(Error::config(
                        format!("{at}.schedule[{i}].from"),
                        "rows must have increasing times",
                    ));
                }
            }
            let rows = schedule.clone();
            Ok(Some(Strategy::from_fn(move |st| {
                rows.iter()
                    .rev()
                    .find(|r| st.t >= r.from - 1e-12)
                    .map(|r| r.units.clone())
                    .unwrap_or_else(|| vec![0.0; d])
            })))
        }
        StrategyConfig::Bsde => Ok(None),
    }
}
