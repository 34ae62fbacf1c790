//! Funding adjustments between pairs of replicating strategies, and the
//! zero-wealth strategy with non-vanishing funding costs.
//!
//! All three adjustments are differences of the funding-cost processes `F`
//! of two wealth records on one grid. They differ only in what the inputs are
//! expected to replicate: any two contracts (total), the same contract (pure),
//! or a clean contract against its risky counterpart (counterparty).

use serde::Serialize;

use crate::contracts::Contract;
use crate::market::{
    build_account, AccountSet, AssetModel, MarketPath, RateFn, ScenarioSet, TimeGrid,
};
use crate::wealth::{
    evolve_wealth, self_financing_residual, Strategy, TradingConvention, WealthPath,
};
use crate::{Error, Result};

const GRID_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AdjustmentKind {
    Tfa,
    Pfa,
    Cfa,
}

impl AdjustmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdjustmentKind::Tfa => "TFA",
            AdjustmentKind::Pfa => "PFA",
            AdjustmentKind::Cfa => "CFA",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdjustmentReport {
    pub kind: AdjustmentKind,
    pub times: Vec<f64>,
    /// `F_k(path1) - F_k(path2)`.
    pub values: Vec<f64>,
    /// `Σ (ψ^0 - ψ̂^0) ΔB` when both records fund everything in one account.
    pub single_account: Option<Vec<f64>>,
    /// Worst gap between `values` and `single_account`.
    pub single_account_gap: Option<f64>,
    /// Set when the inputs replicate different contracts, so the total
    /// adjustment does not split into pure and counterparty parts.
    pub caveat: bool,
    pub inputs: (WealthPath, WealthPath),
}

impl AdjustmentReport {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap_or(&f64::NAN)
    }
}

fn check_grid(p1: &WealthPath, p2: &WealthPath) -> Result<()> {
    if p1.times.len() != p2.times.len()
        || p1
            .times
            .iter()
            .zip(&p2.times)
            .any(|(a, b)| (a - b).abs() > GRID_TOL)
    {
        return Err(Error::invalid(
            "funding adjustment needs both paths on one grid",
        ));
    }
    Ok(())
}

fn same_flows(p1: &WealthPath, p2: &WealthPath) -> bool {
    p1.a.iter()
        .zip(&p2.a)
        .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
}

/// The one account label funding every position of the record, if any.
fn sole_account(p: &WealthPath) -> Option<&str> {
    let first = p.positions.first()?.account.as_str();
    p.positions
        .iter()
        .all(|t| t.account == first)
        .then_some(first)
}

fn single_account_form(p1: &WealthPath, p2: &WealthPath) -> Option<Vec<f64>> {
    let a1 = sole_account(p1)?;
    if sole_account(p2)? != a1 {
        return None;
    }
    let b = &p1.positions[0].values;
    let units = |p: &WealthPath, k: usize| p.positions.iter().map(|t| t.psi[k]).sum::<f64>();
    let mut out = vec![0.0];
    for k in 0..p1.times.len() - 1 {
        out.push(out[k] + (units(p1, k) - units(p2, k)) * (b[k + 1] - b[k]));
    }
    Some(out)
}

fn build(kind: AdjustmentKind, p1: &WealthPath, p2: &WealthPath) -> Result<AdjustmentReport> {
    check_grid(p1, p2)?;
    let values: Vec<f64> = p1.f.iter().zip(&p2.f).map(|(a, b)| a - b).collect();
    let single_account = single_account_form(p1, p2);
    let single_account_gap = single_account.as_ref().map(|s| {
        s.iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    });
    Ok(AdjustmentReport {
        kind,
        times: p1.times.clone(),
        values,
        single_account,
        single_account_gap,
        caveat: !same_flows(p1, p2),
        inputs: (p1.clone(), p2.clone()),
    })
}

/// `TFA_t = F_t(path1) - F_t(path2)`.
pub fn total_funding_adjustment(
    path1: &WealthPath,
    path2: &WealthPath,
) -> Result<AdjustmentReport> {
    build(AdjustmentKind::Tfa, path1, path2)
}

/// Pure funding adjustment: both records carry the same contract flows.
pub fn pure_funding_adjustment(path1: &WealthPath, path2: &WealthPath) -> Result<AdjustmentReport> {
    check_grid(path1, path2)?;
    if !same_flows(path1, path2) {
        return Err(Error::invalid(
            "pure funding adjustment needs the same contract flows on both paths",
        ));
    }
    build(AdjustmentKind::Pfa, path1, path2)
}

/// Counterparty funding adjustment: `path1` for the clean contract, `path2`
/// for the risky one. No relation between the two contracts is enforced.
pub fn counterparty_funding_adjustment(
    clean: &WealthPath,
    risky: &WealthPath,
) -> Result<AdjustmentReport> {
    build(AdjustmentKind::Cfa, clean, risky)
}

/// Result of testing the split of a total adjustment into pure and
/// counterparty parts through the intermediate record `(x̂, φ̂, A)`.
#[derive(Debug, Clone)]
pub struct AdditivityCheck {
    /// Self-financing residual of the intermediate record.
    pub intermediate_residual: f64,
    /// Whether the intermediate record is self-financing within `tol`.
    pub additive: bool,
}

/// Keep the positions of `hat` (which replicates `Â`) but book the flows of
/// `path` (which replicates `A`). The split is legitimate only if this
/// intermediate record is self-financing.
pub fn additivity_check(path: &WealthPath, hat: &WealthPath, tol: f64) -> Result<AdditivityCheck> {
    check_grid(path, hat)?;
    let mut mid = hat.clone();
    mid.a = path.a.clone();
    let r = self_financing_residual(&mid);
    Ok(AdditivityCheck {
        intermediate_residual: r,
        additive: r <= tol,
    })
}

/// Inputs of the three-asset, two-factor redundancy model.
#[derive(Debug, Clone)]
pub struct RedundancySetup {
    pub r: RateFn,
    pub grid: TimeGrid,
    pub s0: [f64; 3],
    /// Drifts; the model is arbitrage-free only if `μ³ = μ¹ + μ² - r`.
    pub mu: [f64; 3],
    /// Volatilities of `S¹` (driven by `W¹`) and `S²` (driven by `W²`).
    pub sigma: [f64; 2],
    pub seed: u64,
}

impl RedundancySetup {
    pub fn new(r: f64, grid: TimeGrid, seed: u64) -> Self {
        let mu = [0.06, 0.04, 0.1 - r];
        RedundancySetup {
            r: RateFn::constant(r),
            grid,
            s0: [100.0, 50.0, 80.0],
            mu,
            sigma: [0.2, 0.3],
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RedundancyExample {
    pub path: WealthPath,
    pub market: MarketPath,
    pub accounts: AccountSet,
    pub convention: TradingConvention,
    pub strategy: Strategy,
    /// `Σ_{l<k} ρ_l`, the grid value of `∫ B^{-1} dB`.
    pub discrete_integral: Vec<f64>,
    /// `∫_0^t r_u du`.
    pub rate_integral: Vec<f64>,
}

/// Zero-wealth strategy that earns `∫ B^{-1} dB` on the risky assets and
/// pays the same amount in funding.
///
/// `S¹` and `S²` follow independent log-normal steps, and `S³` is built so that
/// its one-step return equals `R¹ + R² - ρ_k`. The strategy holds
/// `(1/S¹, 1/S², -1/S³)` and funds the net unit of value from the cash account.
pub fn redundancy_example(setup: &RedundancySetup) -> Result<RedundancyExample> {
    let grid = &setup.grid;
    for k in 0..=grid.n_steps() {
        let r = setup.r.rate_at(grid.time(k));
        let gap = setup.mu[2] - (setup.mu[0] + setup.mu[1] - r);
        if gap.abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "drift condition mu3 = mu1 + mu2 - r fails by {gap:e} at t = {}; the model admits arbitrage",
                grid.time(k)
            )));
        }
    }
    let cash = build_account("B", setup.r.clone(), grid)?;
    let base = [
        AssetModel::new(1, setup.s0[0], setup.mu[0], setup.sigma[0], 0.0, "B"),
        AssetModel::new(2, setup.s0[1], setup.mu[1], setup.sigma[1], 0.0, "B"),
    ];
    let two = ScenarioSet::generate(&base, grid, 1, setup.seed, None)?;
    let p2 = &two.paths[0];
    let mut prices = Vec::with_capacity(grid.n_steps() + 1);
    let mut s3 = setup.s0[2];
    prices.push(vec![p2.prices[0][0], p2.prices[0][1], s3]);
    for k in 0..grid.n_steps() {
        let r1 = p2.prices[k + 1][0] / p2.prices[k][0] - 1.0;
        let r2 = p2.prices[k + 1][1] / p2.prices[k][1] - 1.0;
        let growth = 1.0 + r1 + r2 - cash.rho(k);
        if !(growth > 0.0) {
            return Err(Error::numeric(
                k,
                "third asset price would turn nonpositive; refine the grid",
            ));
        }
        s3 *= growth;
        prices.push(vec![p2.prices[k + 1][0], p2.prices[k + 1][1], s3]);
    }
    let market = MarketPath::from_prices(prices, &[0.0; 3], grid)?;
    let accounts = AccountSet::new().with(cash.clone())?;
    let convention = TradingConvention::CommonUnsecured {
        cash: "B".into(),
        repo: vec!["B".into(); 3],
        k: 3,
    };
    let strategy =
        Strategy::from_fn(|s| vec![1.0 / s.prices[0], 1.0 / s.prices[1], -1.0 / s.prices[2]]);
    let path = evolve_wealth(
        &convention,
        &strategy,
        &Contract::new(0.0),
        0.0,
        &market,
        &accounts,
    )?;
    let mut discrete_integral = vec![0.0];
    for k in 0..grid.n_steps() {
        discrete_integral.push(discrete_integral[k] + cash.rho(k));
    }
    let rate_integral = grid
        .times()
        .iter()
        .map(|&t| setup.r.integral(grid.t0(), t))
        .collect();
    Ok(RedundancyExample {
        path,
        market,
        accounts,
        convention,
        strategy,
        discrete_integral,
        rate_integral,
    })
}

impl RedundancyExample {
    /// Pure funding adjustment of `(x, base, contract)` against the same
    /// strategy with the redundant positions added.
    pub fn augmented_pfa(
        &self,
        base: &Strategy,
        contract: &Contract,
        x: f64,
    ) -> Result<AdjustmentReport> {
        let plain = evolve_wealth(
            &self.convention,
            base,
            contract,
            x,
            &self.market,
            &self.accounts,
        )?;
        let twin = evolve_wealth(
            &self.convention,
            &base.plus(&self.strategy),
            contract,
            x,
            &self.market,
            &self.accounts,
        )?;
        pure_funding_adjustment(&plain, &twin)
    }
}
