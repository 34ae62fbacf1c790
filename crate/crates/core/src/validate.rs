//! Validation suite: closed-form and property checks of the whole stack.
//!
//! Every check compares a computed number with an oracle that does not go
//! through the code under test (a closed form, a hand recursion, or an exact
//! identity), at a fixed tolerance.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::adjustments::{redundancy_example, RedundancySetup};
use crate::arbitrage::{random_strategies, supermartingale_certificate, NettingAccounts};
use crate::bsde::{
    price_endogenous_collateral, price_partial_netting, verify_replication, EndogenousMarket,
    PartialNettingMarket, ReplicationSetup,
};
use crate::contracts::{Amount, CollateralSpec, Contract, HaircutForm, Margin, PayoffKind};
use crate::linear::{
    gamma_martingale_residual, gamma_measure_price, max_level_diff, price_fully_collateralized,
    price_linear, PricePath,
};
use crate::market::{
    calibrate_lattice, calibrate_lattice_against, cum_dividend_residual, Account, AccountSet,
    AssetModel, Lattice, MarketPath, TimeGrid,
};
use crate::report::{Report, TestResult};
use crate::wealth::{
    evolve_collateralized, evolve_wealth, k_residual, netted_wealth_equal_rates, Strategy,
    TradingConvention, WealthPath,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Randomized engine configurations for the self-financing check.
    pub configs: usize,
    /// Randomized claims for the driver-collapse check.
    pub claims: usize,
    /// Randomized strategies for the certificate check.
    pub strategies: usize,
    /// Sampled lattice paths per replication check.
    pub paths: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 20240501,
            configs: 200,
            claims: 20,
            strategies: 100,
            paths: 40,
        }
    }
}

type Check = fn(&SuiteOptions) -> Result<Vec<TestResult>>;

/// A named group of checks; it passes when all of its results pass.
#[derive(Clone, Copy)]
pub struct Criterion {
    pub name: &'static str,
    pub tolerance: f64,
    run: Check,
}

impl std::fmt::Debug for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Criterion({})", self.name)
    }
}

impl Criterion {
    pub fn run(&self, opts: &SuiteOptions) -> Vec<TestResult> {
        let start = Instant::now();
        let mut out = match (self.run)(opts) {
            Ok(v) => v,
            Err(e) => vec![TestResult::errored(self.name, "suite", self.tolerance, &e)],
        };
        let secs = start.elapsed().as_secs_f64();
        for t in &mut out {
            t.runtime_s = secs;
        }
        out
    }
}

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            name: "loan_fair_price",
            tolerance: 1e-6,
            run: loan_fair_price,
        },
        Criterion {
            name: "fair_contract_zeros",
            tolerance: 1e-8,
            run: fair_contract_zeros,
        },
        Criterion {
            name: "netted_wealth_bond",
            tolerance: 1e-10,
            run: netted_wealth_bond,
        },
        Criterion {
            name: "partial_netting_certificate",
            tolerance: 1e-10,
            run: partial_netting_certificate,
        },
        Criterion {
            name: "martingale_suite",
            tolerance: 1e-10,
            run: martingale_suite,
        },
        Criterion {
            name: "gamma_equivalence",
            tolerance: 1e-10,
            run: gamma_equivalence,
        },
        Criterion {
            name: "fully_collateralized_call",
            tolerance: 1e-3,
            run: fully_collateralized_call,
        },
        Criterion {
            name: "endogenous_collateral_x_independence",
            tolerance: 1e-10,
            run: endogenous_collateral,
        },
        Criterion {
            name: "replication_round_trip",
            tolerance: 1e-8,
            run: replication_round_trip,
        },
        Criterion {
            name: "redundancy_example",
            tolerance: 1e-10,
            run: redundancy,
        },
        Criterion {
            name: "driver_collapse",
            tolerance: 1e-12,
            run: driver_collapse,
        },
        Criterion {
            name: "self_financing_residual",
            tolerance: 1e-10,
            run: self_financing,
        },
    ]
}

/// Run every criterion, concurrently, and assemble the results in order.
pub fn run_suite(opts: &SuiteOptions) -> Report {
    let all = criteria();
    let groups: Vec<Vec<TestResult>> =
        crate::with_pool(|| all.par_iter().map(|c| c.run(opts)).collect());
    let mut report = Report::new();
    for t in groups.into_iter().flatten() {
        report.push(t);
    }
    report
}

fn accounts(g: &TimeGrid, rates: &[(&str, f64)]) -> Result<AccountSet> {
    let mut acc = AccountSet::new();
    for (l, r) in rates {
        acc.insert(Account::constant(l, *r, g)?)?;
    }
    Ok(acc)
}

fn pn_market() -> PartialNettingMarket {
    PartialNettingMarket {
        lend: "Bl".into(),
        borrow: "Bb".into(),
        repo_borrow: vec![],
        margin_lend: "Bl".into(),
        margin_borrow: "Bb".into(),
    }
}

const RL: f64 = 0.02;
const RB: f64 = 0.05;
const T0: f64 = 0.5;

fn loan_contract() -> Contract {
    Contract::new(0.0)
        .with_fixed(T0, -1.0)
        .with_fixed(1.0, (0.05 * (1.0 - T0)).exp())
}

fn toy_lend() -> Contract {
    Contract::new(0.0)
        .with_fixed(T0, 1.0)
        .with_fixed(1.0, -(RL * (1.0 - T0)).exp())
}

fn toy_borrow() -> Contract {
    Contract::new(0.0)
        .with_fixed(T0, -1.0)
        .with_fixed(1.0, (RB * (1.0 - T0)).exp())
}

const ALPHA: f64 = 0.4;

fn toy_collateral(g: &TimeGrid) -> CollateralSpec {
    CollateralSpec::Path(
        g.times()
            .iter()
            .map(|&t| {
                if t >= T0 - 1e-12 && t < g.t_end() - 1e-12 {
                    -ALPHA * (RL * (t - T0)).exp()
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

fn loan_fair_price(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 1000)?;
    let acc = accounts(&g, &[("Bl", RL), ("Bb", RB)])?;
    let p = price_partial_netting(
        &loan_contract(),
        &CollateralSpec::None,
        &pn_market(),
        10.0,
        &Lattice::deterministic(&g),
        &acc,
    )?;
    let expected = (-RL).exp() * ((RL * 0.5).exp() - (0.05f64 * 0.5).exp());
    Ok(vec![TestResult::close(
        "loan_fair_price",
        "closed form for the lending regime",
        expected,
        p.s0(),
        1e-6,
    )])
}

fn max_before(p: &PricePath, g: &TimeGrid, t: f64) -> f64 {
    (0..=g.n_steps())
        .filter(|&k| g.time(k) < t - 1e-12)
        .flat_map(|k| p.s.levels[k].iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

fn fair_contract_zeros(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 1000)?;
    let acc = accounts(&g, &[("Bl", RL), ("Bb", RB)])?;
    let lat = Lattice::deterministic(&g);
    let p1 = price_partial_netting(
        &toy_lend(),
        &toy_collateral(&g),
        &pn_market(),
        0.0,
        &lat,
        &acc,
    )?;
    let p2 = price_partial_netting(
        &toy_borrow(),
        &CollateralSpec::None,
        &pn_market(),
        0.0,
        &lat,
        &acc,
    )?;
    Ok(vec![
        TestResult::bounded(
            "fair_contract_zeros_collateralized_deposit",
            "exact zero",
            max_before(&p1, &g, T0),
            1e-8,
        ),
        TestResult::bounded(
            "fair_contract_zeros_borrowed_unit",
            "exact zero",
            max_before(&p2, &g, T0),
            1e-8,
        ),
    ])
}

fn netted_wealth_bond(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 100)?;
    let acc = accounts(&g, &[("B", 0.03), ("B1", 0.03)])?;
    let b = acc.get("B")?;
    let (eta, t0) = (2.0, 0.4);
    // Deterministic discount bond priced off a different curve than the cash account.
    let bond: Vec<Vec<f64>> = g
        .times()
        .iter()
        .map(|&t| vec![(-0.045 * (1.0 - t)).exp()])
        .collect();
    let k0 = g.snap(t0)?;
    let p_t0 = bond[k0][0];
    let path = MarketPath::from_prices(bond, &[0.0], &g)?;
    let conv = TradingConvention::CommonUnsecured {
        cash: "B".into(),
        repo: vec!["B1".into()],
        k: 1,
    };
    let contract = Contract::new(0.0)
        .with_fixed(t0, eta * p_t0)
        .with_fixed(1.0, -eta);
    let w = evolve_wealth(
        &conv,
        &Strategy::buy_and_hold(vec![eta], t0),
        &contract,
        0.0,
        &path,
        &acc,
    )?;
    let net = netted_wealth_equal_rates(&w, b);
    let n = g.n_steps();
    let expected = eta * (1.0 - p_t0 * b.value(n) / b.value(k0));
    let cash_idle = w.positions[0]
        .psi
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(vec![
        TestResult::close("netted_wealth_bond", "closed form", expected, net[n], 1e-10),
        TestResult::close(
            "netted_wealth_bond_terminal_wealth",
            "exact zero",
            0.0,
            w.terminal(),
            1e-10,
        ),
        TestResult::bounded(
            "netted_wealth_bond_cash_idle",
            "exact zero",
            cash_idle,
            1e-10,
        ),
    ])
}

fn partial_netting_certificate(o: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 100)?;
    let acc = accounts(
        &g,
        &[("Bl", 0.02), ("Bb", 0.05), ("B1b", 0.03), ("B2b", 0.04)],
    )?;
    let assets = [
        AssetModel::new(1, 100.0, 0.0, 0.2, 0.01, "Bl"),
        AssetModel::new(2, 50.0, 0.0, 0.3, 0.0, "Bl"),
    ];
    let bl = acc.get("Bl")?;
    let lat = calibrate_lattice_against(&assets, &[bl, bl], &g)?;
    let na = NettingAccounts {
        lend: "Bl".into(),
        borrow: "Bb".into(),
        repo_borrow: vec!["B1b".into(), "B2b".into()],
    };
    let strategies = random_strategies(o.strategies, 2, o.seed);
    let contract = Contract::new(0.0)
        .with_fixed(0.3, -20.0)
        .with_fixed(0.7, 15.0)
        .with_flow(
            1.0,
            Amount::Vanilla {
                asset: 0,
                strike: 100.0,
                kind: PayoffKind::Call,
                notional: -1.0,
            },
        );
    let lend =
        supermartingale_certificate(&na, &strategies, &contract, 5.0, &lat, &acc, 10, o.seed)?;
    // The borrowing regime needs the repo rates above r^b.
    let acc_b = accounts(
        &g,
        &[("Bl", 0.02), ("Bb", 0.05), ("B1b", 0.06), ("B2b", 0.07)],
    )?;
    let bb = acc_b.get("Bb")?;
    let lat_b = calibrate_lattice_against(&assets, &[bb, bb], &g)?;
    let borrow = supermartingale_certificate(
        &na,
        &strategies,
        &contract,
        -5.0,
        &lat_b,
        &acc_b,
        10,
        o.seed + 1,
    )?;
    Ok(vec![
        TestResult::bounded(
            "partial_netting_certificate_lending",
            "supermartingale bound",
            lend.worst_violation,
            1e-10,
        ),
        TestResult::bounded(
            "partial_netting_certificate_borrowing",
            "supermartingale bound",
            borrow.worst_violation,
            1e-10,
        ),
    ])
}

fn martingale_suite(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 200)?;
    let acc = accounts(
        &g,
        &[("B", 0.03), ("B1", 0.025), ("B2", 0.04), ("Bg", 0.05)],
    )?;
    let assets = [
        AssetModel::new(1, 100.0, 0.0, 0.2, 0.02, "B1"),
        AssetModel::new(2, 80.0, 0.0, 0.25, 0.0, "B2"),
    ];
    let lat = calibrate_lattice(&assets, &acc, &g)?;
    let mut cld: f64 = 0.0;
    let mut kres: f64 = 0.0;
    for (i, a) in assets.iter().enumerate() {
        let b = acc.get(&a.funding)?;
        cld = cld.max(cum_dividend_residual(&lat, i, b));
        kres = kres.max(k_residual(&lat, i, b));
    }
    let single = [AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")];
    let b = acc.get("B")?;
    let bg = acc.get("Bg")?;
    let lat1 = calibrate_lattice(&single, &acc, &g)?;
    let glat = calibrate_lattice_against(&single, &[bg], &g)?;
    let conv = TradingConvention::basic_single("B", 1);
    let claim = call_claim(1.0, 100.0, -1.0);
    let lin = price_linear(&claim, &CollateralSpec::None, None, &conv, &lat1, &acc)?;
    let vg = gamma_martingale_residual(&claim, &lin, &glat, b, bg)?;
    Ok(vec![
        TestResult::bounded(
            "martingale_suite_cum_dividend_price",
            "exact martingale",
            cld,
            1e-10,
        ),
        TestResult::bounded(
            "martingale_suite_k_process",
            "exact martingale",
            kres,
            1e-10,
        ),
        TestResult::bounded(
            "martingale_suite_gamma_wealth",
            "exact martingale",
            vg,
            1e-10,
        ),
    ])
}

fn call_claim(t: f64, strike: f64, notional: f64) -> Contract {
    Contract::new(0.0).with_flow(
        t,
        Amount::Vanilla {
            asset: 0,
            strike,
            kind: PayoffKind::Call,
            notional,
        },
    )
}

fn gamma_equivalence(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 200)?;
    let r = 0.03;
    let acc = accounts(&g, &[("B", r), ("Bup", r + 0.02), ("Bdown", r - 0.02)])?;
    let single = [AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")];
    let lat = calibrate_lattice(&single, &acc, &g)?;
    let conv = TradingConvention::basic_single("B", 1);
    let claim = call_claim(1.0, 100.0, -1.0);
    let lin = price_linear(&claim, &CollateralSpec::None, None, &conv, &lat, &acc)?;
    let b = acc.get("B")?;
    let mut out = Vec::new();
    for (name, label) in [
        ("gamma_equivalence_up", "Bup"),
        ("gamma_equivalence_down", "Bdown"),
    ] {
        let bg = acc.get(label)?;
        let glat = calibrate_lattice_against(&single, &[bg], &g)?;
        let pi = gamma_measure_price(&claim, &lin, &glat, b, bg)?;
        out.push(TestResult::bounded(
            name,
            "classic lattice price",
            max_level_diff(&pi, &lin.s),
            1e-10,
        ));
    }
    Ok(out)
}

/// Lognormal call value with asset drift `r1` discounted at `rc`.
pub fn collateralized_call_closed_form(
    s0: f64,
    k: f64,
    r1: f64,
    rc: f64,
    sigma: f64,
    t: f64,
) -> f64 {
    let n = Normal::standard();
    let sd = sigma * t.sqrt();
    let d1 = ((s0 / k).ln() + (r1 + 0.5 * sigma * sigma) * t) / sd;
    let d2 = d1 - sd;
    (-rc * t).exp() * (s0 * (r1 * t).exp() * n.cdf(d1) - k * n.cdf(d2))
}

fn collateral_market(n: usize) -> Result<(TimeGrid, AccountSet, Lattice)> {
    let g = TimeGrid::new(0.0, 1.0, n)?;
    let acc = accounts(&g, &[("B1", 0.03), ("Bc", 0.01)])?;
    let lat = calibrate_lattice(&[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B1")], &acc, &g)?;
    Ok((g, acc, lat))
}

fn fully_collateralized_price(n: usize) -> Result<f64> {
    let (_, acc, lat) = collateral_market(n)?;
    Ok(price_fully_collateralized(&call_claim(1.0, 100.0, -1.0), acc.get("Bc")?, &lat, &acc)?.s0())
}

/// Least-squares slope of `log y` against `log x`.
fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn fully_collateralized_call(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let exact = collateralized_call_closed_form(100.0, 100.0, 0.03, 0.01, 0.2, 1.0);
    let ns = [100usize, 200, 400, 800];
    let prices = ns
        .iter()
        .map(|&n| fully_collateralized_price(n))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = prices.iter().map(|p| (p - exact).abs()).collect();
    let slope = log_slope(&ns.map(|n| n as f64), &errors);
    Ok(vec![
        TestResult::close(
            "fully_collateralized_call_n400",
            "lognormal closed form",
            exact,
            prices[2],
            1e-3 * exact,
        ),
        TestResult::close(
            "fully_collateralized_call_error_order",
            "first-order convergence",
            -1.0,
            slope,
            0.15,
        ),
    ])
}

fn endogenous_market(d1: f64, d2: f64) -> EndogenousMarket {
    EndogenousMarket {
        cash: "B1".into(),
        collateral: "Bc".into(),
        delta1: d1,
        delta2: d2,
    }
}

fn endogenous_collateral(_: &SuiteOptions) -> Result<Vec<TestResult>> {
    let claim = call_claim(1.0, 100.0, -1.0);
    let (_, acc, lat) = collateral_market(200)?;
    let m = endogenous_market(0.2, 0.1);
    let p0 = price_endogenous_collateral(&claim, &m, 0.0, &lat, &acc)?;
    let p7 = price_endogenous_collateral(&claim, &m, 7.0, &lat, &acc)?;
    let (_, acc4, lat4) = collateral_market(400)?;
    let flat =
        price_endogenous_collateral(&claim, &endogenous_market(0.0, 0.0), 0.0, &lat4, &acc4)?;
    let full = price_fully_collateralized(&claim, acc4.get("Bc")?, &lat4, &acc4)?;
    Ok(vec![
        TestResult::bounded(
            "endogenous_collateral_x_independence",
            "identical prices",
            p0.max_diff(&p7),
            1e-10,
        ),
        TestResult::close(
            "endogenous_collateral_no_haircut_limit",
            "fully collateralized price",
            full.s0(),
            flat.s0(),
            1e-9,
        ),
    ])
}

fn replication_check(
    name: &str,
    price: &PricePath,
    setup: &ReplicationSetup,
    contract: &Contract,
    lat: &Lattice,
    acc: &AccountSet,
    o: &SuiteOptions,
) -> Result<TestResult> {
    let r = verify_replication(price, setup, contract, lat, acc, o.paths, o.seed)?;
    let scaled = r.gap / (1.0 + price.s0().abs());
    Ok(TestResult::bounded(
        name,
        "benchmark terminal wealth",
        scaled,
        1e-8,
    ))
}

fn replication_round_trip(o: &SuiteOptions) -> Result<Vec<TestResult>> {
    let mut out = Vec::new();

    let g = TimeGrid::new(0.0, 1.0, 1000)?;
    let acc = accounts(&g, &[("Bl", RL), ("Bb", RB)])?;
    let lat = Lattice::deterministic(&g);
    let pn = pn_market();
    let toys: [(&str, Contract, CollateralSpec, f64); 3] = [
        (
            "replication_loan",
            loan_contract(),
            CollateralSpec::None,
            10.0,
        ),
        (
            "replication_collateralized_deposit",
            toy_lend(),
            toy_collateral(&g),
            0.0,
        ),
        (
            "replication_borrowed_unit",
            toy_borrow(),
            CollateralSpec::None,
            0.0,
        ),
    ];
    for (name, c, coll, x) in toys {
        let p = price_partial_netting(&c, &coll, &pn, x, &lat, &acc)?;
        let setup = ReplicationSetup {
            convention: pn.convention(),
            margin: Some(pn.margin()),
            collateral: coll,
            x,
        };
        out.push(replication_check(name, &p, &setup, &c, &lat, &acc, o)?);
    }

    let g = TimeGrid::new(0.0, 1.0, 100)?;
    let acc = accounts(&g, &[("Bl", 0.02), ("Bb", 0.05), ("B1b", 0.03)])?;
    let lat = calibrate_lattice_against(
        &[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "Bl")],
        &[acc.get("Bl")?],
        &g,
    )?;
    let pn1 = PartialNettingMarket {
        repo_borrow: vec!["B1b".into()],
        ..pn_market()
    };
    let call = call_claim(1.0, 100.0, -1.0);
    let p = price_partial_netting(&call, &CollateralSpec::None, &pn1, 20.0, &lat, &acc)?;
    let setup = ReplicationSetup {
        convention: pn1.convention(),
        margin: Some(pn1.margin()),
        collateral: CollateralSpec::None,
        x: 20.0,
    };
    out.push(replication_check(
        "replication_partial_netting_call",
        &p,
        &setup,
        &call,
        &lat,
        &acc,
        o,
    )?);

    let (_, acc, lat) = collateral_market(200)?;
    let conv = TradingConvention::basic_single("B1", 1);
    let p = price_linear(&call, &CollateralSpec::None, None, &conv, &lat, &acc)?;
    let setup = ReplicationSetup {
        convention: conv,
        margin: None,
        collateral: CollateralSpec::None,
        x: 0.0,
    };
    out.push(replication_check(
        "replication_linear_call",
        &p,
        &setup,
        &call,
        &lat,
        &acc,
        o,
    )?);

    let flat = endogenous_market(0.0, 0.0);
    let p = price_fully_collateralized(&call, acc.get("Bc")?, &lat, &acc)?;
    let setup = ReplicationSetup {
        convention: flat.convention(1),
        margin: Some(flat.margin()),
        collateral: flat.collateral_spec(),
        x: 0.0,
    };
    out.push(replication_check(
        "replication_fully_collateralized_call",
        &p,
        &setup,
        &call,
        &lat,
        &acc,
        o,
    )?);

    let m = endogenous_market(0.2, 0.1);
    for (name, x) in [
        ("replication_haircut_collateral_x0", 0.0),
        ("replication_haircut_collateral_x7", 7.0),
    ] {
        let p = price_endogenous_collateral(&call, &m, x, &lat, &acc)?;
        let setup = ReplicationSetup {
            convention: m.convention(1),
            margin: Some(m.margin()),
            collateral: m.collateral_spec(),
            x,
        };
        out.push(replication_check(name, &p, &setup, &call, &lat, &acc, o)?);
    }
    Ok(out)
}

fn redundancy(o: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 1000)?;
    let ex = redundancy_example(&RedundancySetup::new(0.03, g, o.seed))?;
    let n = g.n_steps();
    let max_v = ex.path.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pfa = ex.augmented_pfa(
        &Strategy::buy_and_hold(vec![0.5, 0.0, 0.0], 0.0),
        &Contract::new(0.0).with_fixed(0.4, -2.0),
        1.0,
    )?;
    let integral = ex.discrete_integral[n];
    Ok(vec![
        TestResult::bounded("redundancy_zero_wealth", "exact zero", max_v, 1e-10),
        TestResult::close(
            "redundancy_gains",
            "grid integral of dB/B",
            integral,
            ex.path.g[n],
            1e-10,
        ),
        TestResult::close(
            "redundancy_funding",
            "minus the gains",
            -ex.path.g[n],
            ex.path.f[n],
            1e-10,
        ),
        TestResult::close(
            "redundancy_augmented_pfa",
            "grid integral of dB/B",
            integral,
            pfa.terminal(),
            1e-10,
        ),
        TestResult::close(
            "redundancy_gains_vs_rate_integral",
            "continuous rate integral, O(dt) gap",
            ex.rate_integral[n],
            ex.path.g[n],
            1e-6,
        ),
    ])
}

fn driver_collapse(o: &SuiteOptions) -> Result<Vec<TestResult>> {
    let g = TimeGrid::new(0.0, 1.0, 60)?;
    let r = 0.035;
    let acc = accounts(&g, &[("Bl", r), ("Bb", r), ("B1b", r)])?;
    let lat = calibrate_lattice_against(
        &[AssetModel::new(1, 100.0, 0.0, 0.25, 0.0, "Bl")],
        &[acc.get("Bl")?],
        &g,
    )?;
    let pn = PartialNettingMarket {
        repo_borrow: vec!["B1b".into()],
        ..pn_market()
    };
    let conv = TradingConvention::basic_single("Bl", 1);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..o.claims {
        let kind = [PayoffKind::Call, PayoffKind::Put, PayoffKind::Forward][rng.random_range(0..3)];
        let t = g.time(rng.random_range(1..=g.n_steps()));
        let strike = rng.random_range(70.0..130.0);
        let notional = rng.random_range(-2.0..2.0);
        let mut c = Contract::new(0.0).with_flow(
            t,
            Amount::Vanilla {
                asset: 0,
                strike,
                kind,
                notional,
            },
        );
        if rng.random_bool(0.5) {
            c = c.with_fixed(
                g.time(rng.random_range(1..=g.n_steps())),
                rng.random_range(-10.0..10.0),
            );
        }
        let x = rng.random_range(-20.0..20.0);
        let nl = price_partial_netting(&c, &CollateralSpec::None, &pn, x, &lat, &acc)?;
        let lin = price_linear(&c, &CollateralSpec::None, None, &conv, &lat, &acc)?;
        worst = worst.max(nl.max_diff(&lin));
    }
    Ok(vec![TestResult::bounded(
        "driver_collapse",
        "linear lattice price",
        worst,
        1e-12,
    )])
}

fn self_financing(o: &SuiteOptions) -> Result<Vec<TestResult>> {
    let results: Vec<Result<f64>> = crate::with_pool(|| {
        (0..o.configs)
            .into_par_iter()
            .map(|i| {
                Ok(EngineCase::random(o.seed.wrapping_add(i as u64))?
                    .run()?
                    .residual)
            })
            .collect()
    });
    let mut worst: f64 = 0.0;
    for r in results {
        worst = worst.max(r?);
    }
    Ok(vec![TestResult::bounded(
        "self_financing_residual",
        "exact identity",
        worst,
        1e-10,
    )])
}

/// One randomized engine run: convention, margin mode, collateral rule,
/// strategy, contract and a lattice path.
#[derive(Debug, Clone)]
pub struct EngineCase {
    pub convention: TradingConvention,
    pub margin: Option<Margin>,
    pub collateral: CollateralSpec,
    pub strategy: Strategy,
    pub contract: Contract,
    pub x: f64,
    pub path: MarketPath,
    pub accounts: AccountSet,
}

impl EngineCase {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..=40);
        let g = TimeGrid::new(0.0, 1.0, n)?;
        let labels = [
            "B", "Bl", "Bb", "B1", "B1b", "B2", "B2b", "Bcl", "Bcb", "Bp", "Bh",
        ];
        let mut acc = AccountSet::new();
        for l in labels {
            acc.insert(Account::constant(l, rng.random_range(0.0..0.08), &g)?)?;
        }
        let d = rng.random_range(1..=2usize);
        let assets: Vec<AssetModel> = (0..d)
            .map(|i| {
                AssetModel::new(
                    i + 1,
                    rng.random_range(20.0..150.0),
                    0.0,
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.0..0.03),
                    ["B1", "B2"][i],
                )
            })
            .collect();
        let lat = calibrate_lattice(&assets, &acc, &g)?;
        let path = lat
            .sample_paths(1, seed)?
            .pop()
            .ok_or_else(|| Error::invalid("no path"))?;
        let repo: Vec<String> = (0..d).map(|i| ["B1", "B2"][i].to_string()).collect();
        let repo_b: Vec<String> = (0..d).map(|i| ["B1b", "B2b"][i].to_string()).collect();
        let convention = match rng.random_range(0..5) {
            0 => TradingConvention::Basic {
                cash: "B".into(),
                repo: repo.clone(),
            },
            1 => TradingConvention::CommonUnsecured {
                cash: "B".into(),
                repo: repo.clone(),
                k: rng.random_range(0..=d),
            },
            2 => TradingConvention::SplitCashRates {
                lend: "Bl".into(),
                borrow: "Bb".into(),
                repo: repo.clone(),
                k: rng.random_range(0..=d),
            },
            3 => TradingConvention::Offsetting {
                lend: "Bl".into(),
                borrow: "Bb".into(),
                repo_lend: repo.clone(),
                repo_borrow: repo_b,
            },
            _ => TradingConvention::PartialNetting {
                lend: "Bl".into(),
                borrow: "Bb".into(),
                repo_borrow: repo_b,
            },
        };
        let margin = match rng.random_range(0..5) {
            0 => None,
            1 => Some(Margin::cash_rehypothecated("Bcl", "Bcb", Some("Bp"))),
            2 => Some(Margin::cash_rehypothecated("Bcl", "Bcb", None)),
            3 => Some(Margin::cash_segregated("Bcl", "Bcb", "Bp", "Bh")),
            _ => Some(Margin::risky(
                rng.random_range(0..d),
                "Bcl",
                "Bcb",
                "Bp",
                "Bh",
            )),
        };
        let collateral = match (&margin, rng.random_range(0..4)) {
            (None, _) => CollateralSpec::None,
            (Some(_), 0) => {
                let (a, b) = (rng.random_range(-20.0..20.0), rng.random_range(-10.0..10.0));
                CollateralSpec::Path((0..=n).map(|k| a + b * (k as f64 * 0.7).sin()).collect())
            }
            (Some(_), 1) => {
                let (c, s0) = (rng.random_range(-1.0..1.0), assets[0].s0);
                CollateralSpec::NodeFn(std::sync::Arc::new(move |_, s: &[f64]| c * (s[0] - s0)))
            }
            (Some(_), 2) => CollateralSpec::Haircut {
                delta1: rng.random_range(0.0..0.5),
                delta2: rng.random_range(0.0..0.5),
                form: HaircutForm::MarkToMarket,
            },
            (Some(_), _) => CollateralSpec::Haircut {
                delta1: rng.random_range(0.0..0.5),
                delta2: rng.random_range(0.0..0.5),
                form: HaircutForm::WealthOffset {
                    account: "B".into(),
                },
            },
        };
        let strategy = random_strategies(1, d, seed ^ 0xabc)
            .pop()
            .ok_or_else(|| Error::invalid("no strategy"))?;
        let mut contract = Contract::new(rng.random_range(-5.0..5.0));
        for _ in 0..rng.random_range(0..=3) {
            contract = contract.with_fixed(
                g.time(rng.random_range(1..=n)),
                rng.random_range(-30.0..30.0),
            );
        }
        if rng.random_bool(0.5) {
            let asset = rng.random_range(0..d);
            let kind =
                [PayoffKind::Call, PayoffKind::Put, PayoffKind::Forward][rng.random_range(0..3)];
            contract = contract.with_flow(
                1.0,
                Amount::Vanilla {
                    asset,
                    strike: assets[asset].s0,
                    kind,
                    notional: rng.random_range(-2.0..2.0),
                },
            );
        }
        let x = rng.random_range(-50.0..50.0);
        Ok(EngineCase {
            convention,
            margin,
            collateral,
            strategy,
            contract,
            x,
            path,
            accounts: acc,
        })
    }

    pub fn run(&self) -> Result<WealthPath> {
        match &self.margin {
            Some(m) => evolve_collateralized(
                &self.convention,
                m,
                &self.strategy,
                &self.contract,
                &self.collateral,
                self.x,
                &self.path,
                &self.accounts,
            ),
            None => evolve_wealth(
                &self.convention,
                &self.strategy,
                &self.contract,
                self.x,
                &self.path,
                &self.accounts,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_call_matches_reference_value() {
        // Classic case r1 = rc = 5%, S = K = 100, σ = 20%, T = 1: 10.4506.
        let v = collateralized_call_closed_form(100.0, 100.0, 0.05, 0.05, 0.2, 1.0);
        assert!((v - 10.450583572185565).abs() < 1e-9, "{v}");
        // Changing only the discount rate scales the price.
        let w = collateralized_call_closed_form(100.0, 100.0, 0.05, 0.0, 0.2, 1.0);
        assert!((w * (-0.05f64).exp() - v).abs() < 1e-12);
    }

    #[test]
    fn log_slope_of_inverse_is_minus_one() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y = x.map(|v| 3.0 / v);
        assert!((log_slope(&x, &y) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_cases_are_reproducible() {
        let a = EngineCase::random(9).unwrap().run().unwrap();
        let b = EngineCase::random(9).unwrap().run().unwrap();
        assert_eq!(a.v, b.v);
    }
}
