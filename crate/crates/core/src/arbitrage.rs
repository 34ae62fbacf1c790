//! Hedger arbitrage checks on lattices.
//!
//! A strategy with a contract is an arbitrage for the hedger when its netted
//! terminal wealth never falls below the benchmark `V^0_T(x)` and beats it on
//! some state. Lattices are scanned path by path; the verdict only speaks for
//! the strategies and paths that were tried.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contracts::Contract;
use crate::market::{Account, AccountSet, Lattice};
use crate::wealth::{
    benchmark_value, evolve_wealth, netted_wealth, solve_u_from, Strategy, TradingConvention,
    WealthPath,
};
use crate::{neg, pos, Error, Result};

/// `V^0_k(x) = x^+ B^l_k - x^- B^b_k` on the grid.
pub fn benchmark_wealth(x: f64, lend: &Account, borrow: &Account) -> Vec<f64> {
    (0..lend.values().len())
        .map(|k| benchmark_value(x, lend, borrow, k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    ArbitrageFound,
    NoArbitrageWitnessed,
    Inconclusive,
}

/// Result of [`detect_arbitrage`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub outcome: Outcome,
    /// Lattice moves of the path with the largest gain, or of a losing path.
    pub witness: Option<String>,
    /// Extremes of `V^net_T - V^0_T(x)` over the scanned paths.
    pub gap_min: f64,
    pub gap_max: f64,
    pub paths: usize,
    pub exhaustive: bool,
}

/// Knobs of [`detect_arbitrage`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrageOptions {
    /// Gain threshold; defaults to `1e-9 * max(1, |V^0_T(x)|)`.
    pub tol: Option<f64>,
    /// Lower bound on discounted netted wealth.
    pub lower_bound: f64,
    /// Sampled paths when the lattice is too large to enumerate.
    pub samples: usize,
    pub seed: u64,
}

impl Default for ArbitrageOptions {
    fn default() -> Self {
        ArbitrageOptions {
            tol: None,
            lower_bound: -1e6,
            samples: 2000,
            seed: 0,
        }
    }
}

fn moves_label(lattice: &Lattice, nodes: &[usize]) -> String {
    let mut out = String::new();
    for k in 0..nodes.len() - 1 {
        let a = lattice.coords(k, nodes[k]);
        let b = lattice.coords(k + 1, nodes[k + 1]);
        let m: u32 = a
            .iter()
            .zip(&b)
            .enumerate()
            .map(|(i, (x, y))| if y > x { 1 << i } else { 0 })
            .sum();
        out.push(char::from_digit(m, 16).unwrap_or('?'));
    }
    out
}

/// Scan netted terminal wealth against the benchmark.
///
/// Losses are judged against a fixed rounding floor `1e-9 * scale`; gains
/// must exceed `tol`. Enlarging `tol` can therefore only weaken a finding.
pub fn detect_arbitrage(
    convention: &TradingConvention,
    strategy: &Strategy,
    contract: &Contract,
    x: f64,
    lattice: &Lattice,
    accounts: &AccountSet,
    opts: &ArbitrageOptions,
) -> Result<Verdict> {
    let lend = accounts.get(convention.lend_account())?;
    let borrow = accounts.get(convention.borrow_account())?;
    let n = lattice.n_steps();
    let exhaustive = (1u64 << lattice.dim().min(3))
        .checked_pow(n as u32)
        .is_some_and(|c| c <= 1 << 16);
    let paths = if exhaustive {
        lattice.all_paths()?
    } else {
        lattice.sample_paths(opts.samples, opts.seed)?
    };
    let v0 = benchmark_value(x, lend, borrow, n);
    let scale = v0.abs().max(1.0);
    let floor = 1e-9 * scale;
    let tol = opts.tol.unwrap_or(floor).max(floor);
    let disc = if x < 0.0 { borrow } else { lend };

    let mut gap_min = f64::INFINITY;
    let mut gap_max = f64::NEG_INFINITY;
    let mut arg_max = None;
    let mut arg_min = None;
    for path in &paths {
        let w = evolve_wealth(convention, strategy, contract, x, path, accounts)?;
        let net = netted_wealth(&w, lend, borrow);
        for (k, v) in net.iter().enumerate() {
            let d = v / disc.value(k);
            if d < opts.lower_bound {
                return Err(Error::Inadmissible {
                    step: k,
                    node: path.node(k).unwrap_or(0),
                    value: d,
                });
            }
        }
        let gap = net[n] - v0;
        if gap > gap_max {
            gap_max = gap;
            arg_max = path.nodes.clone();
        }
        if gap < gap_min {
            gap_min = gap;
            arg_min = path.nodes.clone();
        }
    }
    let (outcome, witness) = if gap_min < -floor {
        (Outcome::NoArbitrageWitnessed, arg_min)
    } else if gap_max > tol {
        (
            if exhaustive {
                Outcome::ArbitrageFound
            } else {
                Outcome::Inconclusive
            },
            arg_max,
        )
    } else {
        (Outcome::NoArbitrageWitnessed, None)
    };
    Ok(Verdict {
        outcome,
        witness: witness.map(|nodes| moves_label(lattice, &nodes)),
        gap_min,
        gap_max,
        paths: paths.len(),
        exhaustive,
    })
}

/// Accounts of a partial-netting market for the certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct NettingAccounts {
    pub lend: String,
    pub borrow: String,
    pub repo_borrow: Vec<String>,
}

/// Outcome of a supermartingale scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    /// Largest positive value of `Δ(V^net/N) - Σ ξ ΔS̃^{cld}` found.
    pub worst_violation: f64,
    pub steps_checked: usize,
    /// `B^l` (lending regime) or `B^b`.
    pub normaliser: String,
}

/// Check the rate ordering under which netted wealth is a supermartingale
/// in excess of the discounted gains.
pub fn certificate_hypothesis(acc: &NettingAccounts, x: f64, accounts: &AccountSet) -> Result<()> {
    let bl = accounts.get(&acc.lend)?;
    let bb = accounts.get(&acc.borrow)?;
    let n = bl.grid().n_steps();
    for k in 0..n {
        if bl.rho(k) > bb.rho(k) {
            return Err(Error::NotApplicable(format!(
                "lending rate exceeds borrowing rate on step {k}"
            )));
        }
        for r in &acc.repo_borrow {
            let rb = accounts.get(r)?;
            let top = if x < 0.0 { bb.rho(k) } else { bl.rho(k) };
            if top > rb.rho(k) {
                return Err(Error::NotApplicable(format!(
                    "{} rate exceeds repo rate of {r} on step {k}",
                    if x < 0.0 { "borrowing" } else { "lending" }
                )));
            }
        }
    }
    Ok(())
}

/// Scan `Δ(V^net/N)_k - Σ_i ξ^i_k (ΔS^i + ΔA^i - ρ^N_k S^i_k)/N_{k+1}` on
/// every step of every path and report the largest value. No hypothesis check.
pub fn certificate_scan(
    acc: &NettingAccounts,
    strategies: &[Strategy],
    contract: &Contract,
    x: f64,
    lattice: &Lattice,
    accounts: &AccountSet,
    samples: usize,
    seed: u64,
) -> Result<Certificate> {
    let conv = TradingConvention::PartialNetting {
        lend: acc.lend.clone(),
        borrow: acc.borrow.clone(),
        repo_borrow: acc.repo_borrow.clone(),
    };
    let bl = accounts.get(&acc.lend)?;
    let bb = accounts.get(&acc.borrow)?;
    let nacc = if x < 0.0 { bb } else { bl };
    let paths = lattice.test_paths(samples, seed)?;
    let results: Vec<Result<(f64, usize)>> = crate::with_pool(|| {
        use rayon::prelude::*;
        strategies
            .par_iter()
            .map(|s| {
                let mut worst = f64::NEG_INFINITY;
                let mut steps = 0;
                for path in &paths {
                    let w = evolve_wealth(&conv, s, contract, x, path, accounts)?;
                    worst = worst.max(scan_path(&w, bl, bb, nacc));
                    steps += w.v.len() - 1;
                }
                Ok((worst, steps))
            })
            .collect()
    });
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0;
    for r in results {
        let (w, s) = r?;
        worst = worst.max(w);
        steps += s;
    }
    Ok(Certificate {
        worst_violation: worst.max(0.0),
        steps_checked: steps,
        normaliser: nacc.label().to_string(),
    })
}

fn scan_path(w: &WealthPath, bl: &Account, bb: &Account, nacc: &Account) -> f64 {
    let u = solve_u_from(&w.a, bl, bb);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..w.v.len() - 1 {
        let net0 = (w.v[k] + u[k]) / nacc.value(k);
        let net1 = (w.v[k + 1] + u[k + 1]) / nacc.value(k + 1);
        let gains: f64 = w.xi[k]
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let (s0, s1) = (w.prices[k][i], w.prices[k + 1][i]);
                q * (s1 - s0 + w.dividends[k + 1][i] - nacc.rho(k) * s0) / nacc.value(k + 1)
            })
            .sum();
        worst = worst.max(net1 - net0 - gains);
    }
    worst
}

/// [`certificate_scan`] after checking the rate hypothesis.
#[allow(clippy::too_many_arguments)]
pub fn supermartingale_certificate(
    acc: &NettingAccounts,
    strategies: &[Strategy],
    contract: &Contract,
    x: f64,
    lattice: &Lattice,
    accounts: &AccountSet,
    samples: usize,
    seed: u64,
) -> Result<Certificate> {
    certificate_hypothesis(acc, x, accounts)?;
    certificate_scan(
        acc, strategies, contract, x, lattice, accounts, samples, seed,
    )
}

/// Node-local exact slack `Σ(ρ^N - ρ^{i,b})(ξS)^+ + (ρ^l - ρ^b)(X^∓ + U^∓)` of one
/// step, for cross-checking a scan.
pub fn certificate_slack(
    rho_n: f64,
    rho_l: f64,
    rho_b: f64,
    rho_ib: &[f64],
    xs: &[f64],
    cash: f64,
    u: f64,
    lending: bool,
) -> f64 {
    let legs: f64 = xs
        .iter()
        .zip(rho_ib)
        .map(|(v, r)| (rho_n - r) * pos(*v))
        .sum();
    let parts = if lending {
        neg(cash) + neg(u)
    } else {
        pos(cash) + pos(u)
    };
    legs + (rho_l - rho_b) * parts
}

/// A reproducible family of bounded path-dependent strategies.
pub fn random_strategies(count: usize, d: usize, seed: u64) -> Vec<Strategy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let params: Vec<(f64, f64, f64, f64)> = (0..d)
                .map(|_| {
                    (
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.1..3.0),
                        rng.random_range(0.0..6.3),
                    )
                })
                .collect();
            Strategy::from_fn(move |s| {
                params
                    .iter()
                    .enumerate()
                    .map(|(i, (a, b, w, ph))| {
                        let lp = s.prices[i].abs().max(1e-12).ln();
                        a + b * (w * s.t * 10.0 + ph + lp).sin() + 0.01 * s.wealth.tanh()
                    })
                    .collect()
            })
        })
        .collect()
}
