//! Nonlinear pricing by backward recursion.
//!
//! Two families are covered: partial netting with different lending,
//! borrowing and repo rates, and cash collateral set by a haircut rule on the
//! hedger's own wealth. Both are solved with [`crate::scheme`], then the
//! extracted hedge can be pushed through the forward engine to confirm
//! replication.

use std::sync::Arc;

use crate::contracts::{
    offset_amount, split_collateral, CollateralSpec, Contract, HaircutForm, Margin,
};
use crate::linear::{collateral_on_lattice, max_level_diff, Diagnostics, PricePath};
use crate::market::{Account, AccountSet, Child, Lattice, LatticeProcess};
use crate::scheme::{
    lattice_references, representation, solve_backward, BackwardProblem, BackwardSolution,
    PICARD_MAX_ITER, PICARD_TOL,
};
use crate::wealth::{
    benchmark_value, evolve_collateralized, evolve_wealth, Strategy, TradingConvention,
};
use crate::{neg, pos, Error, Result};

pub use crate::scheme::BackwardSolution as BsdeSolution;

/// Rates entering the partial-netting drivers (annualised or per step).
#[derive(Debug, Clone, PartialEq)]
pub struct DriverRates {
    pub lend: f64,
    pub borrow: f64,
    /// Repo borrowing rate of each asset.
    pub repo_borrow: Vec<f64>,
}

/// `Σ a_i ξS_i - Σ r^{i,b}(ξS_i)^+ + r^l(X + Σ(ξS)^-)^+ - r^b(X + Σ(ξS)^-)^-`,
/// with `a_i` the rate paid on the asset leg.
fn partial_netting_drift(first: impl Fn(usize) -> f64, x: f64, xs: &[f64], r: &DriverRates) -> f64 {
    let shorts: f64 = xs.iter().map(|v| neg(*v)).sum();
    let cash = x + shorts;
    let legs: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, v)| first(i) * v - r.repo_borrow[i] * pos(*v))
        .sum();
    legs + r.lend * pos(cash) - r.borrow * neg(cash)
}

/// Lending-regime driver `f_l(X, ξS)` in currency per year.
pub fn eval_driver_fl(x: f64, xs: &[f64], rates: &DriverRates) -> f64 {
    partial_netting_drift(|_| rates.lend, x, xs, rates)
}

/// Borrowing-regime driver `f_b(X, ξS)`.
pub fn eval_driver_fb(x: f64, xs: &[f64], rates: &DriverRates) -> f64 {
    partial_netting_drift(|_| rates.borrow, x, xs, rates)
}

/// Driver choices for [`solve_bsde`].
#[derive(Clone)]
pub enum Driver {
    /// Partial netting in the lending (`x >= 0`) or borrowing regime.
    PartialNetting {
        lend: String,
        borrow: String,
        repo_borrow: Vec<String>,
        borrowing_regime: bool,
    },
    /// Rehypothecated cash collateral `c(S) = (1+δ1)S^- - (1+δ2)S^+` on a single cash account.
    EndogenousCollateral {
        delta1: f64,
        delta2: f64,
        cash: String,
        collateral: String,
        offset: f64,
    },
    /// Any discrete driver `D_k(node, y, z)` in `Y` units.
    Custom(Arc<dyn Fn(usize, usize, f64, &[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Driver::PartialNetting {
                borrowing_regime, ..
            } => write!(f, "PartialNetting(borrowing: {borrowing_regime})"),
            Driver::EndogenousCollateral { delta1, delta2, .. } => {
                write!(f, "EndogenousCollateral({delta1}, {delta2})")
            }
            Driver::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Solve `Y_{k+1} = Y_k + D_k + Σ Z ΔK/N_{k+1} + ΔU_{k+1}` with the driver's normaliser.
///
/// `flow(k, idx, child)` is the undiscounted cash-flow increment; it is divided
/// by the normaliser inside. The normaliser is `B^l` or `B^b` for partial
/// netting, the cash account for endogenous collateral, and `numeraire` for a
/// custom driver.
pub fn solve_bsde(
    driver: &Driver,
    terminal: Vec<f64>,
    flow: &(dyn Fn(usize, usize, &Child) -> f64 + Sync),
    lattice: &Lattice,
    accounts: &AccountSet,
    numeraire: &str,
) -> Result<BackwardSolution> {
    let refs = lattice_references(lattice, accounts)?;
    let n_acc = match driver {
        Driver::PartialNetting {
            lend,
            borrow,
            borrowing_regime,
            ..
        } => accounts.get(if *borrowing_regime { borrow } else { lend })?,
        Driver::EndogenousCollateral { cash, .. } => accounts.get(cash)?,
        Driver::Custom(_) => accounts.get(numeraire)?,
    };
    let d = discrete_driver(driver, lattice, accounts, n_acc)?;
    let f = |k: usize, idx: usize, c: &Child| flow(k, idx, c) / n_acc.value(k + 1);
    let problem = BackwardProblem {
        lattice,
        numeraire: n_acc,
        references: refs,
        terminal,
        driver: &*d,
        flow: &f,
        tol: PICARD_TOL,
        max_iter: PICARD_MAX_ITER,
    };
    solve_backward(&problem)
}

type BoxedDriver<'a> = Box<dyn Fn(usize, usize, f64, &[f64]) -> f64 + Sync + 'a>;

fn discrete_driver<'a>(
    driver: &'a Driver,
    lat: &'a Lattice,
    accounts: &'a AccountSet,
    n: &'a Account,
) -> Result<BoxedDriver<'a>> {
    let refs = lattice_references(lat, accounts)?;
    match driver {
        Driver::PartialNetting {
            lend,
            borrow,
            repo_borrow,
            ..
        } => {
            if repo_borrow.len() != lat.dim() {
                return Err(Error::invalid(
                    "one repo borrowing account per asset is required",
                ));
            }
            let bl = accounts.get(lend)?;
            let bb = accounts.get(borrow)?;
            let rib = repo_borrow
                .iter()
                .map(|r| accounts.get(r))
                .collect::<Result<Vec<_>>>()?;
            Ok(Box::new(move |k, idx, y, z| {
                let xs: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(i, zi)| zi * lat.price(i, k, idx))
                    .collect();
                let rates = DriverRates {
                    lend: bl.rho(k),
                    borrow: bb.rho(k),
                    repo_borrow: rib.iter().map(|a| a.rho(k)).collect(),
                };
                let v = n.value(k) * y;
                (partial_netting_drift(|i| refs[i].rho(k), v, &xs, &rates) - n.rho(k) * v)
                    / n.value(k + 1)
            }))
        }
        Driver::EndogenousCollateral {
            delta1,
            delta2,
            collateral,
            offset,
            ..
        } => {
            if *delta1 < 0.0 || *delta2 < 0.0 {
                return Err(Error::invalid("haircuts must be nonnegative"));
            }
            let bc = accounts.get(collateral)?;
            let (d1, d2, off) = (*delta1, *delta2, *offset);
            Ok(Box::new(move |k, _, y, _| {
                let s = n.value(k) * y - off * n.value(k);
                (n.rho(k) - bc.rho(k)) * offset_amount(s, d1, d2) / n.value(k + 1)
            }))
        }
        Driver::Custom(f) => {
            let f = f.clone();
            Ok(Box::new(move |k, idx, y, z| f(k, idx, y, z)))
        }
    }
}

/// Accounts of the partial-netting market with rehypothecated cash margin.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialNettingMarket {
    pub lend: String,
    pub borrow: String,
    pub repo_borrow: Vec<String>,
    /// Margin accounts `B^{c,l}`, `B^{c,b}`.
    pub margin_lend: String,
    pub margin_borrow: String,
}

impl PartialNettingMarket {
    pub fn convention(&self) -> TradingConvention {
        TradingConvention::PartialNetting {
            lend: self.lend.clone(),
            borrow: self.borrow.clone(),
            repo_borrow: self.repo_borrow.clone(),
        }
    }

    pub fn margin(&self) -> Margin {
        Margin::cash_rehypothecated(&self.margin_lend, &self.margin_borrow, None)
    }
}

/// Ex-dividend price `S_k = N_k (Y^x_k - x) - C_k` under partial netting, with
/// `N = B^l` for `x >= 0` and `N = B^b` otherwise.
///
/// The flows are `A^c = A + C + F^c`; the extra cash flow `ΔC_{k+1}` includes
/// the return of the collateral at maturity.
pub fn price_partial_netting(
    contract: &Contract,
    collateral: &CollateralSpec,
    market: &PartialNettingMarket,
    x: f64,
    lattice: &Lattice,
    accounts: &AccountSet,
) -> Result<PricePath> {
    if !x.is_finite() {
        return Err(Error::invalid("endowment must be finite"));
    }
    if collateral.is_endogenous() {
        return Err(Error::invalid(
            "partial-netting pricing takes exogenous collateral",
        ));
    }
    let grid = *lattice.grid();
    let n = grid.n_steps();
    let schedule = contract.schedule(&grid)?;
    let coll = collateral_on_lattice(collateral, lattice)?;
    let cl = accounts.get(&market.margin_lend)?;
    let cb = accounts.get(&market.margin_borrow)?;
    let driver = Driver::PartialNetting {
        lend: market.lend.clone(),
        borrow: market.borrow.clone(),
        repo_borrow: market.repo_borrow.clone(),
        borrowing_regime: x < 0.0,
    };
    let n_acc = accounts.get(if x < 0.0 {
        &market.borrow
    } else {
        &market.lend
    })?;
    let flow = |k: usize, idx: usize, ch: &Child| {
        let c0 = coll.levels[k][idx];
        let (cp, cm) = split_collateral(c0);
        let da = schedule.jump(k + 1, &lattice.prices(k + 1, ch.index));
        da + coll.levels[k + 1][ch.index] - c0 + cm * cl.rho(k) - cp * cb.rho(k)
    };
    let refs = lattice_references(lattice, accounts)?;
    let d = discrete_driver(&driver, lattice, accounts, n_acc)?;
    let f = |k: usize, idx: usize, c: &Child| flow(k, idx, c) / n_acc.value(k + 1);
    let problem = BackwardProblem {
        lattice,
        numeraire: n_acc,
        references: refs,
        terminal: vec![x; lattice.n_nodes(n)],
        driver: &*d,
        flow: &f,
        tol: PICARD_TOL,
        max_iter: PICARD_MAX_ITER,
    };
    let sol = solve_backward(&problem)?;
    let rep = representation(&problem, &sol);
    let to_price = |y: &LatticeProcess| LatticeProcess {
        levels: y
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                l.iter()
                    .enumerate()
                    .map(|(j, y)| n_acc.value(k) * (y - x) - coll.levels[k][j])
                    .collect()
            })
            .collect(),
    };
    let s = to_price(&sol.y);
    let cross = max_level_diff(&s, &to_price(&rep));
    Ok(PricePath {
        method: if x < 0.0 {
            "partial-netting-borrow"
        } else {
            "partial-netting-lend"
        }
        .into(),
        grid,
        s,
        xi: sol.z.clone(),
        collateral: Some(coll),
        approximate: sol.approximate,
        diagnostics: Diagnostics {
            max_picard_iterations: sol.max_iterations,
            max_residual: sol.max_residual,
            representation_error: sol.representation_error,
            cross_check: Some(cross),
            iterations: sol.iterations.clone(),
            residuals: sol.residuals.clone(),
        },
    })
}

/// Market for haircut collateral on one cash account with rehypothecated cash margin.
#[derive(Debug, Clone, PartialEq)]
pub struct EndogenousMarket {
    pub cash: String,
    /// Account `B^c` paying interest on both sides of the margin account.
    pub collateral: String,
    pub delta1: f64,
    pub delta2: f64,
}

impl EndogenousMarket {
    pub fn convention(&self, d: usize) -> TradingConvention {
        TradingConvention::basic_single(&self.cash, d)
    }

    pub fn margin(&self) -> Margin {
        Margin::cash_rehypothecated(&self.collateral, &self.collateral, None)
    }

    pub fn collateral_spec(&self) -> CollateralSpec {
        CollateralSpec::Haircut {
            delta1: self.delta1,
            delta2: self.delta2,
            form: HaircutForm::WealthOffset {
                account: self.cash.clone(),
            },
        }
    }
}

/// Price with collateral `C = (1+δ1) S^- - (1+δ2) S^+` driven by the
/// hedger's own replicating wealth.
///
/// Solves the wealth form at endowment `x` (`Y = V/B`, `S = BY - xB`) and the
/// endowment-free form (`Y = S/B`); the diagnostics carry the worst gap
/// between the two and to the conditional-expectation representation.
pub fn price_endogenous_collateral(
    contract: &Contract,
    market: &EndogenousMarket,
    x: f64,
    lattice: &Lattice,
    accounts: &AccountSet,
) -> Result<PricePath> {
    let grid = *lattice.grid();
    let n = grid.n_steps();
    let b = accounts.get(&market.cash)?;
    for i in 0..lattice.dim() {
        if lattice.reference(i) != market.cash {
            return Err(Error::invalid(format!(
                "lattice factor {i} must be calibrated on {}",
                market.cash
            )));
        }
    }
    let schedule = contract.schedule(&grid)?;
    let flow =
        |k: usize, _: usize, ch: &Child| schedule.jump(k + 1, &lattice.prices(k + 1, ch.index));
    let solve = |offset: f64| -> Result<(BackwardSolution, LatticeProcess)> {
        let driver = Driver::EndogenousCollateral {
            delta1: market.delta1,
            delta2: market.delta2,
            cash: market.cash.clone(),
            collateral: market.collateral.clone(),
            offset,
        };
        let refs = lattice_references(lattice, accounts)?;
        let d = discrete_driver(&driver, lattice, accounts, b)?;
        let f = |k: usize, idx: usize, c: &Child| flow(k, idx, c) / b.value(k + 1);
        let problem = BackwardProblem {
            lattice,
            numeraire: b,
            references: refs,
            terminal: vec![offset; lattice.n_nodes(n)],
            driver: &*d,
            flow: &f,
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        };
        let sol = solve_backward(&problem)?;
        let rep = representation(&problem, &sol);
        Ok((sol, rep))
    };
    let scale = |y: &LatticeProcess, offset: f64| LatticeProcess {
        levels: y
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| l.iter().map(|y| b.value(k) * (y - offset)).collect())
            .collect(),
    };
    let (sol_x, rep_x) = solve(x)?;
    let (sol_0, _) = if x == 0.0 {
        (sol_x.clone(), rep_x.clone())
    } else {
        solve(0.0)?
    };
    let s = scale(&sol_x.y, x);
    let s_free = scale(&sol_0.y, 0.0);
    let cross = max_level_diff(&s, &s_free).max(max_level_diff(&s, &scale(&rep_x, x)));
    let coll = LatticeProcess {
        levels: s
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                l.iter()
                    .map(|v| {
                        if k == n {
                            0.0
                        } else {
                            offset_amount(*v, market.delta1, market.delta2)
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(PricePath {
        method: "endogenous-collateral".into(),
        grid,
        s,
        xi: sol_x.z.clone(),
        collateral: Some(coll),
        approximate: sol_x.approximate,
        diagnostics: Diagnostics {
            max_picard_iterations: sol_x.max_iterations.max(sol_0.max_iterations),
            max_residual: sol_x.max_residual.max(sol_0.max_residual),
            representation_error: sol_x.representation_error,
            cross_check: Some(cross),
            iterations: sol_x.iterations.clone(),
            residuals: sol_x.residuals.clone(),
        },
    })
}

/// How to run a price's hedge through the forward engine.
#[derive(Debug, Clone)]
pub struct ReplicationSetup {
    pub convention: TradingConvention,
    pub margin: Option<Margin>,
    pub collateral: CollateralSpec,
    pub x: f64,
}

/// Result of a forward replication run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationReport {
    /// `max |V_T - V^0_T(x)|` over the tested paths.
    pub gap: f64,
    pub paths: usize,
    /// Worst self-financing residual among the engine runs.
    pub residual: f64,
}

/// Start from `x + S_0`, trade the extracted hedge and compare the terminal
/// wealth with the benchmark.
pub fn verify_replication(
    price: &PricePath,
    setup: &ReplicationSetup,
    contract: &Contract,
    lattice: &Lattice,
    accounts: &AccountSet,
    samples: usize,
    seed: u64,
) -> Result<ReplicationReport> {
    let paths = lattice.test_paths(samples, seed)?;
    let strategy = Strategy::from_lattice(price.xi.clone());
    let mut priced = contract.clone();
    priced.p = price.s0();
    let lend = accounts.get(setup.convention.lend_account())?;
    let borrow = accounts.get(setup.convention.borrow_account())?;
    let n = lattice.n_steps();
    let target = benchmark_value(setup.x, lend, borrow, n);
    let runs: Vec<Result<(f64, f64)>> = crate::with_pool(|| {
        use rayon::prelude::*;
        paths
            .par_iter()
            .map(|path| {
                let w = match &setup.margin {
                    Some(m) => evolve_collateralized(
                        &setup.convention,
                        m,
                        &strategy,
                        &priced,
                        &setup.collateral,
                        setup.x,
                        path,
                        accounts,
                    )?,
                    None => evolve_wealth(
                        &setup.convention,
                        &strategy,
                        &priced,
                        setup.x,
                        path,
                        accounts,
                    )?,
                };
                Ok(((w.terminal() - target).abs(), w.residual))
            })
            .collect()
    });
    let mut gap: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for r in runs {
        let (g, res) = r?;
        gap = gap.max(g);
        residual = residual.max(res);
    }
    Ok(ReplicationReport {
        gap,
        paths: paths.len(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{Amount, PayoffKind};
    use crate::linear::{price_fully_collateralized, price_linear};
    use crate::market::{calibrate_lattice_against, AssetModel, TimeGrid};

    fn rates() -> DriverRates {
        DriverRates {
            lend: 0.02,
            borrow: 0.05,
            repo_borrow: vec![0.03],
        }
    }

    #[test]
    fn driver_hand_values() {
        assert!((eval_driver_fl(-20.0, &[50.0], &rates()) + 1.5).abs() < 1e-15);
        assert!((eval_driver_fl(10.0, &[-30.0], &rates()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn driver_collapses_for_equal_rates() {
        let r = DriverRates {
            lend: 0.04,
            borrow: 0.04,
            repo_borrow: vec![0.04, 0.04],
        };
        for (x, a, b) in [(3.0, 10.0, -4.0), (-7.0, -2.0, -9.0), (0.0, 5.0, 6.0)] {
            assert!((eval_driver_fl(x, &[a, b], &r) - 0.04 * x).abs() < 1e-14);
            assert!((eval_driver_fb(x, &[a, b], &r) - 0.04 * x).abs() < 1e-14);
        }
    }

    fn market(g: &TimeGrid) -> AccountSet {
        let mut acc = AccountSet::new();
        for (l, r) in [
            ("Bl", 0.02),
            ("Bb", 0.05),
            ("B1b", 0.03),
            ("B", 0.03),
            ("Bc", 0.01),
        ] {
            acc.insert(Account::constant(l, r, g).unwrap()).unwrap();
        }
        acc
    }

    fn pn() -> PartialNettingMarket {
        PartialNettingMarket {
            lend: "Bl".into(),
            borrow: "Bb".into(),
            repo_borrow: vec![],
            margin_lend: "Bl".into(),
            margin_borrow: "Bb".into(),
        }
    }

    #[test]
    fn ample_endowment_without_flows_is_constant() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let acc = market(&g);
        let lat = Lattice::deterministic(&g);
        let p = price_partial_netting(
            &Contract::new(0.0),
            &CollateralSpec::None,
            &pn(),
            3.0,
            &lat,
            &acc,
        )
        .unwrap();
        assert!(p.s.levels.iter().flatten().all(|s| s.abs() < 1e-15));
    }

    #[test]
    fn loan_price_matches_closed_form() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let acc = market(&g);
        let lat = Lattice::deterministic(&g);
        let c = Contract::new(0.0)
            .with_fixed(0.5, -1.0)
            .with_fixed(1.0, 0.025f64.exp());
        let p = price_partial_netting(&c, &CollateralSpec::None, &pn(), 10.0, &lat, &acc).unwrap();
        let expected = (-0.02f64).exp() * (0.01f64.exp() - 0.025f64.exp());
        assert!((p.s0() - expected).abs() < 1e-12);
        assert!((expected + 0.014963).abs() < 5e-7);
        assert!(p.diagnostics.cross_check.unwrap() < 1e-12);
        let setup = ReplicationSetup {
            convention: pn().convention(),
            margin: Some(pn().margin()),
            collateral: CollateralSpec::None,
            x: 10.0,
        };
        let r = verify_replication(&p, &setup, &c, &lat, &acc, 1, 0).unwrap();
        assert!(r.gap <= 1e-9, "{}", r.gap);
    }

    fn call(notional: f64) -> Contract {
        Contract::new(0.0).with_flow(
            1.0,
            Amount::Vanilla {
                asset: 0,
                strike: 100.0,
                kind: PayoffKind::Call,
                notional,
            },
        )
    }

    #[test]
    fn endogenous_collateral_without_haircut_is_collateral_discounting() {
        let g = TimeGrid::new(0.0, 1.0, 80).unwrap();
        let acc = market(&g);
        let lat = calibrate_lattice_against(
            &[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")],
            &[acc.get("B").unwrap()],
            &g,
        )
        .unwrap();
        let m = EndogenousMarket {
            cash: "B".into(),
            collateral: "Bc".into(),
            delta1: 0.0,
            delta2: 0.0,
        };
        let e = price_endogenous_collateral(&call(-1.0), &m, 7.0, &lat, &acc).unwrap();
        let f =
            price_fully_collateralized(&call(-1.0), acc.get("Bc").unwrap(), &lat, &acc).unwrap();
        assert!(e.max_diff(&f) <= 1e-9);
        assert!(e.diagnostics.cross_check.unwrap() <= 1e-10);
        let setup = ReplicationSetup {
            convention: m.convention(1),
            margin: Some(m.margin()),
            collateral: m.collateral_spec(),
            x: 7.0,
        };
        let r = verify_replication(&e, &setup, &call(-1.0), &lat, &acc, 30, 1).unwrap();
        assert!(r.gap <= 1e-8 * (1.0 + e.s0().abs()), "{}", r.gap);
    }

    #[test]
    fn equal_collateral_rate_gives_linear_price() {
        let g = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let acc = market(&g);
        let lat = calibrate_lattice_against(
            &[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")],
            &[acc.get("B").unwrap()],
            &g,
        )
        .unwrap();
        let m = EndogenousMarket {
            cash: "B".into(),
            collateral: "B".into(),
            delta1: 0.3,
            delta2: 0.1,
        };
        let e = price_endogenous_collateral(&call(-1.0), &m, 0.0, &lat, &acc).unwrap();
        let l = price_linear(
            &call(-1.0),
            &CollateralSpec::None,
            None,
            &TradingConvention::basic_single("B", 1),
            &lat,
            &acc,
        )
        .unwrap();
        assert!(e.max_diff(&l) <= 1e-12);
    }

    #[test]
    fn corrupted_hedge_shows_in_replication_gap() {
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let acc = market(&g);
        let b = acc.get("B").unwrap();
        let lat =
            calibrate_lattice_against(&[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")], &[b], &g)
                .unwrap();
        let conv = TradingConvention::basic_single("B", 1);
        let mut p =
            price_linear(&call(-1.0), &CollateralSpec::None, None, &conv, &lat, &acc).unwrap();
        let setup = ReplicationSetup {
            convention: conv,
            margin: None,
            collateral: CollateralSpec::None,
            x: 0.0,
        };
        assert!(
            verify_replication(&p, &setup, &call(-1.0), &lat, &acc, 0, 0)
                .unwrap()
                .gap
                <= 1e-10
        );
        let z = p.xi[0].levels[0][0];
        p.xi[0].levels[0][0] = 0.0;
        // Missing hedge at the root: error Z ΔK on the first step, carried at the cash rate.
        let worst = lat
            .children(0, 0)
            .iter()
            .map(|c| {
                (z * (lat.price(0, 1, c.index) - 100.0 - 100.0 * b.rho(0))).abs() * b.value(3)
                    / b.value(1)
            })
            .fold(0.0, f64::max);
        let gap = verify_replication(&p, &setup, &call(-1.0), &lat, &acc, 0, 0)
            .unwrap()
            .gap;
        assert!((gap - worst).abs() <= 1e-10 * worst, "{gap} vs {worst}");
    }
}
