//! Linear pricing on calibrated lattices.
//!
//! With one cash rate and exogenous collateral the price is a discounted
//! expectation of the contract flows plus the margin terms. Prices follow the
//! hedger's sign: `S_k = -B_k E_q[Σ_{l>k} ΔÂ^c_l / B_l]`, so a liability has a
//! positive price. Replicating positions come from the one-step martingale
//! representation on the lattice.

use crate::contracts::{split_collateral, CollateralSpec, Contract, Margin, MarginConvention};
use crate::market::{Account, AccountSet, Child, Lattice, LatticeProcess, TimeGrid};
use crate::scheme::{
    lattice_references, solve_backward, BackwardProblem, PICARD_MAX_ITER, PICARD_TOL,
};
use crate::wealth::{TradingConvention, WealthPath};
use crate::{Error, Result};

/// Prices and hedge on every lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePath {
    pub method: String,
    pub grid: TimeGrid,
    /// Ex-dividend price `S_k`; the terminal level is zero.
    pub s: LatticeProcess,
    /// Replicating risky positions per asset.
    pub xi: Vec<LatticeProcess>,
    /// Collateral amount per node, when collateralized.
    pub collateral: Option<LatticeProcess>,
    /// Projection was used for the hedge (multi-factor mismatch).
    pub approximate: bool,
    pub diagnostics: Diagnostics,
}

/// Solver bookkeeping attached to a [`PricePath`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub max_picard_iterations: usize,
    pub max_residual: f64,
    pub representation_error: f64,
    /// Worst gap to an independent representation of the same price, if computed.
    pub cross_check: Option<f64>,
    /// Picard iterations per node.
    pub iterations: Vec<Vec<usize>>,
    /// Driver residual per node.
    pub residuals: Vec<Vec<f64>>,
}

impl PricePath {
    pub fn s0(&self) -> f64 {
        self.s.levels[0][0]
    }

    /// Worst absolute node-wise difference to another price on the same lattice.
    pub fn max_diff(&self, other: &PricePath) -> f64 {
        max_level_diff(&self.s, &other.s)
    }
}

pub(crate) fn max_level_diff(a: &LatticeProcess, b: &LatticeProcess) -> f64 {
    a.levels
        .iter()
        .zip(&b.levels)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Margin accounts looked up once.
pub(crate) struct MarginAccounts<'a> {
    pub convention: MarginConvention,
    pub cl: &'a Account,
    pub cb: &'a Account,
    pub post: Option<&'a Account>,
    pub hold: Option<&'a Account>,
}

/// Node-local collateral contributions to a single-cash wealth step.
pub(crate) struct CollateralTerms {
    /// Trading wealth minus wealth, earning the cash rate.
    pub shift: f64,
    /// Deterministic margin flow over the step.
    pub flow: f64,
    /// Units of the collateral asset held against posted shares.
    pub units: f64,
}

impl<'a> MarginAccounts<'a> {
    pub fn new(m: &Margin, accounts: &'a AccountSet) -> Result<Self> {
        m.validate(accounts)?;
        Ok(MarginAccounts {
            convention: m.convention,
            cl: accounts.get(&m.lend)?,
            cb: accounts.get(&m.borrow)?,
            post: m.posting.as_deref().map(|p| accounts.get(p)).transpose()?,
            hold: match m.convention {
                MarginConvention::CashRehypothecated => None,
                _ => m.holding.as_deref().map(|p| accounts.get(p)).transpose()?,
            },
        })
    }

    /// `ref_rho` is the step rate of the collateral asset's lattice reference.
    pub fn terms(
        &self,
        k: usize,
        c: f64,
        prices: &[f64],
        ref_rho: impl Fn(usize) -> f64,
    ) -> CollateralTerms {
        let (cp, cm) = split_collateral(c);
        let dfc = cm * self.cl.rho(k) - cp * self.cb.rho(k);
        let hold = self.hold.map_or(0.0, |h| cp * h.rho(k));
        let post = self.post.map_or(0.0, |p| cm * p.rho(k));
        match self.convention {
            MarginConvention::RiskyCollateral { asset } => CollateralTerms {
                shift: -cm,
                flow: dfc + hold + cm * ref_rho(asset) - post,
                units: cm / prices[asset],
            },
            MarginConvention::CashSegregated => CollateralTerms {
                shift: 0.0,
                flow: dfc + hold - post,
                units: 0.0,
            },
            MarginConvention::CashRehypothecated => match self.post {
                Some(_) => CollateralTerms {
                    shift: cp,
                    flow: dfc - post,
                    units: 0.0,
                },
                None => CollateralTerms {
                    shift: c,
                    flow: dfc,
                    units: 0.0,
                },
            },
        }
    }
}

/// Cash account and per-asset funding accounts of a single-rate convention.
pub(crate) fn single_rate_funding(conv: &TradingConvention) -> Result<(String, Vec<String>)> {
    match conv {
        TradingConvention::Basic { cash, repo } => Ok((cash.clone(), repo.clone())),
        TradingConvention::CommonUnsecured { cash, repo, k } => {
            let f = repo
                .iter()
                .enumerate()
                .map(|(i, r)| if i < *k { cash.clone() } else { r.clone() })
                .collect();
            Ok((cash.clone(), f))
        }
        _ => Err(Error::invalid(
            "linear pricing needs a single cash account (basic or common-unsecured convention)",
        )),
    }
}

/// Exogenous collateral on every node, terminal level zero.
pub(crate) fn collateral_on_lattice(
    spec: &CollateralSpec,
    lattice: &Lattice,
) -> Result<LatticeProcess> {
    let n = lattice.n_steps();
    let mut levels = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut row = Vec::with_capacity(lattice.n_nodes(k));
        for idx in 0..lattice.n_nodes(k) {
            let c = spec
                .exogenous(k, n, &lattice.prices(k, idx))?
                .ok_or_else(|| Error::invalid("haircut collateral needs the endogenous pricer"))?;
            if !c.is_finite() {
                return Err(Error::numeric(
                    k,
                    format!("non-finite collateral at node {idx}"),
                ));
            }
            row.push(c);
        }
        levels.push(row);
    }
    Ok(LatticeProcess { levels })
}

/// Linear price with optional exogenous collateral.
pub fn price_linear(
    contract: &Contract,
    collateral: &CollateralSpec,
    margin: Option<&Margin>,
    convention: &TradingConvention,
    lattice: &Lattice,
    accounts: &AccountSet,
) -> Result<PricePath> {
    let (cash, funding) = single_rate_funding(convention)?;
    if funding.len() != lattice.dim() {
        return Err(Error::invalid(
            "convention and lattice disagree on the number of assets",
        ));
    }
    for (i, f) in funding.iter().enumerate() {
        let fa = accounts.get(f)?;
        let ra = accounts.get(lattice.reference(i))?;
        if fa.label() != ra.label() && fa.values() != ra.values() {
            return Err(Error::invalid(format!(
                "lattice factor {i} is calibrated on {} but the asset is funded by {f}",
                lattice.reference(i)
            )));
        }
    }
    if collateral.is_endogenous() {
        return Err(Error::invalid(
            "haircut collateral needs the endogenous pricer",
        ));
    }
    if margin.is_none() && !collateral.is_none() {
        return Err(Error::invalid("collateral needs a margin convention"));
    }
    let grid = *lattice.grid();
    let b = accounts.get(&cash)?;
    let refs = lattice_references(lattice, accounts)?;
    let schedule = contract.schedule(&grid)?;
    let coll = match margin {
        Some(_) => Some(collateral_on_lattice(collateral, lattice)?),
        None => None,
    };
    let ma = margin
        .map(|m| MarginAccounts::new(m, accounts))
        .transpose()?;
    let n = grid.n_steps();

    let terms = |k: usize, idx: usize| match (&ma, &coll) {
        (Some(ma), Some(c)) => Some(ma.terms(k, c.levels[k][idx], &lattice.prices(k, idx), |a| {
            refs[a].rho(k)
        })),
        _ => None,
    };
    let driver = |_: usize, _: usize, _: f64, _: &[f64]| 0.0;
    let flow = |k: usize, idx: usize, ch: &Child| {
        let da = schedule.jump(k + 1, &lattice.prices(k + 1, ch.index));
        let m = terms(k, idx).map_or(0.0, |t| t.shift * b.rho(k) + t.flow);
        (da + m) / b.value(k + 1)
    };
    let problem = BackwardProblem {
        lattice,
        numeraire: b,
        references: refs.clone(),
        terminal: vec![0.0; lattice.n_nodes(n)],
        driver: &driver,
        flow: &flow,
        tol: PICARD_TOL,
        max_iter: PICARD_MAX_ITER,
    };
    let sol = solve_backward(&problem)?;
    let s = LatticeProcess {
        levels: sol
            .y
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| l.iter().map(|y| y * b.value(k)).collect())
            .collect(),
    };
    let mut xi = sol.z.clone();
    if let Some(MarginConvention::RiskyCollateral { asset }) = margin.map(|m| m.convention) {
        for k in 0..n {
            for idx in 0..lattice.n_nodes(k) {
                xi[asset].levels[k][idx] -= terms(k, idx).map_or(0.0, |t| t.units);
            }
        }
    }
    Ok(PricePath {
        method: "linear".into(),
        grid,
        s,
        xi,
        collateral: coll,
        approximate: sol.approximate,
        diagnostics: Diagnostics {
            max_picard_iterations: sol.max_iterations,
            max_residual: sol.max_residual,
            representation_error: sol.representation_error,
            cross_check: None,
            iterations: sol.iterations.clone(),
            residuals: sol.residuals.clone(),
        },
    })
}

/// Price discounted with a collateral account: `S_k = -B^c_k E_q[Σ_{l>k} ΔA_l / B^c_l]`.
///
/// `B^c` need not be traded; the lattice keeps its own calibration.
pub fn price_fully_collateralized(
    contract: &Contract,
    bc: &Account,
    lattice: &Lattice,
    accounts: &AccountSet,
) -> Result<PricePath> {
    let grid = *lattice.grid();
    let schedule = contract.schedule(&grid)?;
    let refs = lattice_references(lattice, accounts)?;
    let n = grid.n_steps();
    let driver = |_: usize, _: usize, _: f64, _: &[f64]| 0.0;
    let flow = |k: usize, _: usize, ch: &Child| {
        schedule.jump(k + 1, &lattice.prices(k + 1, ch.index)) / bc.value(k + 1)
    };
    let problem = BackwardProblem {
        lattice,
        numeraire: bc,
        references: refs,
        terminal: vec![0.0; lattice.n_nodes(n)],
        driver: &driver,
        flow: &flow,
        tol: PICARD_TOL,
        max_iter: PICARD_MAX_ITER,
    };
    let sol = solve_backward(&problem)?;
    let s = LatticeProcess {
        levels: sol
            .y
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| l.iter().map(|y| y * bc.value(k)).collect())
            .collect(),
    };
    Ok(PricePath {
        method: "fully-collateralized".into(),
        grid,
        s,
        xi: sol.z,
        collateral: None,
        approximate: sol.approximate,
        diagnostics: Diagnostics {
            max_picard_iterations: sol.max_iterations,
            max_residual: sol.max_residual,
            representation_error: sol.representation_error,
            cross_check: None,
            iterations: sol.iterations.clone(),
            residuals: sol.residuals.clone(),
        },
    })
}

/// `V^γ_k = V_k + B^γ_k Σ_{l<k} (ρ^γ_l - ρ_l) ψ^0_l B_l / B^γ_{l+1}`.
///
/// `ψ^0` is the cash-account position recorded on the path.
pub fn gamma_transform(path: &WealthPath, cash: &Account, bg: &Account) -> Result<Vec<f64>> {
    let track = path
        .positions
        .iter()
        .find(|t| t.account == cash.label() && (t.label == "cash" || t.label == "lend"))
        .ok_or_else(|| Error::invalid(format!("path has no cash position in {}", cash.label())))?;
    if track.psi.len() != path.v.len() || bg.values().len() != path.v.len() {
        return Err(Error::invalid("path and accounts are on different grids"));
    }
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(path.v.len());
    for k in 0..path.v.len() {
        out.push(path.v[k] + bg.value(k) * acc);
        if k + 1 < path.v.len() {
            acc += (bg.rho(k) - cash.rho(k)) * track.psi[k] * cash.value(k) / bg.value(k + 1);
        }
    }
    Ok(out)
}

fn check_gamma_inputs(
    linear: &PricePath,
    gamma_lattice: &Lattice,
    cash: &Account,
    bg: &Account,
) -> Result<()> {
    if linear.grid != *gamma_lattice.grid()
        || cash.grid() != gamma_lattice.grid()
        || bg.grid() != gamma_lattice.grid()
    {
        return Err(Error::invalid(
            "gamma pricing inputs are on different grids",
        ));
    }
    if linear.xi.len() != gamma_lattice.dim() {
        return Err(Error::invalid(
            "hedge and lattice disagree on the number of assets",
        ));
    }
    for (i, f) in gamma_lattice.factors().iter().enumerate() {
        if f.reference != bg.label() {
            return Err(Error::invalid(format!(
                "factor {i} of the gamma lattice is not calibrated on {}",
                bg.label()
            )));
        }
    }
    Ok(())
}

/// Price under the measure making `S^{cld}/B^γ` a martingale, with the
/// compensating cash-account term, using the hedge from [`price_linear`].
///
/// Backward step: `π_k/B^γ_k = E^γ[(π_{k+1} - ΔA_{k+1})/B^γ_{k+1}] + a_k (π_k - ξ_k·S_k)`
/// with `a_k = (ρ^γ_k - ρ_k)/B^γ_{k+1}`, solved exactly for `π_k`. Every asset
/// must be funded by the cash account.
pub fn gamma_measure_price(
    contract: &Contract,
    linear: &PricePath,
    gamma_lattice: &Lattice,
    cash: &Account,
    bg: &Account,
) -> Result<LatticeProcess> {
    check_gamma_inputs(linear, gamma_lattice, cash, bg)?;
    let lat = gamma_lattice;
    let n = lat.n_steps();
    let schedule = contract.schedule(lat.grid())?;
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = vec![0.0; lat.n_nodes(n)];
    for k in (0..n).rev() {
        let a = (bg.rho(k) - cash.rho(k)) / bg.value(k + 1);
        let next = &levels[k + 1];
        levels[k] = (0..lat.n_nodes(k))
            .map(|idx| {
                let e: f64 = lat
                    .children(k, idx)
                    .iter()
                    .map(|c| {
                        c.prob * (next[c.index] - schedule.jump(k + 1, &lat.prices(k + 1, c.index)))
                            / bg.value(k + 1)
                    })
                    .sum();
                let xs: f64 = (0..lat.dim())
                    .map(|i| linear.xi[i].levels[k][idx] * lat.price(i, k, idx))
                    .sum();
                (e - a * xs) / (1.0 / bg.value(k) - a)
            })
            .collect();
    }
    Ok(LatticeProcess { levels })
}

/// Worst one-step drift of `V̄^γ` under the gamma lattice, for the
/// replicating portfolio of a linear price (contract flows removed).
pub fn gamma_martingale_residual(
    contract: &Contract,
    linear: &PricePath,
    gamma_lattice: &Lattice,
    cash: &Account,
    bg: &Account,
) -> Result<f64> {
    check_gamma_inputs(linear, gamma_lattice, cash, bg)?;
    let lat = gamma_lattice;
    let schedule = contract.schedule(lat.grid())?;
    let s = &linear.s;
    Ok(crate::market::increment_residual(lat, |k, idx, c| {
        let a = (bg.rho(k) - cash.rho(k)) / bg.value(k + 1);
        let xs: f64 = (0..lat.dim())
            .map(|i| linear.xi[i].levels[k][idx] * lat.price(i, k, idx))
            .sum();
        let v_next = s.levels[k + 1][c.index] - schedule.jump(k + 1, &lat.prices(k + 1, c.index));
        v_next / bg.value(k + 1) - s.levels[k][idx] / bg.value(k) + a * (s.levels[k][idx] - xs)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{Amount, PayoffKind};
    use crate::market::{calibrate_lattice, calibrate_lattice_against, AssetModel, MarketPath};
    use crate::wealth::{evolve_wealth, Strategy};

    fn setup(n: usize) -> (TimeGrid, AccountSet, Lattice) {
        let g = TimeGrid::new(0.0, 1.0, n).unwrap();
        let mut acc = AccountSet::new();
        for (l, r) in [("B", 0.03), ("Bc", 0.01), ("Bg", 0.05)] {
            acc.insert(Account::constant(l, r, &g).unwrap()).unwrap();
        }
        let lat =
            calibrate_lattice(&[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")], &acc, &g).unwrap();
        (g, acc, lat)
    }

    fn call_liability() -> Contract {
        Contract::new(0.0).with_flow(
            1.0,
            Amount::Vanilla {
                asset: 0,
                strike: 100.0,
                kind: PayoffKind::Call,
                notional: -1.0,
            },
        )
    }

    #[test]
    fn claim_price_is_discounted_expectation() {
        let (_, acc, lat) = setup(50);
        let conv = TradingConvention::basic_single("B", 1);
        let p = price_linear(
            &call_liability(),
            &CollateralSpec::None,
            None,
            &conv,
            &lat,
            &acc,
        )
        .unwrap();
        // Oracle: binomial sum of the payoff.
        let q = lat.factors()[0].q[0];
        let b = acc.get("B").unwrap();
        let mut e = 0.0;
        let mut binom = 1.0f64;
        for j in 0..=50usize {
            if j > 0 {
                binom *= (51 - j) as f64 / j as f64;
            }
            e += binom
                * q.powi(j as i32)
                * (1.0 - q).powi(50 - j as i32)
                * (lat.price(0, 50, j) - 100.0).max(0.0);
        }
        assert!((p.s0() - e / b.value(50)).abs() < 1e-10);
        assert!(p.s.levels[50].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn empty_contract_prices_to_zero() {
        let (_, acc, lat) = setup(20);
        let conv = TradingConvention::basic_single("B", 1);
        let p = price_linear(
            &Contract::new(0.0),
            &CollateralSpec::None,
            None,
            &conv,
            &lat,
            &acc,
        )
        .unwrap();
        assert!(p.s.levels.iter().flatten().all(|&s| s == 0.0));
    }

    #[test]
    fn mismatched_calibration_is_rejected() {
        let (g, acc, _) = setup(10);
        let lat = calibrate_lattice_against(
            &[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")],
            &[acc.get("Bc").unwrap()],
            &g,
        )
        .unwrap();
        let conv = TradingConvention::basic_single("B", 1);
        assert!(matches!(
            price_linear(
                &call_liability(),
                &CollateralSpec::None,
                None,
                &conv,
                &lat,
                &acc
            ),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn collateral_account_unit_claim() {
        let (g, acc, lat) = setup(40);
        let bc = acc.get("Bc").unwrap();
        let c = Contract::new(0.0).with_fixed(1.0, -bc.value(g.n_steps()));
        let p = price_fully_collateralized(&c, bc, &lat, &acc).unwrap();
        assert!((p.s0() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_rehypothecated_collateral_adds_spread_term() {
        let (g, acc, lat) = setup(30);
        let conv = TradingConvention::basic_single("B", 1);
        let margin = Margin::cash_rehypothecated("Bc", "Bc", Some("B"));
        let cpath: Vec<f64> = (0..=30)
            .map(|k| if k < 30 { -5.0 + 0.1 * k as f64 } else { 0.0 })
            .collect();
        let p = price_linear(
            &call_liability(),
            &CollateralSpec::Path(cpath.clone()),
            Some(&margin),
            &conv,
            &lat,
            &acc,
        )
        .unwrap();
        let p0 = price_linear(
            &call_liability(),
            &CollateralSpec::None,
            None,
            &conv,
            &lat,
            &acc,
        )
        .unwrap();
        let b = acc.get("B").unwrap();
        let bc = acc.get("Bc").unwrap();
        // Deterministic C: the extra term is -Σ C_k (ρ_k - ρ^c_k) / B_{k+1}.
        let extra: f64 = (0..g.n_steps())
            .map(|k| cpath[k] * (b.rho(k) - bc.rho(k)) / b.value(k + 1))
            .sum();
        assert!((p.s0() - (p0.s0() - extra)).abs() < 1e-12);
    }

    #[test]
    fn gamma_transform_of_cash_is_gamma_account() {
        let (g, acc, _) = setup(25);
        let conv = TradingConvention::Basic {
            cash: "B".into(),
            repo: vec![],
        };
        let w = evolve_wealth(
            &conv,
            &Strategy::zero(0),
            &Contract::new(0.0),
            1.0,
            &MarketPath::empty(&g),
            &acc,
        )
        .unwrap();
        let b = acc.get("B").unwrap();
        let bg = acc.get("Bg").unwrap();
        let vg = gamma_transform(&w, b, bg).unwrap();
        for k in 0..=25 {
            assert!((vg[k] - bg.value(k)).abs() < 1e-12);
        }
        assert_eq!(gamma_transform(&w, b, b).unwrap(), w.v);
    }

    #[test]
    fn gamma_prices_agree() {
        let (g, acc, lat) = setup(60);
        let conv = TradingConvention::basic_single("B", 1);
        let lin = price_linear(
            &call_liability(),
            &CollateralSpec::None,
            None,
            &conv,
            &lat,
            &acc,
        )
        .unwrap();
        let bg = acc.get("Bg").unwrap();
        let glat =
            calibrate_lattice_against(&[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")], &[bg], &g)
                .unwrap();
        let b = acc.get("B").unwrap();
        let pi = gamma_measure_price(&call_liability(), &lin, &glat, b, bg).unwrap();
        assert!(max_level_diff(&pi, &lin.s) <= 1e-10);
        assert!(gamma_martingale_residual(&call_liability(), &lin, &glat, b, bg).unwrap() <= 1e-10);
    }
}
