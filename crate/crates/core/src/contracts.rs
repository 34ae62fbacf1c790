//! Contract cash flows, collateral amounts and margin-account interest.

use std::fmt;
use std::sync::Arc;

use crate::market::{AccountSet, MarketPath, TimeGrid};
use crate::{neg, pos, Error, Result};

/// Payoff shape of a vanilla amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    Call,
    Put,
    Forward,
}

/// Node-dependent amount of a dated flow.
#[derive(Clone)]
pub enum Amount {
    Fixed(f64),
    /// `notional * payoff(S^asset)`, where `asset` indexes the path's assets.
    Vanilla {
        asset: usize,
        strike: f64,
        kind: PayoffKind,
        notional: f64,
    },
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Amount::Fixed(x) => write!(f, "Fixed({x})"),
            Amount::Vanilla {
                asset,
                strike,
                kind,
                notional,
            } => {
                write!(
                    f,
                    "Vanilla({kind:?} on {asset}, K = {strike}, n = {notional})"
                )
            }
            Amount::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Amount {
    pub fn eval(&self, prices: &[f64]) -> f64 {
        match self {
            Amount::Fixed(x) => *x,
            Amount::Vanilla {
                asset,
                strike,
                kind,
                notional,
            } => {
                let s = prices[*asset];
                let payoff = match kind {
                    PayoffKind::Call => pos(s - strike),
                    PayoffKind::Put => pos(strike - s),
                    PayoffKind::Forward => s - strike,
                };
                notional * payoff
            }
            Amount::Custom(f) => f(prices),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Amount::Fixed(_))
    }

    fn scaled(&self, alpha: f64) -> Amount {
        match self {
            Amount::Fixed(x) => Amount::Fixed(alpha * x),
            Amount::Vanilla {
                asset,
                strike,
                kind,
                notional,
            } => Amount::Vanilla {
                asset: *asset,
                strike: *strike,
                kind: *kind,
                notional: alpha * notional,
            },
            Amount::Custom(f) => {
                let f = f.clone();
                Amount::Custom(Arc::new(move |s| alpha * f(s)))
            }
        }
    }
}

/// Dated flow; positive amounts are received by the hedger.
#[derive(Debug, Clone)]
pub struct Flow {
    pub t: f64,
    pub amount: Amount,
}

/// Initial flow `p = A_0` plus dated flows in `(t0, T]`.
#[derive(Debug, Clone, Default)]
pub struct Contract {
    pub p: f64,
    pub flows: Vec<Flow>,
}

impl Contract {
    pub fn new(p: f64) -> Self {
        Contract {
            p,
            flows: Vec::new(),
        }
    }

    pub fn with_flow(mut self, t: f64, amount: Amount) -> Self {
        self.flows.push(Flow { t, amount });
        self
    }

    pub fn with_fixed(self, t: f64, x: f64) -> Self {
        self.with_flow(t, Amount::Fixed(x))
    }

    /// Single terminal claim `X` paid at `t`.
    pub fn claim(t: f64, amount: Amount) -> Self {
        Contract::new(0.0).with_flow(t, amount)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Contract {
            p: alpha * self.p,
            flows: self
                .flows
                .iter()
                .map(|f| Flow {
                    t: f.t,
                    amount: f.amount.scaled(alpha),
                })
                .collect(),
        }
    }

    pub fn combined(&self, other: &Contract) -> Self {
        let mut flows = self.flows.clone();
        flows.extend(other.flows.iter().cloned());
        Contract {
            p: self.p + other.p,
            flows,
        }
    }

    /// The same flows without the initial amount.
    pub fn without_initial(&self) -> Self {
        Contract {
            p: 0.0,
            flows: self.flows.clone(),
        }
    }

    /// Attribute each flow to its grid node.
    pub fn schedule(&self, grid: &TimeGrid) -> Result<FlowSchedule> {
        let mut by_node = vec![Vec::new(); grid.n_steps() + 1];
        for f in &self.flows {
            if f.t <= grid.t0() || f.t > grid.t_end() + 1e-12 {
                return Err(Error::invalid(format!(
                    "flow at t = {} lies outside ({}, {}]",
                    f.t,
                    grid.t0(),
                    grid.t_end()
                )));
            }
            let k = grid.snap(f.t)?;
            if k == 0 {
                return Err(Error::invalid(format!("flow at t = {} snaps onto t0", f.t)));
            }
            by_node[k].push(f.amount.clone());
        }
        Ok(FlowSchedule { by_node })
    }
}

/// Flows grouped by grid node.
#[derive(Debug, Clone)]
pub struct FlowSchedule {
    by_node: Vec<Vec<Amount>>,
}

impl FlowSchedule {
    /// Jump `ΔA_k` at node `k` given the node's asset prices (`k >= 1`).
    pub fn jump(&self, k: usize, prices: &[f64]) -> f64 {
        self.by_node[k].iter().map(|a| a.eval(prices)).sum()
    }

    pub fn has_flows(&self, k: usize) -> bool {
        !self.by_node[k].is_empty()
    }

    pub fn is_deterministic(&self) -> bool {
        self.by_node.iter().flatten().all(|a| a.is_fixed())
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Right-continuous step process `A_k = p + Σ_{t_l <= t_k} Ā_l` of a contract with fixed amounts.
pub fn cumulative_process(contract: &Contract, grid: &TimeGrid) -> Result<Vec<f64>> {
    let sched = contract.schedule(grid)?;
    if !sched.is_deterministic() {
        return Err(Error::invalid(
            "contract has node-dependent amounts; use cumulative_on_path",
        ));
    }
    cumulative_from(&sched, contract.p, |_| &[])
}

/// Cumulative flows realised along one market path.
pub fn cumulative_on_path(
    contract: &Contract,
    grid: &TimeGrid,
    path: &MarketPath,
) -> Result<Vec<f64>> {
    if path.len() != grid.n_steps() + 1 {
        return Err(Error::invalid("path and grid lengths differ"));
    }
    let sched = contract.schedule(grid)?;
    cumulative_from(&sched, contract.p, |k| &path.prices[k])
}

fn cumulative_from<'a>(
    sched: &FlowSchedule,
    p: f64,
    prices: impl Fn(usize) -> &'a [f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sched.len());
    let mut acc = p;
    out.push(acc);
    for k in 1..sched.len() {
        acc += sched.jump(k, prices(k));
        out.push(acc);
    }
    Ok(out)
}

/// `C = C^+ - C^-` with both parts nonnegative and at most one nonzero.
pub fn split_collateral(c: f64) -> (f64, f64) {
    (pos(c), neg(c))
}

/// Which benchmark the haircut rule compares the wealth against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HaircutForm {
    /// Marked-to-market value `M = V^0(x) - V`, benchmark from the trading convention.
    MarkToMarket,
    /// `V̂ = V - x B`, with `B` the named account.
    WealthOffset { account: String },
}

/// Collateral amount process; `C_T = 0` is always enforced.
#[derive(Clone, Default)]
pub enum CollateralSpec {
    #[default]
    None,
    /// `C_k` per grid node, identical on all paths.
    Path(Vec<f64>),
    /// `C_k = f(k, S_k)`.
    NodeFn(Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>),
    /// Haircut rule driven by the hedger's own wealth.
    Haircut {
        delta1: f64,
        delta2: f64,
        form: HaircutForm,
    },
}

impl fmt::Debug for CollateralSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollateralSpec::None => write!(f, "None"),
            CollateralSpec::Path(p) => write!(f, "Path(len {})", p.len()),
            CollateralSpec::NodeFn(_) => write!(f, "NodeFn(..)"),
            CollateralSpec::Haircut {
                delta1,
                delta2,
                form,
            } => {
                write!(f, "Haircut(δ1 = {delta1}, δ2 = {delta2}, {form:?})")
            }
        }
    }
}

impl CollateralSpec {
    pub fn is_none(&self) -> bool {
        matches!(self, CollateralSpec::None)
    }

    pub fn is_endogenous(&self) -> bool {
        matches!(self, CollateralSpec::Haircut { .. })
    }

    /// Exogenous amount at node `k`; `None` for haircut rules.
    pub fn exogenous(&self, k: usize, n_steps: usize, prices: &[f64]) -> Result<Option<f64>> {
        if k == n_steps {
            return Ok(Some(0.0));
        }
        match self {
            CollateralSpec::None => Ok(Some(0.0)),
            CollateralSpec::Path(p) => {
                if p.len() != n_steps + 1 {
                    return Err(Error::invalid("collateral path length must be n_steps + 1"));
                }
                Ok(Some(p[k]))
            }
            CollateralSpec::NodeFn(f) => Ok(Some(f(k, prices))),
            CollateralSpec::Haircut { .. } => Ok(None),
        }
    }

    /// Haircuts, validated as nonnegative.
    pub fn haircuts(&self) -> Result<Option<(f64, f64, &HaircutForm)>> {
        match self {
            CollateralSpec::Haircut {
                delta1,
                delta2,
                form,
            } => {
                if !(*delta1 >= 0.0 && *delta2 >= 0.0 && delta1.is_finite() && delta2.is_finite()) {
                    return Err(Error::invalid("haircuts must be finite and nonnegative"));
                }
                Ok(Some((*delta1, *delta2, form)))
            }
            _ => Ok(None),
        }
    }
}

/// `C = (1+δ1)(V^0 - V)^+ - (1+δ2)(V^0 - V)^-`.
pub fn haircut_amount(v: f64, v0: f64, delta1: f64, delta2: f64) -> f64 {
    let m = v0 - v;
    (1.0 + delta1) * pos(m) - (1.0 + delta2) * neg(m)
}

/// `C = (1+δ1) V̂^- - (1+δ2) V̂^+` for the offset wealth `V̂ = V - xB`.
pub fn offset_amount(v_hat: f64, delta1: f64, delta2: f64) -> f64 {
    (1.0 + delta1) * neg(v_hat) - (1.0 + delta2) * pos(v_hat)
}

/// Haircut collateral along a path, with the terminal amount forced to zero.
pub fn haircut_collateral(v: &[f64], v0: &[f64], delta1: f64, delta2: f64) -> Result<Vec<f64>> {
    if v.len() != v0.len() {
        return Err(Error::invalid("wealth and benchmark paths must be aligned"));
    }
    let mut c: Vec<f64> = v
        .iter()
        .zip(v0)
        .map(|(a, b)| haircut_amount(*a, *b, delta1, delta2))
        .collect();
    if let Some(last) = c.last_mut() {
        *last = 0.0;
    }
    Ok(c)
}

/// Margin-account convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginConvention {
    /// Collateral posted in shares of the path asset with this index.
    RiskyCollateral {
        asset: usize,
    },
    CashSegregated,
    CashRehypothecated,
}

/// Margin convention plus the accounts it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    pub convention: MarginConvention,
    /// `B^{c,l}`: interest received on posted collateral.
    pub lend: String,
    /// `B^{c,b}`: interest paid on received collateral.
    pub borrow: String,
    /// `B^{d+1}`: account funding posted collateral. For rehypothecated cash,
    /// `None` means posted collateral is taken from the portfolio itself.
    pub posting: Option<String>,
    /// `B^{d+2,s}` or `B^{d+2,h}`: interest on held (segregated) collateral.
    pub holding: Option<String>,
}

impl Margin {
    pub fn cash_rehypothecated(lend: &str, borrow: &str, posting: Option<&str>) -> Self {
        Margin {
            convention: MarginConvention::CashRehypothecated,
            lend: lend.into(),
            borrow: borrow.into(),
            posting: posting.map(Into::into),
            holding: None,
        }
    }

    pub fn cash_segregated(lend: &str, borrow: &str, posting: &str, holding: &str) -> Self {
        Margin {
            convention: MarginConvention::CashSegregated,
            lend: lend.into(),
            borrow: borrow.into(),
            posting: Some(posting.into()),
            holding: Some(holding.into()),
        }
    }

    pub fn risky(asset: usize, lend: &str, borrow: &str, posting: &str, holding: &str) -> Self {
        Margin {
            convention: MarginConvention::RiskyCollateral { asset },
            lend: lend.into(),
            borrow: borrow.into(),
            posting: Some(posting.into()),
            holding: Some(holding.into()),
        }
    }

    /// Check that the convention's accounts are present.
    pub fn validate(&self, accounts: &AccountSet) -> Result<()> {
        accounts.get(&self.lend)?;
        accounts.get(&self.borrow)?;
        match self.convention {
            MarginConvention::RiskyCollateral { .. } | MarginConvention::CashSegregated => {
                let p = self
                    .posting
                    .as_deref()
                    .ok_or_else(|| Error::invalid("margin convention needs a posting account"))?;
                let h = self
                    .holding
                    .as_deref()
                    .ok_or_else(|| Error::invalid("margin convention needs a holding account"))?;
                accounts.get(p)?;
                accounts.get(h)?;
            }
            MarginConvention::CashRehypothecated => {
                if let Some(p) = &self.posting {
                    accounts.get(p)?;
                }
            }
        }
        Ok(())
    }
}

/// Cumulative margin-interest processes of a collateral path.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginFlows {
    /// `F^c = ∫ C^- dB^{c,l}/B^{c,l} - ∫ C^+ dB^{c,b}/B^{c,b}`.
    pub f_c: Vec<f64>,
    /// Convention total: `F^{C,h}` (risky), `F̂^{C,s}` (segregated) or `F̂^{C,h}` (rehypothecated).
    pub total: Vec<f64>,
    /// Risky collateral only: `F̄^{C,h} = F^{C,h} - ∫ C^- dB/B`.
    pub total_bar: Option<Vec<f64>>,
}

/// Margin interest with left-point integrands over each grid step.
///
/// `cash` is the unsecured account `B` entering the rehypothecated and
/// risky totals.
pub fn margin_interest(
    c: &[f64],
    margin: &Margin,
    accounts: &AccountSet,
    grid: &TimeGrid,
    cash: &str,
) -> Result<MarginFlows> {
    let n = grid.n_steps();
    if c.len() != n + 1 {
        return Err(Error::invalid("collateral path length must be n_steps + 1"));
    }
    margin.validate(accounts)?;
    let bl = accounts.get(&margin.lend)?;
    let bb = accounts.get(&margin.borrow)?;
    let b = accounts.get(cash)?;
    if bl.grid() != grid {
        return Err(Error::invalid(
            "accounts and collateral are on different grids",
        ));
    }
    let post = margin
        .posting
        .as_deref()
        .map(|p| accounts.get(p))
        .transpose()?;
    let hold = margin
        .holding
        .as_deref()
        .map(|p| accounts.get(p))
        .transpose()?;
    let mut f_c = vec![0.0];
    let mut total = vec![0.0];
    let mut bar = vec![0.0];
    for k in 0..n {
        let (cp, cm) = split_collateral(c[k]);
        let dfc = cm * bl.rho(k) - cp * bb.rho(k);
        let dtot = match margin.convention {
            MarginConvention::RiskyCollateral { .. } => dfc + cp * hold.map_or(0.0, |h| h.rho(k)),
            MarginConvention::CashSegregated => {
                dfc + cp * hold.map_or(0.0, |h| h.rho(k)) - cm * post.map_or(0.0, |p| p.rho(k))
            }
            MarginConvention::CashRehypothecated => {
                dfc + cp * b.rho(k) - cm * post.unwrap_or(b).rho(k)
            }
        };
        f_c.push(f_c[k] + dfc);
        total.push(total[k] + dtot);
        bar.push(bar[k] + dtot - cm * b.rho(k));
    }
    let total_bar =
        matches!(margin.convention, MarginConvention::RiskyCollateral { .. }).then_some(bar);
    Ok(MarginFlows {
        f_c,
        total,
        total_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Account;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 20).unwrap()
    }

    #[test]
    fn empty_contract_is_zero() {
        let a = cumulative_process(&Contract::new(0.0), &grid()).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loan_contract_is_two_step_function() {
        let rhat: f64 = 0.05;
        let c = Contract::new(0.0)
            .with_fixed(0.5, -1.0)
            .with_fixed(1.0, (rhat * 0.5).exp());
        let a = cumulative_process(&c, &grid()).unwrap();
        assert_eq!(a[9], 0.0);
        assert_eq!(a[10], -1.0);
        assert_eq!(a[19], -1.0);
        assert!((a[20] - (-1.0 + (0.025f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn single_claim_contract() {
        let c = Contract::new(3.0).with_fixed(1.0, -2.5);
        let a = cumulative_process(&c, &grid()).unwrap();
        assert_eq!(a[0], 3.0);
        assert_eq!(a[20], 0.5);
    }

    #[test]
    fn flows_outside_horizon_are_rejected() {
        assert!(Contract::new(0.0)
            .with_fixed(0.0, 1.0)
            .schedule(&grid())
            .is_err());
        assert!(Contract::new(0.0)
            .with_fixed(1.5, 1.0)
            .schedule(&grid())
            .is_err());
        assert!(Contract::new(0.0)
            .with_fixed(0.01, 1.0)
            .schedule(&grid())
            .is_err());
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_collateral(5.0), (5.0, 0.0));
        assert_eq!(split_collateral(-3.0), (0.0, 3.0));
        assert_eq!(split_collateral(0.0), (0.0, 0.0));
    }

    #[test]
    fn haircut_examples() {
        assert_eq!(haircut_amount(0.0, 10.0, 0.0, 0.0), 10.0);
        assert_eq!(haircut_amount(5.0, 5.0, 0.3, 0.3), 0.0);
        assert!((haircut_amount(0.0, 10.0, 0.1, 0.2) - 11.0).abs() < 1e-12);
        assert!((haircut_amount(10.0, 0.0, 0.1, 0.2) + 12.0).abs() < 1e-12);
        let c = haircut_collateral(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0], 0.0, 0.0).unwrap();
        assert_eq!(c, vec![3.0, 2.0, 0.0]);
    }

    #[test]
    fn haircut_forms_agree_on_cash_benchmark() {
        for &(v, xb) in &[(3.0, 5.0), (7.0, 5.0), (5.0, 5.0)] {
            assert_eq!(
                haircut_amount(v, xb, 0.1, 0.2),
                offset_amount(v - xb, 0.1, 0.2)
            );
        }
    }

    fn accounts(g: &TimeGrid) -> AccountSet {
        let mut s = AccountSet::new();
        for (l, r) in [
            ("B", 0.03),
            ("Bc", 0.01),
            ("Bd1", 0.03),
            ("Bh", 0.01),
            ("Bcl", 0.03),
        ] {
            s.insert(Account::constant(l, r, g).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn rehypothecated_symmetric_rates_single_integral() {
        let g = grid();
        let acc = accounts(&g);
        let c: Vec<f64> = (0..=20)
            .map(|k| {
                if k == 20 {
                    0.0
                } else {
                    (k as f64 * 0.7).sin() * 4.0
                }
            })
            .collect();
        let m = Margin::cash_rehypothecated("Bc", "Bc", Some("Bd1"));
        let flows = margin_interest(&c, &m, &acc, &g, "B").unwrap();
        let b = acc.get("B").unwrap();
        let bc = acc.get("Bc").unwrap();
        let mut single = 0.0;
        for k in 0..20 {
            single += c[k] * (b.rho(k) - bc.rho(k));
            assert!((flows.total[k + 1] - single).abs() < 1e-12);
        }
    }

    #[test]
    fn risky_bar_term_vanishes_on_matching_rates() {
        // r^{d+2,h} = r^{c,b} and r^{c,l} = r^{d+1} = r.
        let g = grid();
        let acc = accounts(&g);
        let c: Vec<f64> = (0..=20)
            .map(|k| if k == 20 { 0.0 } else { (k as f64).cos() * 3.0 })
            .collect();
        let m = Margin::risky(0, "Bcl", "Bh", "Bd1", "Bh");
        let flows = margin_interest(&c, &m, &acc, &g, "B").unwrap();
        assert!(flows.total_bar.unwrap().iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn zero_collateral_has_no_interest() {
        let g = grid();
        let acc = accounts(&g);
        let m = Margin::cash_segregated("Bc", "Bc", "Bd1", "Bh");
        let flows = margin_interest(&vec![0.0; 21], &m, &acc, &g, "B").unwrap();
        assert!(flows.total.iter().chain(&flows.f_c).all(|&x| x == 0.0));
    }
}
