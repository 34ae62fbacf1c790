//! Forward evolution of self-financing portfolios.
//!
//! One step of every convention has the same shape: the trading wealth `W_k`
//! and the risky positions `ξ_k` induce funding positions `ψ_k` through the
//! convention's rules, and
//!
//! `V_{k+1} = V_k + Σ ξ (ΔS + ΔA^i) + Σ ψ ΔB + ΔM_k + ΔA_{k+1}`,
//!
//! where `ΔM` collects margin-account interest. Without collateral `W = V`.
//! With collateral the split between `V`, the portfolio value `V^p` and the
//! adjustment `V^c = V - V^p` follows the margin convention.

use std::sync::Arc;

use crate::contracts::{
    haircut_amount, offset_amount, split_collateral, CollateralSpec, Contract, HaircutForm, Margin,
    MarginConvention,
};
use crate::market::{
    increment_residual, Account, AccountSet, Lattice, LatticeProcess, MarketPath, TimeGrid,
};
use crate::{neg, pos, Error, Result};

/// What a strategy can see when choosing positions at node `k`.
#[derive(Debug, Clone, Copy)]
pub struct State<'a> {
    pub k: usize,
    pub t: f64,
    pub prices: &'a [f64],
    pub node: Option<usize>,
    /// Wealth `V_k` after the flows at `t_k`.
    pub wealth: f64,
}

type PositionFn = Arc<dyn Fn(&State) -> Vec<f64> + Send + Sync>;

/// Predictable risky positions `ξ` (asset units) and optional `ζ`.
#[derive(Clone)]
pub struct Strategy {
    xi: PositionFn,
    zeta: Option<PositionFn>,
}

impl std::fmt::Debug for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Strategy(zeta: {})", self.zeta.is_some())
    }
}

impl Strategy {
    pub fn from_fn(f: impl Fn(&State) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Strategy {
            xi: Arc::new(f),
            zeta: None,
        }
    }

    /// No risky positions.
    pub fn zero(d: usize) -> Self {
        Strategy::from_fn(move |_| vec![0.0; d])
    }

    /// Hold fixed units from time `from` on.
    pub fn buy_and_hold(units: Vec<f64>, from: f64) -> Self {
        Strategy::from_fn(move |s| {
            if s.t >= from - 1e-12 {
                units.clone()
            } else {
                vec![0.0; units.len()]
            }
        })
    }

    /// Positions read from per-asset lattice tables; needs lattice paths.
    pub fn from_lattice(tables: Vec<LatticeProcess>) -> Self {
        Strategy::from_fn(move |s| match s.node {
            Some(node) => tables
                .iter()
                .map(|t| {
                    t.levels
                        .get(s.k)
                        .and_then(|l| l.get(node))
                        .copied()
                        .unwrap_or(0.0)
                })
                .collect(),
            None => vec![f64::NAN; tables.len()],
        })
    }

    /// Attach `ζ^i = ξ^i S^i + ψ^i B^i`, the net investment in asset `i` and its account.
    pub fn with_zeta(mut self, f: impl Fn(&State) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.zeta = Some(Arc::new(f));
        self
    }

    pub fn positions(&self, s: &State) -> Vec<f64> {
        (self.xi)(s)
    }

    fn zetas(&self, s: &State) -> Option<Vec<f64>> {
        self.zeta.as_ref().map(|z| z(s))
    }

    /// Sum of two strategies (positions add; `ζ` is dropped).
    pub fn plus(&self, other: &Strategy) -> Strategy {
        let (a, b) = (self.xi.clone(), other.xi.clone());
        Strategy::from_fn(move |s| a(s).iter().zip(b(s)).map(|(x, y)| x + y).collect())
    }
}

/// Funding and netting conventions for the unsecured and repo accounts.
#[derive(Debug, Clone, PartialEq)]
pub enum TradingConvention {
    /// One cash account `B`, asset `i` funded by `B^i` (`ζ^i = 0` unless given).
    Basic { cash: String, repo: Vec<String> },
    /// Assets `1..=k` funded from `B`, the rest by their repo accounts.
    CommonUnsecured {
        cash: String,
        repo: Vec<String>,
        k: usize,
    },
    /// Lending/borrowing cash accounts; assets `1..=k` funded from cash.
    SplitCashRates {
        lend: String,
        borrow: String,
        repo: Vec<String>,
        k: usize,
    },
    /// Long/short cash of each asset offset in `B^{i,l}` / `B^{i,b}`.
    Offsetting {
        lend: String,
        borrow: String,
        repo_lend: Vec<String>,
        repo_borrow: Vec<String>,
    },
    /// Short-sale proceeds netted into cash, long positions funded by `B^{i,b}`.
    PartialNetting {
        lend: String,
        borrow: String,
        repo_borrow: Vec<String>,
    },
}

impl TradingConvention {
    /// Basic model with every asset funded by the cash account.
    pub fn basic_single(cash: &str, d: usize) -> Self {
        TradingConvention::Basic {
            cash: cash.into(),
            repo: vec![cash.into(); d],
        }
    }

    /// Account earning positive cash (`B` or `B^l`).
    pub fn lend_account(&self) -> &str {
        match self {
            TradingConvention::Basic { cash, .. }
            | TradingConvention::CommonUnsecured { cash, .. } => cash,
            TradingConvention::SplitCashRates { lend, .. }
            | TradingConvention::Offsetting { lend, .. }
            | TradingConvention::PartialNetting { lend, .. } => lend,
        }
    }

    /// Account charged on negative cash (`B` or `B^b`).
    pub fn borrow_account(&self) -> &str {
        match self {
            TradingConvention::Basic { cash, .. }
            | TradingConvention::CommonUnsecured { cash, .. } => cash,
            TradingConvention::SplitCashRates { borrow, .. }
            | TradingConvention::Offsetting { borrow, .. }
            | TradingConvention::PartialNetting { borrow, .. } => borrow,
        }
    }

    pub fn n_assets(&self) -> usize {
        match self {
            TradingConvention::Basic { repo, .. }
            | TradingConvention::CommonUnsecured { repo, .. }
            | TradingConvention::SplitCashRates { repo, .. } => repo.len(),
            TradingConvention::Offsetting { repo_lend, .. } => repo_lend.len(),
            TradingConvention::PartialNetting { repo_borrow, .. } => repo_borrow.len(),
        }
    }

    fn accepts_zeta(&self) -> bool {
        !matches!(
            self,
            TradingConvention::Offsetting { .. } | TradingConvention::PartialNetting { .. }
        )
    }

    /// Position tracks `(label, account)` of the convention.
    fn tracks(&self) -> Result<Vec<(String, String)>> {
        let mut t = Vec::new();
        match self {
            TradingConvention::Basic { cash, repo } => {
                t.push(("cash".into(), cash.clone()));
                for (i, r) in repo.iter().enumerate() {
                    t.push((format!("repo_{}", i + 1), r.clone()));
                }
            }
            TradingConvention::CommonUnsecured { cash, repo, k } => {
                if *k > repo.len() {
                    return Err(Error::invalid(
                        "common-unsecured k exceeds the number of assets",
                    ));
                }
                t.push(("cash".into(), cash.clone()));
                for (i, r) in repo.iter().enumerate().skip(*k) {
                    t.push((format!("repo_{}", i + 1), r.clone()));
                }
            }
            TradingConvention::SplitCashRates {
                lend,
                borrow,
                repo,
                k,
            } => {
                if *k > repo.len() {
                    return Err(Error::invalid("split-rates k exceeds the number of assets"));
                }
                t.push(("lend".into(), lend.clone()));
                t.push(("borrow".into(), borrow.clone()));
                for (i, r) in repo.iter().enumerate().skip(*k) {
                    t.push((format!("repo_{}", i + 1), r.clone()));
                }
            }
            TradingConvention::Offsetting {
                lend,
                borrow,
                repo_lend,
                repo_borrow,
            } => {
                if repo_lend.len() != repo_borrow.len() {
                    return Err(Error::invalid(
                        "offsetting needs one lend and one borrow account per asset",
                    ));
                }
                t.push(("lend".into(), lend.clone()));
                t.push(("borrow".into(), borrow.clone()));
                for i in 0..repo_lend.len() {
                    t.push((format!("repo_lend_{}", i + 1), repo_lend[i].clone()));
                    t.push((format!("repo_borrow_{}", i + 1), repo_borrow[i].clone()));
                }
            }
            TradingConvention::PartialNetting {
                lend,
                borrow,
                repo_borrow,
            } => {
                t.push(("lend".into(), lend.clone()));
                t.push(("borrow".into(), borrow.clone()));
                for (i, r) in repo_borrow.iter().enumerate() {
                    t.push((format!("repo_borrow_{}", i + 1), r.clone()));
                }
            }
        }
        Ok(t)
    }

    /// Funding positions `ψ` per track for trading wealth `w`.
    fn fund(&self, w: f64, xi: &[f64], zeta: &[f64], s: &[f64], b: &[f64]) -> Vec<f64> {
        let xs: Vec<f64> = xi.iter().zip(s).map(|(x, s)| x * s).collect();
        let mut psi = Vec::with_capacity(b.len());
        match self {
            TradingConvention::Basic { .. } => {
                psi.push((w - zeta.iter().sum::<f64>()) / b[0]);
                for i in 0..xs.len() {
                    psi.push((zeta[i] - xs[i]) / b[1 + i]);
                }
            }
            TradingConvention::CommonUnsecured { k, .. } => {
                let own: f64 = xs[..*k].iter().sum();
                psi.push((w - own - zeta[*k..].iter().sum::<f64>()) / b[0]);
                for i in *k..xs.len() {
                    psi.push((zeta[i] - xs[i]) / b[1 + i - k]);
                }
            }
            TradingConvention::SplitCashRates { k, .. } => {
                let own: f64 = xs[..*k].iter().sum();
                let cash = w - own - zeta[*k..].iter().sum::<f64>();
                psi.push(pos(cash) / b[0]);
                psi.push(-neg(cash) / b[1]);
                for i in *k..xs.len() {
                    psi.push((zeta[i] - xs[i]) / b[2 + i - k]);
                }
            }
            TradingConvention::Offsetting { .. } => {
                psi.push(pos(w) / b[0]);
                psi.push(-neg(w) / b[1]);
                for (i, x) in xs.iter().enumerate() {
                    psi.push(neg(*x) / b[2 + 2 * i]);
                    psi.push(-pos(*x) / b[3 + 2 * i]);
                }
            }
            TradingConvention::PartialNetting { .. } => {
                let cash = w + xs.iter().map(|x| neg(*x)).sum::<f64>();
                psi.push(pos(cash) / b[0]);
                psi.push(-neg(cash) / b[1]);
                for (i, x) in xs.iter().enumerate() {
                    psi.push(-pos(*x) / b[2 + i]);
                }
            }
        }
        psi
    }
}

/// Funding position of one account along a path.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTrack {
    pub label: String,
    pub account: String,
    /// Units `ψ_k` held over `[t_k, t_{k+1})`.
    pub psi: Vec<f64>,
    /// Account values `B_k`.
    pub values: Vec<f64>,
}

impl PositionTrack {
    fn new(label: &str, account: &Account) -> Self {
        PositionTrack {
            label: label.to_string(),
            account: account.label().to_string(),
            psi: Vec::new(),
            values: account.values().to_vec(),
        }
    }

    /// Cumulative `∫ ψ dB` on the grid.
    pub fn interest(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for k in 0..self.psi.len().saturating_sub(1) {
            out.push(out[k] + self.psi[k] * (self.values[k + 1] - self.values[k]));
        }
        out
    }
}

/// Full record of a forward evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath {
    pub x: f64,
    pub times: Vec<f64>,
    /// Wealth `V`.
    pub v: Vec<f64>,
    /// Portfolio value `V^p`.
    pub vp: Vec<f64>,
    /// Adjustment `V^c = V - V^p`.
    pub vc: Vec<f64>,
    /// Gains `G` from risky positions, collateral leg included.
    pub g: Vec<f64>,
    /// Funding costs `F = Σ ∫ ψ dB` of the portfolio accounts.
    pub f: Vec<f64>,
    /// Margin-account interest `Σ ∫ η dB`.
    pub m: Vec<f64>,
    /// Cumulative contract flows `A`, with `A_0 = p`.
    pub a: Vec<f64>,
    /// Collateral amount `C`.
    pub c: Vec<f64>,
    /// Risky positions `ξ_k` (terminal row is zero).
    pub xi: Vec<Vec<f64>>,
    /// Units of the collateral asset held against posted collateral.
    pub collateral_units: Vec<f64>,
    pub collateral_asset: Option<usize>,
    pub prices: Vec<Vec<f64>>,
    pub dividends: Vec<Vec<f64>>,
    pub positions: Vec<PositionTrack>,
    pub margin_positions: Vec<PositionTrack>,
    pub nodes: Option<Vec<usize>>,
    /// Self-financing residual of this record.
    pub residual: f64,
    /// Worst haircut consistency residual (zero without haircut collateral).
    pub haircut_residual: f64,
    pub warnings: Vec<String>,
}

impl WealthPath {
    pub fn position(&self, label: &str) -> Option<&PositionTrack> {
        self.positions.iter().find(|p| p.label == label)
    }

    /// Lending (or single cash) account units.
    pub fn psi_l(&self) -> Vec<f64> {
        self.position("lend")
            .or_else(|| self.position("cash"))
            .map(|p| p.psi.clone())
            .unwrap_or_else(|| vec![0.0; self.v.len()])
    }

    /// Borrowing account units (zero for single-cash conventions).
    pub fn psi_b(&self) -> Vec<f64> {
        self.position("borrow")
            .map(|p| p.psi.clone())
            .unwrap_or_else(|| vec![0.0; self.v.len()])
    }

    /// Contract jumps `ΔA_k` (index 0 holds `A_0`).
    pub fn jumps(&self) -> Vec<f64> {
        (0..self.a.len())
            .map(|k| {
                if k == 0 {
                    self.a[0]
                } else {
                    self.a[k] - self.a[k - 1]
                }
            })
            .collect()
    }

    pub fn terminal(&self) -> f64 {
        *self.v.last().unwrap_or(&f64::NAN)
    }
}

/// Forward evolution without collateral.
pub fn evolve_wealth(
    convention: &TradingConvention,
    strategy: &Strategy,
    contract: &Contract,
    x: f64,
    path: &MarketPath,
    accounts: &AccountSet,
) -> Result<WealthPath> {
    evolve(
        convention,
        None,
        strategy,
        contract,
        &CollateralSpec::None,
        x,
        path,
        accounts,
    )
}

/// Forward evolution with a margin account.
#[allow(clippy::too_many_arguments)]
pub fn evolve_collateralized(
    convention: &TradingConvention,
    margin: &Margin,
    strategy: &Strategy,
    contract: &Contract,
    collateral: &CollateralSpec,
    x: f64,
    path: &MarketPath,
    accounts: &AccountSet,
) -> Result<WealthPath> {
    evolve(
        convention,
        Some(margin),
        strategy,
        contract,
        collateral,
        x,
        path,
        accounts,
    )
}

/// Benchmark `V^0_k(x) = x^+ B^l_k - x^- B^b_k`.
pub fn benchmark_value(x: f64, lend: &Account, borrow: &Account, k: usize) -> f64 {
    pos(x) * lend.value(k) - neg(x) * borrow.value(k)
}

#[allow(clippy::too_many_arguments)]
fn evolve(
    conv: &TradingConvention,
    margin: Option<&Margin>,
    strategy: &Strategy,
    contract: &Contract,
    collateral: &CollateralSpec,
    x: f64,
    path: &MarketPath,
    accounts: &AccountSet,
) -> Result<WealthPath> {
    let lend = accounts.get(conv.lend_account())?;
    let borrow = accounts.get(conv.borrow_account())?;
    let grid: TimeGrid = *lend.grid();
    let n = grid.n_steps();
    let d = conv.n_assets();
    if path.len() != n + 1 {
        return Err(Error::invalid(format!(
            "path has {} nodes, grid needs {}",
            path.len(),
            n + 1
        )));
    }
    if path.n_assets() != d {
        return Err(Error::invalid(format!(
            "path carries {} assets, convention expects {d}",
            path.n_assets()
        )));
    }
    if !x.is_finite() {
        return Err(Error::invalid("initial endowment must be finite"));
    }
    if strategy.zeta.is_some() && !conv.accepts_zeta() {
        return Err(Error::invalid("zeta positions are only defined for the basic, common-unsecured and split-rate conventions"));
    }
    if margin.is_none() && !collateral.is_none() {
        return Err(Error::invalid("collateral needs a margin convention"));
    }
    let schedule = contract.schedule(&grid)?;

    let mut warnings = Vec::new();
    if (0..n).any(|k| lend.rho(k) > borrow.rho(k)) {
        warnings.push(format!(
            "lending rate of {} exceeds borrowing rate of {}",
            lend.label(),
            borrow.label()
        ));
    }

    // Portfolio tracks, then the collateral posting account if any.
    let track_defs = conv.tracks()?;
    let mut track_accounts: Vec<&Account> = track_defs
        .iter()
        .map(|(_, a)| accounts.get(a))
        .collect::<Result<Vec<_>>>()?;
    let mut positions: Vec<PositionTrack> = track_defs
        .iter()
        .zip(&track_accounts)
        .map(|((l, _), a)| PositionTrack::new(l, a))
        .collect();
    let n_base = positions.len();

    let mut collateral_asset = None;
    let mut margin_tracks: Vec<PositionTrack> = Vec::new();
    let mut margin_accounts: Vec<&Account> = Vec::new();
    let mut posting: Option<&Account> = None;
    let mut holding: Option<&Account> = None;
    if let Some(m) = margin {
        m.validate(accounts)?;
        let cl = accounts.get(&m.lend)?;
        let cb = accounts.get(&m.borrow)?;
        margin_tracks.push(PositionTrack::new("margin_lend", cl));
        margin_tracks.push(PositionTrack::new("margin_borrow", cb));
        margin_accounts.push(cl);
        margin_accounts.push(cb);
        if let Some(h) = m.holding.as_deref() {
            if !matches!(m.convention, MarginConvention::CashRehypothecated) {
                let h = accounts.get(h)?;
                margin_tracks.push(PositionTrack::new("holding", h));
                margin_accounts.push(h);
                holding = Some(h);
            }
        }
        if let Some(p) = m.posting.as_deref() {
            let p = accounts.get(p)?;
            positions.push(PositionTrack::new("posting", p));
            track_accounts.push(p);
            posting = Some(p);
        }
        if let MarginConvention::RiskyCollateral { asset } = m.convention {
            if asset >= d {
                return Err(Error::invalid(format!(
                    "collateral asset {asset} is not on the path"
                )));
            }
            collateral_asset = Some(asset);
        }
    }
    let haircut = collateral.haircuts()?;
    let haircut_benchmark: Option<&Account> = match haircut {
        Some((_, _, HaircutForm::WealthOffset { account })) => Some(accounts.get(account)?),
        _ => None,
    };

    let times = grid.times();
    let mut v = Vec::with_capacity(n + 1);
    let mut vp = Vec::with_capacity(n + 1);
    let mut vc = Vec::with_capacity(n + 1);
    let mut gs = vec![0.0];
    let mut fs = vec![0.0];
    let mut ms = vec![0.0];
    let mut a_cum = vec![contract.p];
    let mut cs = Vec::with_capacity(n + 1);
    let mut xis = Vec::with_capacity(n + 1);
    let mut cunits = Vec::with_capacity(n + 1);
    let mut haircut_residual: f64 = 0.0;

    let mut wealth = x + contract.p;
    for k in 0..=n {
        let s = &path.prices[k];
        let state = State {
            k,
            t: times[k],
            prices: s,
            node: path.node(k),
            wealth,
        };

        // Collateral amount at node k.
        let c = match collateral.exogenous(k, n, s)? {
            Some(c) => c,
            None => {
                let (d1, d2, form) = haircut.expect("endogenous collateral carries haircuts");
                let rule = |vv: f64| match form {
                    HaircutForm::MarkToMarket => {
                        haircut_amount(vv, benchmark_value(x, lend, borrow, k), d1, d2)
                    }
                    HaircutForm::WealthOffset { .. } => offset_amount(
                        vv - x * haircut_benchmark.map_or(1.0, |b| b.value(k)),
                        d1,
                        d2,
                    ),
                };
                let c = rule(wealth);
                // Rebuild V from V^p and V^c and check the rule still returns C.
                let (vp_k, vc_k) = split_wealth(margin, wealth, c);
                let resid = (rule(vp_k + vc_k) - c).abs();
                haircut_residual = haircut_residual.max(resid);
                if resid > 1e-10 * (1.0 + c.abs()) {
                    return Err(Error::Convergence {
                        step: k,
                        residual: resid,
                    });
                }
                c
            }
        };
        if !c.is_finite() {
            return Err(Error::numeric(k, "non-finite collateral amount"));
        }
        let (cp, cm) = split_collateral(c);
        let (vp_k, vc_k) = split_wealth(margin, wealth, c);

        // Trading wealth for the original assets and the collateral legs.
        let (w, post_value, c_units) = match margin.map(|m| m.convention) {
            None => (wealth, 0.0, 0.0),
            Some(MarginConvention::RiskyCollateral { asset }) => (vp_k, -cm, cm / s[asset]),
            Some(MarginConvention::CashSegregated) => (vp_k + cm, -cm, 0.0),
            Some(MarginConvention::CashRehypothecated) => {
                if posting.is_some() {
                    (vp_k + cm, -cm, 0.0)
                } else {
                    (vp_k, 0.0, 0.0)
                }
            }
        };

        let xi = if k < n {
            let xi = strategy.positions(&state);
            if xi.len() != d {
                return Err(Error::invalid(format!(
                    "strategy returned {} positions for {d} assets",
                    xi.len()
                )));
            }
            if xi.iter().any(|q| !q.is_finite()) {
                return Err(Error::numeric(k, "non-finite strategy position"));
            }
            xi
        } else {
            vec![0.0; d]
        };
        let zeta = match (k < n).then(|| strategy.zetas(&state)).flatten() {
            Some(z) if z.len() == d => z,
            Some(_) => return Err(Error::invalid("zeta must have one entry per asset")),
            None => vec![0.0; d],
        };
        let bvals: Vec<f64> = track_accounts[..n_base]
            .iter()
            .map(|a| a.value(k))
            .collect();
        let psi = conv.fund(w, &xi, &zeta, s, &bvals);
        check_signs(conv, &psi, k)?;
        for (t, p) in positions.iter_mut().zip(&psi) {
            t.psi.push(*p);
        }
        if let Some(p) = posting {
            positions[n_base].psi.push(post_value / p.value(k));
        }
        if !margin_tracks.is_empty() {
            margin_tracks[0].psi.push(cm / margin_accounts[0].value(k));
            margin_tracks[1].psi.push(-cp / margin_accounts[1].value(k));
            if let Some(h) = holding {
                margin_tracks[2].psi.push(cp / h.value(k));
            }
        }

        v.push(wealth);
        vp.push(vp_k);
        vc.push(vc_k);
        cs.push(c);
        cunits.push(c_units);
        xis.push(xi.clone());

        if k == n {
            break;
        }

        // Step k -> k+1.
        let s1 = &path.prices[k + 1];
        let div = &path.dividends[k + 1];
        let mut dg: f64 = (0..d).map(|i| xi[i] * (s1[i] - s[i] + div[i])).sum();
        if let Some(ca) = collateral_asset {
            dg += c_units * (s1[ca] - s[ca] + div[ca]);
        }
        let df: f64 = positions
            .iter()
            .zip(&track_accounts)
            .map(|(t, a)| t.psi[k] * a.delta(k))
            .sum();
        let dm: f64 = margin_tracks
            .iter()
            .zip(&margin_accounts)
            .map(|(t, a)| t.psi[k] * a.delta(k))
            .sum();
        let da = schedule.jump(k + 1, s1);
        wealth += dg + df + dm + da;
        if !wealth.is_finite() {
            return Err(Error::numeric(k + 1, "wealth became non-finite"));
        }
        gs.push(gs[k] + dg);
        fs.push(fs[k] + df);
        ms.push(ms[k] + dm);
        a_cum.push(a_cum[k] + da);
    }

    let mut out = WealthPath {
        x,
        times,
        v,
        vp,
        vc,
        g: gs,
        f: fs,
        m: ms,
        a: a_cum,
        c: cs,
        xi: xis,
        collateral_units: cunits,
        collateral_asset,
        prices: path.prices.clone(),
        dividends: path.dividends.clone(),
        positions,
        margin_positions: margin_tracks,
        nodes: path.nodes.clone(),
        residual: 0.0,
        haircut_residual,
        warnings,
    };
    out.residual = self_financing_residual(&out);
    Ok(out)
}

/// `(V^p, V^c)` from the wealth and the collateral amount.
fn split_wealth(margin: Option<&Margin>, v: f64, c: f64) -> (f64, f64) {
    let vc = match margin.map(|m| m.convention) {
        None => 0.0,
        Some(MarginConvention::RiskyCollateral { .. }) | Some(MarginConvention::CashSegregated) => {
            neg(c)
        }
        Some(MarginConvention::CashRehypothecated) => -c,
    };
    (v - vc, vc)
}

fn check_signs(conv: &TradingConvention, psi: &[f64], k: usize) -> Result<()> {
    let split = matches!(
        conv,
        TradingConvention::SplitCashRates { .. }
            | TradingConvention::Offsetting { .. }
            | TradingConvention::PartialNetting { .. }
    );
    if split && (psi[0] < 0.0 || psi[1] > 0.0 || psi[0] * psi[1] != 0.0) {
        return Err(Error::engine(
            k,
            "cash positions violate lend/borrow sign constraints",
        ));
    }
    Ok(())
}

/// Worst violation of the self-financing identities recorded on a path.
///
/// Checks, at every node, the portfolio budget `V^p = Σ ξ S + Σ ψ B`, the
/// integral identity `V^p = x + G + F + A + M - V^c` with all integrals
/// recomputed from the recorded positions, and `V = V^p + V^c`.
pub fn self_financing_residual(path: &WealthPath) -> f64 {
    let len = path.v.len();
    let mut g = 0.0;
    let mut f = 0.0;
    let mut m = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..len {
        if k > 0 {
            let j = k - 1;
            let (s0, s1, div) = (&path.prices[j], &path.prices[k], &path.dividends[k]);
            g += path.xi[j]
                .iter()
                .enumerate()
                .map(|(i, q)| q * (s1[i] - s0[i] + div[i]))
                .sum::<f64>();
            if let Some(ca) = path.collateral_asset {
                g += path.collateral_units[j] * (s1[ca] - s0[ca] + div[ca]);
            }
            f += path
                .positions
                .iter()
                .map(|t| t.psi[j] * (t.values[k] - t.values[j]))
                .sum::<f64>();
            m += path
                .margin_positions
                .iter()
                .map(|t| t.psi[j] * (t.values[k] - t.values[j]))
                .sum::<f64>();
        }
        let s = &path.prices[k];
        let mut budget: f64 = path.xi[k].iter().zip(s).map(|(q, s)| q * s).sum();
        if let Some(ca) = path.collateral_asset {
            budget += path.collateral_units[k] * s[ca];
        }
        budget += path
            .positions
            .iter()
            .map(|t| t.psi[k] * t.values[k])
            .sum::<f64>();
        let integral = path.x + g + f + path.a[k] + m - path.vc[k];
        let scale = 1.0;
        worst = worst
            .max((path.vp[k] - budget).abs() / scale)
            .max((path.vp[k] - integral).abs() / scale)
            .max((path.v[k] - path.vp[k] - path.vc[k]).abs() / scale);
    }
    worst
}

/// Additive form `K_k = S_k - S_0 + A^i_k - Σ S_l ρ_l` along a path.
pub fn k_process(path: &MarketPath, i: usize, b: &Account) -> Vec<f64> {
    let mut out = vec![0.0];
    for k in 0..path.len() - 1 {
        let inc = path.prices[k + 1][i] - path.prices[k][i] + path.dividends[k + 1][i]
            - path.prices[k][i] * b.rho(k);
        out.push(out[k] + inc);
    }
    out
}

/// Multiplicative form `K_k = Σ B_{l+1} ΔŜ^{cld}_l` along a path.
pub fn k_process_mult(path: &MarketPath, i: usize, b: &Account) -> Vec<f64> {
    let mut out = vec![0.0];
    for k in 0..path.len() - 1 {
        let d_hat = (path.prices[k + 1][i] + path.dividends[k + 1][i]) / b.value(k + 1)
            - path.prices[k][i] / b.value(k);
        out.push(out[k] + b.value(k + 1) * d_hat);
    }
    out
}

/// Martingale residual of the increments of `K^i` on a lattice.
pub fn k_residual(lattice: &Lattice, i: usize, b: &Account) -> f64 {
    increment_residual(lattice, |k, idx, c| {
        let s0 = lattice.price(i, k, idx);
        lattice.price(i, k + 1, c.index) - s0 + lattice.dividend(i, k, idx) - s0 * b.rho(k)
    })
}

/// `U(A)` from cumulative flows: `U_0 = -A_0`,
/// `U_{k+1} = U_k + ρ^l_k U_k^+ - ρ^b_k U_k^- - ΔA_{k+1}`.
pub fn solve_u_from(a: &[f64], lend: &Account, borrow: &Account) -> Vec<f64> {
    let mut u = Vec::with_capacity(a.len());
    u.push(-a[0]);
    for k in 0..a.len() - 1 {
        let uk = u[k];
        u.push(uk + lend.rho(k) * pos(uk) - borrow.rho(k) * neg(uk) - (a[k + 1] - a[k]));
    }
    u
}

/// `U(A)` for a contract with fixed amounts.
pub fn solve_u(
    contract: &Contract,
    lend: &Account,
    borrow: &Account,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let a = crate::contracts::cumulative_process(contract, grid)?;
    Ok(solve_u_from(&a, lend, borrow))
}

/// Netted wealth `V + U(A)`.
pub fn netted_wealth(path: &WealthPath, lend: &Account, borrow: &Account) -> Vec<f64> {
    let u = solve_u_from(&path.a, lend, borrow);
    path.v.iter().zip(u).map(|(v, u)| v + u).collect()
}

/// Equal-rate netted wealth `V - B Σ_{l<=k} ΔA_l / B_l`.
pub fn netted_wealth_equal_rates(path: &WealthPath, b: &Account) -> Vec<f64> {
    let jumps = path.jumps();
    let mut acc = 0.0;
    (0..path.v.len())
        .map(|k| {
            acc += jumps[k] / b.value(k);
            path.v[k] - b.value(k) * acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{calibrate_lattice, AssetModel};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    fn accounts(g: &TimeGrid) -> AccountSet {
        let mut s = AccountSet::new();
        for (l, r) in [
            ("B", 0.03),
            ("Bl", 0.02),
            ("Bb", 0.05),
            ("B1", 0.04),
            ("B1b", 0.045),
        ] {
            s.insert(Account::constant(l, r, g).unwrap()).unwrap();
        }
        s
    }

    fn conventions() -> Vec<TradingConvention> {
        vec![
            TradingConvention::Basic {
                cash: "B".into(),
                repo: vec!["B1".into()],
            },
            TradingConvention::CommonUnsecured {
                cash: "B".into(),
                repo: vec!["B1".into()],
                k: 1,
            },
            TradingConvention::SplitCashRates {
                lend: "Bl".into(),
                borrow: "Bb".into(),
                repo: vec!["B1".into()],
                k: 0,
            },
            TradingConvention::Offsetting {
                lend: "Bl".into(),
                borrow: "Bb".into(),
                repo_lend: vec!["B1".into()],
                repo_borrow: vec!["B1b".into()],
            },
            TradingConvention::PartialNetting {
                lend: "Bl".into(),
                borrow: "Bb".into(),
                repo_borrow: vec!["B1b".into()],
            },
        ]
    }

    #[test]
    fn zero_strategy_accrues_cash() {
        let g = grid(50);
        let acc = accounts(&g);
        let a = AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B1");
        let lat = calibrate_lattice(&[a], &acc, &g).unwrap();
        let path = lat.sample_paths(1, 3).unwrap().pop().unwrap();
        for conv in conventions() {
            let w = evolve_wealth(
                &conv,
                &Strategy::zero(1),
                &Contract::new(0.0),
                2.0,
                &path,
                &acc,
            )
            .unwrap();
            let b = acc.get(conv.lend_account()).unwrap();
            for k in 0..=50 {
                assert!((w.v[k] - 2.0 * b.value(k)).abs() < 1e-12, "{conv:?}");
            }
        }
    }

    #[test]
    fn split_rates_single_outflow_is_borrowed() {
        let g = grid(40);
        let acc = accounts(&g);
        let conv = TradingConvention::SplitCashRates {
            lend: "Bl".into(),
            borrow: "Bb".into(),
            repo: vec![],
            k: 0,
        };
        let c = Contract::new(0.0).with_fixed(0.25, -1.0);
        let w = evolve_wealth(
            &conv,
            &Strategy::zero(0),
            &c,
            0.0,
            &MarketPath::empty(&g),
            &acc,
        )
        .unwrap();
        for k in 10..=40 {
            let t = g.time(k);
            assert!((w.v[k] + (0.05 * (t - 0.25)).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn loan_wealth_with_ample_endowment() {
        let g = grid(1000);
        let acc = accounts(&g);
        let conv = TradingConvention::PartialNetting {
            lend: "Bl".into(),
            borrow: "Bb".into(),
            repo_borrow: vec![],
        };
        let (x, c, rhat): (f64, f64, f64) = (10.0, 1.0, 0.05);
        let contract = Contract::new(0.0)
            .with_fixed(0.5, -c)
            .with_fixed(1.0, c * (rhat * 0.5).exp());
        let w = evolve_wealth(
            &conv,
            &Strategy::zero(0),
            &contract,
            x,
            &MarketPath::empty(&g),
            &acc,
        )
        .unwrap();
        let expected = x * 0.02f64.exp() - c * 0.01f64.exp() + c * 0.025f64.exp();
        assert!((w.terminal() - expected).abs() < 1e-12);
        let net = netted_wealth(&w, acc.get("Bl").unwrap(), acc.get("Bb").unwrap());
        assert!((net[1000] - x * 0.02f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn decomposition_and_residual_hold_for_every_convention() {
        let g = grid(30);
        let acc = accounts(&g);
        let a = AssetModel::new(1, 100.0, 0.0, 0.3, 0.02, "B1");
        let lat = calibrate_lattice(&[a], &acc, &g).unwrap();
        let strat = Strategy::from_fn(|s| vec![(s.k as f64 * 0.37).sin() * 2.0]);
        let contract = Contract::new(1.5)
            .with_fixed(0.4, -3.0)
            .with_fixed(1.0, 2.0);
        for path in lat.sample_paths(5, 11).unwrap() {
            for conv in conventions() {
                let w = evolve_wealth(&conv, &strat, &contract, 1.0, &path, &acc).unwrap();
                assert!(w.residual <= 1e-10, "{conv:?}: {}", w.residual);
                for k in 0..=30 {
                    assert!((w.v[k] - (w.x + w.g[k] + w.f[k] + w.a[k])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn corrupted_cash_position_shows_in_residual() {
        let g = grid(10);
        let acc = accounts(&g);
        let conv = TradingConvention::Basic {
            cash: "B".into(),
            repo: vec![],
        };
        let mut w = evolve_wealth(
            &conv,
            &Strategy::zero(0),
            &Contract::new(0.0),
            1.0,
            &MarketPath::empty(&g),
            &acc,
        )
        .unwrap();
        w.positions[0].psi[4] += 0.25;
        let r = self_financing_residual(&w);
        let b4 = acc.get("B").unwrap().value(4);
        assert!((r - 0.25 * b4).abs() < 1e-12);
    }

    #[test]
    fn collapse_of_split_and_offsetting_to_basic() {
        let g = grid(25);
        let mut acc = accounts(&g);
        acc.insert(Account::constant("Bx", 0.03, &g).unwrap())
            .unwrap();
        let a = AssetModel::new(1, 50.0, 0.0, 0.25, 0.0, "B1");
        let lat = calibrate_lattice(&[a], &acc, &g).unwrap();
        let strat = Strategy::from_fn(|s| vec![if s.k % 3 == 0 { 1.0 } else { -0.5 }]);
        let basic = TradingConvention::Basic {
            cash: "B".into(),
            repo: vec!["B1".into()],
        };
        let split = TradingConvention::SplitCashRates {
            lend: "B".into(),
            borrow: "Bx".into(),
            repo: vec!["B1".into()],
            k: 0,
        };
        let off = TradingConvention::Offsetting {
            lend: "B".into(),
            borrow: "Bx".into(),
            repo_lend: vec!["B1".into()],
            repo_borrow: vec!["B1".into()],
        };
        for path in lat.sample_paths(4, 2).unwrap() {
            let c = Contract::new(0.0).with_fixed(0.5, -80.0);
            let wb = evolve_wealth(&basic, &strat, &c, 10.0, &path, &acc).unwrap();
            for conv in [&split, &off] {
                let w = evolve_wealth(conv, &strat, &c, 10.0, &path, &acc).unwrap();
                for k in 0..=25 {
                    assert!((w.v[k] - wb.v[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn u_process_examples() {
        let g = grid(20);
        let acc = accounts(&g);
        let (bl, bb) = (acc.get("Bl").unwrap(), acc.get("Bb").unwrap());
        let pay = solve_u(&Contract::new(0.0).with_fixed(0.25, -1.0), bl, bb, &g).unwrap();
        let recv = solve_u(&Contract::new(0.0).with_fixed(0.25, 1.0), bl, bb, &g).unwrap();
        for k in 5..=20 {
            let t = g.time(k);
            assert!((pay[k] - (0.02 * (t - 0.25)).exp()).abs() < 1e-12);
            assert!((recv[k] + (0.05 * (t - 0.25)).exp()).abs() < 1e-12);
        }
        assert!(solve_u(&Contract::new(0.0), bl, bb, &g)
            .unwrap()
            .iter()
            .all(|&u| u == 0.0));
    }

    #[test]
    fn k_forms_agree_and_are_martingales() {
        let g = grid(40);
        let acc = accounts(&g);
        let a = AssetModel::new(1, 100.0, 0.0, 0.2, 0.03, "B1");
        let lat = calibrate_lattice(&[a], &acc, &g).unwrap();
        let b = acc.get("B1").unwrap();
        assert!(k_residual(&lat, 0, b) <= 1e-12);
        for p in lat.sample_paths(3, 9).unwrap() {
            let add = k_process(&p, 0, b);
            let mul = k_process_mult(&p, 0, b);
            for k in 0..=40 {
                assert!((add[k] - mul[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_rate_k_is_price_change() {
        let g = grid(5);
        let b = Account::constant("B", 0.0, &g).unwrap();
        let p =
            MarketPath::from_prices((0..6).map(|k| vec![100.0 + k as f64]).collect(), &[0.0], &g)
                .unwrap();
        let kp = k_process(&p, 0, &b);
        for k in 0..6 {
            assert_eq!(kp[k], k as f64);
        }
    }
}
