//! Time grids, funding accounts, risky assets, calibrated binomial lattices
//! and simulated scenarios.
//!
//! Accounts accrue exactly: `B_{k+1} = B_k exp(∫ r)` over each grid step, and
//! the per-step return `ρ_k = B_{k+1}/B_k - 1` is what every funding integral
//! on the grid uses. A lattice factor is calibrated against a reference
//! account so that `E_q[S_{k+1} + ΔA_{k+1}] = S_k (1 + ρ_k)` holds exactly,
//! which makes the discounted cumulative-dividend price a one-step martingale
//! at every node.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Uniform grid `t_0 < t_1 < ... < t_n` on `[t0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::invalid("grid endpoints must be finite"));
        }
        if t_end <= t0 {
            return Err(Error::invalid(format!(
                "grid needs T > t0, got t0 = {t0}, T = {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        Ok(TimeGrid { t0, t_end, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Node time `t_k`; the last node is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Nearest node to `t`. Fails when `t` is more than `dt/2` away from the grid.
    pub fn snap(&self, t: f64) -> Result<usize> {
        if !t.is_finite() {
            return Err(Error::invalid("non-finite date"));
        }
        let dt = self.dt();
        let raw = ((t - self.t0) / dt).round();
        let slack = 1e-9 * dt;
        if raw < 0.0 || raw > self.n_steps as f64 {
            return Err(Error::invalid(format!(
                "date {t} lies outside the grid [{}, {}]",
                self.t0, self.t_end
            )));
        }
        let k = raw as usize;
        if (t - self.time(k)).abs() > 0.5 * dt + slack {
            return Err(Error::invalid(format!(
                "date {t} cannot be snapped within dt/2"
            )));
        }
        Ok(k)
    }

    /// Index of the first node with `t_k >= t` (up to rounding).
    pub fn first_at_or_after(&self, t: f64) -> usize {
        let dt = self.dt();
        let x = (t - self.t0) / dt - 1e-9;
        if x <= 0.0 {
            0
        } else {
            (x.ceil() as usize).min(self.n_steps)
        }
    }
}

/// Piecewise-constant short rate, right-continuous, in 1/years.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFn {
    /// Segment start times; the first segment also extends to `-inf`.
    starts: Vec<f64>,
    rates: Vec<f64>,
}

impl RateFn {
    pub fn constant(r: f64) -> Self {
        RateFn {
            starts: vec![f64::NEG_INFINITY],
            rates: vec![r],
        }
    }

    /// Segments given as `(start, rate)` pairs in increasing start order.
    pub fn piecewise(segments: &[(f64, f64)]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("rate function needs at least one segment"));
        }
        for w in segments.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("rate segment starts must increase"));
            }
        }
        let mut starts: Vec<f64> = segments.iter().map(|s| s.0).collect();
        starts[0] = f64::NEG_INFINITY;
        Ok(RateFn {
            starts,
            rates: segments.iter().map(|s| s.1).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.rates.iter().all(|r| r.is_finite()) && self.starts[1..].iter().all(|s| s.is_finite())
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let mut r = self.rates[0];
        for (s, v) in self.starts.iter().zip(&self.rates) {
            if t >= *s {
                r = *v;
            }
        }
        r
    }

    /// Exact `∫_a^b r(u) du` for `a <= b`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        let mut total = 0.0;
        for i in 0..self.rates.len() {
            let lo = self.starts[i].max(a);
            let hi = if i + 1 < self.starts.len() {
                self.starts[i + 1].min(b)
            } else {
                b
            };
            if hi > lo {
                total += self.rates[i] * (hi - lo);
            }
        }
        total
    }

    /// The same rate shifted by a constant.
    pub fn shifted(&self, by: f64) -> Self {
        RateFn {
            starts: self.starts.clone(),
            rates: self.rates.iter().map(|r| r + by).collect(),
        }
    }
}

/// Deterministic funding account on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Account {
    label: String,
    rate: RateFn,
    grid: TimeGrid,
    values: Vec<f64>,
    rho: Vec<f64>,
}

/// Build an account with `B_0 = 1` at time zero and exact exponential accrual.
pub fn build_account(label: &str, rate: RateFn, grid: &TimeGrid) -> Result<Account> {
    if !rate.is_finite() {
        return Err(Error::invalid(format!("account {label}: non-finite rate")));
    }
    let n = grid.n_steps();
    let mut values = Vec::with_capacity(n + 1);
    let mut rho = Vec::with_capacity(n);
    values.push(rate.integral(0.0, grid.t0()).exp());
    for k in 0..n {
        let inc = rate.integral(grid.time(k), grid.time(k + 1));
        values.push(values[k] * inc.exp());
        rho.push(inc.exp_m1());
    }
    Ok(Account {
        label: label.to_string(),
        rate,
        grid: *grid,
        values,
        rho,
    })
}

impl Account {
    pub fn constant(label: &str, r: f64, grid: &TimeGrid) -> Result<Self> {
        build_account(label, RateFn::constant(r), grid)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn rate(&self) -> &RateFn {
        &self.rate
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `B_{t_k}`.
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-step return `ρ_k = B_{k+1}/B_k - 1`.
    pub fn rho(&self, k: usize) -> f64 {
        self.rho[k]
    }

    /// Average short rate over step `k`.
    pub fn step_rate(&self, k: usize) -> f64 {
        self.rate.integral(self.grid.time(k), self.grid.time(k + 1)) / self.grid.dt()
    }

    /// `ΔB_k = B_{k+1} - B_k`.
    pub fn delta(&self, k: usize) -> f64 {
        self.values[k] * self.rho[k]
    }

    /// Same account with a new label.
    pub fn relabel(&self, label: &str) -> Self {
        let mut a = self.clone();
        a.label = label.to_string();
        a
    }
}

/// Named collection of accounts on one grid.
#[derive(Debug, Clone, Default)]
pub struct AccountSet {
    map: BTreeMap<String, Account>,
}

impl AccountSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, account: Account) -> Result<()> {
        if let Some(first) = self.map.values().next() {
            if first.grid() != account.grid() {
                return Err(Error::invalid(format!(
                    "account {} is on a different grid",
                    account.label()
                )));
            }
        }
        self.map.insert(account.label().to_string(), account);
        Ok(())
    }

    pub fn with(mut self, account: Account) -> Result<Self> {
        self.insert(account)?;
        Ok(self)
    }

    pub fn get(&self, label: &str) -> Result<&Account> {
        self.map
            .get(label)
            .ok_or_else(|| Error::invalid(format!("unknown account `{label}`")))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.map.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Risky asset with geometric dynamics and a constant dividend yield.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetModel {
    pub index: usize,
    pub s0: f64,
    /// Real-world drift, used only by scenario generation.
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    /// Label of the account that funds the asset (`B^i`).
    pub funding: String,
}

impl AssetModel {
    pub fn new(index: usize, s0: f64, mu: f64, sigma: f64, kappa: f64, funding: &str) -> Self {
        AssetModel {
            index,
            s0,
            mu,
            sigma,
            kappa,
            funding: funding.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.s0, self.mu, self.sigma, self.kappa]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!(
                "asset {}: non-finite parameter",
                self.index
            )));
        }
        if self.s0 <= 0.0 {
            return Err(Error::invalid(format!(
                "asset {}: S0 must be positive",
                self.index
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid(format!(
                "asset {}: sigma must be positive",
                self.index
            )));
        }
        Ok(())
    }
}

/// `q = (g - d)/(u - d)`; errors unless `0 < q < 1`.
pub fn risk_neutral_prob(u: f64, d: f64, g: f64) -> Result<f64> {
    let q = (g - d) / (u - d);
    if q.is_finite() && q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(Error::CalibrationInfeasible {
            step: 0,
            asset: 0,
            q,
        })
    }
}

/// One binomial factor of a product lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub asset: usize,
    pub s0: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub up: f64,
    pub down: f64,
    /// Up-probability per step.
    pub q: Vec<f64>,
    /// Label of the calibration account.
    pub reference: String,
}

/// One-step successor of a lattice node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Child {
    pub index: usize,
    pub prob: f64,
    /// Bit `i` set when factor `i` moved up.
    pub bits: u32,
}

/// Recombining product lattice of independent binomial factors (`d <= 3`).
///
/// Level `k` has `(k+1)^d` nodes indexed mixed-radix by the up-move counts
/// `(j_1, ..., j_d)`; with `d = 0` there is one node per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    grid: TimeGrid,
    factors: Vec<Factor>,
}

/// Calibrate each asset against its own funding account.
pub fn calibrate_lattice(
    assets: &[AssetModel],
    accounts: &AccountSet,
    grid: &TimeGrid,
) -> Result<Lattice> {
    let refs = assets
        .iter()
        .map(|a| accounts.get(&a.funding))
        .collect::<Result<Vec<_>>>()?;
    calibrate_lattice_against(assets, &refs, grid)
}

/// Calibrate each asset against an explicitly given reference account.
pub fn calibrate_lattice_against(
    assets: &[AssetModel],
    refs: &[&Account],
    grid: &TimeGrid,
) -> Result<Lattice> {
    if assets.len() > 3 {
        return Err(Error::invalid("lattices support at most three assets"));
    }
    if assets.len() != refs.len() {
        return Err(Error::invalid(
            "one reference account per asset is required",
        ));
    }
    let dt = grid.dt();
    let mut factors = Vec::with_capacity(assets.len());
    for (pos, (a, b)) in assets.iter().zip(refs).enumerate() {
        a.validate()?;
        if b.grid() != grid {
            return Err(Error::invalid(format!(
                "account {} is on a different grid",
                b.label()
            )));
        }
        let up = (a.sigma * dt.sqrt()).exp();
        let down = 1.0 / up;
        let mut q = Vec::with_capacity(grid.n_steps());
        for k in 0..grid.n_steps() {
            let g = 1.0 + b.rho(k) - a.kappa * dt;
            let qk = risk_neutral_prob(up, down, g).map_err(|_| Error::CalibrationInfeasible {
                step: k,
                asset: pos,
                q: (g - down) / (up - down),
            })?;
            q.push(qk);
        }
        factors.push(Factor {
            asset: a.index,
            s0: a.s0,
            sigma: a.sigma,
            kappa: a.kappa,
            up,
            down,
            q,
            reference: b.label().to_string(),
        });
    }
    Ok(Lattice {
        grid: *grid,
        factors,
    })
}

impl Lattice {
    /// Lattice without risky assets.
    pub fn deterministic(grid: &TimeGrid) -> Self {
        Lattice {
            grid: *grid,
            factors: Vec::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn reference(&self, i: usize) -> &str {
        &self.factors[i].reference
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn n_nodes(&self, k: usize) -> usize {
        (k + 1).pow(self.dim() as u32)
    }

    /// Up-move counts of node `idx` at level `k`.
    pub fn coords(&self, k: usize, idx: usize) -> Vec<usize> {
        let radix = k + 1;
        let mut rest = idx;
        (0..self.dim())
            .map(|_| {
                let j = rest % radix;
                rest /= radix;
                j
            })
            .collect()
    }

    pub fn index(&self, k: usize, coords: &[usize]) -> usize {
        let radix = k + 1;
        coords.iter().rev().fold(0, |acc, &j| acc * radix + j)
    }

    /// Price of factor `i` at node `(k, idx)`.
    pub fn price(&self, i: usize, k: usize, idx: usize) -> f64 {
        let radix = k + 1;
        let j = (idx / radix.pow(i as u32)) % radix;
        let f = &self.factors[i];
        let m = 2 * j as i64 - k as i64;
        f.s0 * (f.up.ln() * m as f64).exp()
    }

    pub fn prices(&self, k: usize, idx: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.price(i, k, idx)).collect()
    }

    /// Dividend `ΔA^i_{k+1} = κ^i S^i_k dt` paid at `k+1` from node `(k, idx)`.
    pub fn dividend(&self, i: usize, k: usize, idx: usize) -> f64 {
        self.factors[i].kappa * self.price(i, k, idx) * self.grid.dt()
    }

    pub fn children(&self, k: usize, idx: usize) -> Vec<Child> {
        let d = self.dim();
        let coords = self.coords(k, idx);
        let mut out = Vec::with_capacity(1 << d);
        for bits in 0..(1u32 << d) {
            let mut prob = 1.0;
            let mut c = coords.clone();
            for (i, ci) in c.iter_mut().enumerate() {
                let q = self.factors[i].q[k];
                if bits & (1 << i) != 0 {
                    *ci += 1;
                    prob *= q;
                } else {
                    prob *= 1.0 - q;
                }
            }
            out.push(Child {
                index: self.index(k + 1, &c),
                prob,
                bits,
            });
        }
        out
    }

    /// `E_q[X_{k+1} | (k, idx)]` for a slice of next-level values.
    pub fn expectation(&self, k: usize, idx: usize, next: &[f64]) -> f64 {
        self.children(k, idx)
            .iter()
            .map(|c| c.prob * next[c.index])
            .sum()
    }

    /// Market path following per-step move patterns.
    pub fn path(&self, moves: &[u32]) -> Result<MarketPath> {
        if moves.len() != self.n_steps() {
            return Err(Error::invalid("one move pattern per step is required"));
        }
        let d = self.dim();
        let mut coords = vec![0usize; d];
        let mut nodes = vec![0usize];
        let mut prices = vec![self.prices(0, 0)];
        let mut dividends = vec![vec![0.0; d]];
        for (k, &m) in moves.iter().enumerate() {
            let idx = *nodes.last().unwrap_or(&0);
            let div: Vec<f64> = (0..d).map(|i| self.dividend(i, k, idx)).collect();
            for (i, c) in coords.iter_mut().enumerate() {
                if m & (1 << i) != 0 {
                    *c += 1;
                }
            }
            let next = self.index(k + 1, &coords);
            nodes.push(next);
            prices.push(self.prices(k + 1, next));
            dividends.push(div);
        }
        Ok(MarketPath {
            prices,
            dividends,
            nodes: Some(nodes),
        })
    }

    /// Every path of the lattice; only sensible for small grids.
    pub fn all_paths(&self) -> Result<Vec<MarketPath>> {
        let n = self.n_steps();
        let branching = 1u64 << self.dim();
        let count = branching.checked_pow(n as u32).filter(|&c| c <= 1 << 16);
        let count = count.ok_or_else(|| Error::invalid("too many lattice paths to enumerate"))?;
        (0..count)
            .map(|mut code| {
                let moves: Vec<u32> = (0..n)
                    .map(|_| {
                        let m = (code % branching) as u32;
                        code /= branching;
                        m
                    })
                    .collect();
                self.path(&moves)
            })
            .collect()
    }

    /// Paths drawn from the lattice measure, plus the all-down and all-up paths.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Result<Vec<MarketPath>> {
        use rand::Rng;
        let n = self.n_steps();
        let full = (1u32 << self.dim()) - 1;
        let mut out = vec![self.path(&vec![0; n])?, self.path(&vec![full; n])?];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..count {
            let mut moves = Vec::with_capacity(n);
            for k in 0..n {
                let mut m = 0u32;
                for (i, f) in self.factors.iter().enumerate() {
                    if rng.random::<f64>() < f.q[k] {
                        m |= 1 << i;
                    }
                }
                moves.push(m);
            }
            out.push(self.path(&moves)?);
        }
        Ok(out)
    }

    /// Exhaustive enumeration when small, sampling otherwise.
    pub fn test_paths(&self, count: usize, seed: u64) -> Result<Vec<MarketPath>> {
        let total = (self.dim() as u32 * self.n_steps() as u32) as u64;
        if total <= 10 {
            self.all_paths()
        } else {
            self.sample_paths(count, seed)
        }
    }
}

/// Values of a process at every lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeProcess {
    pub levels: Vec<Vec<f64>>,
}

impl LatticeProcess {
    pub fn from_fn(lattice: &Lattice, f: impl Fn(usize, usize) -> f64) -> Self {
        let levels = (0..=lattice.n_steps())
            .map(|k| (0..lattice.n_nodes(k)).map(|j| f(k, j)).collect())
            .collect();
        LatticeProcess { levels }
    }

    pub fn get(&self, k: usize, idx: usize) -> f64 {
        self.levels[k][idx]
    }
}

/// `sup |E_q[X_{k+1}] - X_k|` over all non-terminal nodes.
pub fn martingale_residual(process: &LatticeProcess, lattice: &Lattice) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..lattice.n_steps() {
        for idx in 0..lattice.n_nodes(k) {
            let e = lattice.expectation(k, idx, &process.levels[k + 1]);
            worst = worst.max((e - process.levels[k][idx]).abs());
        }
    }
    worst
}

/// `sup |E_q[ΔX_{k+1}]|` for a process given through its one-step increments.
///
/// Path-dependent processes such as the cumulative-dividend price are not node
/// functions, but their increments are, so the martingale property is checked
/// in this form.
pub fn increment_residual(
    lattice: &Lattice,
    increment: impl Fn(usize, usize, &Child) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..lattice.n_steps() {
        for idx in 0..lattice.n_nodes(k) {
            let e: f64 = lattice
                .children(k, idx)
                .iter()
                .map(|c| c.prob * increment(k, idx, c))
                .sum();
            worst = worst.max(e.abs());
        }
    }
    worst
}

/// Discounted cumulative-dividend price `S_k/B_k + Σ_{l<=k} ΔA_l/B_l`.
pub fn cum_dividend_price(s: &[f64], dividends: &[f64], b: &Account) -> Result<Vec<f64>> {
    if s.len() != b.values().len() || dividends.len() != s.len() {
        return Err(Error::invalid(
            "price, dividend and account paths must share one grid",
        ));
    }
    let mut acc = 0.0;
    Ok((0..s.len())
        .map(|k| {
            if k > 0 {
                acc += dividends[k] / b.value(k);
            }
            s[k] / b.value(k) + acc
        })
        .collect())
}

/// Martingale residual of the cumulative-dividend price of factor `i`, discounted by `b`.
pub fn cum_dividend_residual(lattice: &Lattice, i: usize, b: &Account) -> f64 {
    increment_residual(lattice, |k, idx, c| {
        let next =
            (lattice.price(i, k + 1, c.index) + lattice.dividend(i, k, idx)) / b.value(k + 1);
        next - lattice.price(i, k, idx) / b.value(k)
    })
}

/// Asset prices and dividends along one path of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    /// `prices[k][i] = S^i_{t_k}`.
    pub prices: Vec<Vec<f64>>,
    /// `dividends[k][i] = ΔA^i_{t_k}`, zero at `k = 0`.
    pub dividends: Vec<Vec<f64>>,
    /// Lattice node visited at each level, when the path comes from a lattice.
    pub nodes: Option<Vec<usize>>,
}

impl MarketPath {
    /// Path without risky assets.
    pub fn empty(grid: &TimeGrid) -> Self {
        let n = grid.n_steps() + 1;
        MarketPath {
            prices: vec![Vec::new(); n],
            dividends: vec![Vec::new(); n],
            nodes: Some(vec![0; n]),
        }
    }

    /// User-supplied prices with dividends `κ^i S^i_{k-1} dt`.
    pub fn from_prices(prices: Vec<Vec<f64>>, kappas: &[f64], grid: &TimeGrid) -> Result<Self> {
        if prices.len() != grid.n_steps() + 1 {
            return Err(Error::invalid("price path length must be n_steps + 1"));
        }
        if prices.iter().any(|p| p.len() != kappas.len()) {
            return Err(Error::invalid("every price row needs one entry per asset"));
        }
        let dt = grid.dt();
        let mut dividends = vec![vec![0.0; kappas.len()]];
        for k in 1..prices.len() {
            dividends.push(
                kappas
                    .iter()
                    .zip(&prices[k - 1])
                    .map(|(kap, s)| kap * s * dt)
                    .collect(),
            );
        }
        Ok(MarketPath {
            prices,
            dividends,
            nodes: None,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.prices.first().map_or(0, |p| p.len())
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn node(&self, k: usize) -> Option<usize> {
        self.nodes.as_ref().map(|n| n[k])
    }

    /// Price path of one asset.
    pub fn asset(&self, i: usize) -> Vec<f64> {
        self.prices.iter().map(|p| p[i]).collect()
    }

    pub fn asset_dividends(&self, i: usize) -> Vec<f64> {
        self.dividends.iter().map(|p| p[i]).collect()
    }
}

/// Simulated real-world paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub seed: u64,
    pub paths: Vec<MarketPath>,
}

impl ScenarioSet {
    /// Log-Euler paths under the real-world drifts with optional correlation.
    ///
    /// Path `p` draws from stream `p` of a ChaCha generator seeded with `seed`,
    /// so the output does not depend on the number of worker threads.
    pub fn generate(
        assets: &[AssetModel],
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
        correlation: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        for a in assets {
            a.validate()?;
        }
        let d = assets.len();
        let chol = match correlation {
            Some(c) => cholesky(c, d)?,
            None => (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        };
        let dt = grid.dt();
        let kappas: Vec<f64> = assets.iter().map(|a| a.kappa).collect();
        let paths = crate::with_pool(|| {
            (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(p as u64);
                    let mut s: Vec<f64> = assets.iter().map(|a| a.s0).collect();
                    let mut prices = vec![s.clone()];
                    for _ in 0..grid.n_steps() {
                        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                        for (i, a) in assets.iter().enumerate() {
                            let w: f64 = (0..=i).map(|j| chol[i][j] * z[j]).sum();
                            s[i] *= ((a.mu - 0.5 * a.sigma * a.sigma) * dt
                                + a.sigma * dt.sqrt() * w)
                                .exp();
                        }
                        prices.push(s.clone());
                    }
                    MarketPath::from_prices(prices, &kappas, grid)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(ScenarioSet { seed, paths })
    }
}

/// Lower Cholesky factor of a small correlation matrix.
fn cholesky(c: &[Vec<f64>], d: usize) -> Result<Vec<Vec<f64>>> {
    if c.len() != d || c.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("correlation matrix must be d x d"));
    }
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            if (c[i][j] - c[j][i]).abs() > 1e-12 {
                return Err(Error::invalid("correlation matrix must be symmetric"));
            }
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                let v = c[i][i] - s;
                if v <= 0.0 {
                    return Err(Error::invalid(
                        "correlation matrix must be positive definite",
                    ));
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (c[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn zero_rate_account_is_flat() {
        let b = Account::constant("B", 0.0, &grid(10)).unwrap();
        assert!(b.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_rate_account_matches_exponential() {
        let b = Account::constant("B", 0.02, &grid(100)).unwrap();
        assert!((b.value(100) - 0.02f64.exp()).abs() < 1e-13);
        assert!((b.value(100) - 1.020201).abs() < 1e-6);
    }

    #[test]
    fn piecewise_rate_integral_is_additive() {
        let r = RateFn::piecewise(&[(0.0, 0.01), (0.5, 0.03)]).unwrap();
        let b = build_account("B", r, &grid(7)).unwrap();
        // 0.5 is not a node of a 7-step grid; exact integration still holds.
        assert!((b.value(7) - 0.02f64.exp()).abs() < 1e-13);
    }

    #[test]
    fn non_finite_rate_is_rejected() {
        assert!(matches!(
            Account::constant("B", f64::NAN, &grid(3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn symmetric_probability_example() {
        let q = risk_neutral_prob(1.1, 0.9, 1.0).unwrap();
        assert!((q - 0.5).abs() < 1e-15);
    }

    #[test]
    fn calibrated_probability_matches_plug_in() {
        let g = TimeGrid::new(0.0, 0.01, 1).unwrap();
        let b = Account::constant("B", 0.05, &g).unwrap();
        let a = AssetModel::new(1, 100.0, 0.05, 0.2, 0.0, "B");
        let lat = calibrate_lattice_against(&[a], &[&b], &g).unwrap();
        let expected =
            ((0.0005f64).exp() - (-0.02f64).exp()) / ((0.02f64).exp() - (-0.02f64).exp());
        assert!((lat.factors()[0].q[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn infeasible_calibration_names_step() {
        let g = grid(4);
        let b = build_account(
            "B",
            RateFn::piecewise(&[(0.0, 0.0), (0.5, 50.0)]).unwrap(),
            &g,
        )
        .unwrap();
        let a = AssetModel::new(1, 100.0, 0.0, 0.1, 0.0, "B");
        match calibrate_lattice_against(&[a], &[&b], &g) {
            Err(Error::CalibrationInfeasible { step, .. }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_step_dividend_recursion() {
        // kappa = r = 0.04, S with zero drift over two steps of 0.5.
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let b = Account::constant("B", 0.04, &g).unwrap();
        let path =
            MarketPath::from_prices(vec![vec![100.0], vec![100.0], vec![100.0]], &[0.04], &g)
                .unwrap();
        let cld = cum_dividend_price(&path.asset(0), &path.asset_dividends(0), &b).unwrap();
        let b1 = (0.02f64).exp();
        let b2 = (0.04f64).exp();
        let hand = [
            100.0,
            100.0 / b1 + 2.0 / b1,
            100.0 / b2 + 2.0 / b1 + 2.0 / b2,
        ];
        for k in 0..3 {
            assert!((cld[k] - hand[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_discount_single_dividend() {
        let g = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let b = Account::constant("B", 0.0, &g).unwrap();
        let cld = cum_dividend_price(&[100.0, 100.0], &[0.0, 5.0], &b).unwrap();
        assert_eq!(cld[1], 105.0);
    }

    #[test]
    fn mismatched_paths_are_rejected() {
        let g = grid(3);
        let b = Account::constant("B", 0.0, &g).unwrap();
        assert!(cum_dividend_price(&[1.0, 2.0], &[0.0, 0.0], &b).is_err());
    }

    #[test]
    fn calibrated_lattice_is_exact_martingale() {
        let g = grid(60);
        let b = Account::constant("B", 0.05, &g).unwrap();
        let a = AssetModel::new(1, 100.0, 0.1, 0.25, 0.03, "B");
        let lat = calibrate_lattice_against(&[a], &[&b], &g).unwrap();
        assert!(cum_dividend_residual(&lat, 0, &b) <= 1e-12);
    }

    #[test]
    fn undiscounted_price_has_drift() {
        let g = grid(10);
        let b = Account::constant("B", 0.05, &g).unwrap();
        let a = AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B");
        let lat = calibrate_lattice_against(&[a], &[&b], &g).unwrap();
        let s = LatticeProcess::from_fn(&lat, |k, j| lat.price(0, k, j));
        let res = martingale_residual(&s, &lat);
        // E_q[S_{k+1}] = (1 + ρ_k) S_k, so the worst gap sits at the top node of the last step.
        let top = 100.0 * (0.2 * 0.1f64.sqrt() * 9.0).exp() * b.rho(9);
        assert!((res - top).abs() < 1e-9 * top);
    }

    #[test]
    fn product_lattice_indexing_round_trips() {
        let g = grid(5);
        let b = Account::constant("B", 0.01, &g).unwrap();
        let assets = [
            AssetModel::new(1, 10.0, 0.0, 0.2, 0.0, "B"),
            AssetModel::new(2, 20.0, 0.0, 0.3, 0.0, "B"),
        ];
        let lat = calibrate_lattice_against(&assets, &[&b, &b], &g).unwrap();
        assert_eq!(lat.n_nodes(3), 16);
        for idx in 0..16 {
            assert_eq!(lat.index(3, &lat.coords(3, idx)), idx);
        }
        let total: f64 = lat.children(2, 4).iter().map(|c| c.prob).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scenarios_are_reproducible() {
        let g = grid(20);
        let assets = [
            AssetModel::new(1, 100.0, 0.05, 0.2, 0.0, "B"),
            AssetModel::new(2, 50.0, 0.02, 0.3, 0.01, "B"),
        ];
        let corr = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
        let a = ScenarioSet::generate(&assets, &g, 16, 7, Some(&corr)).unwrap();
        let b = ScenarioSet::generate(&assets, &g, 16, 7, Some(&corr)).unwrap();
        assert_eq!(a, b);
        assert!(a
            .paths
            .iter()
            .all(|p| p.prices.iter().flatten().all(|&s| s > 0.0)));
        let c = ScenarioSet::generate(&assets, &g, 16, 8, Some(&corr)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn snapping_respects_half_step() {
        let g = grid(10);
        assert_eq!(g.snap(0.5).unwrap(), 5);
        assert_eq!(g.snap(0.54).unwrap(), 5);
        assert!(g.snap(1.2).is_err());
    }
}
