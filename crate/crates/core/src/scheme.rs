//! Backward recursion on a lattice.
//!
//! Solves equations written in forward form
//!
//! `Y_{k+1} = Y_k + D_k(Y_k, Z_k) + Σ_i Z^i_k ΔK^i_{k+1} / N_{k+1} + ΔU_{k+1}`
//!
//! with `Y_n` given. `ΔK^i` is the one-step increment of the additive
//! `K`-process of factor `i` against the account the lattice was calibrated
//! on, so it has zero conditional mean. `ΔU` is a node-local cash flow term in
//! `Y` units. Per node, `Z` is read off the children of `w = Y_{k+1} - ΔU`,
//! and `Y_k` solves `y = E_q[w] - D_k(y, Z)` by Picard iteration.

use rayon::prelude::*;

use crate::market::{Account, AccountSet, Child, Lattice, LatticeProcess};
use crate::{with_pool, Error, Result};

/// `D_k(node, y, z)`.
pub type DriverFn<'a> = dyn Fn(usize, usize, f64, &[f64]) -> f64 + Sync + 'a;
/// `ΔU_{k+1}` from node `(k, idx)` into a child.
pub type FlowFn<'a> = dyn Fn(usize, usize, &Child) -> f64 + Sync + 'a;

pub const PICARD_TOL: f64 = 1e-12;
pub const PICARD_MAX_ITER: usize = 50;

/// One backward problem.
pub struct BackwardProblem<'a> {
    pub lattice: &'a Lattice,
    /// Normalising account `N`.
    pub numeraire: &'a Account,
    /// Calibration account of each factor.
    pub references: Vec<&'a Account>,
    /// `Y_n` per terminal node.
    pub terminal: Vec<f64>,
    pub driver: &'a DriverFn<'a>,
    pub flow: &'a FlowFn<'a>,
    pub tol: f64,
    pub max_iter: usize,
}

/// Reference accounts of every lattice factor.
pub fn lattice_references<'a>(
    lattice: &Lattice,
    accounts: &'a AccountSet,
) -> Result<Vec<&'a Account>> {
    (0..lattice.dim())
        .map(|i| accounts.get(lattice.reference(i)))
        .collect()
}

/// Output of [`solve_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub y: LatticeProcess,
    /// `Z^i` per factor; the terminal level is zero.
    pub z: Vec<LatticeProcess>,
    /// Picard iterations used per node.
    pub iterations: Vec<Vec<usize>>,
    /// Driver residual per node at the accepted iterate.
    pub residuals: Vec<Vec<f64>>,
    pub max_iterations: usize,
    /// Worst `|y - E_q[w] + D(y, Z)|` at the accepted iterate.
    pub max_residual: f64,
    /// Worst mismatch of the one-step representation `w = E_q[w] + Z ΔK / N`.
    pub representation_error: f64,
    /// True when the representation is a projection (more than one factor and a non-zero mismatch).
    pub approximate: bool,
}

/// Normalised increments `ΔK^i / N_{k+1}` into each child of `(k, idx)`.
pub fn k_increments(
    lattice: &Lattice,
    refs: &[&Account],
    n: &Account,
    k: usize,
    idx: usize,
) -> Vec<(Child, Vec<f64>)> {
    let d = lattice.dim();
    let s: Vec<f64> = lattice.prices(k, idx);
    let div: Vec<f64> = (0..d).map(|i| lattice.dividend(i, k, idx)).collect();
    lattice
        .children(k, idx)
        .into_iter()
        .map(|c| {
            let dk = (0..d)
                .map(|i| {
                    (lattice.price(i, k + 1, c.index) - s[i] + div[i] - s[i] * refs[i].rho(k))
                        / n.value(k + 1)
                })
                .collect();
            (c, dk)
        })
        .collect()
}

/// Weighted least-squares coefficients of `w` on the increments; exact for one factor.
fn represent(children: &[(Child, Vec<f64>)], w: &[f64], m: f64, d: usize) -> (Vec<f64>, f64) {
    if d == 0 {
        let err = w.iter().map(|x| (x - m).abs()).fold(0.0, f64::max);
        return (Vec::new(), err);
    }
    // Normal equations with q-weights; E_q[ΔK] = 0 so no intercept is needed.
    let mut a = vec![vec![0.0; d]; d];
    let mut rhs = vec![0.0; d];
    for ((c, dk), wc) in children.iter().zip(w) {
        for i in 0..d {
            rhs[i] += c.prob * dk[i] * (wc - m);
            for j in 0..d {
                a[i][j] += c.prob * dk[i] * dk[j];
            }
        }
    }
    let z = solve_small(a, rhs);
    let err = children
        .iter()
        .zip(w)
        .map(|((_, dk), wc)| (wc - m - dk.iter().zip(&z).map(|(k, z)| k * z).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    (z, err)
}

/// Gaussian elimination with partial pivoting for `d <= 3`.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        b.swap(col, piv);
        let p = a[col][col];
        if p == 0.0 {
            continue;
        }
        for row in col + 1..n {
            let f = a[row][col] / p;
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = if a[row][row] == 0.0 {
            0.0
        } else {
            (b[row] - s) / a[row][row]
        };
    }
    x
}

struct NodeOut {
    y: f64,
    z: Vec<f64>,
    iters: usize,
    residual: f64,
    rep_err: f64,
}

/// Run the backward recursion.
pub fn solve_backward(p: &BackwardProblem) -> Result<BackwardSolution> {
    let lat = p.lattice;
    let n = lat.n_steps();
    let d = lat.dim();
    if p.terminal.len() != lat.n_nodes(n) {
        return Err(Error::invalid(
            "terminal condition must cover every terminal node",
        ));
    }
    if p.references.len() != d {
        return Err(Error::invalid(
            "one reference account per lattice factor is required",
        ));
    }
    if p.numeraire.grid() != lat.grid() {
        return Err(Error::invalid("numeraire account is on a different grid"));
    }
    let mut y_levels: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut z_levels: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n + 1]; d];
    let mut iterations = vec![Vec::new(); n + 1];
    let mut residuals = vec![Vec::new(); n + 1];
    y_levels[n] = p.terminal.clone();
    for z in z_levels.iter_mut() {
        z[n] = vec![0.0; lat.n_nodes(n)];
    }
    iterations[n] = vec![0; lat.n_nodes(n)];
    residuals[n] = vec![0.0; lat.n_nodes(n)];
    let mut max_iterations = 0;
    let mut max_residual: f64 = 0.0;
    let mut representation_error: f64 = 0.0;

    for k in (0..n).rev() {
        let next = &y_levels[k + 1];
        let outs: Vec<Result<NodeOut>> = with_pool(|| {
            (0..lat.n_nodes(k))
                .into_par_iter()
                .map(|idx| {
                    let children = k_increments(lat, &p.references, p.numeraire, k, idx);
                    let w: Vec<f64> = children
                        .iter()
                        .map(|(c, _)| next[c.index] - (p.flow)(k, idx, c))
                        .collect();
                    let m: f64 = children.iter().zip(&w).map(|((c, _), w)| c.prob * w).sum();
                    let (z, rep_err) = represent(&children, &w, m, d);
                    let mut y = m;
                    let mut iters = 0;
                    loop {
                        let y_new = m - (p.driver)(k, idx, y, &z);
                        iters += 1;
                        if !y_new.is_finite() {
                            return Err(Error::numeric(
                                k,
                                format!("non-finite value at node {idx}"),
                            ));
                        }
                        let step = (y_new - y).abs();
                        y = y_new;
                        if step <= p.tol * y.abs().max(1.0) {
                            break;
                        }
                        if iters >= p.max_iter {
                            return Err(Error::Convergence {
                                step: k,
                                residual: step,
                            });
                        }
                    }
                    let residual = (y - m + (p.driver)(k, idx, y, &z)).abs();
                    Ok(NodeOut {
                        y,
                        z,
                        iters,
                        residual,
                        rep_err,
                    })
                })
                .collect()
        });
        let mut ys = Vec::with_capacity(outs.len());
        let mut zs = vec![Vec::with_capacity(outs.len()); d];
        let mut its = Vec::with_capacity(outs.len());
        let mut res = Vec::with_capacity(outs.len());
        for o in outs {
            let o = o?;
            ys.push(o.y);
            for (i, zi) in o.z.iter().enumerate() {
                zs[i].push(*zi);
            }
            its.push(o.iters);
            res.push(o.residual);
            max_iterations = max_iterations.max(o.iters);
            max_residual = max_residual.max(o.residual);
            representation_error = representation_error.max(o.rep_err);
        }
        y_levels[k] = ys;
        for (i, zi) in zs.into_iter().enumerate() {
            z_levels[i][k] = zi;
        }
        iterations[k] = its;
        residuals[k] = res;
    }
    let scale = y_levels
        .iter()
        .flatten()
        .fold(1.0f64, |a, y| a.max(y.abs()));
    Ok(BackwardSolution {
        y: LatticeProcess { levels: y_levels },
        z: z_levels
            .into_iter()
            .map(|levels| LatticeProcess { levels })
            .collect(),
        iterations,
        residuals,
        max_iterations,
        max_residual,
        representation_error,
        approximate: d > 1 && representation_error > 1e-10 * scale,
    })
}

/// Conditional-expectation form `E_k[Y_n - Σ_{l>=k} (D_l(Y_l, Z_l) + ΔU_{l+1})]`,
/// evaluated with the solved `(Y, Z)`; it reproduces `Y` up to the Picard tolerance.
pub fn representation(p: &BackwardProblem, sol: &BackwardSolution) -> LatticeProcess {
    let lat = p.lattice;
    let n = lat.n_steps();
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = p.terminal.clone();
    for k in (0..n).rev() {
        let next = &levels[k + 1];
        levels[k] = (0..lat.n_nodes(k))
            .map(|idx| {
                let z: Vec<f64> = sol.z.iter().map(|zi| zi.levels[k][idx]).collect();
                let e: f64 = lat
                    .children(k, idx)
                    .iter()
                    .map(|c| c.prob * (next[c.index] - (p.flow)(k, idx, c)))
                    .sum();
                e - (p.driver)(k, idx, sol.y.levels[k][idx], &z)
            })
            .collect();
    }
    LatticeProcess { levels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{calibrate_lattice, AssetModel, TimeGrid};

    #[test]
    fn zero_driver_is_discounted_expectation() {
        let g = TimeGrid::new(0.0, 1.0, 30).unwrap();
        let mut acc = AccountSet::new();
        acc.insert(Account::constant("B", 0.04, &g).unwrap())
            .unwrap();
        let lat =
            calibrate_lattice(&[AssetModel::new(1, 100.0, 0.0, 0.2, 0.0, "B")], &acc, &g).unwrap();
        let b = acc.get("B").unwrap();
        let refs = lattice_references(&lat, &acc).unwrap();
        let terminal: Vec<f64> = (0..31)
            .map(|j| (lat.price(0, 30, j) - 100.0).max(0.0) / b.value(30))
            .collect();
        let driver = |_: usize, _: usize, _: f64, _: &[f64]| 0.0;
        let flow = |_: usize, _: usize, _: &Child| 0.0;
        let p = BackwardProblem {
            lattice: &lat,
            numeraire: b,
            references: refs,
            terminal: terminal.clone(),
            driver: &driver,
            flow: &flow,
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        };
        let sol = solve_backward(&p).unwrap();
        // Independent oracle: binomial sum at the root.
        let q = lat.factors()[0].q[0];
        let mut expect = 0.0;
        let mut binom = 1.0f64;
        for j in 0..=30usize {
            if j > 0 {
                binom *= (31 - j) as f64 / j as f64;
            }
            expect += binom * q.powi(j as i32) * (1.0 - q).powi(30 - j as i32) * terminal[j];
        }
        assert!((sol.y.levels[0][0] - expect).abs() < 1e-12);
        assert!(sol.representation_error < 1e-12);
        assert!(!sol.approximate);
    }

    #[test]
    fn linear_driver_converges() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = Account::constant("B", 0.0, &g).unwrap();
        let lat = Lattice::deterministic(&g);
        let driver = |_: usize, _: usize, y: f64, _: &[f64]| -0.1 * y;
        let flow = |_: usize, _: usize, _: &Child| 0.0;
        let p = BackwardProblem {
            lattice: &lat,
            numeraire: &b,
            references: vec![],
            terminal: vec![1.0],
            driver: &driver,
            flow: &flow,
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        };
        let sol = solve_backward(&p).unwrap();
        // y = m + 0.1 y  =>  y = m / 0.9 per step.
        assert!((sol.y.levels[0][0] - 0.9f64.powi(-10)).abs() < 1e-10);
        let rep = representation(&p, &sol);
        assert!((rep.levels[0][0] - sol.y.levels[0][0]).abs() < 1e-10);
    }

    #[test]
    fn divergent_driver_reports_convergence_error() {
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let b = Account::constant("B", 0.0, &g).unwrap();
        let lat = Lattice::deterministic(&g);
        let driver = |_: usize, _: usize, y: f64, _: &[f64]| 2.0 * y;
        let flow = |_: usize, _: usize, _: &Child| 0.0;
        let p = BackwardProblem {
            lattice: &lat,
            numeraire: &b,
            references: vec![],
            terminal: vec![1.0],
            driver: &driver,
            flow: &flow,
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        };
        assert!(matches!(
            solve_backward(&p),
            Err(Error::Convergence { step: 1, .. })
        ));
    }
}
