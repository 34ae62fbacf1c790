//! Valuation and hedging engine for trading under funding costs, netting
//! conventions and collateralization.
//!
//! Everything runs on a uniform time grid with piecewise-constant rates.
//! Risky assets live either on recombining binomial lattices, calibrated so
//! that discounted cumulative-dividend prices are exact one-step martingales,
//! or on simulated paths.
//!
//! Sign convention: cash flows are seen by the hedger, positive when received.
//! A price `S_t` is the extra endowment at `t` that lets the hedger replicate
//! the remaining flows and finish at the benchmark wealth, so the price of a
//! liability is positive.

// Negated float comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod adjustments;
pub mod arbitrage;
pub mod bsde;
pub mod cli;
pub mod config;
pub mod contracts;
pub mod error;
pub mod linear;
pub mod market;
pub mod report;
pub mod scheme;
pub mod validate;
pub mod wealth;

pub use error::{Error, Result};

/// Positive part; `pos(0) = 0`.
#[inline]
pub fn pos(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Negative part, returned as a nonnegative number; `neg(0) = 0`.
#[inline]
pub fn neg(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

/// Worker count taken from `XFUND_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("XFUND_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Run `f` inside a rayon pool sized by [`thread_cap`].
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}
