//! Analytic per-round overhead model.
//!
//! A round costs one client signature, the busiest RSU's verification and
//! aggregation work (`ceil(N/K)` updates, RSUs run in parallel), and a
//! consensus term `t_base + alpha_msg K (K-1)` for the pairwise vote exchange.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_sign: f64,
    pub t_ver: f64,
    pub t_agg: f64,
    pub t_base: f64,
    /// Cost per ordered RSU pair.
    pub alpha_msg: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            t_sign: 27.8,
            t_ver: 35.6,
            t_agg: 1.0,
            t_base: 10.0,
            alpha_msg: 1.0,
        }
    }
}

impl TimingParams {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.t_sign, self.t_ver, self.t_agg, self.t_base, self.alpha_msg];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(crate::Error::InvalidArgument(format!(
                "timing constants must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Updates handled by the busiest RSU.
pub fn busiest_load(num_clients: usize, num_rsus: usize) -> usize {
    num_clients.div_ceil(num_rsus.max(1))
}

pub fn rsu_busy_time(num_clients: usize, num_rsus: usize, p: &TimingParams) -> f64 {
    busiest_load(num_clients, num_rsus) as f64 * (p.t_ver + p.t_agg)
}

pub fn consensus_time(num_rsus: usize, p: &TimingParams) -> f64 {
    let k = num_rsus as f64;
    p.t_base + p.alpha_msg * k * (k - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub num_clients: usize,
    pub num_rsus: usize,
    pub sign_ms: f64,
    pub rsu_ms: f64,
    pub consensus_ms: f64,
    pub total_ms: f64,
}

pub fn breakdown(num_clients: usize, num_rsus: usize, p: &TimingParams) -> TimingBreakdown {
    let sign_ms = p.t_sign;
    let rsu_ms = rsu_busy_time(num_clients, num_rsus, p);
    let consensus_ms = consensus_time(num_rsus, p);
    TimingBreakdown {
        num_clients,
        num_rsus,
        sign_ms,
        rsu_ms,
        consensus_ms,
        total_ms: sign_ms + rsu_ms + consensus_ms,
    }
}

pub fn block_time(num_clients: usize, num_rsus: usize, p: &TimingParams) -> f64 {
    breakdown(num_clients, num_rsus, p).total_ms
}

/// Cross product of client and committee sizes, sorted by `(K, N)`.
pub fn sweep(clients: &[usize], rsus: &[usize], p: &TimingParams) -> Vec<TimingBreakdown> {
    let mut rows: Vec<TimingBreakdown> = rsus
        .iter()
        .flat_map(|&k| clients.iter().map(move |&n| breakdown(n, k, p)))
        .collect();
    rows.sort_by_key(|r| (r.num_rsus, r.num_clients));
    rows
}

pub const SWEEP_CSV_HEADER: &str = "N,K,sign_ms,rsu_ms,cons_ms,total_ms";

/// Values are printed with one decimal place, enough for the 0.1 ms constants.
pub fn sweep_csv(rows: &[TimingBreakdown]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{:.1},{:.1},{:.1},{:.1}",
            r.num_clients, r.num_rsus, r.sign_ms, r.rsu_ms, r.consensus_ms, r.total_ms
        )
        .unwrap();
    }
    out
}

/// Whitespace-separated `K N total_ms` columns, one committee size per block,
/// blank line between blocks (gnuplot `index` layout).
pub fn sweep_plot_data(rows: &[TimingBreakdown]) -> String {
    let mut out = String::from("# K N total_ms\n");
    let mut last_k = None;
    for r in rows {
        if last_k.is_some_and(|k| k != r.num_rsus) {
            out.push_str("\n\n");
        }
        last_k = Some(r.num_rsus);
        writeln!(out, "{} {} {:.3}", r.num_rsus, r.num_clients, r.total_ms).unwrap();
    }
    out
}
