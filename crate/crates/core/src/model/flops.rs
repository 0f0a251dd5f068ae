//! Analytic floating-point operation counts for one encoder forward pass.

use serde::{Deserialize, Serialize};

use super::params::ToyEncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    /// Scoring every token before pruning: `2 N d`.
    pub scoring: u64,
    /// Q, K, V projections: `6 m d^2`.
    pub projections: u64,
    /// `Q K^T` and `A V`: `4 m^2 d`.
    pub attention_quadratic: u64,
    /// Two FFN matmuls: `4 m d d_ff`.
    pub ffn: u64,
    /// Classification head: `2 d C`.
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.scoring + self.projections + self.attention_quadratic + self.ffn + self.head
    }
}

pub fn flops_estimate(retained: usize, cfg: &ToyEncoderConfig) -> Result<FlopsBreakdown> {
    if retained == 0 || retained > cfg.num_tokens {
        return Err(Error::InvalidArgument(format!(
            "retained count {retained} outside [1, {}]",
            cfg.num_tokens
        )));
    }
    let (n, m, d, f, c) = (
        cfg.num_tokens as u64,
        retained as u64,
        cfg.token_dim as u64,
        cfg.ffn_dim as u64,
        cfg.num_classes as u64,
    );
    Ok(FlopsBreakdown {
        scoring: 2 * n * d,
        projections: 6 * m * d * d,
        attention_quadratic: 4 * m * m * d,
        ffn: 4 * m * d * f,
        head: 2 * d * c,
    })
}
