use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crypto::{digest, Digest};
use crate::error::{Error, Result};

/// Shape of the toy token classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub num_tokens: usize,
    pub token_dim: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            num_tokens: 16,
            token_dim: 16,
            ffn_dim: 32,
            num_classes: 8,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_tokens, self.token_dim, self.ffn_dim, self.num_classes];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "encoder dimensions must be >= 1: {self:?}"
            )));
        }
        if dims.iter().any(|&v| v > u32::MAX as usize) {
            return Err(Error::InvalidArgument("encoder dimension exceeds u32".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let d = self.token_dim;
        let f = self.ffn_dim;
        let c = self.num_classes;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            w_q: take(d * d),
            w_k: take(d * d),
            w_v: take(d * d),
            w_1: take(d * f),
            w_2: take(f * d),
            w_out: take(d * c),
            b_out: take(c),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b_out.end
    }
}

/// Offsets of each parameter block inside the flat vector, in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub w_q: Range<usize>,
    pub w_k: Range<usize>,
    pub w_v: Range<usize>,
    pub w_1: Range<usize>,
    pub w_2: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
}

const MAGIC: &[u8; 4] = b"BSRT";
const HEADER_LEN: usize = 4 + 4 * 4;

/// All trainable parameters as one flat `f64` array.
///
/// Matrices are stored row-major: `W_Q, W_K, W_V` (d x d), `W_1` (d x d_ff),
/// `W_2` (d_ff x d), `W_out` (d x C), then `b_out` (C).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    cfg: ToyEncoderConfig,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(cfg: ToyEncoderConfig) -> Self {
        Self {
            values: vec![0.0; cfg.param_count()],
            cfg,
        }
    }

    pub fn from_values(cfg: ToyEncoderConfig, values: Vec<f64>) -> Result<Self> {
        if values.len() != cfg.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                cfg.param_count(),
                values.len()
            )));
        }
        Ok(Self { cfg, values })
    }

    /// Scaled-normal initialisation, `std = gain / sqrt(fan_in)` per matrix.
    pub fn random_init<R: Rng + ?Sized>(cfg: ToyEncoderConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let l = cfg.layout();
        let d = cfg.token_dim as f64;
        let f = cfg.ffn_dim as f64;
        let blocks = [
            (l.w_q.clone(), 0.5 / d.sqrt()),
            (l.w_k.clone(), 0.5 / d.sqrt()),
            (l.w_v.clone(), 0.5 / d.sqrt()),
            (l.w_1.clone(), 1.0 / d.sqrt()),
            (l.w_2.clone(), 0.5 / f.sqrt()),
            (l.w_out.clone(), 1.0 / d.sqrt()),
        ];
        for (range, std) in blocks {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.values[range] {
                *v = normal.sample(rng);
            }
        }
        p
    }

    pub fn config(&self) -> ToyEncoderConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn matrix(&self, range: Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.values[range]).expect("layout is consistent")
    }

    fn matrix_mut(&mut self, range: Range<usize>, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((rows, cols), &mut self.values[range]).expect("layout is consistent")
    }

    pub fn w_q(&self) -> ArrayView2<'_, f64> {
        let d = self.cfg.token_dim;
        self.matrix(self.cfg.layout().w_q, d, d)
    }
    pub fn w_k(&self) -> ArrayView2<'_, f64> {
        let d = self.cfg.token_dim;
        self.matrix(self.cfg.layout().w_k, d, d)
    }
    pub fn w_v(&self) -> ArrayView2<'_, f64> {
        let d = self.cfg.token_dim;
        self.matrix(self.cfg.layout().w_v, d, d)
    }
    pub fn w_1(&self) -> ArrayView2<'_, f64> {
        self.matrix(self.cfg.layout().w_1, self.cfg.token_dim, self.cfg.ffn_dim)
    }
    pub fn w_2(&self) -> ArrayView2<'_, f64> {
        self.matrix(self.cfg.layout().w_2, self.cfg.ffn_dim, self.cfg.token_dim)
    }
    pub fn w_out(&self) -> ArrayView2<'_, f64> {
        self.matrix(self.cfg.layout().w_out, self.cfg.token_dim, self.cfg.num_classes)
    }
    pub fn b_out(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.cfg.layout().b_out])
    }

    pub(crate) fn w_q_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let d = self.cfg.token_dim;
        let r = self.cfg.layout().w_q;
        self.matrix_mut(r, d, d)
    }
    pub(crate) fn w_k_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let d = self.cfg.token_dim;
        let r = self.cfg.layout().w_k;
        self.matrix_mut(r, d, d)
    }
    pub(crate) fn w_v_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let d = self.cfg.token_dim;
        let r = self.cfg.layout().w_v;
        self.matrix_mut(r, d, d)
    }
    pub(crate) fn w_1_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (d, f) = (self.cfg.token_dim, self.cfg.ffn_dim);
        let r = self.cfg.layout().w_1;
        self.matrix_mut(r, d, f)
    }
    pub(crate) fn w_2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (d, f) = (self.cfg.token_dim, self.cfg.ffn_dim);
        let r = self.cfg.layout().w_2;
        self.matrix_mut(r, f, d)
    }
    pub(crate) fn w_out_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (d, c) = (self.cfg.token_dim, self.cfg.num_classes);
        let r = self.cfg.layout().w_out;
        self.matrix_mut(r, d, c)
    }
    pub(crate) fn b_out_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        let r = self.cfg.layout().b_out;
        ArrayViewMut1::from(&mut self.values[r])
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::DimensionMismatch(format!(
                "parameter configs differ: {:?} vs {:?}",
                self.cfg, other.cfg
            )));
        }
        Ok(())
    }

    /// `self - other`, component-wise.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            cfg: self.cfg,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// `self += alpha * other`, one component at a time in index order.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            cfg: self.cfg,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Length of the file encoding.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.values.len()
    }

    /// File encoding: `BSRT`, then `N, d, d_ff, C` as u32 LE, then every value as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        for v in [
            self.cfg.num_tokens,
            self.cfg.token_dim,
            self.cfg.ffn_dim,
            self.cfg.num_classes,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("parameter file: missing BSRT header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let cfg = ToyEncoderConfig {
            num_tokens: field(0),
            token_dim: field(1),
            ffn_dim: field(2),
            num_classes: field(3),
        };
        cfg.validate()?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * cfg.param_count() {
            return Err(Error::Format(format!(
                "parameter file: expected {} value bytes, found {}",
                8 * cfg.param_count(),
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { cfg, values })
    }

    /// SHA-256 of the file encoding.
    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}
