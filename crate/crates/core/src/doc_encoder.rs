//! Multi-channel convolutional document encoder.
//!
//! Tokens are embedded (`N x d_e`), each channel runs a width-`k` convolution
//! with `relu`, and the per-position maps of all channels are concatenated
//! into `H` (`N x l*d_c`). The input is right-padded with `k - 1` zero rows
//! per channel so every channel yields exactly `N` rows and the maps line up
//! position by position. The max-pooled summary is available separately.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Tensor;

/// Token id reserved for padding; it embeds to the zero vector.
pub const PAD: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_e: usize,
    pub filter_sizes: Vec<usize>,
    pub d_c: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_e: 100,
            filter_sizes: alloc::vec![1, 3, 5, 7, 10],
            d_c: 128,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_c == 0 || self.max_len == 0 || self.filter_sizes.is_empty() {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.filter_sizes.contains(&0) {
            return Err(Error::Config("filter sizes must be positive".into()));
        }
        let min = *self.filter_sizes.iter().min().unwrap_or(&1);
        if min > self.max_len {
            return Err(Error::Config(format!(
                "smallest filter {min} exceeds max_len {}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn max_filter(&self) -> usize {
        self.filter_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Width of a row of `H`.
    pub fn d_h(&self) -> usize {
        self.filter_sizes.len() * self.d_c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `vocab x d_e`; row [`PAD`] is never read.
    pub embedding: Tensor,
    /// One `(k * d_e) x d_c` filter bank per channel.
    pub conv_w: Vec<Tensor>,
    /// One `1 x d_c` bias per channel.
    pub conv_b: Vec<Tensor>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig, vocab: usize) -> Self {
        let embedding = init::uniform(rng, vocab, cfg.d_e, 0.1);
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for &k in &cfg.filter_sizes {
            conv_w.push(init::xavier(rng, k * cfg.d_e, cfg.d_c));
            conv_b.push(Tensor::zeros(1, cfg.d_c));
        }
        Self {
            embedding,
            conv_w,
            conv_b,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }
}

/// Truncates to `max_len`, maps [`PAD`] to `None`, and right-pads to the
/// largest filter width.
pub fn prepare_ids(tokens: &[usize], cfg: &EncoderConfig, vocab: usize) -> Result<Vec<Option<usize>>> {
    let mut ids = Vec::with_capacity(tokens.len().max(cfg.max_filter()));
    for &t in tokens.iter().take(cfg.max_len) {
        if t >= vocab {
            return Err(Error::OutOfVocab { id: t, vocab });
        }
        ids.push(if t == PAD { None } else { Some(t) });
    }
    while ids.len() < cfg.max_filter() {
        ids.push(None);
    }
    Ok(ids)
}

/// Embedding lookup, `N x d_e`.
pub fn embed(tape: &mut Tape<'_>, embedding: Var, ids: &[Option<usize>]) -> Result<Var> {
    tape.gather(embedding, ids)
}

/// Variables for the encoder parameters on one tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embedding: Var,
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct DocRepr {
    /// Per-position features, `N x l*d_c`.
    pub h: Var,
}

impl DocRepr {
    /// Max over positions, `1 x l*d_c`.
    pub fn pooled(&self, tape: &mut Tape<'_>) -> Result<Var> {
        tape.max(self.h, Axis::Rows)
    }
}

/// Convolution channels over an embedded document `x` (`N x d_e`).
pub fn forward(tape: &mut Tape<'_>, x: Var, cfg: &EncoderConfig, vars: &EncoderVars) -> Result<DocRepr> {
    let (n, d_e) = tape.value(x).shape();
    if n < cfg.max_filter() {
        return Err(crate::error::shape_err("doc_encoder", (n, d_e), (cfg.max_filter(), d_e)));
    }
    let mut maps = Vec::with_capacity(cfg.filter_sizes.len());
    for (ch, &k) in cfg.filter_sizes.iter().enumerate() {
        let padded = if k > 1 {
            let z = tape.constant(Tensor::zeros(k - 1, d_e))?;
            tape.concat_rows(&[x, z])?
        } else {
            x
        };
        let c = tape.conv1d(padded, vars.conv_w[ch], k)?;
        let c = tape.add_row(c, vars.conv_b[ch])?;
        maps.push(tape.relu(c)?);
    }
    let h = if maps.len() == 1 {
        maps[0]
    } else {
        tape.concat_cols(&maps)?
    };
    Ok(DocRepr { h })
}
