use super::discretized::byte_indices;
use super::per_sample_sum;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

const PROB_FLOOR: f64 = 1e-7;

/// Per-sample Bernoulli NLL `−Σ [x ln p + (1 − x) ln(1 − p)]`, with `p`
/// clamped to `[1e-7, 1 − 1e-7]`. Targets may be fractional intensities.
pub fn bernoulli_nll<'t>(probs: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    if probs.shape() != x.shape() || x.shape().is_empty() {
        return Err(Error::shape(
            "bernoulli_nll",
            format!("probs {:?} vs x {:?}", probs.shape(), x.shape()),
        ));
    }
    let p = probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let q = p.neg() + 1.0;
    let not_x = x.neg() + 1.0;
    let ll = x * p.ln() + not_x * q.ln();
    Ok(per_sample_sum(ll).neg())
}

/// Per-sample softmax cross-entropy over 256 intensity classes.
/// `logits` is `[batch, ..., 256]` with one byte per leading element.
pub fn categorical_nll<'t>(logits: Var<'t>, bytes: &[u8]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() < 2 || *shape.last().unwrap() != 256 {
        return Err(Error::shape(
            "categorical_nll",
            format!("expected [batch, ..., 256], got {:?}", shape),
        ));
    }
    let rows = logits.value().len() / 256;
    if bytes.len() != rows {
        return Err(Error::shape(
            "categorical_nll",
            format!("{} bytes for {} sub-pixels", bytes.len(), rows),
        ));
    }
    let mut keep = shape.clone();
    *keep.last_mut().unwrap() = 1;
    let log_norm = logits.logsumexp_last().reshape(&keep);
    let log_probs = logits - log_norm;
    let picked = log_probs.pick_last(byte_indices(bytes));
    Ok(per_sample_sum(picked).neg())
}

/// Bits of a byte, most significant first.
pub fn byte_bits(byte: u8) -> [f64; 8] {
    let mut bits = [0.0; 8];
    for (j, b) in bits.iter_mut().enumerate() {
        *b = ((byte >> (7 - j)) & 1) as f64;
    }
    bits
}

/// Per-sample NLL of independent Bernoulli bits. `bit_logits` is
/// `[batch, ..., 8]`, most significant bit first.
pub fn bitwise_categorical_nll<'t>(bit_logits: Var<'t>, bytes: &[u8]) -> Result<Var<'t>> {
    let shape = bit_logits.shape();
    if shape.len() < 2 || *shape.last().unwrap() != 8 {
        return Err(Error::shape(
            "bitwise_categorical_nll",
            format!("expected [batch, ..., 8], got {:?}", shape),
        ));
    }
    if bytes.len() * 8 != bit_logits.value().len() {
        return Err(Error::shape(
            "bitwise_categorical_nll",
            format!("{} bytes for {:?}", bytes.len(), shape),
        ));
    }
    let targets: Vec<f64> = bytes.iter().flat_map(|&b| byte_bits(b)).collect();
    let t = bit_logits.tape().constant(Tensor::from_vec(&shape, targets));
    // BCE with logits: softplus(l) − t·l.
    let nll = bit_logits.softplus() - t * bit_logits;
    Ok(per_sample_sum(nll))
}
