//! Selection functions, attributions over the subset DAG, and the
//! normalized mixture prediction.
//!
//! Each expert's raw tanh output F^i simultaneously provides the class
//! probability f^i = (F^i + 1)/2 and a selection confidence g^i. The
//! attribution of an atomic subset is its own confidence; a mixed subset
//! is deselected by its children: α^i = g^i · Π_{j ∈ ω(i)} (1 − g^j).
//! The mixture output is the α-weighted average of the f^i, falling back
//! to the uniform average when Σα vanishes (an untrained zero-weight
//! network has F ≡ 0, so the fallback is reachable by construction).


use alloc::vec::Vec;

use core::fmt;

use crate::scheme::InterpretationScheme;
use crate::tape::{Tape, TapeError, Var, PROB_CLAMP_HI, PROB_CLAMP_LO};
use crate::tensor::Tensor;

/// Selection-confidence variant g(F).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GVariant {
    /// g = |F| — the training default.
    Abs,
    /// g = F²; dampens noisy values around 0.
    Square,
    /// g = 2|F|^p / (1 + |F|^(p−1)), p > 1.
    Smooth(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixtureError {
    /// The smooth variant requires an exponent p > 1.
    InvalidSmoothExponent(f64),
    /// The normalization fallback threshold must be positive.
    InvalidEpsilon(f64),
}

impl fmt::Display for MixtureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixtureError::InvalidSmoothExponent(p) => {
                write!(f, "smooth selection exponent must be > 1, got {p}")
            }
            MixtureError::InvalidEpsilon(e) => {
                write!(f, "epsilon_denominator must be positive, got {e}")
            }
        }
    }
}

impl core::error::Error for MixtureError {}

/// Selection behaviour of a model: which g variant to use and the
/// threshold under which the mixture falls back to a uniform average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub g_variant: GVariant,
    pub epsilon_denominator: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            g_variant: GVariant::Abs,
            epsilon_denominator: 1e-12,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), MixtureError> {
        if let GVariant::Smooth(p) = self.g_variant {
            if !(p > 1.0) {
                return Err(MixtureError::InvalidSmoothExponent(p));
            }
        }
        if !(self.epsilon_denominator > 0.0) {
            return Err(MixtureError::InvalidEpsilon(self.epsilon_denominator));
        }
        Ok(())
    }
}

/// f = (F + 1)/2 elementwise.
pub fn expert_probability(raw: &Tensor) -> Tensor {
    raw.map(|v| (v + 1.0) / 2.0)
}

fn g_scalar(variant: GVariant, raw: f64) -> f64 {
    let a = libm::fabs(raw);
    match variant {
        GVariant::Abs => a,
        GVariant::Square => raw * raw,
        GVariant::Smooth(p) => 2.0 * libm::pow(a, p) / (1.0 + libm::pow(a, p - 1.0)),
    }
}

/// Selection confidence g(F) elementwise.
pub fn selection_g(raw: &Tensor, variant: GVariant) -> Tensor {
    raw.map(|v| g_scalar(variant, v))
}

/// Attributions over a `[batch×H]` confidence tensor, computed in
/// topological order: atomic subsets keep their g, mixed subsets are
/// multiplied by the children's deselection terms.
pub fn attribution_alpha(g: &Tensor, scheme: &InterpretationScheme) -> Tensor {
    let h = scheme.num_subsets();
    debug_assert_eq!(g.cols(), h);
    let mut alpha = g.clone();
    for &i in scheme.topo_order() {
        if scheme.is_atomic(i) {
            continue;
        }
        for r in 0..g.rows() {
            let mut v = g.at(r, i);
            for &j in scheme.omega(i) {
                v *= 1.0 - g.at(r, j);
            }
            alpha.set(r, i, v);
        }
    }
    alpha
}

/// Combined prediction per row: ŷ = Σ α·f / Σ α, or the uniform average
/// of f when Σ α ≤ ε (in which case the normalized α row stays all-zero).
pub fn mixture_forward(f: &Tensor, alpha: &Tensor, epsilon: f64) -> (Vec<f64>, Tensor) {
    debug_assert_eq!(f.shape(), alpha.shape());
    let h = f.cols();
    let mut y_hat = Vec::with_capacity(f.rows());
    let mut normalized = Tensor::zeros(alpha.rows(), h);
    for r in 0..f.rows() {
        let total: f64 = alpha.row(r).iter().sum();
        if total > epsilon {
            let mut acc = 0.0;
            for c in 0..h {
                acc += alpha.at(r, c) * f.at(r, c);
                normalized.set(r, c, alpha.at(r, c) / total);
            }
            y_hat.push(acc / total);
        } else {
            y_hat.push(f.row(r).iter().sum::<f64>() / h as f64);
        }
    }
    (y_hat, normalized)
}

/// Attributed subset of one prediction: the argmax of α, ties broken
/// toward the smaller subset (then the smaller index), or `NoSelection`
/// when every α is below the fallback threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attributed {
    Expert(usize),
    NoSelection,
}

pub fn attributed_subset(
    alpha_row: &[f64],
    scheme: &InterpretationScheme,
    epsilon: f64,
) -> Attributed {
    let total: f64 = alpha_row.iter().sum();
    if !(total > epsilon) {
        return Attributed::NoSelection;
    }
    let mut best = 0usize;
    for i in 1..alpha_row.len() {
        let better = alpha_row[i] > alpha_row[best]
            || (alpha_row[i] == alpha_row[best]
                && scheme.subset_feature_count(i) < scheme.subset_feature_count(best));
        if better {
            best = i;
        }
    }
    Attributed::Expert(best)
}

/// Everything a single forward pass yields per sample: raw outputs,
/// probabilities, confidences, attributions and the combined prediction.
#[derive(Debug, Clone)]
pub struct MixturePrediction {
    /// Raw tanh outputs F, `[batch×H]`.
    pub raw: Tensor,
    /// Per-expert probabilities f = (F+1)/2.
    pub f: Tensor,
    /// Selection confidences under the inference variant.
    pub g: Tensor,
    /// Attributions α.
    pub alpha: Tensor,
    /// α normalized per row (all-zero rows on fallback).
    pub alpha_normalized: Tensor,
    /// Combined probability per sample.
    pub y_hat: Vec<f64>,
}

impl MixturePrediction {
    /// Derives all mixture quantities from raw expert outputs. The raw
    /// values are clamped into the open interval before f and g so that
    /// probabilities stay in (0, 1) even at tanh saturation.
    pub fn from_raw(
        raw: Tensor,
        scheme: &InterpretationScheme,
        config: &SelectionConfig,
    ) -> Self {
        let clamped = raw.map(|v| {
            v.max(2.0 * PROB_CLAMP_LO - 1.0).min(2.0 * PROB_CLAMP_HI - 1.0)
        });
        let f = expert_probability(&clamped);
        let g = selection_g(&clamped, config.g_variant);
        let alpha = attribution_alpha(&g, scheme);
        let (y_hat, alpha_normalized) = mixture_forward(&f, &alpha, config.epsilon_denominator);
        Self {
            raw,
            f,
            g,
            alpha,
            alpha_normalized,
            y_hat,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn attributed(&self, row: usize, scheme: &InterpretationScheme, epsilon: f64) -> Attributed {
        attributed_subset(self.alpha.row(row), scheme, epsilon)
    }
}

/// Tape-side attribution assembly: slices per-expert confidences out of
/// `g` (`[batch×H]`) and rebuilds α column by column so gradients flow
/// exactly as the closed form dictates. The caller decides whether to
/// wrap the result in a gradient stop.
pub fn alpha_on_tape(
    tape: &mut Tape,
    g: Var,
    scheme: &InterpretationScheme,
) -> Result<Var, TapeError> {
    let h = scheme.num_subsets();
    let cols: Vec<Var> = (0..h)
        .map(|i| tape.slice_cols(g, i, i + 1))
        .collect::<Result<_, _>>()?;
    let mut alpha_cols: Vec<Var> = Vec::with_capacity(h);
    for i in 0..h {
        let mut acc = cols[i];
        for &j in scheme.omega(i) {
            let neg = tape.scale(cols[j], -1.0);
            let deselect = tape.add_scalar(neg, 1.0);
            acc = tape.mul(acc, deselect)?;
        }
        alpha_cols.push(acc);
    }
    tape.concat_cols(&alpha_cols)
}

/// Tape-side selection confidence, mirroring [`selection_g`].
pub fn g_on_tape(tape: &mut Tape, raw: Var, variant: GVariant) -> Result<Var, TapeError> {
    Ok(match variant {
        GVariant::Abs => tape.abs(raw),
        GVariant::Square => tape.square(raw),
        GVariant::Smooth(p) => {
            let a = tape.abs(raw);
            let num_pow = tape.pow(a, p);
            let num = tape.scale(num_pow, 2.0);
            let den_pow = tape.pow(a, p - 1.0);
            let den = tape.add_scalar(den_pow, 1.0);
            tape.div(num, den)?
        }
    })
}
