//! The single overarching network that emulates H input-restricted experts.
//!
//! Layer 0 restricts each expert's rows to its feature mask (the input is
//! Hadamard-masked per expert before the product, so the restriction is
//! exact, not approximate). Hidden layers are block matrices where block
//! (i, j) exists iff i == j or subset j is strictly included in subset i;
//! cross-block inputs pass through a gradient stop so child experts never
//! receive updates from their parents' losses. The output layer is the
//! same block construction with per-expert width 1 and a tanh activation,
//! giving the raw expert outputs F ∈ (−1, 1)^H.
//!
//! Masks are enforced by re-zeroing absent entries after every optimizer
//! step rather than by sparse storage; the invariant is directly testable.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use rand::Rng;

use crate::param::{ParamError, ParamId, ParamStore};
use crate::scheme::InterpretationScheme;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        }
    }
}

/// Presence of a weight block: the expert's own diagonal block, a
/// cross block reading a strictly included child, or structurally absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Absent,
    Own,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    /// Expert rows read the raw input restricted by the expert's mask.
    Input,
    /// Block-structured layer over per-expert hidden streams.
    Block,
}

/// One masked layer: a single weight parameter of shape
/// `[Σ out_widths × (in_total + 1)]` (last column is the bias) plus the
/// 0/1 presence mask that the constraint re-applies after each step.
#[derive(Debug, Clone)]
pub struct MaskedLayerSpec {
    pub layer_index: usize,
    kind: LayerKind,
    /// Per-expert input stream widths (block layers). For the input
    /// layer this is the full feature count for every expert.
    pub in_widths: Vec<usize>,
    pub out_widths: Vec<usize>,
    pub activation: Activation,
    pub weight: ParamId,
    mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Param(ParamError),
    /// Widths must be positive and lists must match the expert count.
    BadWidths(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Param(e) => write!(f, "{e}"),
            ModelError::BadWidths(msg) => write!(f, "bad layer widths: {msg}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<ParamError> for ModelError {
    fn from(e: ParamError) -> Self {
        ModelError::Param(e)
    }
}

impl MaskedLayerSpec {
    pub fn in_total(&self) -> usize {
        self.in_widths.iter().sum()
    }

    pub fn out_total(&self) -> usize {
        self.out_widths.iter().sum()
    }

    fn row_offset(&self, expert: usize) -> usize {
        self.out_widths[..expert].iter().sum()
    }

    fn col_offset(&self, expert: usize) -> usize {
        self.in_widths[..expert].iter().sum()
    }

    /// Presence of block (i, j) under the inclusion rule.
    pub fn block_kind(scheme: &InterpretationScheme, i: usize, j: usize) -> BlockKind {
        if i == j {
            BlockKind::Own
        } else if scheme.omega(i).contains(&j) {
            BlockKind::Cross
        } else {
            BlockKind::Absent
        }
    }

    /// Number of free (unmasked) scalars, biases included.
    pub fn free_params(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

/// The interpretable multi-layer perceptron over a scheme. Hidden widths
/// are given per layer, per expert; the final tanh layer of width 1 per
/// expert is appended automatically.
#[derive(Debug, Clone)]
pub struct InterpretableMlp {
    scheme: InterpretationScheme,
    layers: Vec<MaskedLayerSpec>,
    /// Per-expert input masks as [1×n] row tensors, cached for forward.
    mask_rows: Vec<Tensor>,
}

impl InterpretableMlp {
    /// Builds layer specs and registers freshly initialised weights.
    ///
    /// `hidden_widths[k][i]` is the width of expert `i`'s stream on hidden
    /// layer `k`; an empty list yields the one-layer masked network.
    pub fn new(
        scheme: InterpretationScheme,
        hidden_widths: &[Vec<usize>],
        hidden_activation: Activation,
        store: &mut ParamStore,
        name_prefix: &str,
        rng: &mut DetRng,
    ) -> Result<Self, ModelError> {
        let h = scheme.num_subsets();
        for (k, widths) in hidden_widths.iter().enumerate() {
            if widths.len() != h {
                return Err(ModelError::BadWidths(format!(
                    "layer {k} has {} widths for {h} experts",
                    widths.len()
                )));
            }
            if widths.iter().any(|&w| w == 0) {
                return Err(ModelError::BadWidths(format!("layer {k} has a zero width")));
            }
        }

        let n = scheme.num_features();
        let mut layers = Vec::new();
        let mut prev_widths: Option<Vec<usize>> = None;
        let all_out: Vec<Vec<usize>> = hidden_widths
            .iter()
            .cloned()
            .chain(core::iter::once(vec![1; h]))
            .collect();
        let last = all_out.len() - 1;

        for (k, out_widths) in all_out.into_iter().enumerate() {
            let activation = if k == last {
                Activation::Tanh
            } else {
                hidden_activation
            };
            let layer = match &prev_widths {
                None => {
                    Self::build_input_layer(&scheme, n, &out_widths, activation, store, name_prefix, k, rng)?
                }
                Some(in_widths) => Self::build_block_layer(
                    &scheme,
                    in_widths,
                    &out_widths,
                    activation,
                    store,
                    name_prefix,
                    k,
                    rng,
                )?,
            };
            prev_widths = Some(out_widths);
            layers.push(layer);
        }

        let mask_rows = (0..h)
            .map(|i| {
                let data = scheme.mask_vector(i).expect("subset index in range");
                Tensor::from_vec(vec![1, n], data).expect("mask length")
            })
            .collect();

        Ok(Self {
            scheme,
            layers,
            mask_rows,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_input_layer(
        scheme: &InterpretationScheme,
        n: usize,
        out_widths: &[usize],
        activation: Activation,
        store: &mut ParamStore,
        name_prefix: &str,
        k: usize,
        rng: &mut DetRng,
    ) -> Result<MaskedLayerSpec, ModelError> {
        let h = scheme.num_subsets();
        let rows: usize = out_widths.iter().sum();
        let cols = n + 1;
        let mut weight = Tensor::zeros(rows, cols);
        let mut mask = Tensor::zeros(rows, cols);
        let mut row0 = 0;
        for i in 0..h {
            let m = scheme.mask(i).expect("subset index in range");
            let fan_in = m.iter().filter(|&&b| b).count();
            let limit = glorot_limit(fan_in, out_widths[i]);
            for r in row0..row0 + out_widths[i] {
                for (c, &present) in m.iter().enumerate() {
                    if present {
                        mask.set(r, c, 1.0);
                        weight.set(r, c, rng.random_range(-limit..limit));
                    }
                }
                mask.set(r, n, 1.0); // bias, never masked
            }
            row0 += out_widths[i];
        }
        let weight = store.register(format!("{name_prefix}.layer{k}.weight"), weight, true)?;
        Ok(MaskedLayerSpec {
            layer_index: k,
            kind: LayerKind::Input,
            in_widths: vec![n; h],
            out_widths: out_widths.to_vec(),
            activation,
            weight,
            mask,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_block_layer(
        scheme: &InterpretationScheme,
        in_widths: &[usize],
        out_widths: &[usize],
        activation: Activation,
        store: &mut ParamStore,
        name_prefix: &str,
        k: usize,
        rng: &mut DetRng,
    ) -> Result<MaskedLayerSpec, ModelError> {
        let h = scheme.num_subsets();
        let in_total: usize = in_widths.iter().sum();
        let rows: usize = out_widths.iter().sum();
        let cols = in_total + 1;
        let mut weight = Tensor::zeros(rows, cols);
        let mut mask = Tensor::zeros(rows, cols);
        let mut row0 = 0;
        for i in 0..h {
            let fan_in: usize = (0..h)
                .filter(|&j| MaskedLayerSpec::block_kind(scheme, i, j) != BlockKind::Absent)
                .map(|j| in_widths[j])
                .sum();
            let limit = glorot_limit(fan_in, out_widths[i]);
            let mut col0 = 0;
            for j in 0..h {
                if MaskedLayerSpec::block_kind(scheme, i, j) != BlockKind::Absent {
                    for r in row0..row0 + out_widths[i] {
                        for c in col0..col0 + in_widths[j] {
                            mask.set(r, c, 1.0);
                            weight.set(r, c, rng.random_range(-limit..limit));
                        }
                    }
                }
                col0 += in_widths[j];
            }
            for r in row0..row0 + out_widths[i] {
                mask.set(r, in_total, 1.0); // bias
            }
            row0 += out_widths[i];
        }
        let weight = store.register(format!("{name_prefix}.layer{k}.weight"), weight, true)?;
        Ok(MaskedLayerSpec {
            layer_index: k,
            kind: LayerKind::Block,
            in_widths: in_widths.to_vec(),
            out_widths: out_widths.to_vec(),
            activation,
            weight,
            mask,
        })
    }

    pub fn scheme(&self) -> &InterpretationScheme {
        &self.scheme
    }

    pub fn layers(&self) -> &[MaskedLayerSpec] {
        &self.layers
    }

    /// Forward pass from an input var `[batch×n]` to raw expert outputs
    /// `F ∈ [batch×H]`, stream `i` depending on `x ∘ m_i` only.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TapeError> {
        let h = self.scheme.num_subsets();
        let n = self.scheme.num_features();
        let batch = tape.value(x).rows();
        if tape.value(x).cols() != n {
            return Err(TapeError::DimMismatch {
                op: "mlp_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![batch, n],
            });
        }
        let ones = tape.constant(Tensor::filled(batch, 1, 1.0));

        // Per-expert streams; layer 0 consumes the masked input.
        let mut streams: Vec<Var> = Vec::with_capacity(h);
        {
            let layer = &self.layers[0];
            debug_assert_eq!(layer.kind, LayerKind::Input);
            let w = tape.param(store, layer.weight);
            for i in 0..h {
                let mask_row = tape.constant(self.mask_rows[i].clone());
                let restricted = tape.mul_row_broadcast(x, mask_row)?;
                let w_block = tape.slice(
                    w,
                    layer.row_offset(i),
                    layer.row_offset(i) + layer.out_widths[i],
                    0,
                    n,
                )?;
                let lin = tape.matmul_transb(restricted, w_block)?;
                let b_block = tape.slice(
                    w,
                    layer.row_offset(i),
                    layer.row_offset(i) + layer.out_widths[i],
                    n,
                    n + 1,
                )?;
                let bias = tape.matmul_transb(ones, b_block)?;
                let z = tape.add(lin, bias)?;
                streams.push(layer.activation.apply(tape, z));
            }
        }

        for layer in &self.layers[1..] {
            debug_assert_eq!(layer.kind, LayerKind::Block);
            let w = tape.param(store, layer.weight);
            let in_total = layer.in_total();
            // Gradient stops are shared across all parents of a child.
            let mut stopped: Vec<Option<Var>> = vec![None; h];
            let mut next: Vec<Var> = Vec::with_capacity(h);
            for i in 0..h {
                let r0 = layer.row_offset(i);
                let r1 = r0 + layer.out_widths[i];
                let mut acc: Option<Var> = None;
                for j in 0..h {
                    let kind = MaskedLayerSpec::block_kind(&self.scheme, i, j);
                    if kind == BlockKind::Absent {
                        continue;
                    }
                    let input = match kind {
                        BlockKind::Own => streams[j],
                        BlockKind::Cross => *stopped[j]
                            .get_or_insert_with(|| tape.stop_gradient(streams[j])),
                        BlockKind::Absent => unreachable!(),
                    };
                    let c0 = layer.col_offset(j);
                    let w_block = tape.slice(w, r0, r1, c0, c0 + layer.in_widths[j])?;
                    let term = tape.matmul_transb(input, w_block)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                let b_block = tape.slice(w, r0, r1, in_total, in_total + 1)?;
                let bias = tape.matmul_transb(ones, b_block)?;
                let z = tape.add(acc.expect("diagonal block always present"), bias)?;
                next.push(layer.activation.apply(tape, z));
            }
            streams = next;
        }

        tape.concat_cols(&streams)
    }

    /// Zeroes every masked weight entry. Idempotent; called after each
    /// optimizer step so absent blocks and masked columns stay exactly 0.
    pub fn apply_mask_constraint(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            let w = store.get_mut(layer.weight);
            for (v, &m) in w.tensor.data_mut().iter_mut().zip(layer.mask.data()) {
                if m == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// Structural trainable parameter count: free entries over all layers.
    pub fn free_params(&self) -> usize {
        self.layers.iter().map(|l| l.free_params()).sum()
    }

    /// Sets every weight (biases included) to zero; test helper for the
    /// all-zero edge cases.
    pub fn zero_weights(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            let w = store.get_mut(layer.weight);
            for v in w.tensor.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
    }
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}
