//! Value-level reference computations shared by the integration tests.
//!
//! Everything here recomputes model outputs with plain tensor arithmetic,
//! independently of the tape, so it can serve as an oracle for the taped
//! forward/backward paths.

#![allow(dead_code)]

use attrimix::masked::{Activation, BlockKind, InterpretableMlp, MaskedLayerSpec};
use attrimix::param::ParamStore;
use attrimix::scheme::InterpretationScheme;
use attrimix::tensor::Tensor;

pub fn apply_activation(a: Activation, t: &Tensor) -> Tensor {
    match a {
        Activation::Relu => t.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Tanh => t.map(libm::tanh),
        Activation::Identity => t.clone(),
    }
}

fn row_range(layer: &MaskedLayerSpec, expert: usize) -> (usize, usize) {
    let start: usize = layer.out_widths[..expert].iter().sum();
    (start, start + layer.out_widths[expert])
}

fn col_range(layer: &MaskedLayerSpec, expert: usize) -> (usize, usize) {
    let start: usize = layer.in_widths[..expert].iter().sum();
    (start, start + layer.in_widths[expert])
}

fn bias_of(layer: &MaskedLayerSpec, weight: &Tensor, expert: usize, batch: usize) -> Tensor {
    let (r0, r1) = row_range(layer, expert);
    let bias_col = weight.cols() - 1;
    let bias = weight.slice2(r0, r1, bias_col, bias_col + 1);
    let mut out = Tensor::zeros(batch, r1 - r0);
    for r in 0..batch {
        for c in 0..(r1 - r0) {
            out.set(r, c, bias.at(c, 0));
        }
    }
    out
}

/// Per-layer, per-expert activations of the masked MLP, recomputed with
/// plain tensor ops (no tape).
pub fn reference_streams(
    mlp: &InterpretableMlp,
    store: &ParamStore,
    x: &Tensor,
) -> Vec<Vec<Tensor>> {
    reference_streams_with_cross(mlp, store, x, None)
}

/// Same, but when `frozen` is given, every cross-block input is read from
/// the frozen snapshot instead of the live computation. This is the
/// function whose true derivative matches backward-with-gradient-stops.
pub fn reference_streams_with_cross(
    mlp: &InterpretableMlp,
    store: &ParamStore,
    x: &Tensor,
    frozen: Option<&[Vec<Tensor>]>,
) -> Vec<Vec<Tensor>> {
    let scheme = mlp.scheme();
    let h = scheme.num_subsets();
    let n = scheme.num_features();
    let batch = x.rows();
    let mut all_layers: Vec<Vec<Tensor>> = Vec::new();

    // Input layer: restrict x per expert, then multiply the row block.
    let layer = &mlp.layers()[0];
    let weight = &store.get(layer.weight).tensor;
    let mut streams = Vec::with_capacity(h);
    for i in 0..h {
        let mask = scheme.mask_vector(i).unwrap();
        let mut xm = x.clone();
        for r in 0..batch {
            for c in 0..n {
                xm.set(r, c, xm.at(r, c) * mask[c]);
            }
        }
        let (r0, r1) = row_range(layer, i);
        let w_block = weight.slice2(r0, r1, 0, n);
        let mut z = xm.matmul_transb(&w_block);
        let bias = bias_of(layer, weight, i, batch);
        z = z.zip(&bias, |a, b| a + b);
        streams.push(apply_activation(layer.activation, &z));
    }
    all_layers.push(streams);

    for (layer_pos, layer) in mlp.layers().iter().enumerate().skip(1) {
        let weight = &store.get(layer.weight).tensor;
        let prev = &all_layers[layer_pos - 1];
        let mut streams = Vec::with_capacity(h);
        for i in 0..h {
            let (r0, r1) = row_range(layer, i);
            let mut z = bias_of(layer, weight, i, batch);
            for j in 0..h {
                let kind = MaskedLayerSpec::block_kind(scheme, i, j);
                if kind == BlockKind::Absent {
                    continue;
                }
                let input = match (kind, frozen) {
                    (BlockKind::Cross, Some(f)) => &f[layer_pos - 1][j],
                    _ => &prev[j],
                };
                let (c0, c1) = col_range(layer, j);
                let w_block = weight.slice2(r0, r1, c0, c1);
                let term = input.matmul_transb(&w_block);
                z = z.zip(&term, |a, b| a + b);
            }
            streams.push(apply_activation(layer.activation, &z));
        }
        all_layers.push(streams);
    }
    all_layers
}

/// Raw expert outputs `[batch×H]` via the value-level reference path.
pub fn reference_forward(mlp: &InterpretableMlp, store: &ParamStore, x: &Tensor) -> Tensor {
    let layers = reference_streams(mlp, store, x);
    let last = layers.last().unwrap();
    let refs: Vec<&Tensor> = last.iter().collect();
    Tensor::concat_cols(&refs)
}

/// Raw expert outputs with cross-block inputs frozen at the snapshot.
pub fn reference_forward_frozen(
    mlp: &InterpretableMlp,
    store: &ParamStore,
    x: &Tensor,
    frozen: &[Vec<Tensor>],
) -> Tensor {
    let layers = reference_streams_with_cross(mlp, store, x, Some(frozen));
    let last = layers.last().unwrap();
    let refs: Vec<&Tensor> = last.iter().collect();
    Tensor::concat_cols(&refs)
}

/// The GEM loss with a *constant* attribution tensor and frozen cross
/// streams: the function whose true derivative equals what training-time
/// backward computes (α gradient-stopped, child streams stopped).
pub fn frozen_gem_loss(
    mlp: &InterpretableMlp,
    store: &ParamStore,
    x: &Tensor,
    labels: &[f64],
    alpha_const: &Tensor,
    frozen: &[Vec<Tensor>],
) -> f64 {
    let raw = reference_forward_frozen(mlp, store, x, frozen);
    let clamped = raw.map(|v| v.max(2.0 * 1e-7 - 1.0).min(2.0 * (1.0 - 1e-7) - 1.0));
    let f = clamped.map(|v| (v + 1.0) / 2.0);
    let h = f.cols();
    let mut total = 0.0;
    for r in 0..f.rows() {
        let y = labels[r];
        let mut row = 0.0;
        for c in 0..h {
            let p = f.at(r, c);
            let bce = -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p));
            row += alpha_const.at(r, c) * bce;
        }
        total += row;
    }
    total / f.rows() as f64
}

/// Interpretation scheme of the two synthetic tasks.
pub fn toy_scheme() -> InterpretationScheme {
    let partition =
        attrimix::scheme::FeaturePartition::from_sizes(&[("x1", 1), ("x2", 1)]).unwrap();
    InterpretationScheme::build(&partition, &[vec![0], vec![1], vec![0, 1]]).unwrap()
}

/// The paper's MovieLens scheme at arbitrary group widths.
pub fn movielens_scheme(content_dim: usize, cf_dim: usize) -> InterpretationScheme {
    let partition = attrimix::scheme::FeaturePartition::from_sizes(&[
        ("c_u", content_dim),
        ("p_u", cf_dim),
        ("c_i", content_dim),
        ("q_i", cf_dim),
    ])
    .unwrap();
    InterpretationScheme::build(
        &partition,
        &[vec![0, 2], vec![0, 1, 2], vec![0, 2, 3], vec![0, 1, 2, 3]],
    )
    .unwrap()
}
