//! Reverse-mode gradients checked against central finite differences.
//!
//! Gradient stops change the function being differentiated: backward
//! computes the derivative with every stopped subexpression held at its
//! current value. The finite-difference oracles below therefore freeze
//! the same quantities (the attribution weights and the cross-block child
//! streams) before differencing.

mod common;

use attrimix::gradcheck::{finite_difference_gradients, max_relative_error};
use attrimix::masked::{Activation, InterpretableMlp};
use attrimix::mixture::SelectionConfig;
use attrimix::param::ParamStore;
use attrimix::scheme::{FeaturePartition, InterpretationScheme};
use attrimix::tape::Tape;
use attrimix::tensor::Tensor;
use attrimix::trainer::{training_loss, Batch, BatchInputs, Objective};
use attrimix::{rng_from_seed, DetRng};
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn random_tensor(rows: usize, cols: usize, rng: &mut DetRng) -> Tensor {
    Tensor::from_vec(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(101);
    let mut store = ParamStore::new();
    let a = store.register("a", random_tensor(4, 3, &mut rng), true).unwrap();
    let b = store.register("b", random_tensor(3, 2, &mut rng), true).unwrap();

    let loss_fn = |store: &ParamStore| {
        let mut tape = Tape::new();
        let av = tape.param(store, a);
        let bv = tape.param(store, b);
        let c = tape.matmul(av, bv).unwrap();
        let loss = tape.sum_all(c);
        tape.value(loss).at(0, 0)
    };

    let mut tape = Tape::new();
    let av = tape.param(&store, a);
    let bv = tape.param(&store, b);
    let c = tape.matmul(av, bv).unwrap();
    let loss = tape.sum_all(c);
    let grads = tape.backward(loss, &store).unwrap();

    let numeric = finite_difference_gradients(&store, loss_fn, FD_STEP);
    let err = max_relative_error(&grads, &numeric);
    assert!(err < 1e-5, "matmul gradcheck error {err}");
}

#[test]
fn two_layer_tanh_net_matches_finite_differences() {
    let mut rng = rng_from_seed(202);
    let mut store = ParamStore::new();
    let w1 = store.register("w1", random_tensor(5, 4, &mut rng), true).unwrap();
    let w2 = store.register("w2", random_tensor(1, 5, &mut rng), true).unwrap();
    let x = random_tensor(6, 4, &mut rng);
    let y = random_tensor(6, 1, &mut rng);

    let forward = |store: &ParamStore| -> (Tape, attrimix::tape::Var) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1v = tape.param(store, w1);
        let h_lin = tape.matmul_transb(xv, w1v).unwrap();
        let h = tape.tanh(h_lin);
        let w2v = tape.param(store, w2);
        let out_lin = tape.matmul_transb(h, w2v).unwrap();
        let out = tape.tanh(out_lin);
        let yv = tape.constant(y.clone());
        let diff = tape.sub(out, yv).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        (tape, loss)
    };

    let (tape, loss) = forward(&store);
    let grads = tape.backward(loss, &store).unwrap();
    let numeric = finite_difference_gradients(
        &store,
        |s| {
            let (tape, loss) = forward(s);
            tape.value(loss).at(0, 0)
        },
        FD_STEP,
    );
    let err = max_relative_error(&grads, &numeric);
    assert!(err < TOLERANCE, "two-layer tanh gradcheck error {err}");
}

/// Builds a small graph exercising every differentiable op kind and
/// returns the scalar loss.
fn all_ops_loss(store: &ParamStore, ids: &[attrimix::param::ParamId]) -> f64 {
    let mut tape = Tape::new();
    let a = tape.param(store, ids[0]); // 3×4
    let b = tape.param(store, ids[1]); // 3×4
    let w = tape.param(store, ids[2]); // 2×4

    let sum = tape.add(a, b).unwrap();
    let diff = tape.sub(a, b).unwrap();
    let prod = tape.mul(sum, diff).unwrap();
    let scaled = tape.scale(prod, 0.37);
    let shifted = tape.add_scalar(scaled, 1.9);
    let quotient = tape.div(prod, shifted).unwrap();
    let th = tape.tanh(quotient);
    let re = tape.relu(th);
    let ab = tape.abs(th);
    let sq = tape.square(ab);
    let clamped = tape.clamp(sq, 0.05, 0.8);
    let powed = tape.pow(clamped, 1.7);
    let safe = tape.add_scalar(powed, 1.0);
    let logged = tape.ln(safe);
    let together = tape.add(re, logged).unwrap();

    let lin = tape.matmul_transb(together, w).unwrap(); // 3×2
    let catc = tape.concat_cols(&[lin, lin]).unwrap(); // 3×4
    let catr = tape.concat_rows(&[catc, catc]).unwrap(); // 6×4
    let sliced = tape.slice(catr, 1, 5, 1, 4).unwrap(); // 4×3
    let gathered = tape.gather_rows(sliced, &[0, 2, 2, 3]).unwrap();
    let soft = tape.softmax_rows(gathered);
    let mixed = tape.mul(soft, soft).unwrap();
    let rows = tape.row_sum(mixed);
    let total = tape.sum_all(rows);
    let half = tape.mean_all(catr);
    let merged = tape.add(total, half).unwrap();
    let loss = merged;
    assert!(tape.is_topologically_sound());
    tape.value(loss).at(0, 0)
}

#[test]
fn random_graphs_over_all_op_kinds_match_finite_differences() {
    for seed in 0..8u64 {
        let mut rng = rng_from_seed(300 + seed);
        let mut store = ParamStore::new();
        let ids = vec![
            store.register("a", random_tensor(3, 4, &mut rng), true).unwrap(),
            store.register("b", random_tensor(3, 4, &mut rng), true).unwrap(),
            store.register("w", random_tensor(2, 4, &mut rng), true).unwrap(),
        ];

        // Analytic gradients via a rebuilt tape (same graph).
        let grads = {
            let mut tape = Tape::new();
            let a = tape.param(&store, ids[0]);
            let b = tape.param(&store, ids[1]);
            let w = tape.param(&store, ids[2]);
            let sum = tape.add(a, b).unwrap();
            let diff = tape.sub(a, b).unwrap();
            let prod = tape.mul(sum, diff).unwrap();
            let scaled = tape.scale(prod, 0.37);
            let shifted = tape.add_scalar(scaled, 1.9);
            let quotient = tape.div(prod, shifted).unwrap();
            let th = tape.tanh(quotient);
            let re = tape.relu(th);
            let ab = tape.abs(th);
            let sq = tape.square(ab);
            let clamped = tape.clamp(sq, 0.05, 0.8);
            let powed = tape.pow(clamped, 1.7);
            let safe = tape.add_scalar(powed, 1.0);
            let logged = tape.ln(safe);
            let together = tape.add(re, logged).unwrap();
            let lin = tape.matmul_transb(together, w).unwrap();
            let catc = tape.concat_cols(&[lin, lin]).unwrap();
            let catr = tape.concat_rows(&[catc, catc]).unwrap();
            let sliced = tape.slice(catr, 1, 5, 1, 4).unwrap();
            let gathered = tape.gather_rows(sliced, &[0, 2, 2, 3]).unwrap();
            let soft = tape.softmax_rows(gathered);
            let mixed = tape.mul(soft, soft).unwrap();
            let rows = tape.row_sum(mixed);
            let total = tape.sum_all(rows);
            let half = tape.mean_all(catr);
            let merged = tape.add(total, half).unwrap();
            tape.backward(merged, &store).unwrap()
        };

        let numeric =
            finite_difference_gradients(&store, |s| all_ops_loss(s, &ids), FD_STEP);
        let err = max_relative_error(&grads, &numeric);
        assert!(err < TOLERANCE, "seed {seed}: all-ops gradcheck error {err}");
    }
}

/// Random masked networks: reverse-mode vs finite differences on the GEM
/// training loss, H ≤ 4, ≤ 3 hidden layers, widths ≤ 8.
pub fn run_masked_network_gradcheck(count: usize, seed0: u64) -> f64 {
    let mut worst = 0.0f64;
    for run in 0..count {
        let seed = seed0 + run as u64;
        let mut rng = rng_from_seed(seed);
        // Random scheme over 2–4 groups of 1–2 features.
        let n_groups = rng.random_range(2..=4usize);
        let sizes: Vec<(String, usize)> = (0..n_groups)
            .map(|g| (format!("g{g}"), rng.random_range(1..=2usize)))
            .collect();
        let named: Vec<(&str, usize)> = sizes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let partition = FeaturePartition::from_sizes(&named).unwrap();
        // Subsets: each single group plus the full set, capped at H = 4.
        let mut specs: Vec<Vec<usize>> = (0..n_groups.min(3)).map(|g| vec![g]).collect();
        specs.push((0..n_groups).collect());
        let scheme = InterpretationScheme::build(&partition, &specs).unwrap();
        let h = scheme.num_subsets();

        let n_layers = rng.random_range(1..=3usize);
        let widths: Vec<Vec<usize>> = (0..n_layers)
            .map(|_| (0..h).map(|_| rng.random_range(2..=8usize)).collect())
            .collect();
        let mut store = ParamStore::new();
        let mlp = InterpretableMlp::new(
            scheme,
            &widths,
            Activation::Relu,
            &mut store,
            "mlp",
            &mut rng,
        )
        .unwrap();

        let batch_len = 5;
        let n = mlp.scheme().num_features();
        let x = random_tensor(batch_len, n, &mut rng);
        let labels: Vec<f64> = (0..batch_len)
            .map(|_| if rng.random_range(0.0..1.0) > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let batch = Batch {
            inputs: BatchInputs::Dense(x.clone()),
            labels: labels.clone(),
        };
        let selection = SelectionConfig::default();

        let grads = {
            let mut tape = Tape::new();
            let (loss, _) =
                training_loss(&mlp, &mut tape, &store, &batch, &selection, Objective::Gem)
                    .unwrap();
            tape.backward(loss, &store).unwrap()
        };

        // Freeze what the gradient stops freeze: α at its base value and
        // cross-block inputs at the base streams.
        let base_streams = common::reference_streams(&mlp, &store, &x);
        let base_raw = common::reference_forward(&mlp, &store, &x);
        let base_clamped = base_raw.map(|v| {
            v.max(2.0 * 1e-7 - 1.0).min(2.0 * (1.0 - 1e-7) - 1.0)
        });
        let alpha_const = attrimix::mixture::attribution_alpha(
            &attrimix::mixture::selection_g(&base_clamped, selection.g_variant),
            mlp.scheme(),
        );
        let numeric = finite_difference_gradients(
            &store,
            |s| common::frozen_gem_loss(&mlp, s, &x, &labels, &alpha_const, &base_streams),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&grads, &numeric));
    }
    worst
}

#[test]
fn masked_networks_match_finite_differences() {
    let err = run_masked_network_gradcheck(10, 7000);
    assert!(err < TOLERANCE, "masked network gradcheck error {err}");
}

#[test]
fn alpha_weighted_bce_gradient_scales_like_alpha() {
    // loss = stop(α)·BCE(y, f): the analytic gradient must equal the
    // finite-difference gradient of α_const · BCE, with α frozen at its
    // base value.
    let mut rng = rng_from_seed(404);
    let mut store = ParamStore::new();
    let w = store.register("w", random_tensor(1, 3, &mut rng), true).unwrap();
    let x = random_tensor(4, 3, &mut rng);

    let raw_of = |store: &ParamStore| -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(store, w);
        let lin = tape.matmul_transb(xv, wv).unwrap();
        let raw = tape.tanh(lin);
        tape.value(raw).clone()
    };
    let alpha_const = raw_of(&store).map(libm::fabs);

    // Analytic: tape graph with the α factor gradient-stopped.
    let grads = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&store, w);
        let lin = tape.matmul_transb(xv, wv).unwrap();
        let raw = tape.tanh(lin);
        let half = tape.scale(raw, 0.5);
        let f = tape.add_scalar(half, 0.5);
        let fc = tape.clamp(f, 1e-7, 1.0 - 1e-7);
        let ln_f = tape.ln(fc);
        let bce = tape.scale(ln_f, -1.0); // y = 1 everywhere
        let g = tape.abs(raw);
        let frozen = tape.stop_gradient(g);
        let weighted = tape.mul(frozen, bce).unwrap();
        let loss = tape.mean_all(weighted);
        tape.backward(loss, &store).unwrap()
    };

    // Numeric: α is a constant tensor, only the BCE factor moves.
    let numeric = finite_difference_gradients(
        &store,
        |s| {
            let raw = raw_of(s);
            let mut total = 0.0;
            for r in 0..raw.rows() {
                let p = ((raw.at(r, 0) + 1.0) / 2.0).clamp(1e-7, 1.0 - 1e-7);
                total += alpha_const.at(r, 0) * -libm::log(p);
            }
            total / raw.rows() as f64
        },
        FD_STEP,
    );
    let err = max_relative_error(&grads, &numeric);
    assert!(err < TOLERANCE, "α-weighted BCE gradcheck error {err}");
}

#[test]
fn attention_gradients_match_finite_differences() {
    use attrimix::attention::InterpretableAttention;

    let mut rng = rng_from_seed(505);
    let partition = FeaturePartition::from_sizes(&[("a", 1), ("b", 1)]).unwrap();
    let scheme = InterpretationScheme::build(&partition, &[vec![0], vec![0, 1]]).unwrap();
    let mut store = ParamStore::new();
    let att = InterpretableAttention::new(
        scheme.clone(),
        vec![3, 3],
        2,
        2,
        &mut store,
        "att",
        &mut rng,
    )
    .unwrap();
    let x = random_tensor(4, 6, &mut rng);

    let loss_fn = |store: &ParamStore| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = att
            .forward(&mut tape, store, xv, xv, xv, att.scheme())
            .unwrap();
        let sq = tape.square(out);
        let loss = tape.mean_all(sq);
        tape.value(loss).at(0, 0)
    };

    let grads = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = att
            .forward(&mut tape, &store, xv, xv, xv, att.scheme())
            .unwrap();
        let sq = tape.square(out);
        let loss = tape.mean_all(sq);
        tape.backward(loss, &store).unwrap()
    };
    let numeric = finite_difference_gradients(&store, loss_fn, FD_STEP);
    let err = max_relative_error(&grads, &numeric);
    assert!(err < TOLERANCE, "attention gradcheck error {err}");
}

#[test]
fn tape_determinism_bitwise() {
    // Same seed and op sequence → bit-identical losses and gradients.
    let run = || {
        let mut rng = rng_from_seed(606);
        let mut store = ParamStore::new();
        let ids = vec![
            store.register("a", random_tensor(3, 4, &mut rng), true).unwrap(),
            store.register("b", random_tensor(3, 4, &mut rng), true).unwrap(),
            store.register("w", random_tensor(2, 4, &mut rng), true).unwrap(),
        ];
        let loss = all_ops_loss(&store, &ids);
        (loss, store)
    };
    let (l1, s1) = run();
    let (l2, s2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (id, p) in s1.iter() {
        let other = &s2.get(id).tensor;
        for (a, b) in p.tensor.data().iter().zip(other.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
