//! Generalised-EM training of the expert mixture.
//!
//! Each step is an E-step followed by a generalised M-step collapsed into
//! one tape pass: attributions α are computed from the current parameters
//! and wrapped in a gradient stop (θ_old is the parameter vector at step
//! start), then one Adam step minimises the α-weighted binary
//! cross-entropy, mean over the batch of Σ_i stop(α^i) · BCE(y, f^i).
//! The mask constraint is re-applied after every step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use crate::adam::{AdamError, AdamState};
use crate::mixture::{alpha_on_tape, g_on_tape, SelectionConfig};
use crate::param::ParamStore;
use crate::scheme::InterpretationScheme;
use crate::tape::{Tape, TapeError, Var, PROB_CLAMP_HI, PROB_CLAMP_LO};
use crate::tensor::Tensor;
use crate::{rng_from_seed, DetRng};

/// A model exposing raw per-expert outputs for a batch of inputs.
pub trait ExpertModel {
    fn scheme(&self) -> &InterpretationScheme;
    fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &BatchInputs,
    ) -> Result<Var, TapeError>;
    fn apply_mask_constraint(&self, store: &mut ParamStore);
}

impl ExpertModel for crate::masked::InterpretableMlp {
    fn scheme(&self) -> &InterpretationScheme {
        crate::masked::InterpretableMlp::scheme(self)
    }

    fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &BatchInputs,
    ) -> Result<Var, TapeError> {
        match inputs {
            BatchInputs::Dense(x) => {
                let x = tape.constant((*x).clone());
                self.forward(tape, store, x)
            }
            BatchInputs::Pairs { .. } => Err(TapeError::DimMismatch {
                op: "mlp_forward",
                lhs: Vec::new(),
                rhs: Vec::new(),
            }),
        }
    }

    fn apply_mask_constraint(&self, store: &mut ParamStore) {
        crate::masked::InterpretableMlp::apply_mask_constraint(self, store)
    }
}

/// Batch inputs: a dense feature matrix, or (user, item) index pairs for
/// models with embedding lookups.
#[derive(Debug, Clone)]
pub enum BatchInputs {
    Dense(Tensor),
    Pairs { users: Vec<usize>, items: Vec<usize> },
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        match self {
            BatchInputs::Dense(x) => x.rows(),
            BatchInputs::Pairs { users, .. } => users.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labelled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: BatchInputs,
    /// Labels in {0, 1}.
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// α-weighted BCE (the GEM M-step objective).
    Gem,
    /// Plain BCE averaged over all expert columns; the non-interpretable
    /// control (H = 1) trains with this.
    PlainBce,
}

/// Reduce-on-plateau schedule for the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        // The paper only pins the floor; factor and patience are ours.
        Self {
            factor: 0.5,
            patience: 3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemConfig {
    pub learning_rate: f64,
    pub plateau: PlateauConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub selection: SelectionConfig,
    pub objective: Objective,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            plateau: PlateauConfig::default(),
            batch_size: 64,
            epochs: 10,
            seed: 0,
            selection: SelectionConfig::default(),
            objective: Objective::Gem,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    /// Labels must be exactly 0.0 or 1.0.
    LabelError { index: usize, value: f64 },
    /// The loss became non-finite.
    DivergenceError { step: u64 },
    /// Label count must match the batch size.
    BatchMismatch { inputs: usize, labels: usize },
    Tape(TapeError),
    Adam(AdamError),
    /// Learning rate and schedule must be positive with floor ≤ η.
    BadConfig(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::LabelError { index, value } => {
                write!(f, "label at index {index} is {value}, expected 0 or 1")
            }
            TrainError::DivergenceError { step } => {
                write!(f, "non-finite loss at optimizer step {step}")
            }
            TrainError::BatchMismatch { inputs, labels } => {
                write!(f, "batch has {inputs} inputs but {labels} labels")
            }
            TrainError::Tape(e) => write!(f, "{e}"),
            TrainError::Adam(e) => write!(f, "{e}"),
            TrainError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

impl From<AdamError> for TrainError {
    fn from(e: AdamError) -> Self {
        TrainError::Adam(e)
    }
}

impl GemConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.plateau.floor > self.learning_rate {
            return Err(TrainError::BadConfig(format!(
                "plateau floor {} exceeds learning rate {}",
                self.plateau.floor, self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be positive".into()));
        }
        self.selection
            .validate()
            .map_err(|e| TrainError::BadConfig(format!("{e}")))
    }
}

/// Builds the training loss on the tape and returns (loss var, F var).
///
/// GEM: loss = meanᵦ Σ_i stop(α^i) · BCE(y, f^i), with α assembled from
/// the same forward pass (θ_old = θ at step start) and gradient-stopped.
pub fn training_loss<M: ExpertModel>(
    model: &M,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &Batch,
    selection: &SelectionConfig,
    objective: Objective,
) -> Result<(Var, Var), TrainError> {
    if batch.inputs.len() != batch.labels.len() {
        return Err(TrainError::BatchMismatch {
            inputs: batch.inputs.len(),
            labels: batch.labels.len(),
        });
    }
    if let Some((index, &value)) = batch
        .labels
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && v != 1.0)
    {
        return Err(TrainError::LabelError { index, value });
    }

    let scheme = model.scheme();
    let h = scheme.num_subsets();
    let b = batch.inputs.len();

    let raw = model.forward_batch(tape, store, &batch.inputs)?;
    // Clamp once so f ∈ [lo, hi] even at tanh saturation; f = (F+1)/2.
    let clamped = tape.clamp(raw, 2.0 * PROB_CLAMP_LO - 1.0, 2.0 * PROB_CLAMP_HI - 1.0);
    let half = tape.scale(clamped, 0.5);
    let f = tape.add_scalar(half, 0.5);

    // BCE(y, f) = −[y ln f + (1−y) ln(1−f)], y tiled across experts.
    let mut y_tile = Tensor::zeros(b, h);
    for r in 0..b {
        for c in 0..h {
            y_tile.set(r, c, batch.labels[r]);
        }
    }
    let one_minus_y = y_tile.map(|v| 1.0 - v);
    let y_var = tape.constant(y_tile);
    let y_comp = tape.constant(one_minus_y);
    let ln_f = tape.ln(f);
    let neg_f = tape.scale(f, -1.0);
    let one_minus_f = tape.add_scalar(neg_f, 1.0);
    let ln_omf = tape.ln(one_minus_f);
    let t1 = tape.mul(y_var, ln_f)?;
    let t2 = tape.mul(y_comp, ln_omf)?;
    let sum = tape.add(t1, t2)?;
    let bce = tape.scale(sum, -1.0);

    let loss = match objective {
        Objective::Gem => {
            let g = g_on_tape(tape, clamped, selection.g_variant)?;
            let alpha = alpha_on_tape(tape, g, scheme)?;
            let alpha_frozen = tape.stop_gradient(alpha);
            let weighted = tape.mul(alpha_frozen, bce)?;
            let per_sample = tape.row_sum(weighted);
            tape.mean_all(per_sample)
        }
        Objective::PlainBce => tape.mean_all(bce),
    };
    Ok((loss, raw))
}

/// One GEM step: loss, backward, Adam update, mask constraint.
/// Returns the scalar loss value.
pub fn gem_step<M: ExpertModel>(
    model: &M,
    store: &mut ParamStore,
    adam: &mut AdamState,
    batch: &Batch,
    selection: &SelectionConfig,
    objective: Objective,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (loss, _) = training_loss(model, &mut tape, store, batch, selection, objective)?;
    let loss_value = tape.value(loss).at(0, 0);
    if !loss_value.is_finite() {
        return Err(TrainError::DivergenceError {
            step: adam.step_count() + 1,
        });
    }
    let grads = tape.backward(loss, store)?;
    adam.step(store, &grads)?;
    model.apply_mask_constraint(store);
    Ok(loss_value)
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
}

impl TrainHistory {
    pub fn final_val(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_metric)
    }
}

/// Runs `epochs` passes of GEM steps over the batches yielded per epoch.
///
/// `batches` receives the epoch index and the run RNG and must be
/// deterministic given them. `val_metric` is evaluated after each epoch;
/// lower is better, and the plateau schedule reduces the learning rate
/// after `patience` epochs without improvement, down to the floor.
pub fn train<M: ExpertModel>(
    model: &M,
    store: &mut ParamStore,
    adam: &mut AdamState,
    config: &GemConfig,
    mut batches: impl FnMut(usize, &mut DetRng) -> Vec<Batch>,
    mut val_metric: impl FnMut(&ParamStore) -> f64,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    adam.set_learning_rate(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(epoch, &mut rng) {
            total +=
                gem_step(model, store, adam, &batch, &config.selection, config.objective)?;
            count += 1;
        }
        let train_loss = if count > 0 { total / count as f64 } else { 0.0 };
        let val = val_metric(store);
        if val < best {
            best = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.plateau.patience {
                let lr = (adam.learning_rate() * config.plateau.factor)
                    .max(config.plateau.floor);
                adam.set_learning_rate(lr);
                stale = 0;
            }
        }
        history.rows.push(EpochRow {
            epoch,
            train_loss,
            val_metric: val,
            learning_rate: adam.learning_rate(),
        });
    }
    Ok(history)
}

/// Splits `n` shuffled indices into batches of (at most) `batch_size`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut DetRng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Inference pass: raw outputs for a batch plus all mixture quantities
/// under the given (possibly different) inference selection config.
pub fn predict_with_attribution<M: ExpertModel>(
    model: &M,
    store: &ParamStore,
    inputs: &BatchInputs,
    selection: &SelectionConfig,
) -> Result<crate::mixture::MixturePrediction, TrainError> {
    let mut tape = Tape::new();
    let raw = model.forward_batch(&mut tape, store, inputs)?;
    Ok(crate::mixture::MixturePrediction::from_raw(
        tape.value(raw).clone(),
        model.scheme(),
        selection,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::AdamConfig;
    use crate::masked::{Activation, InterpretableMlp};
    use crate::scheme::{FeaturePartition, InterpretationScheme};

    fn toy_scheme() -> InterpretationScheme {
        let partition = FeaturePartition::from_sizes(&[("x1", 1), ("x2", 1)]).unwrap();
        InterpretationScheme::build(&partition, &[vec![0], vec![1], vec![0, 1]]).unwrap()
    }

    fn toy_model(seed: u64) -> (InterpretableMlp, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng_from_seed(seed);
        let mlp = InterpretableMlp::new(
            toy_scheme(),
            &[vec![8, 8, 8]],
            Activation::Relu,
            &mut store,
            "mlp",
            &mut rng,
        )
        .unwrap();
        (mlp, store)
    }

    fn toy_batch() -> Batch {
        Batch {
            inputs: BatchInputs::Dense(
                Tensor::matrix(4, 2, vec![-1.5, 0.1, 1.4, -0.2, 0.1, -1.6, 0.0, 1.5]).unwrap(),
            ),
            labels: vec![1.0, 0.0, 1.0, 0.0],
        }
    }

    #[test]
    fn non_binary_labels_rejected() {
        let (mlp, mut store) = toy_model(1);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut batch = toy_batch();
        batch.labels[2] = 0.5;
        let err = gem_step(
            &mlp,
            &mut store,
            &mut adam,
            &batch,
            &SelectionConfig::default(),
            Objective::Gem,
        )
        .unwrap_err();
        assert_eq!(err, TrainError::LabelError { index: 2, value: 0.5 });
    }

    #[test]
    fn zero_alpha_means_zero_loss_and_no_update() {
        // With all weights zero, F ≡ 0 so every α is 0: the weighted loss
        // is identically zero and parameters must not move.
        let (mlp, mut store) = toy_model(2);
        mlp.zero_weights(&mut store);
        let before = store.clone();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let loss = gem_step(
            &mlp,
            &mut store,
            &mut adam,
            &toy_batch(),
            &SelectionConfig::default(),
            Objective::Gem,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        for (id, p) in store.iter() {
            assert_eq!(p.tensor, before.get(id).tensor);
        }
    }

    #[test]
    fn single_expert_unit_alpha_is_plain_bce() {
        // H = 1 and α forced to 1 by a saturated expert is awkward to
        // construct; instead check the identity at the formula level:
        // a zero-weight single-expert model has f = 0.5 and plain BCE
        // ln 2 regardless of labels.
        let partition = FeaturePartition::from_sizes(&[("all", 2)]).unwrap();
        let scheme = InterpretationScheme::build(&partition, &[vec![0]]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = crate::rng_from_seed(3);
        let mlp = InterpretableMlp::new(
            scheme,
            &[vec![4]],
            Activation::Relu,
            &mut store,
            "mlp",
            &mut rng,
        )
        .unwrap();
        mlp.zero_weights(&mut store);
        let batch = Batch {
            inputs: BatchInputs::Dense(Tensor::matrix(2, 2, vec![0.5, 1.0, -1.0, 0.2]).unwrap()),
            labels: vec![1.0, 0.0],
        };
        let mut tape = Tape::new();
        let (loss, _) = training_loss(
            &mlp,
            &mut tape,
            &store,
            &batch,
            &SelectionConfig::default(),
            Objective::PlainBce,
        )
        .unwrap();
        let ln2 = core::f64::consts::LN_2;
        assert!((tape.value(loss).at(0, 0) - ln2).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (mlp, mut store) = toy_model(4);
        let before = store.clone();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let history = train(
            &mlp,
            &mut store,
            &mut adam,
            &GemConfig {
                epochs: 0,
                ..GemConfig::default()
            },
            |_, _| vec![toy_batch()],
            |_| 0.0,
        )
        .unwrap();
        assert!(history.rows.is_empty());
        for (id, p) in store.iter() {
            assert_eq!(p.tensor, before.get(id).tensor);
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let run = || {
            let (mlp, mut store) = toy_model(5);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            let history = train(
                &mlp,
                &mut store,
                &mut adam,
                &GemConfig {
                    epochs: 3,
                    seed: 11,
                    ..GemConfig::default()
                },
                |_, _| vec![toy_batch()],
                |s| s.get(crate::param::ParamId(0)).tensor.data()[0],
            )
            .unwrap();
            (history, store)
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1, h2);
        for (id, p) in s1.iter() {
            assert_eq!(p.tensor, s2.get(id).tensor);
        }
    }

    #[test]
    fn plateau_reduces_learning_rate_to_floor() {
        let (mlp, mut store) = toy_model(6);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let config = GemConfig {
            epochs: 30,
            learning_rate: 1e-3,
            plateau: PlateauConfig {
                factor: 0.1,
                patience: 2,
                floor: 1e-6,
            },
            ..GemConfig::default()
        };
        // constant validation metric → no improvement after epoch 0
        let history = train(
            &mlp,
            &mut store,
            &mut adam,
            &config,
            |_, _| vec![toy_batch()],
            |_| 1.0,
        )
        .unwrap();
        let last = history.rows.last().unwrap();
        assert_eq!(last.learning_rate, 1e-6);
        assert!(history.rows.iter().any(|r| r.learning_rate == 1e-4));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut config = GemConfig::default();
        config.learning_rate = 0.0;
        assert!(matches!(config.validate(), Err(TrainError::BadConfig(_))));
        let mut config = GemConfig::default();
        config.plateau.floor = 1.0;
        assert!(matches!(config.validate(), Err(TrainError::BadConfig(_))));
    }
}
