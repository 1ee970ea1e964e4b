//! Collaborative-filtering model: id embeddings plus content projections
//! feeding the interpretable MLP.
//!
//! A user is represented by a learned embedding p_u and a projection c_u
//! of its one-hot side features; an item by q_i and c_i. The four vectors
//! are concatenated in group order (c_u, p_u, c_i, q_i) and consumed by
//! the masked network, so interpretation subsets are unions of those four
//! groups. Embeddings sit before layer 0 and are not masked: each expert
//! whose subset includes a group propagates gradients into it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::masked::{Activation, InterpretableMlp, ModelError};
use crate::param::{ParamId, ParamStore};
use crate::scheme::{FeaturePartition, InterpretationScheme, SchemeError};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::trainer::{BatchInputs, ExpertModel};
use crate::DetRng;

/// Group indices of the CF scheme, in concatenation order.
pub const GROUP_USER_CONTENT: usize = 0;
pub const GROUP_USER_EMBEDDING: usize = 1;
pub const GROUP_ITEM_CONTENT: usize = 2;
pub const GROUP_ITEM_EMBEDDING: usize = 3;

/// The paper's four-subset CF scheme over (c_u, p_u, c_i, q_i):
/// {c_u,c_i}, {c_u,p_u,c_i}, {c_u,c_i,q_i}, {all}.
pub fn interpretable_subsets() -> Vec<Vec<usize>> {
    vec![
        vec![GROUP_USER_CONTENT, GROUP_ITEM_CONTENT],
        vec![GROUP_USER_CONTENT, GROUP_USER_EMBEDDING, GROUP_ITEM_CONTENT],
        vec![GROUP_USER_CONTENT, GROUP_ITEM_CONTENT, GROUP_ITEM_EMBEDDING],
        vec![
            GROUP_USER_CONTENT,
            GROUP_USER_EMBEDDING,
            GROUP_ITEM_CONTENT,
            GROUP_ITEM_EMBEDDING,
        ],
    ]
}

/// The single-subset control scheme (a dense NCF-MLP).
pub fn control_subsets() -> Vec<Vec<usize>> {
    vec![vec![
        GROUP_USER_CONTENT,
        GROUP_USER_EMBEDDING,
        GROUP_ITEM_CONTENT,
        GROUP_ITEM_EMBEDDING,
    ]]
}

#[derive(Debug, Clone)]
pub struct NcfModel {
    mlp: InterpretableMlp,
    user_embedding: ParamId,
    item_embedding: ParamId,
    user_proj_w: ParamId,
    user_proj_b: ParamId,
    item_proj_w: ParamId,
    item_proj_b: ParamId,
    user_content: Tensor,
    item_content: Tensor,
}

#[derive(Debug)]
pub enum NcfError {
    Scheme(SchemeError),
    Model(ModelError),
}

impl core::fmt::Display for NcfError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NcfError::Scheme(e) => write!(f, "{e}"),
            NcfError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for NcfError {}

impl From<SchemeError> for NcfError {
    fn from(e: SchemeError) -> Self {
        NcfError::Scheme(e)
    }
}

impl From<ModelError> for NcfError {
    fn from(e: ModelError) -> Self {
        NcfError::Model(e)
    }
}

impl NcfModel {
    /// `user_content`/`item_content` are dense one-hot/multi-hot side
    /// feature matrices (`[U×du]`, `[I×di]`); `subsets` index the four
    /// groups (see [`interpretable_subsets`]); `hidden_widths[k][e]` as in
    /// [`InterpretableMlp::new`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        user_content: Tensor,
        item_content: Tensor,
        cf_dim: usize,
        content_dim: usize,
        subsets: &[Vec<usize>],
        hidden_widths: &[Vec<usize>],
        activation: Activation,
        store: &mut ParamStore,
        rng: &mut DetRng,
    ) -> Result<Self, NcfError> {
        let n_users = user_content.rows();
        let n_items = item_content.rows();
        let partition = FeaturePartition::from_sizes(&[
            ("c_u", content_dim),
            ("p_u", cf_dim),
            ("c_i", content_dim),
            ("q_i", cf_dim),
        ])?;
        let scheme = InterpretationScheme::build(&partition, subsets)?;

        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let embedding = |rows: usize, cols: usize, rng: &mut DetRng| {
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::from_vec(vec![rows, cols], data).expect("length matches")
        };
        let user_emb_tensor = embedding(n_users, cf_dim, rng);
        let item_emb_tensor = embedding(n_items, cf_dim, rng);
        let user_embedding = store
            .register("ncf.user_embedding", user_emb_tensor, true)
            .map_err(ModelError::Param)?;
        let item_embedding = store
            .register("ncf.item_embedding", item_emb_tensor, true)
            .map_err(ModelError::Param)?;

        let projection = |name: &str,
                              in_dim: usize,
                              store: &mut ParamStore,
                              rng: &mut DetRng|
         -> Result<(ParamId, ParamId), ModelError> {
            let limit = libm::sqrt(6.0 / (in_dim + content_dim) as f64);
            let data: Vec<f64> = (0..content_dim * in_dim)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let w = store
                .register(
                    format!("ncf.{name}.weight"),
                    Tensor::from_vec(vec![content_dim, in_dim], data).expect("length"),
                    true,
                )
                .map_err(ModelError::Param)?;
            let b = store
                .register(
                    format!("ncf.{name}.bias"),
                    Tensor::zeros(content_dim, 1),
                    true,
                )
                .map_err(ModelError::Param)?;
            Ok((w, b))
        };
        let (user_proj_w, user_proj_b) =
            projection("user_proj", user_content.cols(), store, rng)?;
        let (item_proj_w, item_proj_b) =
            projection("item_proj", item_content.cols(), store, rng)?;

        let mlp = InterpretableMlp::new(scheme, hidden_widths, activation, store, "ncf.mlp", rng)?;

        Ok(Self {
            mlp,
            user_embedding,
            item_embedding,
            user_proj_w,
            user_proj_b,
            item_proj_w,
            item_proj_b,
            user_content,
            item_content,
        })
    }

    pub fn mlp(&self) -> &InterpretableMlp {
        &self.mlp
    }

    pub fn num_users(&self) -> usize {
        self.user_content.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_content.rows()
    }

    /// Trainable scalar count: embeddings and projections are dense,
    /// the MLP contributes its unmasked entries.
    pub fn free_params(&self, store: &ParamStore) -> usize {
        let dense = [
            self.user_embedding,
            self.item_embedding,
            self.user_proj_w,
            self.user_proj_b,
            self.item_proj_w,
            self.item_proj_b,
        ]
        .iter()
        .map(|&id| store.get(id).tensor.numel())
        .sum::<usize>();
        dense + self.mlp.free_params()
    }

    /// Assembles the dense input (c_u | p_u | c_i | q_i) for a batch of
    /// (user, item) pairs and runs the masked network.
    pub fn forward_pairs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        users: &[usize],
        items: &[usize],
    ) -> Result<Var, TapeError> {
        let b = users.len();
        let ones = tape.constant(Tensor::filled(b, 1, 1.0));

        let user_table = tape.param(store, self.user_embedding);
        let p_u = tape.gather_rows(user_table, users)?;
        let item_table = tape.param(store, self.item_embedding);
        let q_i = tape.gather_rows(item_table, items)?;

        let content = |raw: &Tensor,
                           ids: &[usize],
                           w_id: ParamId,
                           b_id: ParamId,
                           tape: &mut Tape|
         -> Result<Var, TapeError> {
            let rows = tape.constant(raw.gather_rows(ids));
            let w = tape.param(store, w_id);
            let lin = tape.matmul_transb(rows, w)?;
            let bias_param = tape.param(store, b_id);
            let bias = tape.matmul_transb(ones, bias_param)?;
            tape.add(lin, bias)
        };
        let c_u = content(
            &self.user_content,
            users,
            self.user_proj_w,
            self.user_proj_b,
            tape,
        )?;
        let c_i = content(
            &self.item_content,
            items,
            self.item_proj_w,
            self.item_proj_b,
            tape,
        )?;

        let x = tape.concat_cols(&[c_u, p_u, c_i, q_i])?;
        self.mlp.forward(tape, store, x)
    }
}

impl ExpertModel for NcfModel {
    fn scheme(&self) -> &InterpretationScheme {
        self.mlp.scheme()
    }

    fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &BatchInputs,
    ) -> Result<Var, TapeError> {
        match inputs {
            BatchInputs::Pairs { users, items } => self.forward_pairs(tape, store, users, items),
            BatchInputs::Dense(_) => Err(TapeError::DimMismatch {
                op: "ncf_forward",
                lhs: Vec::new(),
                rhs: Vec::new(),
            }),
        }
    }

    fn apply_mask_constraint(&self, store: &mut ParamStore) {
        self.mlp.apply_mask_constraint(store);
    }
}
