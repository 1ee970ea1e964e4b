//! Interpretable multi-head attention: heads partitioned into expert
//! groups with masked q/k/v projections and a block-diagonal output mixer.
//!
//! The model dimension is a concatenation of per-expert streams, exactly
//! like the hidden layers of the masked MLP. A head assigned to expert i
//! projects only the streams of subset i and its children (child streams
//! pass through a gradient stop), attends with scaled dot products, and
//! expert i's output stream mixes the outputs of its own head group. With
//! a single expert this collapses to standard multi-head attention.
//!
//! Queries may come from a different interpretation scheme (the
//! heterogeneous-input case); expert-wise, the query subset must then be
//! included in the key/value subset by group names.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use rand::Rng;

use crate::param::{ParamError, ParamId, ParamStore};
use crate::scheme::{hetero_link_allowed, InterpretationScheme, SchemeError};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::DetRng;

#[derive(Debug, Clone)]
pub struct InterpretableAttention {
    scheme: InterpretationScheme,
    stream_dims: Vec<usize>,
    heads_per_expert: usize,
    head_dim: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    proj_mask: Tensor,
    out_mask: Tensor,
}

#[derive(Debug)]
pub enum AttentionError {
    /// Query subsets must be contained in the key/value subsets.
    Namespace(SchemeError),
    /// Query and key/value schemes must agree on the expert count.
    ExpertCountMismatch { query: usize, key_value: usize },
    BadConfig(alloc::string::String),
    Param(ParamError),
    Tape(TapeError),
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionError::Namespace(e) => write!(f, "{e}"),
            AttentionError::ExpertCountMismatch { query, key_value } => write!(
                f,
                "query scheme has {query} subsets, key/value scheme has {key_value}"
            ),
            AttentionError::BadConfig(msg) => write!(f, "bad attention config: {msg}"),
            AttentionError::Param(e) => write!(f, "{e}"),
            AttentionError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for AttentionError {}

impl From<TapeError> for AttentionError {
    fn from(e: TapeError) -> Self {
        AttentionError::Tape(e)
    }
}

impl From<ParamError> for AttentionError {
    fn from(e: ParamError) -> Self {
        AttentionError::Param(e)
    }
}

impl InterpretableAttention {
    /// `stream_dims[i]` is the width of expert i's stream; the total
    /// head count is `H · heads_per_expert`.
    pub fn new(
        scheme: InterpretationScheme,
        stream_dims: Vec<usize>,
        heads_per_expert: usize,
        head_dim: usize,
        store: &mut ParamStore,
        name_prefix: &str,
        rng: &mut DetRng,
    ) -> Result<Self, AttentionError> {
        let h = scheme.num_subsets();
        if stream_dims.len() != h {
            return Err(AttentionError::BadConfig(format!(
                "{} stream dims for {h} experts",
                stream_dims.len()
            )));
        }
        if heads_per_expert == 0 || head_dim == 0 {
            return Err(AttentionError::BadConfig(
                "heads_per_expert and head_dim must be positive".into(),
            ));
        }
        let d_model: usize = stream_dims.iter().sum();
        let p = h * heads_per_expert;

        // Projection mask: rows are heads × head_dim, columns the input
        // streams; head rows of expert i open the columns of i and ω(i).
        let mut proj_mask = Tensor::zeros(p * head_dim, d_model);
        let mut stream_offsets = vec![0usize; h + 1];
        for i in 0..h {
            stream_offsets[i + 1] = stream_offsets[i] + stream_dims[i];
        }
        for head in 0..p {
            let expert = head / heads_per_expert;
            for j in 0..h {
                let allowed = j == expert || scheme.omega(expert).contains(&j);
                if !allowed {
                    continue;
                }
                for r in head * head_dim..(head + 1) * head_dim {
                    for c in stream_offsets[j]..stream_offsets[j + 1] {
                        proj_mask.set(r, c, 1.0);
                    }
                }
            }
        }

        // Output mixer mask: stream i reads only its own head group.
        let mut out_mask = Tensor::zeros(d_model, p * head_dim);
        for i in 0..h {
            let head0 = i * heads_per_expert;
            for r in stream_offsets[i]..stream_offsets[i + 1] {
                for c in head0 * head_dim..(head0 + heads_per_expert) * head_dim {
                    out_mask.set(r, c, 1.0);
                }
            }
        }

        let init = |mask: &Tensor, fan_out: usize, rng: &mut DetRng| {
            let mut weight = Tensor::zeros(mask.rows(), mask.cols());
            for r in 0..mask.rows() {
                let fan_in = (0..mask.cols()).filter(|&c| mask.at(r, c) != 0.0).count();
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                for c in 0..mask.cols() {
                    if mask.at(r, c) != 0.0 {
                        weight.set(r, c, rng.random_range(-limit..limit));
                    }
                }
            }
            weight
        };
        let wq_t = init(&proj_mask, head_dim, rng);
        let wk_t = init(&proj_mask, head_dim, rng);
        let wv_t = init(&proj_mask, head_dim, rng);
        let wo_t = init(&out_mask, d_model, rng);
        let wq = store.register(format!("{name_prefix}.wq"), wq_t, true)?;
        let wk = store.register(format!("{name_prefix}.wk"), wk_t, true)?;
        let wv = store.register(format!("{name_prefix}.wv"), wv_t, true)?;
        let wo = store.register(format!("{name_prefix}.wo"), wo_t, true)?;

        Ok(Self {
            scheme,
            stream_dims,
            heads_per_expert,
            head_dim,
            wq,
            wk,
            wv,
            wo,
            proj_mask,
            out_mask,
        })
    }

    pub fn scheme(&self) -> &InterpretationScheme {
        &self.scheme
    }

    pub fn num_heads(&self) -> usize {
        self.scheme.num_subsets() * self.heads_per_expert
    }

    pub fn d_model(&self) -> usize {
        self.stream_dims.iter().sum()
    }

    fn stream_range(&self, i: usize) -> (usize, usize) {
        let start: usize = self.stream_dims[..i].iter().sum();
        (start, start + self.stream_dims[i])
    }

    /// Attention over sequences laid out as `[T × d_model]`, with queries
    /// from `q_scheme` (pass the module scheme for the homogeneous case).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        q_scheme: &InterpretationScheme,
    ) -> Result<Var, AttentionError> {
        let h = self.scheme.num_subsets();
        if q_scheme.num_subsets() != h {
            return Err(AttentionError::ExpertCountMismatch {
                query: q_scheme.num_subsets(),
                key_value: h,
            });
        }
        for e in 0..h {
            let allowed = hetero_link_allowed(&self.scheme, e, q_scheme, e)
                .map_err(AttentionError::Namespace)?;
            if !allowed {
                return Err(AttentionError::Namespace(SchemeError::NamespaceError(
                    format!("query subset {e} is not included in its key/value subset"),
                )));
            }
        }

        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);

        // Per-stream slices and shared gradient stops.
        let split = |tape: &mut Tape, x: Var| -> Result<Vec<Var>, TapeError> {
            (0..h)
                .map(|i| {
                    let (c0, c1) = self.stream_range(i);
                    tape.slice_cols(x, c0, c1)
                })
                .collect()
        };
        let qs = split(tape, q)?;
        let ks = split(tape, k)?;
        let vs = split(tape, v)?;
        let mut q_stop: Vec<Option<Var>> = vec![None; h];
        let mut k_stop: Vec<Option<Var>> = vec![None; h];
        let mut v_stop: Vec<Option<Var>> = vec![None; h];

        let scale = 1.0 / libm::sqrt(self.head_dim as f64);
        let mut expert_outputs = Vec::with_capacity(h);
        for e in 0..h {
            let mut head_outputs = Vec::with_capacity(self.heads_per_expert);
            for head_local in 0..self.heads_per_expert {
                let head = e * self.heads_per_expert + head_local;
                let r0 = head * self.head_dim;
                let r1 = r0 + self.head_dim;

                let project = |tape: &mut Tape,
                                   streams: &[Var],
                                   stops: &mut Vec<Option<Var>>,
                                   w: Var|
                 -> Result<Var, TapeError> {
                    let mut acc: Option<Var> = None;
                    for j in 0..h {
                        let allowed = j == e || self.scheme.omega(e).contains(&j);
                        if !allowed {
                            continue;
                        }
                        let input = if j == e {
                            streams[j]
                        } else {
                            *stops[j].get_or_insert_with(|| tape.stop_gradient(streams[j]))
                        };
                        let (c0, c1) = self.stream_range(j);
                        let w_block = tape.slice(w, r0, r1, c0, c1)?;
                        let term = tape.matmul_transb(input, w_block)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => tape.add(a, term)?,
                        });
                    }
                    Ok(acc.expect("own stream always allowed"))
                };

                let q_h = project(tape, &qs, &mut q_stop, wq)?;
                let k_h = project(tape, &ks, &mut k_stop, wk)?;
                let v_h = project(tape, &vs, &mut v_stop, wv)?;

                let raw_scores = tape.matmul_transb(q_h, k_h)?;
                let scores = tape.scale(raw_scores, scale);
                let att = tape.softmax_rows(scores);
                head_outputs.push(tape.matmul(att, v_h)?);
            }
            let heads = tape.concat_cols(&head_outputs)?;
            let (s0, s1) = self.stream_range(e);
            let head_c0 = e * self.heads_per_expert * self.head_dim;
            let head_c1 = head_c0 + self.heads_per_expert * self.head_dim;
            let wo_block = tape.slice(wo, s0, s1, head_c0, head_c1)?;
            expert_outputs.push(tape.matmul_transb(heads, wo_block)?);
        }
        Ok(tape.concat_cols(&expert_outputs)?)
    }

    /// Re-zeroes masked projection and mixer entries.
    pub fn apply_mask_constraint(&self, store: &mut ParamStore) {
        for (id, mask) in [
            (self.wq, &self.proj_mask),
            (self.wk, &self.proj_mask),
            (self.wv, &self.proj_mask),
            (self.wo, &self.out_mask),
        ] {
            let w = store.get_mut(id);
            for (v, &m) in w.tensor.data_mut().iter_mut().zip(mask.data()) {
                if m == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// Unmasked scalar count across the four projection parameters.
    pub fn free_params(&self) -> usize {
        let proj: usize = self.proj_mask.data().iter().filter(|&&m| m != 0.0).count();
        let out: usize = self.out_mask.data().iter().filter(|&&m| m != 0.0).count();
        3 * proj + out
    }

    pub fn weight_ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}
