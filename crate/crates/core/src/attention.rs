//! Scaled dot-product and multi-head attention, with padding and causal
//! masks.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Disallowed logits are filled with this before softmax. A large negative
/// finite value keeps gradients finite where −∞ would not.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Padding,
    Causal,
    Combined,
}

/// Boolean [q_len, k_len] matrix of permitted attention edges. Every query
/// row keeps at least one allowed key.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    kind: MaskKind,
    q_len: usize,
    k_len: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    /// Lower-triangular mask: position i may attend to keys 0..=i.
    pub fn causal(len: usize) -> Self {
        assert!(len >= 1, "causal mask needs at least one position");
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        Self {
            kind: MaskKind::Causal,
            q_len: len,
            k_len: len,
            allowed: allowed.into(),
        }
    }

    /// Every query row may attend exactly to the keys flagged valid.
    pub fn padding(q_len: usize, key_valid: &[bool]) -> Result<Self> {
        if !key_valid.iter().any(|v| *v) {
            return Err(Error::Mask("padding mask allows no keys".into()));
        }
        let mut allowed = Vec::with_capacity(q_len * key_valid.len());
        for _ in 0..q_len {
            allowed.extend_from_slice(key_valid);
        }
        Ok(Self {
            kind: MaskKind::Padding,
            q_len,
            k_len: key_valid.len(),
            allowed: allowed.into(),
        })
    }

    /// Element-wise AND of two masks of identical shape.
    pub fn combine(&self, other: &AttentionMask) -> Result<Self> {
        if self.q_len != other.q_len || self.k_len != other.k_len {
            return Err(Error::Mask(format!(
                "cannot combine masks of shapes {}x{} and {}x{}",
                self.q_len, self.k_len, other.q_len, other.k_len
            )));
        }
        let allowed: Vec<bool> = self
            .allowed
            .iter()
            .zip(other.allowed.iter())
            .map(|(a, b)| *a && *b)
            .collect();
        for (i, row) in allowed.chunks(self.k_len).enumerate() {
            if !row.iter().any(|v| *v) {
                return Err(Error::Mask(format!(
                    "combined mask leaves query row {i} without any allowed key"
                )));
            }
        }
        Ok(Self {
            kind: MaskKind::Combined,
            q_len: self.q_len,
            k_len: self.k_len,
            allowed: allowed.into(),
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.k_len + k]
    }

    pub(crate) fn flat(&self) -> Arc<[bool]> {
        Arc::clone(&self.allowed)
    }
}

/// Row-stochastic attention weights of one layer, one tensor per head.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    per_head: Vec<Tensor>,
}

impl AttentionWeights {
    pub fn new(per_head: Vec<Tensor>) -> Self {
        Self { per_head }
    }

    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn head(&self, h: usize) -> &Tensor {
        &self.per_head[h]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.per_head.iter()
    }

    /// Checks the row-stochastic invariant and, given the mask, that
    /// disallowed positions carry negligible weight.
    pub fn validate(&self, mask: Option<&AttentionMask>) -> Result<()> {
        for (h, w) in self.per_head.iter().enumerate() {
            let k_len = w.cols();
            for (i, row) in w.data().chunks(k_len).enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "head {h} row {i} sums to {sum}, not 1"
                    )));
                }
                if let Some(m) = mask {
                    for (j, v) in row.iter().enumerate() {
                        if !m.is_allowed(i, j) && *v >= 1e-12 {
                            return Err(Error::Contract(format!(
                                "head {h} weight[{i},{j}] = {v} on a masked position"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// softmax(q·kᵀ/√d_k + mask)·v, returning the output and the weights.
pub fn scaled_dot_product(
    tape: &mut GradTape,
    q: &Var,
    k: &Var,
    v: &Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let d_k = q.shape()[1];
    if k.shape()[1] != d_k {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_product",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if v.shape()[0] != k.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_product",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(&scores, 1.0 / (d_k as f64).sqrt());
    let masked = match mask {
        Some(m) => {
            if m.q_len() != q.shape()[0] || m.k_len() != k.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "attention_mask",
                    left: vec![q.shape()[0], k.shape()[0]],
                    right: vec![m.q_len(), m.k_len()],
                });
            }
            tape.masked_fill(&scaled, m.flat(), MASK_FILL)?
        }
        None => scaled,
    };
    let weights = tape.softmax_rows(&masked);
    let out = tape.matmul(&weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention parameters: one fused projection matrix per role,
/// sliced per head, plus the output projection.
pub struct MultiHeadAttention {
    heads: usize,
    d_model: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            heads,
            d_model,
            wq: store.xavier(format!("{prefix}.wq"), d_model, d_model, rng),
            wk: store.xavier(format!("{prefix}.wk"), d_model, d_model, rng),
            wv: store.xavier(format!("{prefix}.wv"), d_model, d_model, rng),
            wo: store.xavier(format!("{prefix}.wo"), d_model, d_model, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn output_projection(&self) -> ParamId {
        self.wo
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }

    /// Projects, runs each head, concatenates and projects back. When
    /// `collect` is given the per-head weight matrices are pushed onto it.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        x_q: &Var,
        x_k: &Var,
        x_v: &Var,
        mask: Option<&AttentionMask>,
        mut collect: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let q = tape.matmul(x_q, pv.var(self.wq))?;
        let k = tape.matmul(x_k, pv.var(self.wk))?;
        let v = tape.matmul(x_v, pv.var(self.wv))?;
        let d_k = self.d_model / self.heads;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * d_k, (h + 1) * d_k);
            let qh = tape.slice_cols(&q, c0, c1)?;
            let kh = tape.slice_cols(&k, c0, c1)?;
            let vh = tape.slice_cols(&v, c0, c1)?;
            let (out, weights) = scaled_dot_product(tape, &qh, &kh, &vh, mask)?;
            if let Some(sink) = collect.as_deref_mut() {
                sink.push(weights.tensor().clone());
            }
            head_outs.push(out);
        }
        let refs: Vec<&Var> = head_outs.iter().collect();
        let cat = tape.concat_cols(&refs)?;
        tape.matmul(&cat, pv.var(self.wo))
    }
}

/// Lower-triangular causal mask; kept as a free function alongside the
/// constructors for call-site symmetry.
pub fn make_causal_mask(len: usize) -> AttentionMask {
    AttentionMask::causal(len)
}
