//! Embeddings, sinusoidal positional encoding, and the encoder/decoder
//! layers the model composes.
//!
//! Sublayers use the post-norm residual order: sublayer, add, layer norm.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMask, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)); PE[pos, 2i+1] = cos(same).
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding requires an even d_model, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let rate = 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// Affine map `x·W (+ b)`.
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.xavier(format!("{prefix}.w"), d_in, d_out, rng),
            b: bias.then(|| store.zeros(format!("{prefix}.b"), vec![d_out])),
        }
    }

    pub fn forward(&self, tape: &mut GradTape, pv: &ParamVars, x: &Var) -> Result<Var> {
        let y = tape.matmul(x, pv.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(&y, pv.var(b)),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.b);
        ids
    }
}

/// Learned gain/bias pair applied after per-position normalization.
pub struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize) -> Self {
        Self {
            gain: store.ones(format!("{prefix}.gain"), vec![d_model]),
            bias: store.zeros(format!("{prefix}.bias"), vec![d_model]),
        }
    }

    pub fn forward(&self, tape: &mut GradTape, pv: &ParamVars, x: &Var) -> Result<Var> {
        tape.layer_norm(x, pv.var(self.gain), pv.var(self.bias), LN_EPS)
    }
}

/// Two affine maps with a ReLU between them.
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{prefix}.lin1"), d_model, d_ff, true, rng),
            lin2: Linear::new(store, &format!("{prefix}.lin2"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut GradTape, pv: &ParamVars, x: &Var) -> Result<Var> {
        let h = self.lin1.forward(tape, pv, x)?;
        let h = tape.relu(&h);
        self.lin2.forward(tape, pv, &h)
    }

    pub fn input(&self) -> &Linear {
        &self.lin1
    }

    pub fn output(&self) -> &Linear {
        &self.lin2
    }
}

/// Token embedding table; lookups are scaled by √d_model and summed with the
/// positional encoding.
pub struct Embedding {
    table: ParamId,
    d_model: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            table: store.xavier(name, vocab, d_model, rng),
            d_model,
        }
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        ids: &[usize],
        pe: &Tensor,
    ) -> Result<Var> {
        let rows = tape.gather_rows(pv.var(self.table), ids)?;
        let scaled = tape.scale(&rows, (self.d_model as f64).sqrt());
        let pe_slice = tape.constant(pe.slice_rows(0, ids.len())?);
        tape.add(&scaled, &pe_slice)
    }

    pub fn table(&self) -> ParamId {
        self.table
    }
}

/// Self-attention plus feed-forward, each wrapped in residual + layer norm.
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNormParams,
    norm2: LayerNormParams,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), d_model, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d_model, d_ff, rng),
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), d_model),
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), d_model),
        })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        x: &Var,
        mask: Option<&AttentionMask>,
        collect: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let attn_out = self.attn.forward(tape, pv, x, x, x, mask, collect)?;
        let res = tape.add(x, &attn_out)?;
        let y = self.norm1.forward(tape, pv, &res)?;
        let ffn_out = self.ffn.forward(tape, pv, &y)?;
        let res = tape.add(&y, &ffn_out)?;
        self.norm2.forward(tape, pv, &res)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn feed_forward(&self) -> &FeedForward {
        &self.ffn
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn.param_ids();
        ids.extend(self.ffn.lin1.param_ids());
        ids.extend(self.ffn.lin2.param_ids());
        ids.push(self.norm1.gain);
        ids.push(self.norm1.bias);
        ids.push(self.norm2.gain);
        ids.push(self.norm2.bias);
        ids
    }

    /// Scalar parameter count of one layer at the given widths.
    pub fn scalar_count(d_model: usize, d_ff: usize) -> usize {
        4 * d_model * d_model            // q, k, v, o projections
            + d_model * d_ff + d_ff      // ffn in
            + d_ff * d_model + d_model   // ffn out
            + 4 * d_model                // two norms, gain + bias each
    }
}

/// Per-layer attention weights captured from a decoder layer in dump mode.
#[derive(Default)]
pub struct DecoderLayerWeights {
    pub self_attn: Vec<Tensor>,
    pub cross_attn: Vec<Tensor>,
}

/// Masked self-attention, cross-attention over the encoder output, and
/// feed-forward, each with residual + layer norm.
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNormParams,
    norm2: LayerNormParams,
    norm3: LayerNormParams,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.self_attn"),
                d_model,
                heads,
                rng,
            )?,
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.cross_attn"),
                d_model,
                heads,
                rng,
            )?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d_model, d_ff, rng),
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), d_model),
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), d_model),
            norm3: LayerNormParams::new(store, &format!("{prefix}.norm3"), d_model),
        })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        y: &Var,
        enc: &Var,
        self_mask: &AttentionMask,
        cross_mask: Option<&AttentionMask>,
        mut collect: Option<&mut DecoderLayerWeights>,
    ) -> Result<Var> {
        let sa = self.self_attn.forward(
            tape,
            pv,
            y,
            y,
            y,
            Some(self_mask),
            collect.as_deref_mut().map(|c| &mut c.self_attn),
        )?;
        let res = tape.add(y, &sa)?;
        let y1 = self.norm1.forward(tape, pv, &res)?;
        let ca = self.cross_attn.forward(
            tape,
            pv,
            &y1,
            enc,
            enc,
            cross_mask,
            collect.as_deref_mut().map(|c| &mut c.cross_attn),
        )?;
        let res = tape.add(&y1, &ca)?;
        let y2 = self.norm2.forward(tape, pv, &res)?;
        let ff = self.ffn.forward(tape, pv, &y2)?;
        let res = tape.add(&y2, &ff)?;
        self.norm3.forward(tape, pv, &res)
    }

    pub fn scalar_count(d_model: usize, d_ff: usize) -> usize {
        8 * d_model * d_model
            + d_model * d_ff + d_ff
            + d_ff * d_model + d_model
            + 6 * d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_encoding_row_zero_alternates_zero_one() {
        let pe = positional_encoding(4, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.at2(0, 2 * i), 0.0);
            assert_eq!(pe.at2(0, 2 * i + 1), 1.0);
        }
    }

    #[test]
    fn positional_encoding_first_position() {
        let pe = positional_encoding(2, 4).unwrap();
        assert!((pe.at2(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn positional_encoding_is_bounded() {
        let pe = positional_encoding(512, 64).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_rejects_odd_width() {
        assert!(matches!(positional_encoding(4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_of_token_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let emb = Embedding::new(&mut store, "emb", 5, 4, &mut rng);
        let pe = positional_encoding(8, 4).unwrap();
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let out = emb.forward(&mut tape, &pv, &[0], &pe).unwrap();
        let table = store.get(emb.table());
        for j in 0..4 {
            let want = table.at2(0, j) * 2.0 + pe.at2(0, j);
            assert!((out.tensor().at2(0, j) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_tokens_share_rows_before_position() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let emb = Embedding::new(&mut store, "emb", 5, 4, &mut rng);
        let pe = Tensor::zeros(vec![8, 4]);
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let out = emb.forward(&mut tape, &pv, &[3, 3], &pe).unwrap();
        for j in 0..4 {
            assert_eq!(out.tensor().at2(0, j), out.tensor().at2(1, j));
        }
    }

    #[test]
    fn embedding_matches_gather_then_add_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let emb = Embedding::new(&mut store, "emb", 9, 6, &mut rng);
        let pe = positional_encoding(16, 6).unwrap();
        let ids = [4usize, 1, 8, 0, 4];
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let out = emb.forward(&mut tape, &pv, &ids, &pe).unwrap();
        let table = store.get(emb.table());
        for (pos, &id) in ids.iter().enumerate() {
            for j in 0..6 {
                let want = table.at2(id, j) * 6f64.sqrt() + pe.at2(pos, j);
                assert!((out.tensor().at2(pos, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let emb = Embedding::new(&mut store, "emb", 5, 4, &mut rng);
        let pe = positional_encoding(8, 4).unwrap();
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        assert!(matches!(
            emb.forward(&mut tape, &pv, &[5], &pe),
            Err(Error::Vocab(_))
        ));
    }

    fn encoder_fixture(
        d_model: usize,
        d_ff: usize,
        heads: usize,
        seed: u64,
    ) -> (ParamStore, EncoderLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = EncoderLayer::new(&mut store, "enc", d_model, d_ff, heads, &mut rng).unwrap();
        (store, layer)
    }

    #[test]
    fn zeroed_output_projections_leave_normalized_identity() {
        let (mut store, layer) = encoder_fixture(4, 8, 2, 45);
        store.set(
            layer.attention().output_projection(),
            Tensor::zeros(vec![4, 4]),
        );
        let out_lin = layer.feed_forward().output();
        store.set(out_lin.weight(), Tensor::zeros(vec![8, 4]));
        store.set(out_lin.bias().unwrap(), Tensor::zeros(vec![4]));

        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let xv = tape.constant(x.clone());
        let got = layer.forward(&mut tape, &pv, &xv, None, None).unwrap();

        let ones = Tensor::filled(vec![4], 1.0);
        let zeros = Tensor::zeros(vec![4]);
        let once = kernels::layer_norm(&x, &ones, &zeros, LN_EPS).unwrap();
        let twice = kernels::layer_norm(&once, &ones, &zeros, LN_EPS).unwrap();
        assert!(got.tensor().max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let (store, layer) = encoder_fixture(32, 64, 4, 47);
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let x = rand_tensor(&mut rng, vec![9, 32]);
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let out = layer.forward(&mut tape, &pv, &xv, None, None).unwrap();
        assert_eq!(out.shape(), &[9, 32]);
    }

    /// Step-by-step oracle for one encoder layer built from raw kernels.
    fn encoder_oracle(store: &ParamStore, layer: &EncoderLayer, x: &Tensor) -> Tensor {
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let xv = tape.constant(x.clone());
        let attn = layer
            .attn
            .forward(&mut tape, &pv, &xv, &xv, &xv, None, None)
            .unwrap();
        let ones = Tensor::filled(vec![x.cols()], 1.0);
        let zeros = Tensor::zeros(vec![x.cols()]);
        let res = kernels::add(x, attn.tensor()).unwrap();
        let y = kernels::layer_norm(&res, &ones, &zeros, LN_EPS).unwrap();
        let h = kernels::add_bias(
            &kernels::matmul(&y, store.get(layer.ffn.lin1.weight())).unwrap(),
            store.get(layer.ffn.lin1.bias().unwrap()),
        )
        .unwrap();
        let h = kernels::relu(&h);
        let f = kernels::add_bias(
            &kernels::matmul(&h, store.get(layer.ffn.lin2.weight())).unwrap(),
            store.get(layer.ffn.lin2.bias().unwrap()),
        )
        .unwrap();
        let res = kernels::add(&y, &f).unwrap();
        kernels::layer_norm(&res, &ones, &zeros, LN_EPS).unwrap()
    }

    #[test]
    fn tiny_encoder_layer_matches_manual_composition() {
        let (store, layer) = encoder_fixture(2, 4, 1, 49);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = rand_tensor(&mut rng, vec![3, 2]);
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let xv = tape.constant(x.clone());
        let got = layer.forward(&mut tape, &pv, &xv, None, None).unwrap();
        assert!(got.tensor().max_abs_diff(&encoder_oracle(&store, &layer, &x)) < 1e-12);
    }

    #[test]
    fn scalar_count_matches_registered_parameters() {
        let (store, _) = encoder_fixture(4, 8, 2, 51);
        assert_eq!(store.total_scalars(), EncoderLayer::scalar_count(4, 8));

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        DecoderLayer::new(&mut store, "dec", 4, 8, 2, &mut rng).unwrap();
        assert_eq!(store.total_scalars(), DecoderLayer::scalar_count(4, 8));
    }

    fn decoder_fixture(seed: u64) -> (ParamStore, DecoderLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = DecoderLayer::new(&mut store, "dec", 4, 8, 2, &mut rng).unwrap();
        (store, layer)
    }

    #[test]
    fn single_position_causal_mask_is_vacuous() {
        let (store, layer) = decoder_fixture(53);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let y = rand_tensor(&mut rng, vec![1, 4]);
        let enc = rand_tensor(&mut rng, vec![3, 4]);
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let yv = tape.constant(y);
        let ev = tape.constant(enc);

        let causal = AttentionMask::causal(1);
        let masked = layer
            .forward(&mut tape, &pv, &yv, &ev, &causal, None, None)
            .unwrap();
        // an all-allowed mask over the single query behaves identically
        let open = AttentionMask::padding(1, &[true]).unwrap();
        let unmasked = layer
            .forward(&mut tape, &pv, &yv, &ev, &open, None, None)
            .unwrap();
        assert!(masked.tensor().bit_eq(unmasked.tensor()));
    }

    #[test]
    fn decoder_causality_is_bit_exact() {
        let (store, layer) = decoder_fixture(55);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let y = rand_tensor(&mut rng, vec![4, 4]);
        let enc = rand_tensor(&mut rng, vec![3, 4]);

        let run = |y: &Tensor| {
            let mut tape = GradTape::disabled();
            let pv = store.leaf_all(&mut tape);
            let yv = tape.constant(y.clone());
            let ev = tape.constant(enc.clone());
            let causal = AttentionMask::causal(4);
            layer
                .forward(&mut tape, &pv, &yv, &ev, &causal, None, None)
                .unwrap()
                .tensor()
                .clone()
        };
        let base = run(&y);
        let mut perturbed = y.data().to_vec();
        perturbed[2 * 4] += 0.5; // position 2, feature 0
        let out = run(&Tensor::new(vec![4, 4], perturbed).unwrap());
        for r in 0..2 {
            for c in 0..4 {
                assert_eq!(base.at2(r, c).to_bits(), out.at2(r, c).to_bits());
            }
        }
    }

    #[test]
    fn tiny_decoder_layer_matches_manual_composition() {
        let (store, layer) = decoder_fixture(57);
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let y = rand_tensor(&mut rng, vec![3, 4]);
        let enc = rand_tensor(&mut rng, vec![2, 4]);
        let causal = AttentionMask::causal(3);

        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let yv = tape.constant(y.clone());
        let ev = tape.constant(enc.clone());
        let got = layer
            .forward(&mut tape, &pv, &yv, &ev, &causal, None, None)
            .unwrap();

        // manual composition, step by step
        let ones = Tensor::filled(vec![4], 1.0);
        let zeros = Tensor::zeros(vec![4]);
        let norm = |t: &Tensor| kernels::layer_norm(t, &ones, &zeros, LN_EPS).unwrap();
        let sa = layer
            .self_attn
            .forward(&mut tape, &pv, &yv, &yv, &yv, Some(&causal), None)
            .unwrap();
        let y1 = norm(&kernels::add(&y, sa.tensor()).unwrap());
        let y1v = tape.constant(y1.clone());
        let ca = layer
            .cross_attn
            .forward(&mut tape, &pv, &y1v, &ev, &ev, None, None)
            .unwrap();
        let y2 = norm(&kernels::add(&y1, ca.tensor()).unwrap());
        let h = kernels::add_bias(
            &kernels::matmul(&y2, store.get(layer.ffn.lin1.weight())).unwrap(),
            store.get(layer.ffn.lin1.bias().unwrap()),
        )
        .unwrap();
        let h = kernels::relu(&h);
        let f = kernels::add_bias(
            &kernels::matmul(&h, store.get(layer.ffn.lin2.weight())).unwrap(),
            store.get(layer.ffn.lin2.bias().unwrap()),
        )
        .unwrap();
        let want = norm(&kernels::add(&y2, &f).unwrap());
        assert!(got.tensor().max_abs_diff(&want) < 1e-12);
    }
}
