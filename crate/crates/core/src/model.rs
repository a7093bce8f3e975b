//! Full translation model: embeddings, an encoder topology, the stacked
//! decoder, and the output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::blocks::{positional_encoding, DecoderLayer, DecoderLayerWeights, Embedding, Linear};
use crate::error::{Error, Result};
use crate::parallel::{EncoderAttention, EncoderTopology, Variant};
use crate::params::{ParamStore, ParamVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Hyperparameters of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Stack depth N for `stacked`, branch count B otherwise.
    pub branches: usize,
    /// Layers per parallel branch.
    pub branch_depth: usize,
    pub decoder_depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub seed: u64,
    /// When set, "B branches" for the attended variants counts the final
    /// attending layer, so B−1 parallel branches are built.
    pub count_includes_final: bool,
    /// Parameter-free normalization of the `apa` branch sum.
    pub apa_sum_norm: bool,
}

impl ModelConfig {
    /// Desk-scale defaults; trains on CPU in minutes.
    pub fn desk(variant: Variant, branches: usize, src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            variant,
            branches,
            branch_depth: 1,
            decoder_depth: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            max_len: 64,
            src_vocab,
            tgt_vocab,
            seed: 0,
            count_includes_final: false,
            apa_sum_norm: true,
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn tiny(variant: Variant, branches: usize, vocab: usize) -> Self {
        Self {
            variant,
            branches,
            branch_depth: 1,
            decoder_depth: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            max_len: 16,
            src_vocab: vocab,
            tgt_vocab: vocab,
            seed: 0,
            count_includes_final: false,
            apa_sum_norm: true,
        }
    }

    /// Number of parallel branches actually built for the encoder.
    pub fn parallel_branches(&self) -> usize {
        if self.count_includes_final && self.variant.has_final_layer() {
            self.branches.saturating_sub(1)
        } else {
            self.branches
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be even",
                self.d_model
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.parallel_branches() == 0 {
            return Err(Error::Config(
                "encoder needs at least one parallel branch".into(),
            ));
        }
        if self.branch_depth == 0 || self.decoder_depth == 0 {
            return Err(Error::Config("layer depths must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config(
                "vocabularies need the 4 reserved ids plus at least one token".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    EncoderBranch,
    EncoderFinal,
    DecoderSelf,
    DecoderCross,
}

impl Component {
    pub fn label(&self) -> &'static str {
        match self {
            Component::EncoderBranch => "encoder_branch",
            Component::EncoderFinal => "encoder_final",
            Component::DecoderSelf => "decoder_self",
            Component::DecoderCross => "decoder_cross",
        }
    }
}

/// One attention matrix, keyed by where it came from.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub component: Component,
    /// Encoder branch index, or decoder layer index.
    pub group: usize,
    /// Layer within an encoder branch; 0 elsewhere.
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

/// Every attention matrix of one forward pass.
pub struct AttentionDump {
    pub records: Vec<AttnRecord>,
}

impl AttentionDump {
    pub fn records_of(&self, component: Component) -> impl Iterator<Item = &AttnRecord> {
        self.records
            .iter()
            .filter(move |r| r.component == component)
    }

    /// Number of distinct encoder branch groups present.
    pub fn encoder_branch_groups(&self) -> usize {
        self.records_of(Component::EncoderBranch)
            .map(|r| r.group + 1)
            .max()
            .unwrap_or(0)
    }

    /// Row-stochastic check over every dumped matrix.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let cols = r.weights.cols();
            for (i, row) in r.weights.data().chunks(cols).enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "{} group {} head {} row {i} sums to {sum}",
                        r.component.label(),
                        r.group,
                        r.head
                    )));
                }
            }
        }
        Ok(())
    }
}

struct DumpSinks {
    encoder: EncoderAttention,
    decoder: Vec<DecoderLayerWeights>,
}

/// Trainable encoder-decoder translation model.
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    src_embed: Embedding,
    tgt_embed: Embedding,
    pos: Tensor,
    encoder: EncoderTopology,
    decoder: Vec<DecoderLayer>,
    out_proj: Linear,
}

impl TransformerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let src_embed = Embedding::new(
            &mut params,
            "src_embed",
            config.src_vocab,
            config.d_model,
            &mut rng,
        );
        let tgt_embed = Embedding::new(
            &mut params,
            "tgt_embed",
            config.tgt_vocab,
            config.d_model,
            &mut rng,
        );
        let pos = positional_encoding(config.max_len, config.d_model)?;
        let encoder_units = match config.variant {
            Variant::Stacked => config.branches,
            _ => config.parallel_branches(),
        };
        let encoder = EncoderTopology::new(
            &mut params,
            config.variant,
            encoder_units,
            config.branch_depth,
            config.d_model,
            config.d_ff,
            config.heads,
            config.apa_sum_norm,
            &mut rng,
        )?;
        let decoder = (0..config.decoder_depth)
            .map(|i| {
                DecoderLayer::new(
                    &mut params,
                    &format!("dec.l{i}"),
                    config.d_model,
                    config.d_ff,
                    config.heads,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out_proj = Linear::new(
            &mut params,
            "out_proj",
            config.d_model,
            config.tgt_vocab,
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            src_embed,
            tgt_embed,
            pos,
            encoder,
            decoder,
            out_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &EncoderTopology {
        &self.encoder
    }

    /// Exact count of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Contract(format!("{what} sequence is empty")));
        }
        if len > self.config.max_len {
            return Err(Error::Config(format!(
                "{what} length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Embeds and encodes the source. `src_key_valid`, when given, marks
    /// non-padding positions.
    pub fn encode_src(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        src_ids: &[usize],
        src_key_valid: Option<&[bool]>,
        collect: Option<&mut EncoderAttention>,
    ) -> Result<Var> {
        self.check_len("source", src_ids.len())?;
        let mask = match src_key_valid {
            Some(valid) => Some(AttentionMask::padding(src_ids.len(), valid)?),
            None => None,
        };
        let x = self.src_embed.forward(tape, pv, src_ids, &self.pos)?;
        self.encoder.encode(tape, pv, &x, mask.as_ref(), collect)
    }

    /// Runs the decoder over a (shifted-right) target prefix against the
    /// encoded source, producing vocabulary logits per position.
    pub fn decode_tgt(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        tgt_in_ids: &[usize],
        memory: &Var,
        src_key_valid: Option<&[bool]>,
        mut collect: Option<&mut Vec<DecoderLayerWeights>>,
    ) -> Result<Var> {
        self.check_len("target", tgt_in_ids.len())?;
        let t_len = tgt_in_ids.len();
        let causal = AttentionMask::causal(t_len);
        let cross_mask = match src_key_valid {
            Some(valid) => Some(AttentionMask::padding(t_len, valid)?),
            None => None,
        };
        let mut y = self.tgt_embed.forward(tape, pv, tgt_in_ids, &self.pos)?;
        for layer in &self.decoder {
            let sink = match collect.as_deref_mut() {
                Some(c) => {
                    c.push(DecoderLayerWeights::default());
                    c.last_mut()
                }
                None => None,
            };
            y = layer.forward(tape, pv, &y, memory, &causal, cross_mask.as_ref(), sink)?;
        }
        self.out_proj.forward(tape, pv, &y)
    }

    /// Logits `[tgt_len, tgt_vocab]` for a source sentence and shifted-right
    /// target prefix.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        src_ids: &[usize],
        tgt_in_ids: &[usize],
        src_key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let memory = self.encode_src(tape, pv, src_ids, src_key_valid, None)?;
        self.decode_tgt(tape, pv, tgt_in_ids, &memory, src_key_valid, None)
    }

    /// Convenience forward on a throwaway disabled tape.
    pub fn infer(&self, src_ids: &[usize], tgt_in_ids: &[usize]) -> Result<Tensor> {
        let mut tape = GradTape::disabled();
        let pv = self.params.leaf_all(&mut tape);
        Ok(self
            .forward(&mut tape, &pv, src_ids, tgt_in_ids, None)?
            .tensor()
            .clone())
    }

    /// Runs a forward pass in dump mode and returns every attention matrix,
    /// keyed by (component, branch/layer, head).
    pub fn extract_attention(
        &self,
        src_ids: &[usize],
        tgt_in_ids: &[usize],
        src_key_valid: Option<&[bool]>,
    ) -> Result<AttentionDump> {
        let mut tape = GradTape::disabled();
        let pv = self.params.leaf_all(&mut tape);
        let mut sinks = DumpSinks {
            encoder: EncoderAttention::default(),
            decoder: Vec::new(),
        };
        let memory = self.encode_src(
            &mut tape,
            &pv,
            src_ids,
            src_key_valid,
            Some(&mut sinks.encoder),
        )?;
        self.decode_tgt(
            &mut tape,
            &pv,
            tgt_in_ids,
            &memory,
            src_key_valid,
            Some(&mut sinks.decoder),
        )?;

        let mut records = Vec::new();
        for (b, layers) in sinks.encoder.branches.iter().enumerate() {
            for (l, heads) in layers.iter().enumerate() {
                for (h, w) in heads.iter().enumerate() {
                    records.push(AttnRecord {
                        component: Component::EncoderBranch,
                        group: b,
                        layer: l,
                        head: h,
                        weights: w.clone(),
                    });
                }
            }
        }
        for (h, w) in sinks.encoder.final_layer.iter().enumerate() {
            records.push(AttnRecord {
                component: Component::EncoderFinal,
                group: 0,
                layer: 0,
                head: h,
                weights: w.clone(),
            });
        }
        for (l, layer) in sinks.decoder.iter().enumerate() {
            for (h, w) in layer.self_attn.iter().enumerate() {
                records.push(AttnRecord {
                    component: Component::DecoderSelf,
                    group: l,
                    layer: 0,
                    head: h,
                    weights: w.clone(),
                });
            }
            for (h, w) in layer.cross_attn.iter().enumerate() {
                records.push(AttnRecord {
                    component: Component::DecoderCross,
                    group: l,
                    layer: 0,
                    head: h,
                    weights: w.clone(),
                });
            }
        }
        Ok(AttentionDump { records })
    }
}
