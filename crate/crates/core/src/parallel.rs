//! Encoder topologies: the classic stacked encoder and three variants that
//! replace the stack with independently parameterized branches evaluated in
//! parallel.
//!
//! * `apa`  — branch outputs are summed elementwise.
//! * `acpa` — branch outputs are concatenated, reduced back to `d_model` by a
//!   learned affine map with ReLU, then passed through a final attending
//!   layer.
//! * `aapa` — branch outputs are summed and passed through a final attending
//!   layer.
//!
//! Branches share nothing but their input, so forward and backward passes run
//! concurrently through [`GradTape::parallel_map`]; the combiner is the only
//! synchronization point.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::blocks::{EncoderLayer, Linear, LN_EPS};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Stacked,
    Apa,
    Acpa,
    Aapa,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stacked" => Ok(Variant::Stacked),
            "apa" => Ok(Variant::Apa),
            "acpa" => Ok(Variant::Acpa),
            "aapa" => Ok(Variant::Aapa),
            other => Err(Error::Config(format!(
                "unknown encoder variant '{other}' (expected stacked|apa|acpa|aapa)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Stacked => "stacked",
            Variant::Apa => "apa",
            Variant::Acpa => "acpa",
            Variant::Aapa => "aapa",
        }
    }

    pub fn has_final_layer(&self) -> bool {
        matches!(self, Variant::Acpa | Variant::Aapa)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attention weights captured from an encoder forward pass in dump mode.
#[derive(Default)]
pub struct EncoderAttention {
    /// `[branch][layer within branch][head]`
    pub branches: Vec<Vec<Vec<Tensor>>>,
    /// `[head]`, for the final attending layer when the variant has one.
    pub final_layer: Vec<Tensor>,
}

/// Longest chain of sequentially dependent encoder-layer evaluations plus
/// the measured forward wall clock.
#[derive(Clone, Debug)]
pub struct CriticalPathReport {
    pub sequential_depth: usize,
    pub branch_count: usize,
    pub wall_clock_forward: f64,
}

/// A stacked encoder or one of the parallel-branch variants.
pub struct EncoderTopology {
    variant: Variant,
    d_model: usize,
    branch_stacks: Vec<Vec<EncoderLayer>>,
    final_layer: Option<EncoderLayer>,
    reducer: Option<Linear>,
    apa_sum_norm: bool,
}

impl EncoderTopology {
    /// For `stacked`, `branches` is the stack depth N and one chain of N
    /// layers is built. For the parallel variants, `branches` independent
    /// stacks of `branch_depth` layers are built, plus the combiner the
    /// variant calls for. `apa_sum_norm` applies a parameter-free
    /// normalization to the branch sum of `apa`, which otherwise grows with
    /// the branch count.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        variant: Variant,
        branches: usize,
        branch_depth: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        apa_sum_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if branches == 0 {
            return Err(Error::Config("encoder needs at least one branch".into()));
        }
        if branch_depth == 0 {
            return Err(Error::Config("branch depth must be at least 1".into()));
        }
        let mut branch_stacks = Vec::new();
        match variant {
            Variant::Stacked => {
                let stack = (0..branches)
                    .map(|i| {
                        EncoderLayer::new(
                            store,
                            &format!("enc.stack.l{i}"),
                            d_model,
                            d_ff,
                            heads,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                branch_stacks.push(stack);
            }
            _ => {
                for b in 0..branches {
                    let stack = (0..branch_depth)
                        .map(|i| {
                            EncoderLayer::new(
                                store,
                                &format!("enc.b{b}.l{i}"),
                                d_model,
                                d_ff,
                                heads,
                                rng,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    branch_stacks.push(stack);
                }
            }
        }
        let reducer = match variant {
            Variant::Acpa => Some(Linear::new(
                store,
                "enc.reducer",
                branches * d_model,
                d_model,
                true,
                rng,
            )),
            _ => None,
        };
        let final_layer = match variant {
            Variant::Acpa | Variant::Aapa => Some(EncoderLayer::new(
                store,
                "enc.final",
                d_model,
                d_ff,
                heads,
                rng,
            )?),
            _ => None,
        };
        Ok(Self {
            variant,
            d_model,
            branch_stacks,
            final_layer,
            reducer,
            apa_sum_norm,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn branch_count(&self) -> usize {
        self.branch_stacks.len()
    }

    pub fn branch_stacks(&self) -> &[Vec<EncoderLayer>] {
        &self.branch_stacks
    }

    pub fn final_layer(&self) -> Option<&EncoderLayer> {
        self.final_layer.as_ref()
    }

    pub fn reducer(&self) -> Option<&Linear> {
        self.reducer.as_ref()
    }

    /// Longest chain of dependent encoder-layer evaluations.
    pub fn sequential_depth(&self) -> usize {
        let branch_depth = self.branch_stacks[0].len();
        match self.variant {
            Variant::Stacked | Variant::Apa => branch_depth,
            Variant::Acpa | Variant::Aapa => branch_depth + 1,
        }
    }

    /// Runs the configured encoder over `x`.
    pub fn encode(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        x: &Var,
        mask: Option<&AttentionMask>,
        collect: Option<&mut EncoderAttention>,
    ) -> Result<Var> {
        match self.variant {
            Variant::Stacked => {
                let dump = collect.is_some();
                let mut ws = Vec::new();
                let mut h = x.clone();
                for layer in &self.branch_stacks[0] {
                    let mut layer_ws = Vec::new();
                    h = layer.forward(tape, pv, &h, mask, dump.then_some(&mut layer_ws))?;
                    ws.push(layer_ws);
                }
                if let Some(c) = collect {
                    c.branches = vec![ws];
                }
                Ok(h)
            }
            Variant::Apa => {
                let (outs, _) = self.branch_outputs(tape, pv, x, mask, collect)?;
                let sum = self.combine_sum(tape, outs)?;
                if self.apa_sum_norm {
                    Ok(tape.normalize_rows(&sum, LN_EPS))
                } else {
                    Ok(sum)
                }
            }
            Variant::Acpa => {
                let (outs, collect) = self.branch_outputs(tape, pv, x, mask, collect)?;
                let refs: Vec<&Var> = outs.iter().collect();
                let cat = tape.concat_cols(&refs)?;
                let reducer = self.reducer.as_ref().expect("acpa has a reducer");
                let reduced = reducer.forward(tape, pv, &cat)?;
                let reduced = tape.relu(&reduced);
                self.run_final(tape, pv, &reduced, mask, collect)
            }
            Variant::Aapa => {
                let (outs, collect) = self.branch_outputs(tape, pv, x, mask, collect)?;
                let sum = self.combine_sum(tape, outs)?;
                self.run_final(tape, pv, &sum, mask, collect)
            }
        }
    }

    /// Branch outputs in branch order, evaluated through a parallel region.
    fn branch_outputs<'c>(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        x: &Var,
        mask: Option<&AttentionMask>,
        collect: Option<&'c mut EncoderAttention>,
    ) -> Result<(Vec<Var>, Option<&'c mut EncoderAttention>)> {
        let dump = collect.is_some();
        let results = tape.parallel_map(self.branch_stacks.len(), |t, b| {
            let mut ws = Vec::new();
            let mut h = x.clone();
            for layer in &self.branch_stacks[b] {
                let mut layer_ws = Vec::new();
                h = layer.forward(t, pv, &h, mask, dump.then_some(&mut layer_ws))?;
                if dump {
                    ws.push(layer_ws);
                }
            }
            Ok((h, ws))
        })?;
        let mut outs = Vec::with_capacity(results.len());
        let mut branch_ws = Vec::with_capacity(results.len());
        for (var, ws) in results {
            outs.push(var);
            branch_ws.push(ws);
        }
        let collect = collect.map(|c| {
            c.branches = branch_ws;
            c
        });
        Ok((outs, collect))
    }

    /// Elementwise sum over branch outputs, folded in branch index order.
    fn combine_sum(&self, tape: &mut GradTape, outs: Vec<Var>) -> Result<Var> {
        let mut iter = outs.into_iter();
        let mut acc = iter.next().expect("at least one branch");
        for v in iter {
            acc = tape.add(&acc, &v)?;
        }
        Ok(acc)
    }

    fn run_final(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        x: &Var,
        mask: Option<&AttentionMask>,
        collect: Option<&mut EncoderAttention>,
    ) -> Result<Var> {
        let layer = self.final_layer.as_ref().expect("variant has a final layer");
        let mut ws = Vec::new();
        let out = layer.forward(tape, pv, x, mask, collect.is_some().then_some(&mut ws))?;
        if let Some(c) = collect {
            c.final_layer = ws;
        }
        Ok(out)
    }
}

/// Fixed forward-pass workload for wall-clock comparisons between
/// topologies.
#[derive(Clone, Copy, Debug)]
pub struct ForwardBenchmark {
    pub len: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for ForwardBenchmark {
    fn default() -> Self {
        Self {
            len: 32,
            iters: 10,
            seed: 0xbe7c,
        }
    }
}

/// Depth by construction plus the best-of-`iters` forward wall clock on the
/// benchmark input, with concurrent branch evaluation enabled.
pub fn critical_path(
    store: &ParamStore,
    topology: &EncoderTopology,
    bench: &ForwardBenchmark,
) -> Result<CriticalPathReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    let n = bench.len * topology.d_model();
    let x = Tensor::new(
        vec![bench.len, topology.d_model()],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let run = |x: &Tensor| -> Result<f64> {
        let mut tape = GradTape::disabled();
        let pv = store.leaf_all(&mut tape);
        let xv = tape.constant(x.clone());
        let start = Instant::now();
        let out = topology.encode(&mut tape, &pv, &xv, None, None)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(out.data()[0]);
        Ok(elapsed)
    };
    run(&x)?; // warmup
    let mut best = f64::INFINITY;
    for _ in 0..bench.iters {
        best = best.min(run(&x)?);
    }
    Ok(CriticalPathReport {
        sequential_depth: topology.sequential_depth(),
        branch_count: topology.branch_count(),
        wall_clock_forward: best,
    })
}
