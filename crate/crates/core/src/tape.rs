//! Reverse-mode automatic differentiation over a recording tape.
//!
//! A [`GradTape`] records one forward evaluation as an ordered list of
//! operations; [`GradTape::backward`] replays it in reverse, resolving each
//! operation's backward rule and accumulating gradients in a fixed order so
//! identical forward passes yield bit-identical gradients.
//!
//! Data-independent subgraphs (encoder branches, the sentences of a batch)
//! are recorded through [`GradTape::parallel_map`]. Each closure records onto
//! an isolated sub-tape; the sub-tapes are spliced back in index order and
//! remembered as a region, so the backward sweep can replay the segments
//! concurrently as well. Both directions produce exactly the bytes a plain
//! sequential recording would: splice order is fixed, and cross-segment
//! gradient contributions are merged in the order the reverse sweep of the
//! equivalent inline tape would apply them.
//!
//! A disabled tape (`GradTape::disabled`) runs the same code paths without
//! recording, for inference and benchmarks.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, NormCache};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// A tensor value tracked by a tape. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var {
    tensor: Tensor,
    node: Option<usize>,
    requires: bool,
}

impl Var {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires
    }
}

enum OpRecord {
    Leaf,
    Matmul { a: usize, b: usize, a_t: Tensor, b_t: Tensor },
    MatmulNt { a: usize, b: usize, a_t: Tensor, b_t: Tensor },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize, a_t: Tensor, b_t: Tensor },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Relu { x: usize, x_t: Tensor },
    SoftmaxRows { x: usize, out_t: Tensor },
    LogSoftmaxRows { x: usize, out_t: Tensor },
    LayerNorm { x: usize, gain: usize, bias: usize, cache: NormCache, gain_t: Tensor },
    NormalizeRows { x: usize, cache: NormCache },
    ConcatCols { parts: Vec<usize>, widths: Vec<usize> },
    SliceCols { x: usize, c0: usize, full_cols: usize },
    Transpose { x: usize },
    GatherRows { table: usize, ids: Vec<usize>, table_rows: usize },
    Reshape { x: usize, in_shape: Vec<usize> },
    MaskedFill { x: usize, keep: std::sync::Arc<[bool]> },
    SumAll { x: usize, in_shape: Vec<usize> },
    MeanAll { x: usize, in_shape: Vec<usize> },
}

struct Entry {
    op: OpRecord,
    out_shape: Vec<usize>,
    needs_grad: bool,
}

struct RegionRec {
    span: Range<usize>,
    segments: Vec<Range<usize>>,
}

/// Single-writer recording of one forward evaluation.
pub struct GradTape {
    enabled: bool,
    id_base: usize,
    entries: Vec<Entry>,
    regions: Vec<RegionRec>,
    backward_done: bool,
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            enabled: true,
            id_base: 0,
            entries: Vec::new(),
            regions: Vec::new(),
            backward_done: false,
        }
    }

    /// A tape that records nothing; ops evaluate eagerly. Used for
    /// inference, decoding and benchmarks.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            id_base: 0,
            entries: Vec::new(),
            regions: Vec::new(),
            backward_done: false,
        }
    }

    fn sub(id_base: usize) -> Self {
        Self {
            enabled: true,
            id_base,
            entries: Vec::new(),
            regions: Vec::new(),
            backward_done: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    fn next_id(&self) -> usize {
        self.id_base + self.entries.len()
    }

    fn nid(&self, v: &Var) -> usize {
        v.node
            .expect("Var was not recorded on an enabled tape; do not mix tapes")
    }

    fn push(&mut self, tensor: Tensor, needs_grad: bool, op: impl FnOnce(&Self) -> OpRecord) -> Var {
        if !self.enabled {
            return Var {
                tensor,
                node: None,
                requires: needs_grad,
            };
        }
        let id = self.next_id();
        let record = op(self);
        self.entries.push(Entry {
            op: record,
            out_shape: tensor.shape().to_vec(),
            needs_grad,
        });
        Var {
            tensor,
            node: Some(id),
            requires: needs_grad,
        }
    }

    /// Registers an input tensor. Gradients are only tracked through leaves
    /// with `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        self.push(tensor, requires_grad, |_| OpRecord::Leaf)
    }

    /// A non-differentiable input (masks, positional encodings, targets).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    // ── recorded operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(&a.tensor, &b.tensor)?;
        Ok(self.push(out, a.requires || b.requires, |t| OpRecord::Matmul {
            a: t.nid(a),
            b: t.nid(b),
            a_t: a.tensor.clone(),
            b_t: b.tensor.clone(),
        }))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul_nt(&a.tensor, &b.tensor)?;
        Ok(self.push(out, a.requires || b.requires, |t| OpRecord::MatmulNt {
            a: t.nid(a),
            b: t.nid(b),
            a_t: a.tensor.clone(),
            b_t: b.tensor.clone(),
        }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(&a.tensor, &b.tensor)?;
        Ok(self.push(out, a.requires || b.requires, |t| OpRecord::Add {
            a: t.nid(a),
            b: t.nid(b),
        }))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::mul(&a.tensor, &b.tensor)?;
        Ok(self.push(out, a.requires || b.requires, |t| OpRecord::Mul {
            a: t.nid(a),
            b: t.nid(b),
            a_t: a.tensor.clone(),
            b_t: b.tensor.clone(),
        }))
    }

    pub fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let out = kernels::add_bias(&x.tensor, &bias.tensor)?;
        Ok(self.push(out, x.requires || bias.requires, |t| OpRecord::AddBias {
            x: t.nid(x),
            bias: t.nid(bias),
        }))
    }

    pub fn scale(&mut self, x: &Var, c: f64) -> Var {
        let out = kernels::scale(&x.tensor, c);
        self.push(out, x.requires, |t| OpRecord::Scale { x: t.nid(x), c })
    }

    pub fn add_scalar(&mut self, x: &Var, c: f64) -> Var {
        let out = kernels::add_scalar(&x.tensor, c);
        self.push(out, x.requires, |t| OpRecord::AddScalar { x: t.nid(x) })
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        let out = kernels::relu(&x.tensor);
        self.push(out, x.requires, |t| OpRecord::Relu {
            x: t.nid(x),
            x_t: x.tensor.clone(),
        })
    }

    pub fn softmax_rows(&mut self, x: &Var) -> Var {
        let out = kernels::softmax_last(&x.tensor);
        self.push(out.clone(), x.requires, |t| OpRecord::SoftmaxRows {
            x: t.nid(x),
            out_t: out,
        })
    }

    pub fn log_softmax_rows(&mut self, x: &Var) -> Var {
        let out = kernels::log_softmax_last(&x.tensor);
        self.push(out.clone(), x.requires, |t| OpRecord::LogSoftmaxRows {
            x: t.nid(x),
            out_t: out,
        })
    }

    pub fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_cached(&x.tensor, &gain.tensor, &bias.tensor, eps)?;
        Ok(self.push(
            out,
            x.requires || gain.requires || bias.requires,
            |t| OpRecord::LayerNorm {
                x: t.nid(x),
                gain: t.nid(gain),
                bias: t.nid(bias),
                cache,
                gain_t: gain.tensor.clone(),
            },
        ))
    }

    pub fn normalize_rows(&mut self, x: &Var, eps: f64) -> Var {
        let (out, cache) = kernels::normalize_rows(&x.tensor, eps);
        self.push(out, x.requires, |t| OpRecord::NormalizeRows {
            x: t.nid(x),
            cache,
        })
    }

    pub fn concat_cols(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| &v.tensor).collect();
        let out = kernels::concat_cols(&tensors)?;
        let requires = parts.iter().any(|v| v.requires);
        let widths: Vec<usize> = parts.iter().map(|v| v.tensor.shape()[1]).collect();
        Ok(self.push(out, requires, |t| OpRecord::ConcatCols {
            parts: parts.iter().map(|v| t.nid(v)).collect(),
            widths,
        }))
    }

    pub fn slice_cols(&mut self, x: &Var, c0: usize, c1: usize) -> Result<Var> {
        let out = kernels::slice_cols(&x.tensor, c0, c1)?;
        let full_cols = x.tensor.shape()[1];
        Ok(self.push(out, x.requires, |t| OpRecord::SliceCols {
            x: t.nid(x),
            c0,
            full_cols,
        }))
    }

    pub fn transpose(&mut self, x: &Var) -> Result<Var> {
        let out = kernels::transpose(&x.tensor)?;
        Ok(self.push(out, x.requires, |t| OpRecord::Transpose { x: t.nid(x) }))
    }

    pub fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(&table.tensor, ids)?;
        let table_rows = table.tensor.shape()[0];
        Ok(self.push(out, table.requires, |t| OpRecord::GatherRows {
            table: t.nid(table),
            ids: ids.to_vec(),
            table_rows,
        }))
    }

    pub fn reshape(&mut self, x: &Var, shape: Vec<usize>) -> Result<Var> {
        let out = x.tensor.reshaped(shape)?;
        let in_shape = x.tensor.shape().to_vec();
        Ok(self.push(out, x.requires, |t| OpRecord::Reshape {
            x: t.nid(x),
            in_shape,
        }))
    }

    pub fn masked_fill(&mut self, x: &Var, keep: std::sync::Arc<[bool]>, fill: f64) -> Result<Var> {
        let out = kernels::masked_fill(&x.tensor, &keep, fill)?;
        Ok(self.push(out, x.requires, |t| OpRecord::MaskedFill {
            x: t.nid(x),
            keep,
        }))
    }

    pub fn sum_all(&mut self, x: &Var) -> Var {
        let out = kernels::sum_all(&x.tensor);
        let in_shape = x.tensor.shape().to_vec();
        self.push(out, x.requires, |t| OpRecord::SumAll {
            x: t.nid(x),
            in_shape,
        })
    }

    pub fn mean_all(&mut self, x: &Var) -> Var {
        let out = kernels::mean_all(&x.tensor);
        let in_shape = x.tensor.shape().to_vec();
        self.push(out, x.requires, |t| OpRecord::MeanAll {
            x: t.nid(x),
            in_shape,
        })
    }

    // ── parallel regions ────────────────────────────────────────────────

    /// Evaluates `n` data-independent subgraphs, concurrently when the
    /// `parallel` feature is enabled. Each closure receives its own tape;
    /// recordings are spliced back in index order, so results and gradients
    /// are bit-identical to recording the same subgraphs inline, regardless
    /// of scheduling.
    ///
    /// Closures may only touch `Var`s that existed before the call plus the
    /// ones they create; the per-index payload `R` carries anything else out.
    pub fn parallel_map<R, F>(&mut self, n: usize, f: F) -> Result<Vec<(Var, R)>>
    where
        R: Send,
        F: Fn(&mut GradTape, usize) -> Result<(Var, R)> + Sync,
    {
        if !self.enabled {
            return collect_results(map_indexed(n, |i| f(&mut GradTape::disabled(), i)));
        }
        let base = self.next_id();
        let subs = collect_results(map_indexed(n, |i| {
            let mut sub = GradTape::sub(base);
            let out = f(&mut sub, i)?;
            Ok((sub, out))
        }))?;

        let mut outs = Vec::with_capacity(n);
        let mut segments = Vec::with_capacity(n);
        for (sub, (var, payload)) in subs {
            let seg_start = self.next_id();
            let shift = seg_start - base;
            for mut entry in sub.entries {
                remap_entry(&mut entry, base, shift);
                self.entries.push(entry);
            }
            for mut region in sub.regions {
                region.span = shift_range(&region.span, shift);
                for seg in &mut region.segments {
                    *seg = shift_range(seg, shift);
                }
                self.regions.push(region);
            }
            segments.push(seg_start..self.next_id());
            let node = var
                .node
                .map(|id| if id >= base { id + shift } else { id });
            outs.push((
                Var {
                    tensor: var.tensor,
                    node,
                    requires: var.requires,
                },
                payload,
            ));
        }
        self.regions.push(RegionRec {
            span: base..self.next_id(),
            segments,
        });
        Ok(outs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Replays the tape in reverse, populating a gradient for every
    /// reachable `requires_grad` leaf. A tape can run backward once.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        if !self.enabled {
            return Err(Error::Contract(
                "backward invoked on a disabled tape".into(),
            ));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if !loss.tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss.tensor.shape()
            )));
        }
        let loss_id = loss.node.ok_or_else(|| {
            Error::Contract("loss was not recorded on this tape".into())
        })?;
        self.backward_done = true;

        let mut store: Vec<Option<Vec<f64>>> = Vec::new();
        store.resize_with(self.entries.len(), || None);
        if self.entries[loss_id].needs_grad {
            store[loss_id] = Some(vec![1.0]);
        }
        let tree = build_region_tree(&self.regions);
        let mut sink = RootSink { store: &mut store };
        replay(&self.entries, 0..self.entries.len(), &tree, &mut sink);
        Ok(Gradients { by_node: store })
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, addressable by `Var`.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn of(&self, v: &Var) -> Option<&[f64]> {
        let id = v.node?;
        self.by_node.get(id)?.as_deref()
    }

    /// Gradient of `v`, as zeros when nothing flowed to it.
    pub fn of_or_zeros(&self, v: &Var) -> Vec<f64> {
        self.of(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.tensor().numel()])
    }
}

// ── helpers ─────────────────────────────────────────────────────────────────

/// Applies `f` over `0..n`, concurrently when the `parallel` feature is on;
/// results come back in index order either way.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn collect_results<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

fn shift_range(r: &Range<usize>, shift: usize) -> Range<usize> {
    r.start + shift..r.end + shift
}

fn remap_entry(entry: &mut Entry, base: usize, shift: usize) {
    let fix = |id: &mut usize| {
        if *id >= base {
            *id += shift;
        }
    };
    match &mut entry.op {
        OpRecord::Leaf => {}
        OpRecord::Matmul { a, b, .. }
        | OpRecord::MatmulNt { a, b, .. }
        | OpRecord::Add { a, b }
        | OpRecord::Mul { a, b, .. } => {
            fix(a);
            fix(b);
        }
        OpRecord::AddBias { x, bias } => {
            fix(x);
            fix(bias);
        }
        OpRecord::LayerNorm { x, gain, bias, .. } => {
            fix(x);
            fix(gain);
            fix(bias);
        }
        OpRecord::ConcatCols { parts, .. } => parts.iter_mut().for_each(fix),
        OpRecord::Scale { x, .. }
        | OpRecord::AddScalar { x }
        | OpRecord::Relu { x, .. }
        | OpRecord::SoftmaxRows { x, .. }
        | OpRecord::LogSoftmaxRows { x, .. }
        | OpRecord::NormalizeRows { x, .. }
        | OpRecord::SliceCols { x, .. }
        | OpRecord::Transpose { x }
        | OpRecord::Reshape { x, .. }
        | OpRecord::MaskedFill { x, .. }
        | OpRecord::SumAll { x, .. }
        | OpRecord::MeanAll { x, .. } => fix(x),
        OpRecord::GatherRows { table, .. } => fix(table),
    }
}

// ── backward replay ─────────────────────────────────────────────────────────

struct RegionNode {
    span: Range<usize>,
    segments: Vec<Range<usize>>,
    children: Vec<RegionNode>,
}

fn build_region_tree(regions: &[RegionRec]) -> Vec<RegionNode> {
    let mut sorted: Vec<&RegionRec> = regions.iter().collect();
    sorted.sort_by_key(|r| (r.span.start, std::cmp::Reverse(r.span.end)));

    let mut roots: Vec<RegionNode> = Vec::new();
    let mut stack: Vec<RegionNode> = Vec::new();
    let attach = |stack: &mut Vec<RegionNode>, roots: &mut Vec<RegionNode>, done: RegionNode| {
        match stack.last_mut() {
            Some(top) => top.children.push(done),
            None => roots.push(done),
        }
    };
    for r in sorted {
        let node = RegionNode {
            span: r.span.clone(),
            segments: r.segments.clone(),
            children: Vec::new(),
        };
        while let Some(top) = stack.last() {
            if top.span.start <= node.span.start && node.span.end <= top.span.end {
                break;
            }
            let done = stack.pop().unwrap();
            attach(&mut stack, &mut roots, done);
        }
        stack.push(node);
    }
    while let Some(done) = stack.pop() {
        attach(&mut stack, &mut roots, done);
    }
    roots
}

/// Destination for gradient contributions during replay.
trait GradSink {
    fn take(&mut self, id: usize) -> Option<Vec<f64>>;
    fn put(&mut self, id: usize, g: Vec<f64>);
    fn accumulate(&mut self, id: usize, g: &[f64]);
}

struct RootSink<'a> {
    store: &'a mut Vec<Option<Vec<f64>>>,
}

impl GradSink for RootSink<'_> {
    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.store[id].take()
    }

    fn put(&mut self, id: usize, g: Vec<f64>) {
        self.store[id] = Some(g);
    }

    fn accumulate(&mut self, id: usize, g: &[f64]) {
        match &mut self.store[id] {
            Some(acc) => add_in_place(acc, g),
            slot => *slot = Some(g.to_vec()),
        }
    }
}

/// Sink for one segment of a parallel region: ids inside the segment live in
/// a private map; contributions to outside ids are queued in replay order and
/// merged by the parent afterwards.
struct SegSink {
    range: Range<usize>,
    local: HashMap<usize, Vec<f64>>,
    external: Vec<(usize, Vec<f64>)>,
}

impl GradSink for SegSink {
    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.local.remove(&id)
    }

    fn put(&mut self, id: usize, g: Vec<f64>) {
        self.local.insert(id, g);
    }

    fn accumulate(&mut self, id: usize, g: &[f64]) {
        if self.range.contains(&id) {
            match self.local.get_mut(&id) {
                Some(acc) => add_in_place(acc, g),
                None => {
                    self.local.insert(id, g.to_vec());
                }
            }
        } else {
            self.external.push((id, g.to_vec()));
        }
    }
}

fn add_in_place(acc: &mut [f64], g: &[f64]) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Reverse sweep over `range`. `regions` are the directly nested regions
/// within the range, sorted ascending by start.
fn replay(entries: &[Entry], range: Range<usize>, regions: &[RegionNode], sink: &mut impl GradSink) {
    let mut next_region = regions.len();
    let mut i = range.end;
    while i > range.start {
        if next_region > 0 && regions[next_region - 1].span.end == i {
            let node = &regions[next_region - 1];
            process_region(entries, node, sink);
            i = node.span.start;
            next_region -= 1;
        } else {
            i -= 1;
            step_entry(entries, i, sink);
        }
    }
}

fn process_region(entries: &[Entry], node: &RegionNode, sink: &mut impl GradSink) {
    // Children are sorted ascending and each falls inside one segment.
    let mut jobs: Vec<(Range<usize>, HashMap<usize, Vec<f64>>, &[RegionNode])> =
        Vec::with_capacity(node.segments.len());
    let mut child_lo = 0;
    for seg in &node.segments {
        let mut seed = HashMap::new();
        for id in seg.clone() {
            if let Some(g) = sink.take(id) {
                seed.insert(id, g);
            }
        }
        let child_hi = node.children[child_lo..]
            .iter()
            .position(|c| c.span.start >= seg.end)
            .map_or(node.children.len(), |p| child_lo + p);
        jobs.push((seg.clone(), seed, &node.children[child_lo..child_hi]));
        child_lo = child_hi;
    }

    let results: Vec<(HashMap<usize, Vec<f64>>, Vec<(usize, Vec<f64>)>)> = {
        #[cfg(feature = "parallel")]
        {
            jobs.into_par_iter()
                .map(|(seg, seed, kids)| run_segment(entries, seg, seed, kids))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            jobs.into_iter()
                .map(|(seg, seed, kids)| run_segment(entries, seg, seed, kids))
                .collect()
        }
    };

    // The inline-equivalent reverse sweep visits segment n-1 first; apply
    // cross-segment contributions in that order, one recorded write at a time.
    for (local, external) in results.into_iter().rev() {
        for (id, g) in external {
            sink.accumulate(id, &g);
        }
        for (id, g) in local {
            sink.put(id, g);
        }
    }
}

fn run_segment(
    entries: &[Entry],
    seg: Range<usize>,
    seed: HashMap<usize, Vec<f64>>,
    kids: &[RegionNode],
) -> (HashMap<usize, Vec<f64>>, Vec<(usize, Vec<f64>)>) {
    let mut sink = SegSink {
        range: seg.clone(),
        local: seed,
        external: Vec::new(),
    };
    replay(entries, seg, kids, &mut sink);
    (sink.local, sink.external)
}

fn step_entry(entries: &[Entry], i: usize, sink: &mut impl GradSink) {
    let entry = &entries[i];
    if !entry.needs_grad {
        return;
    }
    let Some(g) = sink.take(i) else { return };
    {
        let gt = Tensor::from_parts(entry.out_shape.clone(), g.clone());
        let mut acc = |id: usize, t: &Tensor| {
            if entries[id].needs_grad {
                sink.accumulate(id, t.data());
            }
        };
        match &entry.op {
            OpRecord::Leaf => {}
            OpRecord::Matmul { a, b, a_t, b_t } => {
                if entries[*a].needs_grad {
                    let ga = kernels::matmul_nt(&gt, b_t).expect("matmul backward");
                    acc(*a, &ga);
                }
                if entries[*b].needs_grad {
                    let gb = kernels::matmul_tn(a_t, &gt).expect("matmul backward");
                    acc(*b, &gb);
                }
            }
            OpRecord::MatmulNt { a, b, a_t, b_t } => {
                if entries[*a].needs_grad {
                    let ga = kernels::matmul(&gt, b_t).expect("matmul_nt backward");
                    acc(*a, &ga);
                }
                if entries[*b].needs_grad {
                    let gb = kernels::matmul_tn(&gt, a_t).expect("matmul_nt backward");
                    acc(*b, &gb);
                }
            }
            OpRecord::Add { a, b } => {
                acc(*a, &gt);
                acc(*b, &gt);
            }
            OpRecord::Mul { a, b, a_t, b_t } => {
                if entries[*a].needs_grad {
                    acc(*a, &kernels::mul(&gt, b_t).expect("mul backward"));
                }
                if entries[*b].needs_grad {
                    acc(*b, &kernels::mul(&gt, a_t).expect("mul backward"));
                }
            }
            OpRecord::AddBias { x, bias } => {
                acc(*x, &gt);
                if entries[*bias].needs_grad {
                    acc(*bias, &kernels::col_sum(&gt));
                }
            }
            OpRecord::Scale { x, c } => acc(*x, &kernels::scale(&gt, *c)),
            OpRecord::AddScalar { x } => acc(*x, &gt),
            OpRecord::Relu { x, x_t } => acc(*x, &kernels::relu_backward(&gt, x_t)),
            OpRecord::SoftmaxRows { x, out_t } => {
                acc(*x, &kernels::softmax_last_backward(&gt, out_t));
            }
            OpRecord::LogSoftmaxRows { x, out_t } => {
                acc(*x, &kernels::log_softmax_last_backward(&gt, out_t));
            }
            OpRecord::LayerNorm {
                x,
                gain,
                bias,
                cache,
                gain_t,
            } => {
                let (gx, g_gain, g_bias) = kernels::layer_norm_backward(&gt, cache, gain_t);
                acc(*x, &gx);
                acc(*gain, &g_gain);
                acc(*bias, &g_bias);
            }
            OpRecord::NormalizeRows { x, cache } => {
                acc(*x, &kernels::normalize_rows_backward(&gt, cache));
            }
            OpRecord::ConcatCols { parts, widths } => {
                let split = kernels::concat_cols_backward(&gt, widths);
                for (part, gp) in parts.iter().zip(&split) {
                    acc(*part, gp);
                }
            }
            OpRecord::SliceCols { x, c0, full_cols } => {
                acc(*x, &kernels::slice_cols_backward(&gt, *c0, *full_cols));
            }
            OpRecord::Transpose { x } => {
                acc(*x, &kernels::transpose(&gt).expect("transpose backward"));
            }
            OpRecord::GatherRows {
                table,
                ids,
                table_rows,
            } => {
                acc(*table, &kernels::gather_rows_backward(&gt, ids, *table_rows));
            }
            OpRecord::Reshape { x, in_shape } => {
                acc(*x, &gt.reshaped(in_shape.clone()).expect("reshape backward"));
            }
            OpRecord::MaskedFill { x, keep } => {
                acc(*x, &kernels::masked_fill_backward(&gt, keep));
            }
            OpRecord::SumAll { x, in_shape } => {
                acc(*x, &kernels::sum_all_backward(&gt, in_shape));
            }
            OpRecord::MeanAll { x, in_shape } => {
                acc(*x, &kernels::mean_all_backward(&gt, in_shape));
            }
        }
    }
    sink.put(i, g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), true);
        let loss = tape.sum_all(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_second_call() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.sum_all(&x);
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(&x, &c).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[5.0]);
        assert!(grads.of(&c).is_none());
    }

    /// A small composite graph used by several tests: two matmuls, a relu,
    /// a layer norm, softmax and mean reduction.
    fn composite_loss(tape: &mut GradTape, x: &Var, w1: &Var, w2: &Var, g: &Var, b: &Var) -> Var {
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.relu(&h);
        let h = tape.layer_norm(&h, g, b, 1e-5).unwrap();
        let h = tape.matmul(&h, w2).unwrap();
        let s = tape.softmax_rows(&h);
        tape.mean_all(&s)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = rand_tensor(&mut rng, vec![3, 4]);
        let w1_0 = rand_tensor(&mut rng, vec![4, 5]);
        let w2_0 = rand_tensor(&mut rng, vec![5, 4]);
        let g0 = rand_tensor(&mut rng, vec![5]);
        let b0 = rand_tensor(&mut rng, vec![5]);

        let eval = |xs: &[Tensor]| -> f64 {
            let mut tape = GradTape::disabled();
            let x = tape.leaf(xs[0].clone(), false);
            let w1 = tape.leaf(xs[1].clone(), false);
            let w2 = tape.leaf(xs[2].clone(), false);
            let g = tape.leaf(xs[3].clone(), false);
            let b = tape.leaf(xs[4].clone(), false);
            composite_loss(&mut tape, &x, &w1, &w2, &g, &b).data()[0]
        };

        let mut tape = GradTape::new();
        let x = tape.leaf(x0.clone(), true);
        let w1 = tape.leaf(w1_0.clone(), true);
        let w2 = tape.leaf(w2_0.clone(), true);
        let g = tape.leaf(g0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let loss = composite_loss(&mut tape, &x, &w1, &w2, &g, &b);
        let grads = tape.backward(&loss).unwrap();

        let inputs = [x0, w1_0, w2_0, g0, b0];
        let vars = [&x, &w1, &w2, &g, &b];
        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.of(var).unwrap();
            for j in 0..inputs[vi].numel() {
                let mut plus = inputs.to_vec();
                let mut d = plus[vi].data().to_vec();
                d[j] += h;
                plus[vi] = Tensor::new(plus[vi].shape().to_vec(), d).unwrap();
                let mut minus = inputs.to_vec();
                let mut d = minus[vi].data().to_vec();
                d[j] -= h;
                minus[vi] = Tensor::new(minus[vi].shape().to_vec(), d).unwrap();
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[j];
                assert!(
                    (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                    "input {vi} elem {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    /// Branch workload shared by the equivalence tests below.
    fn branch_op(tape: &mut GradTape, x: &Var, w: &Var) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        Ok(tape.relu(&h))
    }

    #[test]
    fn parallel_region_is_bit_identical_to_inline_recording() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x0 = rand_tensor(&mut rng, vec![4, 3]);
        let ws: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, vec![3, 3])).collect();
        let c0 = rand_tensor(&mut rng, vec![4, 3]);

        // inline: record the three branches one after another
        let mut inline = GradTape::new();
        let x = inline.leaf(x0.clone(), true);
        let wv: Vec<Var> = ws.iter().map(|w| inline.leaf(w.clone(), true)).collect();
        let mut branch_outs = Vec::new();
        for w in &wv {
            branch_outs.push(branch_op(&mut inline, &x, w).unwrap());
        }
        let sum = {
            let s = inline.add(&branch_outs[0], &branch_outs[1]).unwrap();
            inline.add(&s, &branch_outs[2]).unwrap()
        };
        let c = inline.constant(c0.clone());
        let weighted = inline.mul(&sum, &c).unwrap();
        let loss = inline.mean_all(&weighted);
        let inline_loss = loss.tensor().clone();
        let inline_grads = inline.backward(&loss).unwrap();

        // region: same computation through parallel_map
        let mut par = GradTape::new();
        let x = par.leaf(x0, true);
        let wv: Vec<Var> = ws.iter().map(|w| par.leaf(w.clone(), true)).collect();
        let outs = par
            .parallel_map(3, |t, b| branch_op(t, &x, &wv[b]).map(|v| (v, ())))
            .unwrap();
        let sum = {
            let s = par.add(&outs[0].0, &outs[1].0).unwrap();
            par.add(&s, &outs[2].0).unwrap()
        };
        let c = par.constant(c0);
        let weighted = par.mul(&sum, &c).unwrap();
        let loss = par.mean_all(&weighted);
        assert!(loss.tensor().bit_eq(&inline_loss));
        let par_grads = par.backward(&loss).unwrap();

        let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(
            bits(inline_grads.of(&wv[0]).unwrap()),
            bits(par_grads.of(&wv[0]).unwrap())
        );
        assert_eq!(
            bits(inline_grads.of(&x).unwrap()),
            bits(par_grads.of(&x).unwrap())
        );
    }

    #[test]
    fn nested_parallel_regions_match_inline() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = rand_tensor(&mut rng, vec![2, 3]);
        let ws: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, vec![3, 3])).collect();

        let run = |nested: bool| -> (Tensor, Vec<Vec<u64>>, Vec<u64>) {
            let mut tape = GradTape::new();
            let x = tape.leaf(x0.clone(), true);
            let wv: Vec<Var> = ws.iter().map(|w| tape.leaf(w.clone(), true)).collect();
            // two outer groups, each combining two inner branches
            let mut group_outs = Vec::new();
            if nested {
                let outs = tape
                    .parallel_map(2, |t, g| {
                        let inner = t.parallel_map(2, |t2, k| {
                            branch_op(t2, &x, &wv[2 * g + k]).map(|v| (v, ()))
                        })?;
                        let s = t.add(&inner[0].0, &inner[1].0)?;
                        Ok((s, ()))
                    })
                    .unwrap();
                group_outs.extend(outs.into_iter().map(|(v, _)| v));
            } else {
                for g in 0..2 {
                    let a = branch_op(&mut tape, &x, &wv[2 * g]).unwrap();
                    let b = branch_op(&mut tape, &x, &wv[2 * g + 1]).unwrap();
                    group_outs.push(tape.add(&a, &b).unwrap());
                }
            }
            let total = tape.add(&group_outs[0], &group_outs[1]).unwrap();
            let loss = tape.mean_all(&total);
            let out = loss.tensor().clone();
            let grads = tape.backward(&loss).unwrap();
            let wbits = wv
                .iter()
                .map(|w| grads.of(w).unwrap().iter().map(|v| v.to_bits()).collect())
                .collect();
            let xbits = grads.of(&x).unwrap().iter().map(|v| v.to_bits()).collect();
            (out, wbits, xbits)
        };

        let (l1, w1, x1) = run(false);
        let (l2, w2, x2) = run(true);
        assert!(l1.bit_eq(&l2));
        assert_eq!(w1, w2);
        assert_eq!(x1, x2);
    }

    #[test]
    fn two_identical_passes_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            let x0 = rand_tensor(&mut rng, vec![3, 3]);
            let ws: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, vec![3, 3])).collect();
            let mut tape = GradTape::new();
            let x = tape.leaf(x0, true);
            let wv: Vec<Var> = ws.iter().map(|w| tape.leaf(w.clone(), true)).collect();
            let outs = tape
                .parallel_map(3, |t, b| branch_op(t, &x, &wv[b]).map(|v| (v, ())))
                .unwrap();
            let mut sum = outs[0].0.clone();
            for (v, _) in &outs[1..] {
                sum = tape.add(&sum, v).unwrap();
            }
            let loss = tape.mean_all(&sum);
            let grads = tape.backward(&loss).unwrap();
            (
                loss.tensor().clone(),
                grads.of(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        let (la, ga) = run();
        let (lb, gb) = run();
        assert!(la.bit_eq(&lb));
        assert_eq!(ga, gb);
    }

    #[test]
    fn disabled_tape_computes_without_recording() {
        let mut tape = GradTape::disabled();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert!(tape.backward(&y).is_err());
    }
}
