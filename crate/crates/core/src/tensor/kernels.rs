//! Pure forward and backward kernels over [`Tensor`].
//!
//! Every differentiable operation has a forward function here and a matching
//! `*_backward` that maps the output gradient to input gradients. The tape
//! wires them together; nothing in this module records anything.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

// Rayon pays a fixed spawn/sync cost per call. Below this many multiply-adds
// the sequential path wins; desk-scale attention matmuls stay under it so
// parallelism comes from branch and sentence level instead.
#[cfg(feature = "parallel")]
const PAR_MATMUL_FLOPS: usize = 1 << 20;

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// ── matmul family ───────────────────────────────────────────────────────────

/// `a[m,k] · b[k,n] -> [m,n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    mm_nn(&mut out, a.data(), b.data(), m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[m,k] · b[n,k]ᵀ -> [m,n]`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul_nt", a)?;
    let (n, k2) = dims2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    mm_nt(&mut out, a.data(), b.data(), m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[k,m]ᵀ · b[k,n] -> [m,n]`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = dims2("matmul_tn", a)?;
    let (k2, n) = dims2("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    mm_tn(&mut out, a.data(), b.data(), m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn mm_nn_row(row: &mut [f64], a_row: &[f64], b: &[f64], n: usize) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..p * n + n];
        for (o, &bv) in row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MATMUL_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| mm_nn_row(row, &a[i * k..(i + 1) * k], b, n));
        return;
    }
    for i in 0..m {
        mm_nn_row(&mut out[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], b, n);
    }
}

fn mm_nt_row(row: &mut [f64], a_row: &[f64], b: &[f64], k: usize) {
    for (j, o) in row.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (av, bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MATMUL_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| mm_nt_row(row, &a[i * k..(i + 1) * k], b, k));
        return;
    }
    for i in 0..m {
        mm_nt_row(&mut out[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], b, k);
    }
}

fn mm_tn_row(row: &mut [f64], a: &[f64], b: &[f64], i: usize, k: usize, m: usize, n: usize) {
    for p in 0..k {
        let av = a[p * m + i];
        let b_row = &b[p * n..p * n + n];
        for (o, &bv) in row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MATMUL_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| mm_tn_row(row, a, b, i, k, m, n));
        return;
    }
    for i in 0..m {
        mm_tn_row(&mut out[i * n..(i + 1) * n], a, b, i, k, m, n);
    }
}

/// d(a) = g·bᵀ, d(b) = aᵀ·g
pub fn matmul_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let ga = matmul_nt(g, b).expect("matmul_backward ga");
    let gb = matmul_tn(a, g).expect("matmul_backward gb");
    (ga, gb)
}

/// For out = a·bᵀ: d(a) = g·b, d(b) = gᵀ·a
pub fn matmul_nt_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let ga = matmul(g, b).expect("matmul_nt_backward ga");
    let gb = matmul_tn(g, a).expect("matmul_nt_backward gb");
    (ga, gb)
}

// ── element-wise ────────────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x * y)
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn mul_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let ga = mul(g, b).expect("mul_backward");
    let gb = mul(g, a).expect("mul_backward");
    (ga, gb)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect())
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|v| v.max(0.0)).collect(),
    )
}

pub fn relu_backward(g: &Tensor, x: &Tensor) -> Tensor {
    let out = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
        .collect();
    Tensor::from_parts(g.shape().to_vec(), out)
}

/// Adds a length-n bias vector to every row of `x[m,n]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2("add_bias", x)?;
    if bias.shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let mut out = Vec::with_capacity(m * n);
    for row in x.data().chunks(n) {
        out.extend(row.iter().zip(b).map(|(x, b)| x + b));
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// d(bias) for add_bias: column sums of g, accumulated in row order.
pub fn col_sum(g: &Tensor) -> Tensor {
    let n = g.shape()[1];
    let mut out = vec![0.0; n];
    for row in g.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![n], out)
}

// ── row-wise normalizers ────────────────────────────────────────────────────

/// Softmax along the last axis, max-subtracted for stability.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// d(x) per row: s ⊙ (g − ⟨g, s⟩)
pub fn softmax_last_backward(g: &Tensor, out: &Tensor) -> Tensor {
    let n = out.last_dim();
    let mut gx = Vec::with_capacity(out.numel());
    for (g_row, s_row) in g.data().chunks(n).zip(out.data().chunks(n)) {
        let dot: f64 = g_row.iter().zip(s_row).map(|(g, s)| g * s).sum();
        gx.extend(g_row.iter().zip(s_row).map(|(g, s)| s * (g - dot)));
    }
    Tensor::from_parts(out.shape().to_vec(), gx)
}

/// Log-softmax along the last axis.
pub fn log_softmax_last(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// d(x) per row: g − softmax ⊙ Σg, with softmax = exp(out)
pub fn log_softmax_last_backward(g: &Tensor, out: &Tensor) -> Tensor {
    let n = out.last_dim();
    let mut gx = Vec::with_capacity(out.numel());
    for (g_row, o_row) in g.data().chunks(n).zip(out.data().chunks(n)) {
        let g_sum: f64 = g_row.iter().sum();
        gx.extend(g_row.iter().zip(o_row).map(|(g, o)| g - o.exp() * g_sum));
    }
    Tensor::from_parts(out.shape().to_vec(), gx)
}

/// Cache of the pre-affine normalized values needed by the backward pass.
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalization with affine gain/bias over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gain, bias, eps).map(|(out, _)| out)
}

pub fn layer_norm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let (xhat, inv_std) = normalize_rows_raw(x, eps);
    let g = gain.data();
    let b = bias.data();
    let mut out = Vec::with_capacity(x.numel());
    for row in xhat.data().chunks(d) {
        out.extend(
            row.iter()
                .zip(g)
                .zip(b)
                .map(|((xh, gv), bv)| xh * gv + bv),
        );
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat, inv_std },
    ))
}

pub fn layer_norm_backward(
    g: &Tensor,
    cache: &NormCache,
    gain: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = g.last_dim();
    let gain_d = gain.data();
    let mut gx = Vec::with_capacity(g.numel());
    let mut g_gain = vec![0.0; d];
    let mut g_bias = vec![0.0; d];
    for ((g_row, xh_row), inv_std) in g
        .data()
        .chunks(d)
        .zip(cache.xhat.data().chunks(d))
        .zip(&cache.inv_std)
    {
        for j in 0..d {
            g_gain[j] += g_row[j] * xh_row[j];
            g_bias[j] += g_row[j];
        }
        // dxhat = g ⊙ gain; dx = s·(dxhat − mean(dxhat) − xhat·mean(dxhat ⊙ xhat))
        let dxhat: Vec<f64> = g_row.iter().zip(gain_d).map(|(g, w)| g * w).collect();
        let m1: f64 = dxhat.iter().sum::<f64>() / d as f64;
        let m2: f64 = dxhat.iter().zip(xh_row).map(|(dh, xh)| dh * xh).sum::<f64>() / d as f64;
        gx.extend(
            dxhat
                .iter()
                .zip(xh_row)
                .map(|(dh, xh)| inv_std * (dh - m1 - xh * m2)),
        );
    }
    (
        Tensor::from_parts(g.shape().to_vec(), gx),
        Tensor::from_parts(vec![d], g_gain),
        Tensor::from_parts(vec![d], g_bias),
    )
}

/// Per-row normalization without learned affine parameters.
pub fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, NormCache) {
    let (xhat, inv_std) = normalize_rows_raw(x, eps);
    (
        xhat.clone(),
        NormCache { xhat, inv_std },
    )
}

pub fn normalize_rows_backward(g: &Tensor, cache: &NormCache) -> Tensor {
    let d = g.last_dim();
    let mut gx = Vec::with_capacity(g.numel());
    for ((g_row, xh_row), inv_std) in g
        .data()
        .chunks(d)
        .zip(cache.xhat.data().chunks(d))
        .zip(&cache.inv_std)
    {
        let m1: f64 = g_row.iter().sum::<f64>() / d as f64;
        let m2: f64 = g_row.iter().zip(xh_row).map(|(g, xh)| g * xh).sum::<f64>() / d as f64;
        gx.extend(
            g_row
                .iter()
                .zip(xh_row)
                .map(|(g, xh)| inv_std * (g - m1 - xh * m2)),
        );
    }
    Tensor::from_parts(g.shape().to_vec(), gx)
}

fn normalize_rows_raw(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = x.last_dim();
    let rows = x.numel() / d;
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_stds = Vec::with_capacity(rows);
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * inv_std));
        inv_stds.push(inv_std);
    }
    (Tensor::from_parts(x.shape().to_vec(), xhat), inv_stds)
}

// ── structural ──────────────────────────────────────────────────────────────

/// Concatenates 2-D tensors along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero tensors".into()));
    }
    let m = dims2("concat_cols", parts[0])?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = dims2("concat_cols", p)?;
        if pm != m {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        widths.push(pn);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![m, total], out))
}

/// Splits the gradient of a column concat back into per-part gradients.
pub fn concat_cols_backward(g: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let m = g.shape()[0];
    let total = g.shape()[1];
    debug_assert_eq!(widths.iter().sum::<usize>(), total);
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(m * w)).collect();
    for i in 0..m {
        let mut c = 0;
        for (o, w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&g.data()[i * total + c..i * total + c + w]);
            c += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(o, w)| Tensor::from_parts(vec![m, *w], o))
        .collect()
}

/// Columns `c0..c1` of a 2-D tensor.
pub fn slice_cols(x: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
    let (m, n) = dims2("slice_cols", x)?;
    if c1 > n || c0 > c1 {
        return Err(Error::ShapeMismatch {
            op: "slice_cols",
            left: x.shape().to_vec(),
            right: vec![c0, c1],
        });
    }
    let w = c1 - c0;
    let mut out = Vec::with_capacity(m * w);
    for i in 0..m {
        out.extend_from_slice(&x.data()[i * n + c0..i * n + c1]);
    }
    Ok(Tensor::from_parts(vec![m, w], out))
}

pub fn slice_cols_backward(g: &Tensor, c0: usize, full_cols: usize) -> Tensor {
    let (m, w) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![0.0; m * full_cols];
    for i in 0..m {
        out[i * full_cols + c0..i * full_cols + c0 + w]
            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
    }
    Tensor::from_parts(vec![m, full_cols], out)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2("transpose", x)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Row-gather from an embedding-style table; ids must be in range.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, d) = dims2("gather_rows", table)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(Error::Vocab(format!(
                "token id {id} out of range for table with {rows} rows"
            )));
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// Scatter-adds row gradients back into the table, in position order.
pub fn gather_rows_backward(g: &Tensor, ids: &[usize], table_rows: usize) -> Tensor {
    let d = g.shape()[1];
    let mut out = vec![0.0; table_rows * d];
    for (pos, &id) in ids.iter().enumerate() {
        let src = &g.data()[pos * d..(pos + 1) * d];
        let dst = &mut out[id * d..(id + 1) * d];
        for (o, v) in dst.iter_mut().zip(src) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![table_rows, d], out)
}

/// Replaces elements where `keep` is false with `fill`.
pub fn masked_fill(x: &Tensor, keep: &[bool], fill: f64) -> Result<Tensor> {
    if keep.len() != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "masked_fill",
            left: x.shape().to_vec(),
            right: vec![keep.len()],
        });
    }
    let out = x
        .data()
        .iter()
        .zip(keep)
        .map(|(v, k)| if *k { *v } else { fill })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn masked_fill_backward(g: &Tensor, keep: &[bool]) -> Tensor {
    let out = g
        .data()
        .iter()
        .zip(keep)
        .map(|(v, k)| if *k { *v } else { 0.0 })
        .collect();
    Tensor::from_parts(g.shape().to_vec(), out)
}

// ── reductions ──────────────────────────────────────────────────────────────

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn sum_all_backward(g: &Tensor, shape: &[usize]) -> Tensor {
    Tensor::filled(shape.to_vec(), g.data()[0])
}

pub fn mean_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
}

pub fn mean_all_backward(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::filled(shape.to_vec(), g.data()[0] / n as f64)
}
