//! Differentiable operations. Each function computes its forward value and,
//! when gradients are being recorded, attaches the matching backward rule.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm, sigmoid as sigmoid_scalar, softmax_row, Mat};
use super::{Rule, Tensor};
use crate::error::{Error, Result};

/// Target id excluded from the next-token loss.
pub const IGNORE_INDEX: u32 = u32::MAX;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn ensure_finite(op: &str, values: &[f32]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{op}: non-finite input {} at flat index {i}",
            values[i]
        )));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

pub fn identity(x: &Tensor) -> Tensor {
    Tensor::from_op(x.shape().to_vec(), x.to_vec(), &[x], || Rule::Identity)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], || Rule::Add))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], || Rule::Sub))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], || Rule::Mul))
}

pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    let data = x.data().iter().map(|v| v * factor).collect();
    Tensor::from_op(x.shape().to_vec(), data, &[x], || Rule::Scale(factor))
}

pub fn sum(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    Tensor::from_op(vec![1], vec![s as f32], &[x], || Rule::Sum)
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    Tensor::from_op(vec![1], vec![(s / n as f64) as f32], &[x], || Rule::Mean)
}

/// `Σ_i weights[i] · x[i]` as a one-element tensor.
pub fn weighted_sum(x: &Tensor, weights: &[f32]) -> Result<Tensor> {
    if weights.len() != x.numel() {
        return Err(Error::shape(
            "weighted_sum",
            format!("{} weights for {} values", weights.len(), x.numel()),
        ));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(weights)
        .map(|(&v, &w)| v as f64 * w as f64)
        .sum();
    let weights = weights.to_vec();
    Ok(Tensor::from_op(vec![1], vec![s as f32], &[x], || Rule::WeightedSum { weights }))
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() || shape.contains(&0) {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), &[x], || Rule::Reshape))
}

fn broadcast_batch(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::shape(
                op,
                format!("batch dimensions {a:?} and {b:?} do not broadcast"),
            ));
        }
        out.push(x.max(y));
    }
    // Map every output batch index to the source batch index of a and b.
    let total: usize = out.iter().product();
    let strides = |s: &[usize]| {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        ia.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        ib.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, ia, ib))
}

/// Batched matrix product `a[..., m, k] · b[..., k, n]` with broadcasting over
/// the leading dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands need rank >= 2, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let (batch, ia, ib) = broadcast_batch("matmul", &a.shape()[..ra - 2], &b.shape()[..rb - 2])?;
    let mut out = vec![0.0; ia.len() * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for (o, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
            gemm(
                Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k),
                Mat::new(&bd[j * k * n..(j + 1) * k * n], k, n),
                &mut out[o * m * n..(o + 1) * m * n],
                0.0,
            );
        }
    }
    let mut shape = batch;
    shape.extend([m, n]);
    Ok(Tensor::from_op(shape, out, &[a, b], || Rule::MatMul {
        a_index: ia,
        b_index: ib,
        m,
        k,
        n,
    }))
}

/// `x[..., in] · wᵀ` for a weight stored as `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || last_dim(x) != w.shape()[1] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / in_dim;
    let mut out = vec![0.0; rows * out_dim];
    gemm(
        Mat::new(&x.data(), rows, in_dim),
        Mat::new(&w.data(), out_dim, in_dim).t(),
        &mut out,
        0.0,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::from_op(shape, out, &[x, w], || Rule::Linear {
        rows,
        in_dim,
        out_dim,
    }))
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, &[x], || Rule::Silu)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, &[x], || Rule::Sigmoid)
}

/// `x / sqrt(mean(x²) + eps) · gamma` along the last axis.
pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f32) -> Result<Tensor> {
    let d = last_dim(x);
    if gamma.rank() != 1 || gamma.numel() != d {
        return Err(Error::shape(
            "rms_norm",
            format!("gain {:?} does not match input {:?}", gamma.shape(), x.shape()),
        ));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("rms_norm eps must be >= 0, got {eps}")));
    }
    let xd = x.data();
    ensure_finite("rms_norm", &xd)?;
    let gd = gamma.data();
    let rows = xd.len() / d;
    let mut inv_rms = Vec::with_capacity(rows);
    let mut out = vec![0.0; xd.len()];
    for (r, (row, o)) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        if !inv.is_finite() {
            return Err(Error::Numeric(format!(
                "rms_norm: row {r} has zero magnitude with eps = 0"
            )));
        }
        let inv = inv as f32;
        inv_rms.push(inv);
        for ((o, &v), &g) in o.iter_mut().zip(row).zip(gd.iter()) {
            *o = v * inv * g;
        }
    }
    drop((xd, gd));
    Ok(Tensor::from_op(x.shape().to_vec(), out, &[x, gamma], || Rule::RmsNorm {
        inv_rms,
        d,
    }))
}

pub fn softmax_last_axis(x: &Tensor) -> Result<Tensor> {
    let n = last_dim(x);
    let mut out = x.to_vec();
    ensure_finite("softmax", &out)?;
    out.chunks_exact_mut(n).for_each(softmax_row);
    Ok(Tensor::from_op(x.shape().to_vec(), out, &[x], || Rule::Softmax { n }))
}

/// Mean over positions of `-log softmax(logits)[target]`. `logits` is
/// `[..., V]` and `targets` holds one id per row; rows whose target is
/// [`IGNORE_INDEX`] do not contribute.
pub fn cross_entropy_next_token(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let v = last_dim(logits);
    let rows = logits.numel() / v;
    if targets.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for logits {:?}", targets.len(), logits.shape()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t as usize >= v) {
        return Err(Error::Index(format!(
            "target id {bad} out of range for vocabulary {v}"
        )));
    }
    let mut probs = logits.to_vec();
    ensure_finite("cross_entropy", &probs)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
        if t == IGNORE_INDEX {
            row.iter_mut().for_each(|p| *p = 0.0);
            continue;
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = row.iter().map(|&l| ((l - max) as f64).exp()).sum();
        let log_z = z.ln() + max as f64;
        total += log_z - row[t as usize] as f64;
        for p in row.iter_mut() {
            *p = ((*p as f64) - log_z).exp() as f32;
        }
        count += 1;
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    let targets = targets.to_vec();
    Ok(Tensor::from_op(vec![1], vec![loss as f32], &[logits], || Rule::CrossEntropy {
        probs,
        targets,
        v,
        count,
    }))
}

/// `[B, T, d] -> [B, d]`, averaging over the time axis.
pub fn mean_pool_time(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("mean_pool_time", format!("expected [B, T, d], got {:?}", x.shape())));
    }
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0f32; b * d];
    for bi in 0..b {
        let o = &mut out[bi * d..(bi + 1) * d];
        for ti in 0..t {
            let row = &xd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            o.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / t as f32;
        o.iter_mut().for_each(|a| *a *= inv);
    }
    drop(xd);
    Ok(Tensor::from_op(vec![b, d], out, &[x], || Rule::MeanPoolTime { b, t, d }))
}

/// Gathers rows of `table[V, d]`; the output has shape `[shape..., d]`.
pub fn embedding(ids: &[u32], shape: &[usize], table: &Tensor) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::shape("embedding", format!("table must be [V, d], got {:?}", table.shape())));
    }
    if shape.iter().product::<usize>() != ids.len() {
        return Err(Error::shape("embedding", format!("{} ids for shape {shape:?}", ids.len())));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
        return Err(Error::Index(format!("token id {bad} out of range for vocabulary {v}")));
    }
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&td[i as usize * d..(i as usize + 1) * d]);
    }
    drop(td);
    let mut out_shape = shape.to_vec();
    out_shape.push(d);
    let ids = ids.to_vec();
    Ok(Tensor::from_op(out_shape, out, &[table], || Rule::Embedding { ids, d }))
}

/// Inverted dropout: kept values are scaled by `1 / (1 - p)`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f32, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.numel())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor::from_op(x.shape().to_vec(), data, &[x], || Rule::Dropout { mask }))
}

/// Rotates consecutive coordinate pairs of `x[B, H, T, 2P]` by the angles
/// tabulated in `cos`/`sin` (row-major `[positions, P]`), using absolute
/// position `offset + t`.
pub fn rotate_pairs(x: &Tensor, cos: &Arc<[f32]>, sin: &Arc<[f32]>, offset: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("rotate_pairs", format!("expected [B, H, T, d_h], got {:?}", x.shape())));
    }
    let (t, dh) = (x.shape()[2], x.shape()[3]);
    if dh % 2 != 0 {
        return Err(Error::Config(format!("rotary head dimension must be even, got {dh}")));
    }
    let pairs = dh / 2;
    let positions = cos.len() / pairs.max(1);
    if offset + t > positions {
        return Err(Error::Input(format!(
            "positions {}..{} exceed rotary table coverage {positions}",
            offset,
            offset + t
        )));
    }
    let mut out = x.to_vec();
    apply_rotation(&mut out, cos, sin, t, pairs, offset, 1.0);
    let (cos, sin) = (cos.clone(), sin.clone());
    Ok(Tensor::from_op(x.shape().to_vec(), out, &[x], || Rule::RotatePairs {
        cos,
        sin,
        t,
        pairs,
        offset,
    }))
}

/// `direction = -1` applies the inverse rotation (used by the backward rule).
pub(crate) fn apply_rotation(
    buf: &mut [f32],
    cos: &[f32],
    sin: &[f32],
    t: usize,
    pairs: usize,
    offset: usize,
    direction: f32,
) {
    let dh = 2 * pairs;
    for (r, head_vec) in buf.chunks_exact_mut(dh).enumerate() {
        let pos = offset + r % t;
        let (c, s) = (&cos[pos * pairs..(pos + 1) * pairs], &sin[pos * pairs..(pos + 1) * pairs]);
        for i in 0..pairs {
            let (x0, x1) = (head_vec[2 * i], head_vec[2 * i + 1]);
            let sn = direction * s[i];
            head_vec[2 * i] = x0 * c[i] - x1 * sn;
            head_vec[2 * i + 1] = x0 * sn + x1 * c[i];
        }
    }
}

pub(crate) fn permute_0213(src: &[f32], d0: usize, d1: usize, d2: usize, d3: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let o = ((a * d2 + c) * d1 + b) * d3;
                out[o..o + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}

/// `[B, T, H·d_h] -> [B, H, T, d_h]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    if x.rank() != 3 || last_dim(x) % heads != 0 {
        return Err(Error::shape("split_heads", format!("{:?} into {heads} heads", x.shape())));
    }
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let out = permute_0213(&x.data(), b, t, heads, dh);
    Ok(Tensor::from_op(vec![b, heads, t, dh], out, &[x], || Rule::SplitHeads { b, t, h: heads, dh }))
}

/// `[B, H, T, d_h] -> [B, T, H·d_h]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("merge_heads", format!("expected [B, H, T, d_h], got {:?}", x.shape())));
    }
    let (b, h, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let out = permute_0213(&x.data(), b, h, t, dh);
    Ok(Tensor::from_op(vec![b, t, h * dh], out, &[x], || Rule::MergeHeads { b, t, h, dh }))
}

/// Scaled dot-product attention where `q` has `Hq` heads and `k`, `v` share
/// `Hkv` heads; query head `i` reads key/value head `i / (Hq / Hkv)`.
/// Shapes: `q[B, Hq, T, d_h]`, `k, v[B, Hkv, T, d_h]`.
pub fn grouped_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    if q.rank() != 4 || k.shape() != v.shape() || k.rank() != 4 {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (b, hq, t, dh) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let hkv = k.shape()[1];
    if k.shape()[0] != b || k.shape()[2] != t || k.shape()[3] != dh || hkv == 0 || hq % hkv != 0 {
        return Err(Error::shape(
            "attention",
            format!("q {:?} cannot share kv heads {:?}", q.shape(), k.shape()),
        ));
    }
    let group = hq / hkv;
    let scale = 1.0 / (dh as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![0.0f32; b * hq * t * t];
    let mut out = vec![0.0f32; b * hq * t * dh];
    let hs = t * dh;
    for bi in 0..b {
        for h in 0..hq {
            let kvh = bi * hkv + h / group;
            let qh = bi * hq + h;
            let p = &mut probs[qh * t * t..(qh + 1) * t * t];
            gemm(
                Mat::new(&qd[qh * hs..(qh + 1) * hs], t, dh),
                Mat::new(&kd[kvh * hs..(kvh + 1) * hs], t, dh).t(),
                p,
                0.0,
            );
            for (i, row) in p.chunks_exact_mut(t).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if causal && j > i { f32::NEG_INFINITY } else { *s * scale };
                }
                softmax_row(row);
            }
            gemm(
                Mat::new(p, t, t),
                Mat::new(&vd[kvh * hs..(kvh + 1) * hs], t, dh),
                &mut out[qh * hs..(qh + 1) * hs],
                0.0,
            );
        }
    }
    drop((qd, kd, vd));
    Ok(Tensor::from_op(q.shape().to_vec(), out, &[q, k, v], || Rule::Attention {
        probs,
        scale,
        b,
        hq,
        hkv,
        t,
        dh,
    }))
}

/// Row-wise choice along the leading axis: row `i` comes from `a` where
/// `take_a[i]` and from `b` otherwise.
pub fn select_rows(take_a: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("select_rows", a, b)?;
    if a.shape()[0] != take_a.len() {
        return Err(Error::shape(
            "select_rows",
            format!("mask of {} rows for shape {:?}", take_a.len(), a.shape()),
        ));
    }
    let row_len = a.numel() / take_a.len();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(a.numel());
    for (i, &ta) in take_a.iter().enumerate() {
        let src = if ta { &ad } else { &bd };
        out.extend_from_slice(&src[i * row_len..(i + 1) * row_len]);
    }
    drop((ad, bd));
    let mask = take_a.to_vec();
    Ok(Tensor::from_op(a.shape().to_vec(), out, &[a, b], || Rule::SelectRows { mask, row_len }))
}

/// Column `j` of a `[N, C]` matrix as an `[N]` vector.
pub fn column(x: &Tensor, j: usize) -> Result<Tensor> {
    if x.rank() != 2 || j >= x.shape()[1] {
        return Err(Error::shape("column", format!("column {j} of {:?}", x.shape())));
    }
    let cols = x.shape()[1];
    let out: Vec<f32> = x.data().chunks_exact(cols).map(|r| r[j]).collect();
    Ok(Tensor::from_op(vec![x.shape()[0]], out, &[x], || Rule::Column { j, cols }))
}
