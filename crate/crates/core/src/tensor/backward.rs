use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{gemm, sigmoid, Mat};
use super::ops::{apply_rotation, permute_0213, IGNORE_INDEX};
use super::Tensor;

/// Backward rule tag plus whatever the forward pass saved for it.
pub(crate) enum Rule {
    Identity,
    Add,
    Sub,
    Mul,
    Scale(f32),
    Sum,
    Mean,
    WeightedSum { weights: Vec<f32> },
    Reshape,
    MatMul { a_index: Vec<usize>, b_index: Vec<usize>, m: usize, k: usize, n: usize },
    Linear { rows: usize, in_dim: usize, out_dim: usize },
    Silu,
    Sigmoid,
    RmsNorm { inv_rms: Vec<f32>, d: usize },
    Softmax { n: usize },
    CrossEntropy { probs: Vec<f32>, targets: Vec<u32>, v: usize, count: usize },
    MeanPoolTime { b: usize, t: usize, d: usize },
    Embedding { ids: Vec<u32>, d: usize },
    Dropout { mask: Vec<f32> },
    RotatePairs { cos: Arc<[f32]>, sin: Arc<[f32]>, t: usize, pairs: usize, offset: usize },
    SplitHeads { b: usize, t: usize, h: usize, dh: usize },
    MergeHeads { b: usize, t: usize, h: usize, dh: usize },
    Attention { probs: Vec<f32>, scale: f32, b: usize, hq: usize, hkv: usize, t: usize, dh: usize },
    SelectRows { mask: Vec<bool>, row_len: usize },
    Column { j: usize, cols: usize },
}

pub(super) fn run(loss: &Tensor) {
    // Every node reachable through recorded inputs that needs a gradient.
    let mut nodes = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        if let Some(rec) = t.record() {
            stack.extend(rec.inputs.iter().cloned());
        }
        nodes.push(t);
    }
    nodes.sort_by_key(|t| Reverse(t.id()));

    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for node in &nodes {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        let Some(rec) = node.record() else {
            node.accumulate_grad(&g);
            continue;
        };
        let needs: Vec<bool> = rec.inputs.iter().map(Tensor::requires_grad).collect();
        let input_grads = {
            let out = node.data();
            rec.rule.backward(&rec.inputs, &out, &g, &needs)
        };
        for (input, ig) in rec.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            match grads.get_mut(&input.id()) {
                Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(input.id(), ig);
                }
            }
        }
    }
}

fn when(need: bool, f: impl FnOnce() -> Vec<f32>) -> Option<Vec<f32>> {
    need.then(f)
}

impl Rule {
    fn backward(&self, inputs: &[Tensor], out: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        match self {
            Rule::Identity | Rule::Reshape => vec![Some(g.to_vec())],
            Rule::Add => vec![when(needs[0], || g.to_vec()), when(needs[1], || g.to_vec())],
            Rule::Sub => vec![
                when(needs[0], || g.to_vec()),
                when(needs[1], || g.iter().map(|v| -v).collect()),
            ],
            Rule::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    when(needs[0], || g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    when(needs[1], || g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ]
            }
            Rule::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Rule::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Rule::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / n as f32; n])]
            }
            Rule::WeightedSum { weights } => vec![Some(weights.iter().map(|w| w * g[0]).collect())],
            Rule::MatMul { a_index, b_index, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (inputs[0].data(), inputs[1].data());
                let mut ga = needs[0].then(|| vec![0.0f32; ad.len()]);
                let mut gb = needs[1].then(|| vec![0.0f32; bd.len()]);
                for (o, (&i, &j)) in a_index.iter().zip(b_index).enumerate() {
                    let dc = Mat::new(&g[o * m * n..(o + 1) * m * n], m, n);
                    if let Some(ga) = ga.as_mut() {
                        let b = Mat::new(&bd[j * k * n..(j + 1) * k * n], k, n);
                        gemm(dc, b.t(), &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let a = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
                        gemm(a.t(), dc, &mut gb[j * k * n..(j + 1) * k * n], 1.0);
                    }
                }
                vec![ga, gb]
            }
            Rule::Linear { rows, in_dim, out_dim } => {
                let (x, w) = (inputs[0].data(), inputs[1].data());
                let dy = Mat::new(g, *rows, *out_dim);
                let gx = when(needs[0], || {
                    let mut gx = vec![0.0; rows * in_dim];
                    gemm(dy, Mat::new(&w, *out_dim, *in_dim), &mut gx, 0.0);
                    gx
                });
                let gw = when(needs[1], || {
                    let mut gw = vec![0.0; out_dim * in_dim];
                    gemm(dy.t(), Mat::new(&x, *rows, *in_dim), &mut gw, 0.0);
                    gw
                });
                vec![gx, gw]
            }
            Rule::Silu => {
                let x = inputs[0].data();
                vec![Some(
                    x.iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                )]
            }
            Rule::Sigmoid => vec![Some(out.iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect())],
            Rule::RmsNorm { inv_rms, d } => {
                let d = *d;
                let (x, gamma) = (inputs[0].data(), inputs[1].data());
                let mut gx = needs[0].then(|| vec![0.0f32; x.len()]);
                let mut gg = needs[1].then(|| vec![0.0f64; d]);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    if let Some(gx) = gx.as_mut() {
                        let dot: f64 = (0..d).map(|i| (gr[i] * gamma[i] * xr[i]) as f64).sum();
                        let coef = (inv as f64).powi(3) * dot / d as f64;
                        for i in 0..d {
                            gx[r * d + i] = inv * gamma[i] * gr[i] - (coef * xr[i] as f64) as f32;
                        }
                    }
                    if let Some(gg) = gg.as_mut() {
                        for i in 0..d {
                            gg[i] += (gr[i] * xr[i] * inv) as f64;
                        }
                    }
                }
                vec![gx, gg.map(|v| v.into_iter().map(|x| x as f32).collect())]
            }
            Rule::Softmax { n } => {
                let mut gx = vec![0.0; out.len()];
                for ((y, gy), gx) in out.chunks_exact(*n).zip(g.chunks_exact(*n)).zip(gx.chunks_exact_mut(*n)) {
                    let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for i in 0..*n {
                        gx[i] = y[i] * (gy[i] - dot);
                    }
                }
                vec![Some(gx)]
            }
            Rule::CrossEntropy { probs, targets, v, count } => {
                let mut gx = probs.clone();
                if *count > 0 {
                    let s = g[0] / *count as f32;
                    for (row, &t) in gx.chunks_exact_mut(*v).zip(targets) {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        row[t as usize] -= 1.0;
                        row.iter_mut().for_each(|p| *p *= s);
                    }
                }
                vec![Some(gx)]
            }
            Rule::MeanPoolTime { b, t, d } => {
                let mut gx = vec![0.0; b * t * d];
                let inv = 1.0 / *t as f32;
                for bi in 0..*b {
                    let src = &g[bi * d..(bi + 1) * d];
                    for ti in 0..*t {
                        let dst = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(a, v)| *a = v * inv);
                    }
                }
                vec![Some(gx)]
            }
            Rule::Embedding { ids, d } => {
                let mut gt = vec![0.0; inputs[0].numel()];
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gt[i as usize * d..(i as usize + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, v)| *a += v);
                }
                vec![Some(gt)]
            }
            Rule::Dropout { mask } => vec![Some(g.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Rule::RotatePairs { cos, sin, t, pairs, offset } => {
                let mut gx = g.to_vec();
                apply_rotation(&mut gx, cos, sin, *t, *pairs, *offset, -1.0);
                vec![Some(gx)]
            }
            Rule::SplitHeads { b, t, h, dh } => vec![Some(permute_0213(g, *b, *h, *t, *dh))],
            Rule::MergeHeads { b, t, h, dh } => vec![Some(permute_0213(g, *b, *t, *h, *dh))],
            Rule::Attention { probs, scale, b, hq, hkv, t, dh } => {
                attention_backward(inputs, probs, *scale, (*b, *hq, *hkv, *t, *dh), g, needs)
            }
            Rule::SelectRows { mask, row_len } => {
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (i, &ta) in mask.iter().enumerate() {
                    let dst = if ta { &mut ga } else { &mut gb };
                    dst[i * row_len..(i + 1) * row_len].copy_from_slice(&g[i * row_len..(i + 1) * row_len]);
                }
                vec![when(needs[0], || ga), when(needs[1], || gb)]
            }
            Rule::Column { j, cols } => {
                let mut gx = vec![0.0; g.len() * cols];
                for (r, &v) in g.iter().enumerate() {
                    gx[r * cols + j] = v;
                }
                vec![Some(gx)]
            }
        }
    }
}

fn attention_backward(
    inputs: &[Tensor],
    probs: &[f32],
    scale: f32,
    (b, hq, hkv, t, dh): (usize, usize, usize, usize, usize),
    g: &[f32],
    needs: &[bool],
) -> Vec<Option<Vec<f32>>> {
    let (qd, kd, vd) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let group = hq / hkv;
    let hs = t * dh;
    let mut gq = vec![0.0f32; qd.len()];
    let mut gk = vec![0.0f32; kd.len()];
    let mut gv = vec![0.0f32; vd.len()];
    let mut dp = vec![0.0f32; t * t];
    for bi in 0..b {
        for h in 0..hq {
            let qh = bi * hq + h;
            let kvh = bi * hkv + h / group;
            let p = &probs[qh * t * t..(qh + 1) * t * t];
            let go = Mat::new(&g[qh * hs..(qh + 1) * hs], t, dh);
            // dV += Pᵀ dO
            gemm(Mat::new(p, t, t).t(), go, &mut gv[kvh * hs..(kvh + 1) * hs], 1.0);
            // dP = dO Vᵀ
            gemm(go, Mat::new(&vd[kvh * hs..(kvh + 1) * hs], t, dh).t(), &mut dp, 0.0);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
            for (pr, dr) in p.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let ds = Mat::new(&dp, t, t);
            gemm(ds, Mat::new(&kd[kvh * hs..(kvh + 1) * hs], t, dh), &mut gq[qh * hs..(qh + 1) * hs], 0.0);
            gemm(ds.t(), Mat::new(&qd[qh * hs..(qh + 1) * hs], t, dh), &mut gk[kvh * hs..(kvh + 1) * hs], 1.0);
        }
    }
    vec![
        when(needs[0], || gq),
        when(needs[1], || gk),
        when(needs[2], || gv),
    ]
}
