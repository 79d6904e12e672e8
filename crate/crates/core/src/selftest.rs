//! Quick runtime self-checks: gradients against finite differences, grouped
//! attention against plain multi-head attention, rotary invariants, the
//! reference parameter count and the halting rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{apply_rope, block_forward, gqa_attention, AttentionShape, BlockWeights, Dropout, RopeTable};
use crate::config::ModelConfig;
use crate::hrm::{halts_inference, halts_training, hrm_forward, ExplorationDraw, HaltMode, HrmSettings, HrmWeights};
use crate::model::expected_parameters;
use crate::tensor::gradcheck::{finite_difference_in_place, relative_norm_error};
use crate::tensor::{no_grad, ops, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32, trainable: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    if trainable {
        Tensor::parameter(shape, data).unwrap()
    } else {
        Tensor::from_vec(shape, data).unwrap()
    }
}

fn random_block(rng: &mut ChaCha8Rng, shape: AttentionShape) -> BlockWeights {
    let w = BlockWeights::init(shape, rng);
    for (_, t) in w.named() {
        let n = t.numel();
        let fresh: Vec<f32> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let rank = t.rank();
        for (v, f) in t.data_mut().iter_mut().zip(fresh) {
            *v = if rank == 1 { 1.0 + f } else { f };
        }
    }
    w
}

fn gradient_check() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = AttentionShape::new(16, 4, 2).unwrap();
    let w = random_block(&mut rng, shape);
    let rope = RopeTable::new(4, 4, 10000.0).unwrap();
    let x = rand_tensor(&mut rng, &[1, 4, 16], 1.0, false);
    let loss = || ops::sum(&block_forward(&x, &w, &rope, 1e-6, &mut Dropout::disabled()).unwrap());
    w.named().iter().for_each(|(_, t)| t.zero_grad());
    loss().backward().unwrap();
    let mut worst = 0.0f32;
    for (_, t) in w.named() {
        let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let fd: Vec<f32> = finite_difference_in_place(|| loss().item() as f64, t, 1e-3, None).into_iter().map(|(_, v)| v).collect();
        worst = worst.max(relative_norm_error(&g, &fd));
    }
    (worst < 1e-2, format!("block at d = 16, T = 4: worst relative error {worst:.2e}"))
}

fn mha_check() -> (bool, String) {
    let (d, heads, t) = (16, 4, 5);
    let dh = d / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_block(&mut rng, AttentionShape::new(d, heads, heads).unwrap());
    let rope = RopeTable::new(dh, t, 10000.0).unwrap();
    let x = rand_tensor(&mut rng, &[1, t, d], 1.0, false);
    let got = gqa_attention(&x, &w, &rope, true).unwrap().to_vec();
    let xv = x.to_vec();
    let proj = |m: &Tensor| -> Vec<f64> {
        let wd = m.to_vec();
        (0..t * d).map(|i| (0..d).map(|k| xv[i / d * d + k] as f64 * wd[(i % d) * d + k] as f64).sum()).collect()
    };
    let rotate = |v: &mut Vec<f64>| {
        for i in 0..t {
            for c in (0..d).step_by(2) {
                let p = (c % dh) / 2;
                let a = i as f64 * 10000f64.powf(-2.0 * p as f64 / dh as f64);
                let (x0, x1) = (v[i * d + c], v[i * d + c + 1]);
                v[i * d + c] = x0 * a.cos() - x1 * a.sin();
                v[i * d + c + 1] = x0 * a.sin() + x1 * a.cos();
            }
        }
    };
    let (mut q, mut k, v) = (proj(&w.wq), proj(&w.wk), proj(&w.wv));
    rotate(&mut q);
    rotate(&mut k);
    let mut ctx = vec![0.0f64; t * d];
    for h in 0..heads {
        for i in 0..t {
            let s: Vec<f64> = (0..=i)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for (j, sj) in s.iter().enumerate() {
                for c in 0..dh {
                    ctx[i * d + h * dh + c] += sj.exp() / z * v[j * d + h * dh + c];
                }
            }
        }
    }
    let wo = w.wo.to_vec();
    let gap = (0..t * d)
        .map(|i| {
            let want: f64 = (0..d).map(|k| ctx[i / d * d + k] * wo[(i % d) * d + k] as f64).sum();
            (got[i] as f64 - want).abs()
        })
        .fold(0.0, f64::max);
    (gap <= 1e-5, format!("max gap {gap:.2e}"))
}

fn rope_check() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = RopeTable::new(16, 64, 10000.0).unwrap();
    let q = rand_tensor(&mut rng, &[1, 1, 1, 16], 1.0, false);
    let k = rand_tensor(&mut rng, &[1, 1, 1, 16], 1.0, false);
    let dot = |m: usize, n: usize| -> f64 {
        let (a, b) = (apply_rope(&q, &table, m).unwrap().to_vec(), apply_rope(&k, &table, n).unwrap().to_vec());
        a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum()
    };
    let shift = [1, 9, 30].iter().map(|&s| (dot(4, 2) - dot(4 + s, 2 + s)).abs()).fold(0.0, f64::max);
    let zero = apply_rope(&q, &table, 0).unwrap().to_vec().iter().zip(q.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    (shift <= 1e-4 && zero <= 1e-6, format!("shift gap {shift:.2e}, position 0 gap {zero:.2e}"))
}

fn count_check() -> (bool, String) {
    let n = expected_parameters(&ModelConfig::table1());
    let rel = (n as f64 - 82_770_000.0).abs() / 82_770_000.0;
    (rel <= 0.005, format!("{n} ({:.3}% from 82.77M)", rel * 100.0))
}

fn halting_check() -> (bool, String) {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = HrmWeights::init(AttentionShape::new(d, 2, 1).unwrap(), 1, 1, &mut rng);
    let head: Vec<f32> = (0..2 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    w.halting_head.data_mut().copy_from_slice(&head);
    let rope = RopeTable::new(d / 2, 4, 10000.0).unwrap();
    let settings = HrmSettings { c_low: 2, c_high: 2, s_max: 16, eps: 1e-6 };
    let h = rand_tensor(&mut rng, &[64, 2, d], 2.0, false);
    let run = |mode: &HaltMode| no_grad(|| hrm_forward(&h, &w, &rope, &settings, mode, &mut Dropout::disabled())).unwrap().trace.steps_used();
    let forced = run(&HaltMode::Training { p_explore: 1.0, sample_seeds: (0..64).collect() });
    let mut ok = forced.iter().all(|&s| (2..=16).contains(&s));
    let mut prev = run(&HaltMode::Inference { delta: -1.0 });
    ok &= prev.iter().all(|&s| (1..=16).contains(&s));
    for delta in [0.0, 0.35, 2.0] {
        let now = run(&HaltMode::Inference { delta });
        ok &= now.iter().zip(&prev).all(|(a, b)| a <= b);
        prev = now;
    }
    ok &= !halts_inference(0.5, 0.5, 0.0) && !halts_training(0.5, 0.5, 3, &ExplorationDraw::NONE);
    (ok, "range, forced depths, ties and bias monotonicity".into())
}

pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> (bool, String)); 5] = [
        ("gradients", gradient_check),
        ("gqa vs mha", mha_check),
        ("rope", rope_check),
        ("parameter count", count_check),
        ("halting", halting_check),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = f();
            CheckResult { name, passed, detail }
        })
        .collect()
}
