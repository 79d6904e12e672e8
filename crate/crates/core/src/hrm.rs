//! The recurrent reasoning core: a fast low-level state and a slow high-level
//! state updated in alternating cycles, with a learned per-sample halting
//! decision after every reasoning step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{const_param, normal_param, stack_forward, AttentionShape, BlockWeights, Dropout, RopeTable, INIT_STD};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct HrmWeights {
    pub low_blocks: Vec<BlockWeights>,
    pub high_blocks: Vec<BlockWeights>,
    /// `[d, d]`, projects the high-level state into the low-level input.
    pub inject_low: Tensor,
    /// `[d, d]`, projects the low-level state into the high-level input.
    pub inject_high: Tensor,
    /// `[2, d]`: row 0 scores halting, row 1 scores continuing.
    pub halting_head: Tensor,
}

impl HrmWeights {
    pub fn init<R: Rng + ?Sized>(shape: AttentionShape, n_low: usize, n_high: usize, rng: &mut R) -> Self {
        let d = shape.d_model;
        let low_blocks = (0..n_low).map(|_| BlockWeights::init(shape, rng)).collect();
        let high_blocks = (0..n_high).map(|_| BlockWeights::init(shape, rng)).collect();
        HrmWeights {
            low_blocks,
            high_blocks,
            inject_low: normal_param(&[d, d], INIT_STD, rng),
            inject_high: normal_param(&[d, d], INIT_STD, rng),
            halting_head: const_param(&[2, d], 0.0),
        }
    }

    /// Every projection zero: both cycles leave their state untouched.
    pub fn zeros(shape: AttentionShape, n_low: usize, n_high: usize) -> Self {
        let d = shape.d_model;
        HrmWeights {
            low_blocks: (0..n_low).map(|_| BlockWeights::zeros(shape)).collect(),
            high_blocks: (0..n_high).map(|_| BlockWeights::zeros(shape)).collect(),
            inject_low: const_param(&[d, d], 0.0),
            inject_high: const_param(&[d, d], 0.0),
            halting_head: const_param(&[2, d], 0.0),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (stack, blocks) in [("low", &self.low_blocks), ("high", &self.high_blocks)] {
            for (i, b) in blocks.iter().enumerate() {
                for (name, t) in b.named() {
                    out.push((format!("hrm.{stack}.{i}.{name}"), t));
                }
            }
        }
        out.push(("hrm.inject_low".into(), &self.inject_low));
        out.push(("hrm.inject_high".into(), &self.inject_high));
        out.push(("hrm.halting_head".into(), &self.halting_head));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    fn d_model(&self) -> usize {
        self.inject_low.shape()[0]
    }
}

/// Loop knobs for [`hrm_forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrmSettings {
    pub c_low: usize,
    pub c_high: usize,
    pub s_max: usize,
    pub eps: f32,
}

impl From<&ModelConfig> for HrmSettings {
    fn from(c: &ModelConfig) -> Self {
        HrmSettings {
            c_low: c.c_low,
            c_high: c.c_high,
            s_max: c.s_max,
            eps: c.rms_eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HrmState {
    pub z_high: Tensor,
    pub z_low: Tensor,
    pub step: usize,
    pub halted: Vec<bool>,
}

impl HrmState {
    pub fn active(&self) -> Vec<bool> {
        self.halted.iter().map(|h| !h).collect()
    }

    pub fn all_halted(&self) -> bool {
        self.halted.iter().all(|&h| h)
    }
}

/// Inner cycles actually executed, for instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleCounts {
    pub low: usize,
    pub high: usize,
}

pub fn init_states(h: &Tensor) -> HrmState {
    HrmState {
        z_high: ops::identity(h),
        z_low: ops::identity(h),
        step: 0,
        halted: vec![false; h.shape()[0]],
    }
}

/// Keeps rows of halted samples bit-identical to `old`.
fn freeze(state: &HrmState, new: Tensor, old: &Tensor) -> Result<Tensor> {
    if state.halted.iter().any(|&h| h) {
        ops::select_rows(&state.active(), &new, old)
    } else {
        Ok(new)
    }
}

/// `c_low` passes of `z_low <- LowBlocks(z_low + inject_low(z_high))`, using
/// the high-level state from before this reasoning step.
pub fn low_level_cycle(
    state: &mut HrmState,
    w: &HrmWeights,
    rope: &RopeTable,
    settings: &HrmSettings,
    drop: &mut Dropout,
    counts: &mut CycleCounts,
) -> Result<()> {
    let injected = ops::linear(&state.z_high, &w.inject_low)?;
    let mut z = state.z_low.clone();
    for _ in 0..settings.c_low {
        z = stack_forward(&ops::add(&z, &injected)?, &w.low_blocks, rope, settings.eps, drop)?;
        counts.low += 1;
    }
    state.z_low = freeze(state, z, &state.z_low)?;
    Ok(())
}

/// `c_high` passes of `z_high <- HighBlocks(z_high + inject_high(z_low))`
/// with the final low-level state of this step.
pub fn high_level_cycle(
    state: &mut HrmState,
    w: &HrmWeights,
    rope: &RopeTable,
    settings: &HrmSettings,
    drop: &mut Dropout,
    counts: &mut CycleCounts,
) -> Result<()> {
    let injected = ops::linear(&state.z_low, &w.inject_high)?;
    let mut z = state.z_high.clone();
    for _ in 0..settings.c_high {
        z = stack_forward(&ops::add(&z, &injected)?, &w.high_blocks, rope, settings.eps, drop)?;
        counts.high += 1;
    }
    state.z_high = freeze(state, z, &state.z_high)?;
    Ok(())
}

/// `[B, 2]` scores from the time-averaged high-level state.
pub fn halting_scores(z_high: &Tensor, w: &HrmWeights) -> Result<Tensor> {
    ops::linear(&ops::mean_pool_time(z_high)?, &w.halting_head)
}

/// Exploration outcome for one sample, drawn once per forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationDraw {
    pub exploring: bool,
    /// The forced minimum depth `m` when exploring.
    pub target: Option<usize>,
}

impl ExplorationDraw {
    pub const NONE: ExplorationDraw = ExplorationDraw { exploring: false, target: None };
}

/// With probability `p_explore`, pick `m` uniformly from `{2, ..., s_max}`.
/// When `s_max < 2` that set is empty and exploration is skipped.
pub fn draw_exploration<R: Rng + ?Sized>(rng: &mut R, p_explore: f32, s_max: usize) -> ExplorationDraw {
    let u: f32 = rng.random();
    if u < p_explore && s_max >= 2 {
        ExplorationDraw {
            exploring: true,
            target: Some(rng.random_range(2..=s_max)),
        }
    } else {
        ExplorationDraw::NONE
    }
}

/// Training rule for a single sample after `step` completed steps.
pub fn halts_training(halt: f32, cont: f32, step: usize, draw: &ExplorationDraw) -> bool {
    match draw.target {
        Some(m) if draw.exploring => step >= m,
        _ => halt > cont,
    }
}

pub fn halts_inference(halt: f32, cont: f32, delta: f32) -> bool {
    halt + delta > cont
}

fn score_pairs(scores: &Tensor) -> Result<Vec<(f32, f32)>> {
    if scores.rank() != 2 || scores.shape()[1] != 2 {
        return Err(Error::shape("halt", format!("scores must be [B, 2], got {:?}", scores.shape())));
    }
    Ok(scores.data().chunks_exact(2).map(|r| (r[0], r[1])).collect())
}

/// Per-sample training decisions. `draws` holds one exploration draw per
/// sample for the whole forward pass.
pub fn decide_halt_training(scores: &Tensor, step: usize, draws: &[ExplorationDraw]) -> Result<Vec<bool>> {
    let pairs = score_pairs(scores)?;
    if pairs.len() != draws.len() {
        return Err(Error::shape("halt", format!("{} draws for {} samples", draws.len(), pairs.len())));
    }
    Ok(pairs
        .iter()
        .zip(draws)
        .map(|(&(h, c), d)| halts_training(h, c, step, d))
        .collect())
}

pub fn decide_halt_inference(scores: &Tensor, delta: f32) -> Result<Vec<bool>> {
    Ok(score_pairs(scores)?
        .into_iter()
        .map(|(h, c)| halts_inference(h, c, delta))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum HaltMode {
    /// Score rule with exploration; one seed per sample.
    Training { p_explore: f32, sample_seeds: Vec<u64> },
    /// Biased score rule, no exploration.
    Inference { delta: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub halt_score: f32,
    pub continue_score: f32,
    pub exploring: bool,
    pub forced_target: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub steps_used: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub samples: Vec<SampleTrace>,
}

impl StepTrace {
    pub fn steps_used(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.steps_used).collect()
    }

    pub fn mean_steps(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.steps_used as f64).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct HrmOutput {
    /// High-level state of each sample at its halting step.
    pub z_out: Tensor,
    pub trace: StepTrace,
    /// `[B, 2]` scores after each executed step (still attached to the graph).
    pub step_scores: Vec<Tensor>,
    /// `(z_high, z_low)` after each executed step.
    pub states: Vec<(Tensor, Tensor)>,
    pub counts: CycleCounts,
}

pub fn hrm_forward(
    h: &Tensor,
    w: &HrmWeights,
    rope: &RopeTable,
    settings: &HrmSettings,
    mode: &HaltMode,
    drop: &mut Dropout,
) -> Result<HrmOutput> {
    if settings.s_max < 1 {
        return Err(Error::Config("s_max must be >= 1".into()));
    }
    if h.rank() != 3 || h.shape()[2] != w.d_model() {
        return Err(Error::shape("hrm_forward", format!("input {:?} for d_model {}", h.shape(), w.d_model())));
    }
    let b = h.shape()[0];
    let draws: Vec<ExplorationDraw> = match mode {
        HaltMode::Training { p_explore, sample_seeds } => {
            if sample_seeds.len() != b {
                return Err(Error::shape("hrm_forward", format!("{} seeds for batch {b}", sample_seeds.len())));
            }
            sample_seeds
                .iter()
                .map(|&s| draw_exploration(&mut ChaCha8Rng::seed_from_u64(s), *p_explore, settings.s_max))
                .collect()
        }
        HaltMode::Inference { .. } => vec![ExplorationDraw::NONE; b],
    };

    let mut state = init_states(h);
    let mut counts = CycleCounts::default();
    let mut samples = vec![SampleTrace::default(); b];
    let mut step_scores = Vec::new();
    let mut states = Vec::new();
    while !state.all_halted() {
        low_level_cycle(&mut state, w, rope, settings, drop, &mut counts)?;
        high_level_cycle(&mut state, w, rope, settings, drop, &mut counts)?;
        state.step += 1;
        let scores = halting_scores(&state.z_high, w)?;
        let pairs = score_pairs(&scores)?;
        for i in 0..b {
            if state.halted[i] {
                continue;
            }
            let (hs, cs) = pairs[i];
            let d = draws[i];
            samples[i].steps.push(StepRecord {
                halt_score: hs,
                continue_score: cs,
                exploring: d.exploring,
                forced_target: d.target,
            });
            let halt = match mode {
                HaltMode::Training { .. } => halts_training(hs, cs, state.step, &d),
                HaltMode::Inference { delta } => halts_inference(hs, cs, *delta),
            };
            if halt || state.step >= settings.s_max {
                state.halted[i] = true;
                samples[i].steps_used = state.step;
            }
        }
        step_scores.push(scores);
        states.push((state.z_high.clone(), state.z_low.clone()));
    }
    Ok(HrmOutput {
        z_out: state.z_high,
        trace: StepTrace { samples },
        step_scores,
        states,
        counts,
    })
}
