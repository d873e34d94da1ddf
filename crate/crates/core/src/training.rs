//! Staged training: which parameters move in which stage, the optimizer and
//! schedules, the loss, and a central-difference gradient checker.
//!
//! | stage       | trainable                          | schedule            | lr     |
//! |-------------|------------------------------------|---------------------|--------|
//! | `pretrain1` | projector + mixin layers (+ gates) | constant w/ warmup  | 1e-4   |
//! | `pretrain2` | projector + mixin layers, no gates | constant            | 1e-4   |
//! | `finetune`  | everything                         | cosine w/ warmup    | 4e-5   |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::model::{backward, forward_with_bank, GateState, MemoryBank, ModelConfig, ModelParams, ParamGroup};
use crate::pos_encoding::PositionMap;
use crate::seqplan::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain1,
    Pretrain2,
    Finetune,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain1" => Ok(Self::Pretrain1),
            "pretrain2" => Ok(Self::Pretrain2),
            "finetune" => Ok(Self::Finetune),
            other => arg_err(format!("unknown stage `{other}` (pretrain1, pretrain2, finetune)")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain1 => "pretrain1",
            Self::Pretrain2 => "pretrain2",
            Self::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    ProjectorMixin,
    ProjectorMixinNoGates,
    All,
}

impl TrainableSet {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            Self::All => true,
            Self::ProjectorMixin => matches!(group, ParamGroup::Projector | ParamGroup::Mixin | ParamGroup::Gate),
            Self::ProjectorMixinNoGates => matches!(group, ParamGroup::Projector | ParamGroup::Mixin),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    ConstantWithWarmup,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: TrainableSet,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
}

/// Default hyperparameters for a stage, with desk-scale step counts.
pub fn make_stage(tag: &str) -> Result<StageConfig> {
    let stage: Stage = tag.parse()?;
    let base = StageConfig {
        stage,
        trainable: TrainableSet::ProjectorMixin,
        lr: 1e-4,
        schedule: LrSchedule::ConstantWithWarmup,
        warmup_ratio: 0.03,
        steps: 200,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
        batch_size: 8,
        grad_clip: 1.0,
    };
    Ok(match stage {
        Stage::Pretrain1 => base,
        // Continues the constant schedule of the first stage, so no re-warmup.
        Stage::Pretrain2 => StageConfig {
            trainable: TrainableSet::ProjectorMixinNoGates,
            warmup_ratio: 0.0,
            ..base
        },
        Stage::Finetune => StageConfig {
            trainable: TrainableSet::All,
            lr: 4e-5,
            schedule: LrSchedule::Cosine,
            steps: 900,
            ..base
        },
    })
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return arg_err(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if self.stage == Stage::Pretrain2 && self.trainable.includes(ParamGroup::Gate) {
            return arg_err("pretrain2 must keep the gates frozen");
        }
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return arg_err("batch_size >= 1, lr >= 0 and grad_clip > 0 are required");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_ratio * self.steps as f64
    }

    /// Linear warmup from 0, then constant or cosine decay to 0 at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step as f64;
        let warm = self.warmup_steps();
        if s < warm {
            return self.lr * s / warm;
        }
        match self.schedule {
            LrSchedule::ConstantWithWarmup => self.lr,
            LrSchedule::Cosine => {
                let span = self.steps as f64 - warm;
                if span <= 0.0 {
                    return 0.0;
                }
                let progress = ((s - warm) / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// One teacher-forced training sequence. `targets[p]` is the label for the
/// logits at position `p`; only positions with `loss_mask[p]` count.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: Prompt,
    pub posmap: PositionMap,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

fn check_targets(logits: &Array2<f64>, targets: &[u32], loss_mask: &[bool]) -> Result<usize> {
    if targets.len() != logits.nrows() || loss_mask.len() != logits.nrows() {
        return shape_err(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            loss_mask.len()
        ));
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return arg_err("loss mask selects no positions");
    }
    if let Some((_, &t)) = targets
        .iter()
        .zip(loss_mask)
        .filter(|(_, &m)| m)
        .find(|(&t, _)| t as usize >= logits.ncols())
        .map(|(t, m)| (m, t))
    {
        return arg_err(format!("target {t} outside vocabulary"));
    }
    Ok(count)
}

fn log_softmax_at(row: ndarray::ArrayView1<'_, f64>, target: usize) -> (f64, f64, f64) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    (row[target] - max - sum.ln(), max, sum)
}

/// Mean next-token cross-entropy over the masked-in positions.
pub fn compute_loss(logits: &Array2<f64>, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    let count = check_targets(logits, targets, loss_mask)?;
    let total: f64 = (0..logits.nrows())
        .filter(|&p| loss_mask[p])
        .map(|p| -log_softmax_at(logits.row(p), targets[p] as usize).0)
        .sum();
    Ok(total / count as f64)
}

/// Summed loss over masked-in positions and its gradient w.r.t. the logits.
pub fn loss_sum_and_grad(
    logits: &Array2<f64>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, usize, Array2<f64>)> {
    let count = check_targets(logits, targets, loss_mask)?;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for p in (0..logits.nrows()).filter(|&p| loss_mask[p]) {
        let row = logits.row(p);
        let t = targets[p] as usize;
        let (lp, max, sum) = log_softmax_at(row, t);
        total -= lp;
        let mut g = grad.row_mut(p);
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - max).exp() / sum;
        }
        g[t] -= 1.0;
    }
    Ok((total, count, grad))
}

/// Mean loss over all masked-in positions of the batch and its gradient.
pub fn batch_loss_and_grad(params: &ModelParams, cfg: &ModelConfig, batch: &[Example]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return arg_err("empty batch");
    }
    let per_example: Vec<(f64, usize, ModelParams)> = batch
        .par_iter()
        .map(|ex| {
            let bank = MemoryBank::build(params, cfg, &ex.prompt, &ex.posmap)?;
            let pass = forward_with_bank(params, cfg, &ex.prompt, &ex.posmap, &bank)?;
            let (loss, count, dlogits) = loss_sum_and_grad(&pass.logits, &ex.targets, &ex.loss_mask)?;
            let g = backward(params, cfg, &ex.prompt, &ex.posmap, &bank, &pass, &dlogits)?;
            Ok((loss, count, g.params))
        })
        .collect::<Result<_>>()?;
    let total: usize = per_example.iter().map(|e| e.1).sum();
    let scale = 1.0 / total as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    // fixed-order reduction keeps results independent of the thread schedule
    for (l, _, g) in &per_example {
        loss += l;
        grad.add_scaled(g, scale);
    }
    Ok((loss * scale, grad))
}

/// Mean loss only.
pub fn batch_loss(params: &ModelParams, cfg: &ModelConfig, batch: &[Example]) -> Result<f64> {
    let sums: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|ex| {
            let bank = MemoryBank::build(params, cfg, &ex.prompt, &ex.posmap)?;
            let pass = forward_with_bank(params, cfg, &ex.prompt, &ex.posmap, &bank)?;
            let (l, c, _) = loss_sum_and_grad(&pass.logits, &ex.targets, &ex.loss_mask)?;
            Ok((l, c))
        })
        .collect::<Result<_>>()?;
    let (l, c) = sums.iter().fold((0.0, 0usize), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if c == 0 {
        return arg_err("empty batch");
    }
    Ok(l / c as f64)
}

/// AdamW with decoupled weight decay on matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, d)| vec![0.0; d.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Updates trainable tensors in place; frozen tensors are not touched.
    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, cfg: &StageConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let tensors = params.tensors_mut().into_iter().zip(grad.tensors());
        for (((meta, p), (_, g)), (m, v)) in tensors.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if !cfg.trainable.includes(meta.group) {
                continue;
            }
            let wd = if meta.decays() { cfg.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                p[i] -= lr * (update + wd * p[i]);
            }
        }
    }
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut ModelParams, trainable: TrainableSet, max_norm: f64) -> f64 {
    let norm = grad
        .tensors()
        .iter()
        .filter(|(m, _)| trainable.includes(m.group))
        .flat_map(|(_, d)| d.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (meta, d) in grad.tensors_mut() {
            if trainable.includes(meta.group) {
                d.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Source of training batches.
pub trait DataStream {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Example>>;
}

impl<F> DataStream for F
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Result<Vec<Example>>,
{
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Example>> {
        self(rng, batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub gates: Vec<GateState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub stage: Stage,
    pub steps: Vec<StepMetrics>,
}

impl StageMetrics {
    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// `step,loss,lr,gate_0..gate_k` where `gate_i` is the raw attention gate of
/// mixin `i`. `step_offset` shifts step numbers when stages are concatenated.
pub fn metrics_csv(stages: &[StageMetrics]) -> String {
    let n_gates = stages
        .iter()
        .flat_map(|s| s.steps.first())
        .map(|s| s.gates.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("step,loss,lr");
    for i in 0..n_gates {
        let _ = write!(out, ",gate_{i}");
    }
    out.push('\n');
    let mut offset = 0;
    for st in stages {
        for m in &st.steps {
            let _ = write!(out, "{},{:.10e},{:.6e}", offset + m.step, m.loss, m.lr);
            for g in &m.gates {
                let _ = write!(out, ",{:.10e}", g.attn_gate);
            }
            out.push('\n');
        }
        offset += st.steps.len();
    }
    out
}

/// Runs one training stage. Deterministic for a given `seed` and stream.
pub fn run_stage(
    mut params: ModelParams,
    model_cfg: &ModelConfig,
    cfg: &StageConfig,
    data: &mut dyn DataStream,
    seed: u64,
) -> Result<(ModelParams, StageMetrics)> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&params);
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.next_batch(&mut rng, cfg.batch_size)?;
        let (loss, mut grad) = batch_loss_and_grad(&params, model_cfg, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss = {loss}"),
            });
        }
        clip_grad_norm(&mut grad, cfg.trainable, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        opt.step(&mut params, &grad, cfg, lr);
        if !params.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        steps.push(StepMetrics {
            step,
            loss,
            lr,
            gates: params.gates(),
        });
    }
    Ok((
        params,
        StageMetrics {
            stage: cfg.stage,
            steps,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per parameter group.
    pub max_rel_error: BTreeMap<ParamGroup, f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients with central differences of the batch loss on
/// up to `coords_per_tensor` sampled coordinates of every tensor in `groups`.
/// Error is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    examples: &[Example],
    groups: &[ParamGroup],
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = batch_loss_and_grad(params, cfg, examples)?;
    let analytic_flat: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, d)| d.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: BTreeMap::new(),
        coords_checked: 0,
    };
    let metas: Vec<_> = params.tensors().into_iter().map(|(m, d)| (m, d.len())).collect();
    for (ti, (meta, len)) in metas.iter().enumerate() {
        if !groups.contains(&meta.group) {
            continue;
        }
        let picks = sample(&mut rng, *len, coords_per_tensor.min(*len));
        for idx in picks.iter() {
            let original = params.tensors()[ti].1[idx];
            let mut eval_at = |value: f64| -> Result<f64> {
                probe.tensors_mut()[ti].1[idx] = value;
                batch_loss(&probe, cfg, examples)
            };
            let up = eval_at(original + eps)?;
            let down = eval_at(original - eps)?;
            probe.tensors_mut()[ti].1[idx] = original;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic_flat[ti][idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            let slot = report.max_rel_error.entry(meta.group).or_insert(0.0);
            *slot = slot.max(err);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stage_defaults() {
        let p1 = make_stage("pretrain1").unwrap();
        assert_eq!(p1.lr, 1e-4);
        assert_eq!(p1.schedule, LrSchedule::ConstantWithWarmup);
        assert_eq!(p1.trainable, TrainableSet::ProjectorMixin);
        assert_eq!(
            (p1.beta1, p1.beta2, p1.weight_decay, p1.warmup_ratio),
            (0.9, 0.999, 0.01, 0.03)
        );
        let p2 = make_stage("pretrain2").unwrap();
        assert_eq!(p2.lr, 1e-4);
        assert!(!p2.trainable.includes(ParamGroup::Gate));
        assert!(p2.trainable.includes(ParamGroup::Mixin) && p2.trainable.includes(ParamGroup::Projector));
        let ft = make_stage("finetune").unwrap();
        assert_eq!(
            (ft.lr, ft.schedule, ft.trainable),
            (4e-5, LrSchedule::Cosine, TrainableSet::All)
        );
        assert!(make_stage("pretrain3").is_err());
        for t in ["pretrain1", "pretrain2", "finetune"] {
            assert!(make_stage(t).unwrap().validate().is_ok());
        }
        let bad = StageConfig {
            warmup_ratio: 1.5,
            ..p1
        };
        assert!(bad.validate().is_err());
        let bad = StageConfig {
            trainable: TrainableSet::ProjectorMixin,
            ..p2
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn backbone_frozen_in_pretraining() {
        for g in [ParamGroup::Embedding, ParamGroup::Block, ParamGroup::Head] {
            assert!(!TrainableSet::ProjectorMixin.includes(g));
            assert!(!TrainableSet::ProjectorMixinNoGates.includes(g));
            assert!(TrainableSet::All.includes(g));
        }
    }

    #[test]
    fn warmup_and_cosine_probe_points() {
        let mut c = make_stage("finetune").unwrap();
        c.steps = 1000;
        c.warmup_ratio = 0.1;
        c.lr = 1.0;
        // warmup: linear from 0 over 100 steps
        assert_eq!(c.lr_at(0), 0.0);
        assert!((c.lr_at(50) - 0.5).abs() < 1e-12);
        assert!((c.lr_at(99) - 0.99).abs() < 1e-12);
        // cosine: 1 at the end of warmup, 1/2 halfway, 0 at the end
        assert!((c.lr_at(100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(550) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(1000).abs() < 1e-12);
        c.schedule = LrSchedule::ConstantWithWarmup;
        assert!((c.lr_at(25) - 0.25).abs() < 1e-12);
        assert_eq!(c.lr_at(100), 1.0);
        assert_eq!(c.lr_at(999), 1.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::zeros((3, 16));
        let l = compute_loss(&logits, &[1, 2, 3], &[true, true, false]).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut logits = Array2::zeros((1, 8));
        logits[[0, 5]] = 100.0;
        assert!(compute_loss(&logits, &[5], &[true]).unwrap() < 1e-30);
    }

    #[test]
    fn loss_matches_brute_force() {
        let logits = array![[0.3, -1.2, 2.0, 0.0], [1.5, 1.4, -0.2, 0.7]];
        let brute = |row: &[f64], t: usize| -> f64 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        };
        let expected = (brute(&[0.3, -1.2, 2.0, 0.0], 2) + brute(&[1.5, 1.4, -0.2, 0.7], 0)) / 2.0;
        let got = compute_loss(&logits, &[2, 0], &[true, true]).unwrap();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_errors() {
        let logits = Array2::zeros((2, 4));
        assert!(matches!(
            compute_loss(&logits, &[0, 0], &[false, false]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(compute_loss(&logits, &[0], &[true]), Err(Error::Shape(_))));
        assert!(compute_loss(&logits, &[9, 0], &[true, false]).is_err());
    }

    #[test]
    fn logit_gradient_matches_differences() {
        let logits = array![[0.3, -1.2, 2.0, 0.0], [1.5, 1.4, -0.2, 0.7]];
        let (_, _, g) = loss_sum_and_grad(&logits, &[2, 1], &[true, true]).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let h = 1e-6;
                let mut up = logits.clone();
                up[[i, j]] += h;
                let mut dn = logits.clone();
                dn[[i, j]] -= h;
                let f = |l: &Array2<f64>| loss_sum_and_grad(l, &[2, 1], &[true, true]).unwrap().0;
                assert!(((f(&up) - f(&dn)) / (2.0 * h) - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn clipping_only_counts_trainable() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 4,
            d_vit: 2,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, 0);
        let mut g = p.zeros_like();
        g.embed.fill(10.0);
        g.projector.b.fill(3.0);
        let norm = clip_grad_norm(&mut g, TrainableSet::ProjectorMixin, 1.0);
        assert!((norm - (8.0f64 * 9.0).sqrt()).abs() < 1e-12);
        assert!(g.embed.iter().all(|&v| v == 10.0));
        let clipped: f64 = g.projector.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
