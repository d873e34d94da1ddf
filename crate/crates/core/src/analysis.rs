//! Analysis instruments: 100-bin attention/gradient profiles, the gate
//! preference score and NIAH heatmaps.
//!
//! Attention profiles take the last query's attention row in every layer and
//! head, add each key's weight to its bin, and average over layers, heads and
//! samples, so the bins of a profile sum to 1. Gradient profiles do the same
//! with per-token `|dL/dx|` normalized to sum 1 per sample.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{backward, decode, forward_with_bank, MemoryBank, ModelConfig, ModelParams, Sampling};
use crate::pos_encoding::PositionMode;
use crate::tasks::{gen_task, TaskKind, TaskSpec};
use crate::training::{loss_sum_and_grad, Example};

pub const NUM_BINS: usize = 100;

/// Bin of token `pos` in a sequence of `len` tokens.
pub fn bin_index(pos: usize, len: usize) -> usize {
    (NUM_BINS * pos / len).min(NUM_BINS - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinQuantity {
    Attention,
    Gradient,
}

impl BinQuantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Gradient => "gradient",
        }
    }
}

impl FromStr for BinQuantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "gradient" => Ok(Self::Gradient),
            other => arg_err(format!("unknown quantity `{other}` (attention, gradient)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinProfile {
    pub quantity: BinQuantity,
    pub values: [f64; NUM_BINS],
}

impl BinProfile {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Median over bins.
    pub fn median(&self) -> f64 {
        let mut v = self.values.to_vec();
        v.sort_by(f64::total_cmp);
        0.5 * (v[NUM_BINS / 2 - 1] + v[NUM_BINS / 2])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,quantity,value\n");
        for (b, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{b},{},{v:.10e}", self.quantity.as_str());
        }
        out
    }
}

/// Adds `weights[pos]` into the bin of each position.
pub fn accumulate_bins(weights: &[f64], bins: &mut [f64; NUM_BINS]) {
    let len = weights.len();
    for (p, w) in weights.iter().enumerate() {
        bins[bin_index(p, len)] += w;
    }
}

fn sample_bins(
    params: &ModelParams,
    cfg: &ModelConfig,
    ex: &Example,
    quantity: BinQuantity,
) -> Result<[f64; NUM_BINS]> {
    let bank = MemoryBank::build(params, cfg, &ex.prompt, &ex.posmap)?;
    let pass = forward_with_bank(params, cfg, &ex.prompt, &ex.posmap, &bank)?;
    let mut bins = [0.0; NUM_BINS];
    match quantity {
        BinQuantity::Attention => {
            let last = ex.prompt.len() - 1;
            let mut rows = 0usize;
            for layer in 0..pass.num_blocks() {
                for head in pass.attention_probs(layer) {
                    accumulate_bins(head.row(last).as_slice().expect("contiguous"), &mut bins);
                    rows += 1;
                }
            }
            bins.iter_mut().for_each(|b| *b /= rows as f64);
        }
        BinQuantity::Gradient => {
            let (_, _, dlogits) = loss_sum_and_grad(&pass.logits, &ex.targets, &ex.loss_mask)?;
            let g = backward(params, cfg, &ex.prompt, &ex.posmap, &bank, &pass, &dlogits)?;
            let norms: Vec<f64> = g.input.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            let total: f64 = norms.iter().sum();
            if total > 0.0 {
                let normed: Vec<f64> = norms.iter().map(|n| n / total).collect();
                accumulate_bins(&normed, &mut bins);
            }
        }
    }
    Ok(bins)
}

/// Averages per-sample profiles over `samples`.
pub fn bin_profile(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Example],
    quantity: BinQuantity,
) -> Result<BinProfile> {
    if samples.is_empty() {
        return arg_err("bin profile needs at least one sample");
    }
    let per: Vec<[f64; NUM_BINS]> = samples
        .par_iter()
        .map(|ex| sample_bins(params, cfg, ex, quantity))
        .collect::<Result<_>>()?;
    let mut values = [0.0; NUM_BINS];
    for bins in &per {
        for (v, b) in values.iter_mut().zip(bins) {
            *v += b;
        }
    }
    values.iter_mut().for_each(|v| *v /= per.len() as f64);
    Ok(BinProfile { quantity, values })
}

/// Mean over mixin layers of `|tanh(attn_gate)|`; 0 without mixins.
pub fn average_gates(params: &ModelParams) -> f64 {
    if params.mixins.is_empty() {
        return 0.0;
    }
    let sum: f64 = params.mixins.iter().map(|m| m.gates.attn_multiplier().abs()).sum();
    sum / params.mixins.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahHeatmap {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// `accuracy[length_index][depth_index]`.
    pub accuracy: Vec<Vec<f64>>,
    pub trials: usize,
}

impl NiahHeatmap {
    pub fn get(&self, length: usize, depth: f64) -> Option<f64> {
        let li = self.lengths.iter().position(|&l| l == length)?;
        let di = self.depths.iter().position(|&d| d == depth)?;
        Some(self.accuracy[li][di])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,depth,accuracy\n");
        for (l, row) in self.lengths.iter().zip(&self.accuracy) {
            for (d, a) in self.depths.iter().zip(row) {
                let _ = writeln!(out, "{l},{d},{a:.6}");
            }
        }
        out
    }

    /// Binary graymap, one `cell`-pixel square per heatmap cell; rows are
    /// lengths, columns depths, white = accuracy 1.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let (w, h) = (self.depths.len() * cell, self.lengths.len() * cell);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for row in &self.accuracy {
            let line: Vec<u8> = row
                .iter()
                .flat_map(|a| std::iter::repeat_n((a.clamp(0.0, 1.0) * 255.0).round() as u8, cell))
                .collect();
            for _ in 0..cell {
                out.extend_from_slice(&line);
            }
        }
        out
    }
}

fn trial_seed(seed: u64, li: usize, di: usize, t: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [li as u64, di as u64, t as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Fraction of greedy answers equal to the needle payload per
/// (length, depth) cell. `template` supplies layout and feature settings;
/// its `length` and `depth` are replaced per cell.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_niah(
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: PositionMode,
    template: &TaskSpec,
    lengths: &[usize],
    depths: &[f64],
    trials: usize,
    seed: u64,
) -> Result<NiahHeatmap> {
    if trials == 0 || lengths.is_empty() || depths.is_empty() {
        return arg_err("NIAH evaluation needs lengths, depths and trials >= 1");
    }
    let cells: Vec<(usize, usize, usize)> = (0..lengths.len())
        .flat_map(|li| (0..depths.len()).flat_map(move |di| (0..trials).map(move |t| (li, di, t))))
        .collect();
    let hits: Vec<bool> = cells
        .par_iter()
        .map(|&(li, di, t)| {
            let spec = TaskSpec {
                kind: TaskKind::VisualNeedle,
                length: lengths[li],
                depth: depths[di],
                seed: trial_seed(seed, li, di, t),
                ..template.clone()
            };
            let sample = gen_task(&spec, mode, cfg.context_detail)?;
            let bank = MemoryBank::build(params, cfg, &sample.query, &sample.posmap)?;
            let out = decode(params, cfg, &sample.query, &sample.posmap, &bank, 1, Sampling::Greedy)?;
            Ok(out[0] == sample.answer[0])
        })
        .collect::<Result<_>>()?;
    let mut accuracy = vec![vec![0.0; depths.len()]; lengths.len()];
    for (&(li, di, _), &hit) in cells.iter().zip(&hits) {
        if hit {
            accuracy[li][di] += 1.0;
        }
    }
    for row in &mut accuracy {
        row.iter_mut().for_each(|a| *a /= trials as f64);
    }
    Ok(NiahHeatmap {
        lengths: lengths.to_vec(),
        depths: depths.to_vec(),
        accuracy,
        trials,
    })
}

/// Greedy first-token accuracy over `n` fresh samples of `template`.
pub fn task_accuracy(
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: PositionMode,
    template: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return arg_err("accuracy needs at least one sample");
    }
    let hits: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|t| {
            let spec = template.reseeded(trial_seed(seed, 0, 0, t));
            let sample = gen_task(&spec, mode, cfg.context_detail)?;
            let bank = MemoryBank::build(params, cfg, &sample.query, &sample.posmap)?;
            let out = decode(params, cfg, &sample.query, &sample.posmap, &bank, 1, Sampling::Greedy)?;
            Ok(out[0] == sample.answer[0])
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / n as f64)
}
