use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{build_cross_mask, forward_with_bank, CrossMask, MemoryBank};
use super::layers::{ffw_forward, masked_softmax_row, rms_norm, rotate_rows};
use super::params::ModelParams;
use super::ModelConfig;
use crate::error::{arg_err, Result};
use crate::pos_encoding::{PositionMap, RopeConfig};
use crate::seqplan::Prompt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Incremental decoding state.
///
/// Self-attention keys/values grow by one row per step. Memory keys/values
/// are projected once from the bank and only read afterwards.
pub struct DecodeSession<'a> {
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    rope: RopeConfig,
    mask: CrossMask,
    k_cache: Vec<Array2<f64>>,
    v_cache: Vec<Array2<f64>>,
    memory_kv: Vec<(Array2<f64>, Array2<f64>)>,
    seq_len: usize,
    next_pos_id: usize,
    logits: Array1<f64>,
}

impl<'a> DecodeSession<'a> {
    /// Runs the prompt once and keeps its keys/values.
    pub fn start(
        params: &'a ModelParams,
        cfg: &'a ModelConfig,
        prompt: &Prompt,
        posmap: &PositionMap,
        bank: &MemoryBank,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return arg_err("cannot decode from an empty prompt");
        }
        let pass = forward_with_bank(params, cfg, prompt, posmap, bank)?;
        let rope = cfg.rope();
        let k_cache = pass.blocks.iter().map(|b| b.attn.k.clone()).collect();
        let v_cache = pass.blocks.iter().map(|b| b.attn.v.clone()).collect();
        let memory_kv = params
            .mixins
            .iter()
            .map(|m| {
                let mut k = bank.states().dot(&m.attn.wk);
                rotate_rows(&mut k, bank.positions(), cfg.n_heads, rope.freqs(), 1.0);
                (k, bank.states().dot(&m.attn.wv))
            })
            .collect();
        let mask = build_cross_mask(&prompt.plan, bank.owners())?;
        let logits = pass.logits.row(prompt.len() - 1).to_owned();
        Ok(Self {
            params,
            cfg,
            rope,
            mask,
            k_cache,
            v_cache,
            memory_kv,
            seq_len: prompt.len(),
            next_pos_id: posmap.max_id().map_or(0, |m| m + 1),
            logits,
        })
    }

    /// Logits for the next token.
    pub fn logits(&self) -> &Array1<f64> {
        &self.logits
    }

    pub fn next_position_id(&self) -> usize {
        self.next_pos_id
    }

    pub fn len(&self) -> usize {
        self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.seq_len == 0
    }

    /// Appends `token` at the next position and returns the new logits.
    pub fn step(&mut self, token: u32) -> Result<&Array1<f64>> {
        let (params, cfg) = (self.params, self.cfg);
        if token as usize >= cfg.vocab_size {
            return arg_err(format!("token {token} outside vocabulary"));
        }
        let p = self.seq_len;
        let pid = [self.next_pos_id];
        let freqs = self.rope.freqs();
        let mut x = params.embed.row(token as usize).to_owned().insert_axis(Axis(0));
        for (b, block) in params.blocks.iter().enumerate() {
            let (a, _) = rms_norm(&x, &block.attn_norm);
            let mut q = a.dot(&block.attn.wq);
            let mut k = a.dot(&block.attn.wk);
            let v = a.dot(&block.attn.wv);
            rotate_rows(&mut q, &pid, cfg.n_heads, freqs, 1.0);
            rotate_rows(&mut k, &pid, cfg.n_heads, freqs, 1.0);
            self.k_cache[b].push_row(k.row(0)).expect("matching width");
            self.v_cache[b].push_row(v.row(0)).expect("matching width");
            let ctx = attend(&q, &self.k_cache[b], &self.v_cache[b], cfg.n_heads, |_| true);
            x = &x + &ctx.dot(&block.attn.wo);
            let (f_in, _) = rms_norm(&x, &block.ffw_norm);
            x = &x + &ffw_forward(&block.ffw, f_in).0;
            if let (true, Some(mi)) = (cfg.memory_enabled, cfg.mixin_after(b)) {
                let m = &params.mixins[mi];
                let (a, _) = rms_norm(&x, &m.attn_norm);
                let mut q = a.dot(&m.attn.wq);
                rotate_rows(&mut q, &pid, cfg.n_heads, freqs, 1.0);
                let (mk, mv) = &self.memory_kv[mi];
                let ctx = attend(&q, mk, mv, cfg.n_heads, |j| self.mask.is_visible(p, j));
                x = &x + &(&ctx.dot(&m.attn.wo) * m.gates.attn_multiplier());
                let (f_in, _) = rms_norm(&x, &m.ffw_norm);
                x = &x + &(&ffw_forward(&m.ffw, f_in).0 * m.gates.ffw_multiplier());
            }
        }
        let (z, _) = rms_norm(&x, &params.final_norm);
        self.logits = z.dot(&params.head).row(0).to_owned();
        self.seq_len += 1;
        self.next_pos_id += 1;
        Ok(&self.logits)
    }
}

/// Single-query attention over cached (rotated) keys.
fn attend(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    visible: impl Fn(usize) -> bool,
) -> Array2<f64> {
    let hd = q.ncols() / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Array2::zeros((1, q.ncols()));
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        masked_softmax_row(sc.as_slice_mut().expect("contiguous"), &visible);
        ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
    }
    ctx
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &Array1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &Array1<f64>, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// Generates `steps` tokens after the prompt. Generated token `t` sits at
/// position ID `max prompt ID + 1 + t`.
pub fn decode(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &Prompt,
    posmap: &PositionMap,
    bank: &MemoryBank,
    steps: usize,
    sampling: Sampling,
) -> Result<Vec<u32>> {
    if steps == 0 {
        return arg_err("steps must be >= 1");
    }
    let mut rng = match sampling {
        Sampling::Temperature { temperature, seed } => {
            if !(temperature > 0.0) {
                return arg_err("temperature must be positive");
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Sampling::Greedy => None,
    };
    let mut pick = |l: &Array1<f64>| match (sampling, rng.as_mut()) {
        (Sampling::Temperature { temperature, .. }, Some(r)) => sample(l, temperature, r),
        _ => argmax(l),
    };
    let mut session = DecodeSession::start(params, cfg, prompt, posmap, bank)?;
    let mut out = Vec::with_capacity(steps);
    let mut tok = pick(session.logits());
    out.push(tok);
    for _ in 1..steps {
        session.step(tok)?;
        tok = pick(session.logits());
        out.push(tok);
    }
    Ok(out)
}
