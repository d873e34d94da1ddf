use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};

use super::layers::{
    attention_backward, attention_forward, ffw_backward, ffw_forward, rms_norm, rms_norm_backward, AttnCache, AttnSpec,
    FfwCache,
};
use super::params::{Mixin, ModelParams};
use super::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::pos_encoding::{tile_anchors, PositionMap, RopeConfig};
use crate::seqplan::{ImageDetail, ImageId, Prompt, SequencePlan, Slot};

/// Projected image states read by the mixin layers, computed once per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Array2<f64>,
    states: Array2<f64>,
    pos: Vec<usize>,
    owner: Vec<ImageId>,
    insertion: BTreeMap<ImageId, usize>,
}

impl MemoryBank {
    /// Collects each image's tokens at `cfg.memory_detail` and projects them.
    ///
    /// Memory tokens reuse the position IDs their context twins received.
    /// Tiles that are absent from the context take the ID of their anchor
    /// thumbnail patch.
    pub fn build(params: &ModelParams, cfg: &ModelConfig, prompt: &Prompt, posmap: &PositionMap) -> Result<Self> {
        check_alignment(prompt, posmap)?;
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut pos = Vec::new();
        let mut owner = Vec::new();
        let mut insertion = BTreeMap::new();
        for (idx, img) in prompt.images.iter().enumerate() {
            let id = ImageId(idx);
            let &(start, end) = prompt
                .plan
                .image_spans()
                .get(&id)
                .ok_or_else(|| Error::Argument(format!("image {idx} has no span")))?;
            let span_ids = &posmap.ids()[start..=end];
            let layout = &img.layout;
            let thumb_ids = &span_ids[span_ids.len() - layout.thumb_tokens()..];
            if cfg.memory_detail == ImageDetail::Full {
                let tile_ids: Vec<usize> = if span_ids.len() == layout.tokens(ImageDetail::Full) {
                    span_ids[..layout.tile_tokens()].to_vec()
                } else {
                    tile_anchors(layout).into_iter().map(|a| thumb_ids[a]).collect()
                };
                for t in 0..layout.num_tiles() {
                    for i in 0..layout.tokens_per_tile() {
                        rows.push(img.tokens.tile_token(t, i));
                    }
                }
                pos.extend(tile_ids);
                owner.extend(std::iter::repeat_n(id, layout.tile_tokens()));
            }
            for i in 0..layout.thumb_tokens() {
                rows.push(img.tokens.thumb_token(i));
            }
            pos.extend_from_slice(thumb_ids);
            owner.extend(std::iter::repeat_n(id, layout.thumb_tokens()));
            insertion.insert(id, end);
        }
        let mut features = Array2::zeros((rows.len(), cfg.d_vit));
        for (mut dst, src) in features.rows_mut().into_iter().zip(&rows) {
            if src.len() != cfg.d_vit {
                return shape_err(format!("image token dim {} != d_vit {}", src.len(), cfg.d_vit));
            }
            dst.assign(&ndarray::ArrayView1::from(*src));
        }
        let states = features.dot(&params.projector.w) + &params.projector.b;
        Ok(Self {
            features,
            states,
            pos,
            owner,
            insertion,
        })
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    /// Direct access for perturbation probes.
    pub fn states_mut(&mut self) -> &mut Array2<f64> {
        &mut self.states
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    pub fn owners(&self) -> &[ImageId] {
        &self.owner
    }

    /// Sequence index from which each image's memory becomes visible.
    pub fn insertion(&self) -> &BTreeMap<ImageId, usize> {
        &self.insertion
    }

    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let words = self
            .states
            .iter()
            .chain(self.features.iter())
            .map(|v| v.to_bits())
            .chain(self.pos.iter().map(|&p| p as u64));
        for w in words {
            h ^= w;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Visibility of memory tokens from sequence positions.
///
/// Position `p` sees every memory token of image `I` once `p` reaches the
/// last index of `I`'s span, and nothing of images that end later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossMask {
    rows: usize,
    column_insertion: Vec<usize>,
}

impl CrossMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.column_insertion.len()
    }

    /// Also valid for `p >= rows()` (decoded tokens).
    pub fn is_visible(&self, p: usize, j: usize) -> bool {
        self.column_insertion[j] <= p
    }

    pub fn row(&self, p: usize) -> Vec<bool> {
        (0..self.cols()).map(|j| self.is_visible(p, j)).collect()
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        (0..self.rows).map(|p| self.row(p)).collect()
    }
}

/// `owners[j]` is the image memory column `j` belongs to.
pub fn build_cross_mask(plan: &SequencePlan, owners: &[ImageId]) -> Result<CrossMask> {
    let column_insertion = owners
        .iter()
        .map(|id| {
            plan.image_spans()
                .get(id)
                .map(|&(_, end)| end)
                .ok_or_else(|| Error::Argument(format!("memory column refers to unknown image {}", id.0)))
        })
        .collect::<Result<_>>()?;
    Ok(CrossMask {
        rows: plan.total_len(),
        column_insertion,
    })
}

pub(crate) struct BlockCache {
    x_in: Array2<f64>,
    inv1: Array1<f64>,
    pub(crate) attn: AttnCache,
    x_mid: Array2<f64>,
    inv2: Array1<f64>,
    ffw: FfwCache,
}

pub(crate) struct MixinCache {
    x_in: Array2<f64>,
    inv1: Array1<f64>,
    attn: AttnCache,
    attn_out: Array2<f64>,
    x_mid: Array2<f64>,
    inv2: Array1<f64>,
    ffw: FfwCache,
    ffw_out: Array2<f64>,
}

/// Everything the backward pass and the analysis tools need from a forward.
pub struct ForwardPass {
    pub logits: Array2<f64>,
    ctx_features: Array2<f64>,
    image_rows: Vec<bool>,
    pub(crate) blocks: Vec<BlockCache>,
    mixins: Vec<Option<MixinCache>>,
    final_in: Array2<f64>,
    final_inv: Array1<f64>,
    final_normed: Array2<f64>,
}

impl ForwardPass {
    /// Self-attention weights of block `layer`, one (T x T) matrix per head.
    pub fn attention_probs(&self, layer: usize) -> &[Array2<f64>] {
        &self.blocks[layer].attn.probs
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Cross-attention weights of mixin `index`, if it ran.
    pub fn mixin_probs(&self, index: usize) -> Option<&[Array2<f64>]> {
        self.mixins.get(index)?.as_ref().map(|m| m.attn.probs.as_slice())
    }
}

fn check_alignment(prompt: &Prompt, posmap: &PositionMap) -> Result<()> {
    if posmap.len() != prompt.len() || prompt.token_ids.len() != prompt.len() {
        return shape_err(format!(
            "position map has {} IDs, prompt has {} positions and {} token ids",
            posmap.len(),
            prompt.len(),
            prompt.token_ids.len()
        ));
    }
    Ok(())
}

/// Builds the memory bank and runs the full forward; returns logits.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, prompt: &Prompt, posmap: &PositionMap) -> Result<Array2<f64>> {
    let bank = MemoryBank::build(params, cfg, prompt, posmap)?;
    Ok(forward_with_bank(params, cfg, prompt, posmap, &bank)?.logits)
}

pub fn forward_with_bank(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &Prompt,
    posmap: &PositionMap,
    bank: &MemoryBank,
) -> Result<ForwardPass> {
    check_alignment(prompt, posmap)?;
    let t = prompt.len();
    let slots = prompt.plan.slots(&prompt.layouts())?;
    let mut ctx_features = Array2::zeros((t, cfg.d_vit));
    let mut image_rows = vec![false; t];
    let mut x = Array2::zeros((t, cfg.d_model));
    for (p, slot) in slots.iter().enumerate() {
        let feature = match *slot {
            Slot::Text => {
                let tok = prompt.token_ids[p] as usize;
                if tok >= cfg.vocab_size {
                    return Err(Error::Argument(format!(
                        "token {tok} at position {p} outside vocabulary"
                    )));
                }
                x.row_mut(p).assign(&params.embed.row(tok));
                continue;
            }
            Slot::Tile { image, tile, index } => prompt.images[image.0].tokens.tile_token(tile, index),
            Slot::Thumb { image, index } => prompt.images[image.0].tokens.thumb_token(index),
        };
        if feature.len() != cfg.d_vit {
            return shape_err(format!("image token dim {} != d_vit {}", feature.len(), cfg.d_vit));
        }
        ctx_features.row_mut(p).assign(&ndarray::ArrayView1::from(feature));
        image_rows[p] = true;
    }
    if image_rows.iter().any(|&b| b) {
        let projected = ctx_features.dot(&params.projector.w) + &params.projector.b;
        for (p, _) in image_rows.iter().enumerate().filter(|(_, &b)| b) {
            x.row_mut(p).assign(&projected.row(p));
        }
    }

    let rope = cfg.rope();
    let pos = posmap.ids();
    let self_spec = AttnSpec {
        heads: cfg.n_heads,
        freqs: rope.freqs(),
        pos_q: pos,
        pos_k: pos,
    };
    let cross_spec = AttnSpec {
        heads: cfg.n_heads,
        freqs: rope.freqs(),
        pos_q: pos,
        pos_k: bank.positions(),
    };
    let mask = build_cross_mask(&prompt.plan, bank.owners())?;
    let causal = |i: usize, j: usize| j <= i;
    let cross = |i: usize, j: usize| mask.is_visible(i, j);

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut mixins: Vec<Option<MixinCache>> = (0..cfg.n_mixins()).map(|_| None).collect();
    for (b, block) in params.blocks.iter().enumerate() {
        let (a, inv1) = rms_norm(&x, &block.attn_norm);
        let (o, attn) = attention_forward(&block.attn, &self_spec, a, None, &causal);
        let x_mid = &x + &o;
        let (f_in, inv2) = rms_norm(&x_mid, &block.ffw_norm);
        let (f, ffw) = ffw_forward(&block.ffw, f_in);
        let x_out = &x_mid + &f;
        blocks.push(BlockCache {
            x_in: std::mem::replace(&mut x, x_out),
            inv1,
            attn,
            x_mid,
            inv2,
            ffw,
        });
        if let (true, Some(mi)) = (cfg.memory_enabled, cfg.mixin_after(b)) {
            let m = &params.mixins[mi];
            let (a, inv1) = rms_norm(&x, &m.attn_norm);
            let (attn_out, attn) = attention_forward(&m.attn, &cross_spec, a, Some(bank.states.clone()), &cross);
            let x_mid = &x + &(&attn_out * m.gates.attn_multiplier());
            let (f_in, inv2) = rms_norm(&x_mid, &m.ffw_norm);
            let (ffw_out, ffw) = ffw_forward(&m.ffw, f_in);
            let x_out = &x_mid + &(&ffw_out * m.gates.ffw_multiplier());
            mixins[mi] = Some(MixinCache {
                x_in: std::mem::replace(&mut x, x_out),
                inv1,
                attn,
                attn_out,
                x_mid,
                inv2,
                ffw,
                ffw_out,
            });
        }
    }
    let (final_normed, final_inv) = rms_norm(&x, &params.final_norm);
    let logits = final_normed.dot(&params.head);
    Ok(ForwardPass {
        logits,
        ctx_features,
        image_rows,
        blocks,
        mixins,
        final_in: x,
        final_inv,
        final_normed,
    })
}

/// Parameter gradients plus the gradient w.r.t. the input embeddings.
pub struct Gradients {
    pub params: ModelParams,
    pub input: Array2<f64>,
}

pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &Prompt,
    posmap: &PositionMap,
    bank: &MemoryBank,
    pass: &ForwardPass,
    dlogits: &Array2<f64>,
) -> Result<Gradients> {
    if dlogits.dim() != pass.logits.dim() {
        return shape_err("dlogits shape differs from logits");
    }
    let mut g = params.zeros_like();
    let rope = cfg.rope();
    let pos = posmap.ids();
    let self_spec = AttnSpec {
        heads: cfg.n_heads,
        freqs: rope.freqs(),
        pos_q: pos,
        pos_k: pos,
    };
    let cross_spec = AttnSpec {
        heads: cfg.n_heads,
        freqs: rope.freqs(),
        pos_q: pos,
        pos_k: bank.positions(),
    };

    g.head += &pass.final_normed.t().dot(dlogits);
    let dz = dlogits.dot(&params.head.t());
    let mut dx = rms_norm_backward(
        &dz,
        &pass.final_in,
        &pass.final_inv,
        &params.final_norm,
        &mut g.final_norm,
    );
    let mut dmem = Array2::zeros(bank.states.raw_dim());

    for b in (0..params.blocks.len()).rev() {
        if let (true, Some(mi)) = (cfg.memory_enabled, cfg.mixin_after(b)) {
            let cache = pass.mixins[mi].as_ref().expect("mixin ran in forward");
            dx = mixin_backward(&params.mixins[mi], &mut g.mixins[mi], &cross_spec, cache, dx, &mut dmem);
        }
        let (p, gb, c) = (&params.blocks[b], &mut g.blocks[b], &pass.blocks[b]);
        let df = ffw_backward(&p.ffw, &c.ffw, &dx, &mut gb.ffw);
        let dx_mid = dx + rms_norm_backward(&df, &c.x_mid, &c.inv2, &p.ffw_norm, &mut gb.ffw_norm);
        let (da_q, da_kv) = attention_backward(&p.attn, &self_spec, &c.attn, &dx_mid, &mut gb.attn);
        let da = da_q + da_kv;
        dx = &dx_mid + &rms_norm_backward(&da, &c.x_in, &c.inv1, &p.attn_norm, &mut gb.attn_norm);
    }

    let mut dimg = dx.clone();
    for (p, &is_img) in pass.image_rows.iter().enumerate() {
        if is_img {
            continue;
        }
        let tok = prompt.token_ids[p] as usize;
        let mut row = g.embed.row_mut(tok);
        row += &dx.row(p);
        dimg.row_mut(p).fill(0.0);
    }
    g.projector.w += &pass.ctx_features.t().dot(&dimg);
    g.projector.b += &dimg.sum_axis(Axis(0));
    g.projector.w += &bank.features.t().dot(&dmem);
    g.projector.b += &dmem.sum_axis(Axis(0));
    Ok(Gradients { params: g, input: dx })
}

fn mixin_backward(
    p: &Mixin,
    g: &mut Mixin,
    spec: &AttnSpec<'_>,
    c: &MixinCache,
    dx_out: Array2<f64>,
    dmem: &mut Array2<f64>,
) -> Array2<f64> {
    let tf = p.gates.ffw_multiplier();
    g.gates.ffw_gate += (1.0 - tf * tf) * (&dx_out * &c.ffw_out).sum();
    let df = ffw_backward(&p.ffw, &c.ffw, &(&dx_out * tf), &mut g.ffw);
    let dx_mid = dx_out + rms_norm_backward(&df, &c.x_mid, &c.inv2, &p.ffw_norm, &mut g.ffw_norm);
    let ta = p.gates.attn_multiplier();
    g.gates.attn_gate += (1.0 - ta * ta) * (&dx_mid * &c.attn_out).sum();
    let (da, dm) = attention_backward(&p.attn, spec, &c.attn, &(&dx_mid * ta), &mut g.attn);
    *dmem += &dm;
    &dx_mid + &rms_norm_backward(&da, &c.x_in, &c.inv1, &p.attn_norm, &mut g.attn_norm)
}

/// One mixin layer on its own: gated cross-attention from `h_s` to `h_i`,
/// then the gated FFW. Returns the updated states and the per-head
/// cross-attention weights.
#[allow(clippy::too_many_arguments)]
pub fn mixin_forward(
    mixin: &Mixin,
    n_heads: usize,
    rope: &RopeConfig,
    h_s: &Array2<f64>,
    h_i: &Array2<f64>,
    pos_s: &[usize],
    pos_i: &[usize],
    mask: &CrossMask,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    if h_s.nrows() != pos_s.len() || h_i.nrows() != pos_i.len() {
        return shape_err("hidden states and position IDs disagree in length");
    }
    if mask.rows() != pos_s.len() || mask.cols() != pos_i.len() {
        return shape_err(format!(
            "mask is {}x{}, expected {}x{}",
            mask.rows(),
            mask.cols(),
            pos_s.len(),
            pos_i.len()
        ));
    }
    if h_s.ncols() != mixin.attn_norm.len() || h_i.ncols() != h_s.ncols() || rope.head_dim() * n_heads != h_s.ncols() {
        return shape_err("hidden size does not match the mixin weights");
    }
    let spec = AttnSpec {
        heads: n_heads,
        freqs: rope.freqs(),
        pos_q: pos_s,
        pos_k: pos_i,
    };
    let (a, _) = rms_norm(h_s, &mixin.attn_norm);
    let (o, cache) = attention_forward(&mixin.attn, &spec, a, Some(h_i.clone()), &|i, j| mask.is_visible(i, j));
    let x_mid = h_s + &(&o * mixin.gates.attn_multiplier());
    let (f_in, _) = rms_norm(&x_mid, &mixin.ffw_norm);
    let (f, _) = ffw_forward(&mixin.ffw, f_in);
    Ok((&x_mid + &(&f * mixin.gates.ffw_multiplier()), cache.probs))
}
