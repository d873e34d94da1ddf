use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// `y = x w + b`, with `w` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffw {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Array1<f64>,
    pub attn: Attention,
    pub ffw_norm: Array1<f64>,
    pub ffw: Ffw,
}

/// Raw gate scalars; the residual branches are scaled by their `tanh`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateState {
    pub attn_gate: f64,
    pub ffw_gate: f64,
}

impl GateState {
    pub fn attn_multiplier(&self) -> f64 {
        self.attn_gate.tanh()
    }

    pub fn ffw_multiplier(&self) -> f64 {
        self.ffw_gate.tanh()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixin {
    pub attn_norm: Array1<f64>,
    pub attn: Attention,
    pub ffw_norm: Array1<f64>,
    pub ffw: Ffw,
    pub gates: GateState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Array2<f64>,
    /// Shared by the context and memory paths.
    pub projector: Linear,
    pub blocks: Vec<Block>,
    pub mixins: Vec<Mixin>,
    pub final_norm: Array1<f64>,
    pub head: Array2<f64>,
}

/// Coarse parameter groups, used for freezing and gradient-check reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Projector,
    Block,
    /// Mixin cross-attention, mixin FFW and their norms.
    Mixin,
    Gate,
    /// Final norm and output head.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        Self::Embedding,
        Self::Projector,
        Self::Block,
        Self::Mixin,
        Self::Gate,
        Self::Head,
    ];

    pub fn is_backbone(self) -> bool {
        matches!(self, Self::Embedding | Self::Block | Self::Head)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::Projector => "projector",
            Self::Block => "blocks",
            Self::Mixin => "mixin",
            Self::Gate => "gates",
            Self::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

impl TensorMeta {
    fn new(name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            group,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Matrices get weight decay; gains, biases and gates do not.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored contiguously")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored contiguously")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    // Values are drawn in f32 so a fresh model survives a 32-bit checkpoint
    // round trip unchanged.
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0f32, std as f32).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng) as f64)
    }

    fn attention(&mut self, d: usize, out_std: f64) -> Attention {
        let std = (1.0 / d as f64).sqrt();
        Attention {
            wq: self.normal(d, d, std),
            wk: self.normal(d, d, std),
            wv: self.normal(d, d, std),
            wo: self.normal(d, d, out_std),
        }
    }

    fn ffw(&mut self, d: usize, hidden: usize, out_std: f64) -> Ffw {
        Ffw {
            w1: self.normal(d, hidden, (1.0 / d as f64).sqrt()),
            b1: Array1::zeros(hidden),
            w2: self.normal(hidden, d, out_std),
            b2: Array1::zeros(d),
        }
    }
}

impl ModelParams {
    /// Deterministic per seed. Gates start at zero so every mixin layer is an
    /// identity map at initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = cfg.d_model;
        let hidden = cfg.ffw_hidden();
        let out_std = (1.0 / (d as f64 * 2.0 * cfg.n_layers as f64)).sqrt();
        let embed = init.normal(cfg.vocab_size, d, 1.0);
        let projector = Linear {
            w: init.normal(cfg.d_vit, d, (1.0 / cfg.d_vit as f64).sqrt()),
            b: Array1::zeros(d),
        };
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                attn_norm: Array1::ones(d),
                attn: init.attention(d, out_std),
                ffw_norm: Array1::ones(d),
                ffw: init.ffw(d, hidden, out_std),
            })
            .collect();
        let mixins = (0..cfg.n_mixins())
            .map(|_| Mixin {
                attn_norm: Array1::ones(d),
                attn: init.attention(d, out_std),
                ffw_norm: Array1::ones(d),
                ffw: init.ffw(d, hidden, out_std),
                gates: GateState::default(),
            })
            .collect();
        let head = init.normal(d, cfg.vocab_size, (1.0 / d as f64).sqrt());
        Self {
            embed,
            projector,
            blocks,
            mixins,
            final_norm: Array1::ones(d),
            head,
        }
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor in manifest order.
    pub fn tensors(&self) -> Vec<(TensorMeta, &[f64])> {
        use ParamGroup::*;
        let mut out: Vec<(TensorMeta, &[f64])> = Vec::new();
        let s2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        out.push((
            TensorMeta::new("embed", Embedding, &s2(&self.embed)),
            slice2(&self.embed),
        ));
        out.push((
            TensorMeta::new("projector.w", Projector, &s2(&self.projector.w)),
            slice2(&self.projector.w),
        ));
        out.push((
            TensorMeta::new("projector.b", Projector, &[self.projector.b.len()]),
            slice1(&self.projector.b),
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((
                TensorMeta::new(format!("{p}.attn_norm"), Block, &[b.attn_norm.len()]),
                slice1(&b.attn_norm),
            ));
            push_attention(&mut out, &p, Block, &b.attn);
            out.push((
                TensorMeta::new(format!("{p}.ffw_norm"), Block, &[b.ffw_norm.len()]),
                slice1(&b.ffw_norm),
            ));
            push_ffw(&mut out, &p, Block, &b.ffw);
        }
        for (i, m) in self.mixins.iter().enumerate() {
            let p = format!("mixins.{i}");
            out.push((
                TensorMeta::new(format!("{p}.attn_norm"), Mixin, &[m.attn_norm.len()]),
                slice1(&m.attn_norm),
            ));
            push_attention(&mut out, &p, Mixin, &m.attn);
            out.push((
                TensorMeta::new(format!("{p}.ffw_norm"), Mixin, &[m.ffw_norm.len()]),
                slice1(&m.ffw_norm),
            ));
            push_ffw(&mut out, &p, Mixin, &m.ffw);
            out.push((
                TensorMeta::new(format!("{p}.attn_gate"), Gate, &[]),
                std::slice::from_ref(&m.gates.attn_gate),
            ));
            out.push((
                TensorMeta::new(format!("{p}.ffw_gate"), Gate, &[]),
                std::slice::from_ref(&m.gates.ffw_gate),
            ));
        }
        out.push((
            TensorMeta::new("final_norm", Head, &[self.final_norm.len()]),
            slice1(&self.final_norm),
        ));
        out.push((TensorMeta::new("head", Head, &s2(&self.head)), slice2(&self.head)));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorMeta, &mut [f64])> {
        use ParamGroup::*;
        let mut out: Vec<(TensorMeta, &mut [f64])> = Vec::new();
        let s2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        let shape = s2(&self.embed);
        out.push((TensorMeta::new("embed", Embedding, &shape), slice2_mut(&mut self.embed)));
        let shape = s2(&self.projector.w);
        out.push((
            TensorMeta::new("projector.w", Projector, &shape),
            slice2_mut(&mut self.projector.w),
        ));
        let n = self.projector.b.len();
        out.push((
            TensorMeta::new("projector.b", Projector, &[n]),
            slice1_mut(&mut self.projector.b),
        ));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            let d = b.attn_norm.len();
            out.push((
                TensorMeta::new(format!("{p}.attn_norm"), Block, &[d]),
                slice1_mut(&mut b.attn_norm),
            ));
            push_attention_mut(&mut out, &p, Block, &mut b.attn);
            out.push((
                TensorMeta::new(format!("{p}.ffw_norm"), Block, &[d]),
                slice1_mut(&mut b.ffw_norm),
            ));
            push_ffw_mut(&mut out, &p, Block, &mut b.ffw);
        }
        for (i, m) in self.mixins.iter_mut().enumerate() {
            let p = format!("mixins.{i}");
            let d = m.attn_norm.len();
            out.push((
                TensorMeta::new(format!("{p}.attn_norm"), Mixin, &[d]),
                slice1_mut(&mut m.attn_norm),
            ));
            push_attention_mut(&mut out, &p, Mixin, &mut m.attn);
            out.push((
                TensorMeta::new(format!("{p}.ffw_norm"), Mixin, &[d]),
                slice1_mut(&mut m.ffw_norm),
            ));
            push_ffw_mut(&mut out, &p, Mixin, &mut m.ffw);
            out.push((
                TensorMeta::new(format!("{p}.attn_gate"), Gate, &[]),
                std::slice::from_mut(&mut m.gates.attn_gate),
            ));
            out.push((
                TensorMeta::new(format!("{p}.ffw_gate"), Gate, &[]),
                std::slice::from_mut(&mut m.gates.ffw_gate),
            ));
        }
        let d = self.final_norm.len();
        out.push((
            TensorMeta::new("final_norm", Head, &[d]),
            slice1_mut(&mut self.final_norm),
        ));
        let shape = s2(&self.head);
        out.push((TensorMeta::new("head", Head, &shape), slice2_mut(&mut self.head)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(m, _)| m.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every tensor whose group passes `filter`.
    pub fn checksum(&self, filter: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (meta, data) in self.tensors() {
            if !filter(meta.group) {
                continue;
            }
            for v in data {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn gates(&self) -> Vec<GateState> {
        self.mixins.iter().map(|m| m.gates).collect()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

fn push_attention<'a>(out: &mut Vec<(TensorMeta, &'a [f64])>, p: &str, g: ParamGroup, a: &'a Attention) {
    for (n, w) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
        out.push((
            TensorMeta::new(format!("{p}.attn.{n}"), g, &[w.nrows(), w.ncols()]),
            slice2(w),
        ));
    }
}

fn push_ffw<'a>(out: &mut Vec<(TensorMeta, &'a [f64])>, p: &str, g: ParamGroup, f: &'a Ffw) {
    out.push((
        TensorMeta::new(format!("{p}.ffw.w1"), g, &[f.w1.nrows(), f.w1.ncols()]),
        slice2(&f.w1),
    ));
    out.push((TensorMeta::new(format!("{p}.ffw.b1"), g, &[f.b1.len()]), slice1(&f.b1)));
    out.push((
        TensorMeta::new(format!("{p}.ffw.w2"), g, &[f.w2.nrows(), f.w2.ncols()]),
        slice2(&f.w2),
    ));
    out.push((TensorMeta::new(format!("{p}.ffw.b2"), g, &[f.b2.len()]), slice1(&f.b2)));
}

fn push_attention_mut<'a>(out: &mut Vec<(TensorMeta, &'a mut [f64])>, p: &str, g: ParamGroup, a: &'a mut Attention) {
    for (n, w) in [
        ("wq", &mut a.wq),
        ("wk", &mut a.wk),
        ("wv", &mut a.wv),
        ("wo", &mut a.wo),
    ] {
        let shape = [w.nrows(), w.ncols()];
        out.push((TensorMeta::new(format!("{p}.attn.{n}"), g, &shape), slice2_mut(w)));
    }
}

fn push_ffw_mut<'a>(out: &mut Vec<(TensorMeta, &'a mut [f64])>, p: &str, g: ParamGroup, f: &'a mut Ffw) {
    let (s1, h, s2, d) = (
        [f.w1.nrows(), f.w1.ncols()],
        f.b1.len(),
        [f.w2.nrows(), f.w2.ncols()],
        f.b2.len(),
    );
    out.push((TensorMeta::new(format!("{p}.ffw.w1"), g, &s1), slice2_mut(&mut f.w1)));
    out.push((TensorMeta::new(format!("{p}.ffw.b1"), g, &[h]), slice1_mut(&mut f.b1)));
    out.push((TensorMeta::new(format!("{p}.ffw.w2"), g, &s2), slice2_mut(&mut f.w2)));
    out.push((TensorMeta::new(format!("{p}.ffw.b2"), g, &[d]), slice1_mut(&mut f.b2)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 1);
        let b = ModelParams::init(&cfg, 1);
        assert_eq!(a.checksum(|_| true), b.checksum(|_| true));
        assert_eq!(a, b);
        let c = ModelParams::init(&cfg, 2);
        assert_ne!(a.checksum(|_| true), c.checksum(|_| true));
    }

    #[test]
    fn gates_start_closed() {
        let p = ModelParams::init(&ModelConfig::default(), 0);
        assert_eq!(p.mixins.len(), 2);
        for g in p.gates() {
            assert_eq!((g.attn_gate, g.ffw_gate), (0.0, 0.0));
            assert_eq!((g.attn_multiplier(), g.ffw_multiplier()), (0.0, 0.0));
        }
    }

    #[test]
    fn tensor_views_agree() {
        let mut p = ModelParams::init(&ModelConfig::default(), 0);
        let metas: Vec<TensorMeta> = p.tensors().into_iter().map(|(m, _)| m).collect();
        let metas_mut: Vec<TensorMeta> = p.tensors_mut().into_iter().map(|(m, _)| m).collect();
        assert_eq!(metas, metas_mut);
        for (m, d) in p.tensors() {
            assert_eq!(m.numel().max(1), d.len(), "{}", m.name);
        }
        let z = p.zeros_like();
        assert!(z.tensors().iter().all(|(_, d)| d.iter().all(|&v| v == 0.0)));
    }
}
