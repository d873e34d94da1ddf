//! Position-ID assignment for interleaved text/image sequences and the rotary
//! embedding applied to queries and keys.
//!
//! Three ID schemes are supported:
//!
//! - `Vanilla`: one ID per sequence position.
//! - `Dhr`: text and thumbnail tokens count up normally; each tile token reuses
//!   the ID of the thumbnail patch covering the same image region, so an image
//!   spans only `thumb_patch^2` IDs however many tiles it has.
//! - `DhrNc`: same anchoring, but without sharing. Each thumbnail patch is
//!   followed directly by the IDs of the tile tokens anchored to it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::seqplan::{layout_of, DhrLayout, ImageId, SegmentKind, SequencePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Vanilla,
    Dhr,
    DhrNc,
}

impl FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "dhr" => Ok(Self::Dhr),
            "dhr_nc" | "dhr-nc" => Ok(Self::DhrNc),
            other => arg_err(format!("unknown position mode `{other}` (vanilla, dhr, dhr_nc)")),
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Dhr => "dhr",
            Self::DhrNc => "dhr_nc",
        })
    }
}

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    theta_base: f64,
    freqs: Vec<f64>,
}

impl RopeConfig {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return arg_err(format!("rotary head dim must be even and positive, got {head_dim}"));
        }
        if !(theta_base.is_finite() && theta_base > 1.0) {
            return arg_err(format!("theta base must be > 1, got {theta_base}"));
        }
        let freqs = (0..head_dim / 2)
            .map(|i| theta_base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            theta_base,
            freqs,
        })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_THETA_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    /// `theta_i = base^(-2i/d)` for `i in 0..d/2`.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
}

/// Rotates pairs `(2i, 2i+1)` of `v` in place by `pos * freqs[i]`.
/// A negative `pos` applies the inverse rotation.
pub fn rotate_pairs(v: &mut [f64], pos: f64, freqs: &[f64]) {
    debug_assert_eq!(v.len(), 2 * freqs.len());
    for (pair, &theta) in v.chunks_exact_mut(2).zip(freqs) {
        let (s, c) = (pos * theta).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

pub fn apply_rotary(vec: &[f64], pos: i64, cfg: &RopeConfig) -> Result<Vec<f64>> {
    if vec.len() != cfg.head_dim {
        return shape_err(format!("rotary expects length {}, got {}", cfg.head_dim, vec.len()));
    }
    let mut out = vec.to_vec();
    rotate_pairs(&mut out, pos as f64, &cfg.freqs);
    Ok(out)
}

/// `dot(R_m q, R_n k)` computed with real rotations.
pub fn rope_inner_product(q: &[f64], k: &[f64], m: i64, n: i64, cfg: &RopeConfig) -> Result<f64> {
    let rq = apply_rotary(q, m, cfg)?;
    let rk = apply_rotary(k, n, cfg)?;
    Ok(rq.iter().zip(&rk).map(|(a, b)| a * b).sum())
}

/// Coordinate pairs of `v` read as complex numbers `v[2i] + i v[2i+1]`.
pub fn as_complex_pairs(v: &[f64]) -> Vec<Complex64> {
    v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

/// The same inner product through the complex form
/// `Re[sum_i q_i conj(k_i) exp(i (m-n) theta_i)]`.
pub fn rope_inner_product_complex(q: &[f64], k: &[f64], m: i64, n: i64, cfg: &RopeConfig) -> Result<f64> {
    if q.len() != cfg.head_dim || k.len() != cfg.head_dim {
        return shape_err("rope inner product operands must match the head dim");
    }
    let delta = (m - n) as f64;
    let sum: Complex64 = as_complex_pairs(q)
        .into_iter()
        .zip(as_complex_pairs(k))
        .zip(&cfg.freqs)
        .map(|((qi, ki), &theta)| qi * ki.conj() * Complex64::from_polar(1.0, delta * theta))
        .sum();
    Ok(sum.re)
}

/// Position ID for every token of a [`SequencePlan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionMap {
    ids: Vec<usize>,
    mode: PositionMode,
}

impl PositionMap {
    pub fn new(ids: Vec<usize>, mode: PositionMode) -> Self {
        Self { ids, mode }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mode(&self) -> PositionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_id(&self) -> Option<usize> {
        self.ids.iter().copied().max()
    }

    pub fn push(&mut self, id: usize) {
        self.ids.push(id);
    }
}

/// Thumbnail cell `(col, row)` that global tile-token coordinate `(gx, gy)`
/// falls into. The same scale is used on both axes.
pub fn anchor(layout: &DhrLayout, gx: usize, gy: usize) -> (usize, usize) {
    let (rows, cols) = layout.global_tokens();
    (gx * layout.thumb_patch / cols, gy * layout.thumb_patch / rows)
}

/// Row-major thumbnail index of the anchor of every tile token, in sequence
/// order (tiles row-major, tokens row-major inside a tile).
pub fn tile_anchors(layout: &DhrLayout) -> Vec<usize> {
    let tp = layout.tile_patch;
    let mut out = Vec::with_capacity(layout.tile_tokens());
    for tr in 0..layout.tile_rows {
        for tc in 0..layout.tile_cols {
            for lr in 0..tp {
                for lc in 0..tp {
                    let (ax, ay) = anchor(layout, tc * tp + lc, tr * tp + lr);
                    out.push(ay * layout.thumb_patch + ax);
                }
            }
        }
    }
    out
}

/// IDs for one image block starting at `base`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBlockIds {
    /// Tile-token IDs in sequence order; empty when tiles are not in context.
    pub tiles: Vec<usize>,
    pub thumbnail: Vec<usize>,
    /// First ID free after the block.
    pub next: usize,
}

pub fn image_block_ids(layout: &DhrLayout, with_tiles: bool, base: usize, mode: PositionMode) -> ImageBlockIds {
    let thumb_n = layout.thumb_tokens();
    if !with_tiles {
        return ImageBlockIds {
            tiles: Vec::new(),
            thumbnail: (base..base + thumb_n).collect(),
            next: base + thumb_n,
        };
    }
    let tile_n = layout.tile_tokens();
    match mode {
        PositionMode::Vanilla => ImageBlockIds {
            tiles: (base..base + tile_n).collect(),
            thumbnail: (base + tile_n..base + tile_n + thumb_n).collect(),
            next: base + tile_n + thumb_n,
        },
        PositionMode::Dhr => {
            let thumbnail: Vec<usize> = (base..base + thumb_n).collect();
            let tiles = tile_anchors(layout).into_iter().map(|a| thumbnail[a]).collect();
            ImageBlockIds {
                tiles,
                thumbnail,
                next: base + thumb_n,
            }
        }
        PositionMode::DhrNc => {
            let anchors = tile_anchors(layout);
            let mut counts = vec![0usize; thumb_n];
            for &a in &anchors {
                counts[a] += 1;
            }
            let mut thumbnail = Vec::with_capacity(thumb_n);
            let mut id = base;
            for &c in &counts {
                thumbnail.push(id);
                id += 1 + c;
            }
            let mut used = vec![0usize; thumb_n];
            let tiles = anchors
                .into_iter()
                .map(|a| {
                    used[a] += 1;
                    thumbnail[a] + used[a]
                })
                .collect();
            ImageBlockIds {
                tiles,
                thumbnail,
                next: id,
            }
        }
    }
}

pub fn assign_position_ids(
    plan: &SequencePlan,
    layouts: &BTreeMap<ImageId, DhrLayout>,
    mode: PositionMode,
) -> Result<PositionMap> {
    let segs = plan.segments();
    let mut ids = Vec::with_capacity(plan.total_len());
    let mut next = 0usize;
    let mut i = 0;
    while i < segs.len() {
        let seg = segs[i];
        match seg.kind {
            SegmentKind::Text => {
                ids.extend(next..next + seg.token_count);
                next += seg.token_count;
                i += 1;
            }
            SegmentKind::ImageTiles | SegmentKind::ImageThumbnail => {
                let id = seg
                    .image_id
                    .ok_or_else(|| Error::Argument("image segment without image id".into()))?;
                let layout = layout_of(layouts, id)?;
                let with_tiles = seg.kind == SegmentKind::ImageTiles;
                if with_tiles {
                    match segs.get(i + 1) {
                        Some(s) if s.kind == SegmentKind::ImageThumbnail && s.image_id == Some(id) => {}
                        _ => return arg_err(format!("tiles of image {} are not followed by its thumbnail", id.0)),
                    }
                }
                let block = image_block_ids(layout, with_tiles, next, mode);
                ids.extend_from_slice(&block.tiles);
                ids.extend_from_slice(&block.thumbnail);
                next = block.next;
                i += if with_tiles { 2 } else { 1 };
            }
        }
    }
    debug_assert_eq!(ids.len(), plan.total_len());
    Ok(PositionMap { ids, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqplan::{build_plan, ImageDetail, PlanItem};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn worked_plan() -> (SequencePlan, BTreeMap<ImageId, DhrLayout>) {
        let layout = DhrLayout::new(1, 2, 2, 1).unwrap();
        let plan = build_plan(
            &[PlanItem::Text(2), PlanItem::Image(layout), PlanItem::Text(1)],
            ImageDetail::Full,
        )
        .unwrap();
        (plan, BTreeMap::from([(ImageId(0), layout)]))
    }

    /// Anchors by brute force: scan every thumbnail cell's pixel window and
    /// report the one containing the global token.
    fn brute_anchor(layout: &DhrLayout, gx: usize, gy: usize) -> (usize, usize) {
        let (rows, cols) = layout.global_tokens();
        let t = layout.thumb_patch;
        for ay in 0..t {
            for ax in 0..t {
                // cell (ax, ay) covers [ax*cols/t, (ax+1)*cols/t) in exact arithmetic
                let in_x = gx * t >= ax * cols && gx * t < (ax + 1) * cols;
                let in_y = gy * t >= ay * rows && gy * t < (ay + 1) * rows;
                if in_x && in_y {
                    return (ax, ay);
                }
            }
        }
        unreachable!()
    }

    #[test]
    fn text_only_ids() {
        let plan = build_plan(&[PlanItem::Text(5)], ImageDetail::Full).unwrap();
        for mode in [PositionMode::Vanilla, PositionMode::Dhr, PositionMode::DhrNc] {
            let pm = assign_position_ids(&plan, &BTreeMap::new(), mode).unwrap();
            assert_eq!(pm.ids(), &[0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn worked_example_dhr() {
        let (plan, layouts) = worked_plan();
        let pm = assign_position_ids(&plan, &layouts, PositionMode::Dhr).unwrap();
        assert_eq!(pm.ids(), &[0, 1, 2, 2, 4, 4, 3, 3, 5, 5, 2, 3, 4, 5, 6]);
        let layout = layouts[&ImageId(0)];
        // same list from the brute-force anchor oracle
        let mut expected = vec![0, 1];
        for tc in 0..2 {
            for lr in 0..2 {
                for lc in 0..2 {
                    let (ax, ay) = brute_anchor(&layout, tc * 2 + lc, lr);
                    expected.push(2 + ay * 2 + ax);
                }
            }
        }
        expected.extend([2, 3, 4, 5, 6]);
        assert_eq!(pm.ids(), expected.as_slice());
    }

    #[test]
    fn worked_example_vanilla_vs_dhr_span() {
        let (plan, layouts) = worked_plan();
        let v = assign_position_ids(&plan, &layouts, PositionMode::Vanilla).unwrap();
        let d = assign_position_ids(&plan, &layouts, PositionMode::Dhr).unwrap();
        assert_eq!(v.ids(), (0..15).collect::<Vec<_>>().as_slice());
        assert_eq!(v.max_id(), Some(14));
        assert_eq!(d.max_id(), Some(6));
        let distinct = |ids: &[usize]| ids[2..14].iter().collect::<std::collections::BTreeSet<_>>().len();
        assert_eq!(distinct(v.ids()), 12);
        assert_eq!(distinct(d.ids()), 4);
    }

    #[test]
    fn worked_example_nc() {
        let (plan, layouts) = worked_plan();
        let pm = assign_position_ids(&plan, &layouts, PositionMode::DhrNc).unwrap();
        // thumb 0 anchors tile tokens 0,1 ; thumb 1 anchors 4,5 ; thumb 2 anchors 2,3 ; thumb 3 anchors 6,7
        // thumb IDs: 2, 5, 8, 11 ; anchored tiles follow each
        assert_eq!(pm.ids(), &[0, 1, 3, 4, 9, 10, 6, 7, 12, 13, 2, 5, 8, 11, 14]);
    }

    #[test]
    fn missing_layout_is_an_error() {
        let (plan, _) = worked_plan();
        assert!(matches!(
            assign_position_ids(&plan, &BTreeMap::new(), PositionMode::Dhr),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rotary_zero_position_is_identity() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let v = [0.3, -1.0, 2.0, 0.5, 1.5, -0.7, 0.1, 0.0];
        assert_eq!(apply_rotary(&v, 0, &cfg).unwrap(), v.to_vec());
        assert!(apply_rotary(&v[..7], 1, &cfg).is_err());
    }

    #[test]
    fn rotary_two_dim_closed_form() {
        let cfg = RopeConfig::with_default_base(2).unwrap();
        assert_eq!(cfg.freqs(), &[1.0]);
        for m in [-3i64, 1, 7, 1000] {
            let r = apply_rotary(&[1.0, 0.0], m, &cfg).unwrap();
            assert!((r[0] - (m as f64).cos()).abs() < 1e-15);
            assert!((r[1] - (m as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn freqs_strictly_decrease() {
        let cfg = RopeConfig::with_default_base(64).unwrap();
        assert!(cfg.freqs().windows(2).all(|w| w[1] < w[0]));
        assert!(RopeConfig::new(7, 10000.0).is_err());
    }

    #[test]
    fn inner_product_routes_agree() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = rope_inner_product(&q, &k, 10, 7, &cfg).unwrap();
        let b = rope_inner_product_complex(&q, &k, 10, 7, &cfg).unwrap();
        assert!((a - b).abs() < 1e-10);
        let dot: f64 = q.iter().zip(&k).map(|(x, y)| x * y).sum();
        assert!((rope_inner_product(&q, &k, 4, 4, &cfg).unwrap() - dot).abs() < 1e-12);
    }

    #[test]
    fn rope_properties_over_many_draws() {
        let cfg = RopeConfig::with_default_base(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = rng.gen_range(-500..500);
            let n = rng.gen_range(-500..500);
            let f = rope_inner_product(&q, &k, m, n, &cfg).unwrap();
            let g = rope_inner_product(&q, &k, m + 5, n + 5, &cfg).unwrap();
            assert!((f - g).abs() < 1e-10);
            let dot: f64 = q.iter().zip(&k).map(|(x, y)| x * y).sum();
            assert!((rope_inner_product(&q, &k, m, m, &cfg).unwrap() - dot).abs() < 1e-10);
        }
    }

    fn layout_strategy() -> impl Strategy<Value = DhrLayout> {
        (1usize..=3, 1usize..=4, 1usize..=4)
            .prop_filter("tile cap", |(r, c, _)| r * c <= 12)
            .prop_map(|(r, c, tp)| DhrLayout::new(r, c, tp, 1).unwrap())
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(v in prop::collection::vec(-10.0f64..10.0, 8), m in -10_000i64..10_000) {
            let cfg = RopeConfig::with_default_base(8).unwrap();
            let r = apply_rotary(&v, m, &cfg).unwrap();
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-12 * (1.0 + n0));
        }

        #[test]
        fn dhr_compresses_to_thumbnail(layout in layout_strategy(), lead in 1usize..4, tail in 1usize..4) {
            let plan = build_plan(&[PlanItem::Text(lead), PlanItem::Image(layout), PlanItem::Text(tail)], ImageDetail::Full).unwrap();
            let layouts = BTreeMap::from([(ImageId(0), layout)]);
            let (s, e) = plan.image_spans()[&ImageId(0)];
            let count = |mode| {
                let pm = assign_position_ids(&plan, &layouts, mode).unwrap();
                pm.ids()[s..=e].iter().collect::<std::collections::BTreeSet<_>>().len()
            };
            prop_assert_eq!(count(PositionMode::Dhr), layout.thumb_tokens());
            prop_assert_eq!(count(PositionMode::Vanilla), (layout.num_tiles() + 1) * layout.tokens_per_tile());
            prop_assert_eq!(count(PositionMode::DhrNc), (layout.num_tiles() + 1) * layout.tokens_per_tile());
        }

        #[test]
        fn anchors_monotone_and_surjective(layout in layout_strategy()) {
            let (rows, cols) = layout.global_tokens();
            let mut hit = vec![false; layout.thumb_tokens()];
            for gy in 0..rows {
                for gx in 0..cols {
                    let (ax, ay) = anchor(&layout, gx, gy);
                    prop_assert_eq!((ax, ay), brute_anchor(&layout, gx, gy));
                    if gx + 1 < cols { prop_assert!(anchor(&layout, gx + 1, gy).0 >= ax); }
                    if gy + 1 < rows { prop_assert!(anchor(&layout, gx, gy + 1).1 >= ay); }
                    hit[ay * layout.thumb_patch + ax] = true;
                }
            }
            prop_assert!(hit.into_iter().all(|h| h));
        }

        #[test]
        fn ids_after_image_exceed_image(layout in layout_strategy(), mode_idx in 0usize..3) {
            let mode = [PositionMode::Vanilla, PositionMode::Dhr, PositionMode::DhrNc][mode_idx];
            let plan = build_plan(&[PlanItem::Text(2), PlanItem::Image(layout), PlanItem::Text(3)], ImageDetail::Full).unwrap();
            let layouts = BTreeMap::from([(ImageId(0), layout)]);
            let pm = assign_position_ids(&plan, &layouts, mode).unwrap();
            let (s, e) = plan.image_spans()[&ImageId(0)];
            let img_max = *pm.ids()[s..=e].iter().max().unwrap();
            let text: Vec<usize> = pm.ids()[..s].iter().chain(&pm.ids()[e + 1..]).copied().collect();
            prop_assert!(text.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(pm.ids()[e + 1..].iter().all(|&id| id > img_max));
            if mode == PositionMode::Dhr {
                let thumb: std::collections::BTreeSet<_> = pm.ids()[e + 1 - layout.thumb_tokens()..=e].iter().collect();
                prop_assert!(pm.ids()[s..=e].iter().all(|id| thumb.contains(id)));
            }
            if mode == PositionMode::DhrNc {
                let mut block: Vec<usize> = pm.ids()[s..=e].to_vec();
                block.sort_unstable();
                prop_assert!(block.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }
    }
}
