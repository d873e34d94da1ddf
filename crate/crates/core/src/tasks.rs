//! Synthetic tasks.
//!
//! * `copy`: echo a text span after a separator.
//! * `visual_needle`: a row of images, one of which shows a payload symbol;
//!   the query asks for that symbol.
//! * `grid_probe`: one tiled image whose thumbnail cells each carry a
//!   payload symbol; the query names a cell by (row, col).
//!
//! All tasks share one 64-symbol vocabulary (see [`vocab`]) and one frozen
//! patch encoder, so samples are reproducible from the spec alone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::pos_encoding::{assign_position_ids, PositionMap, PositionMode};
use crate::seqplan::{tile_image, DhrLayout, ImageDetail, PatchEncoder, Prompt, PromptImage, PromptItem};
use crate::training::{DataStream, Example};

pub mod vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const QUERY: u32 = 3;
    pub const ROW0: u32 = 4;
    pub const COL0: u32 = 12;
    /// Max rows/cols addressable by a grid query.
    pub const MAX_GRID: usize = 8;
    pub const FILLER: std::ops::Range<u32> = 20..32;
    pub const PAYLOAD: std::ops::Range<u32> = 32..64;
    pub const SIZE: usize = 64;
}

const ENCODER_SEED: u64 = 0x005e_ed0f_1a6e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    VisualNeedle,
    GridProbe,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "visual_needle" | "visual-needle" => Ok(Self::VisualNeedle),
            "grid_probe" | "grid-probe" => Ok(Self::GridProbe),
            other => arg_err(format!("unknown task `{other}` (copy, visual_needle, grid_probe)")),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::VisualNeedle => "visual_needle",
            Self::GridProbe => "grid_probe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// copy: span length. visual_needle: number of images.
    /// grid_probe: filler tokens between the image and the query.
    pub length: usize,
    /// Needle placement in `[0, 1]` (visual_needle only).
    pub depth: f64,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tile_patch: usize,
    pub shuffle_factor: usize,
    /// Filler tokens after each image (visual_needle).
    pub gap: usize,
    /// visual_needle: patches of the needle image that show the payload.
    /// grid_probe: patches per thumbnail cell that show the cell's payload.
    /// The rest show filler; 0 means every patch.
    pub needle_patches: usize,
    /// Draw each image's tile grid uniformly from `1..=tile_rows` x
    /// `1..=tile_cols` instead of using it as is.
    pub vary_tiles: bool,
    /// Must equal the model's `d_vit`.
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            length: 4,
            depth: 0.5,
            tile_rows: 1,
            tile_cols: 1,
            tile_patch: 2,
            shuffle_factor: 1,
            gap: 1,
            needle_patches: 0,
            vary_tiles: false,
            feature_dim: 32,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn layout(&self) -> Result<DhrLayout> {
        DhrLayout::new(self.tile_rows, self.tile_cols, self.tile_patch, self.shuffle_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.depth) {
            return arg_err(format!("depth {} outside [0, 1]", self.depth));
        }
        let min = match self.kind {
            TaskKind::Copy | TaskKind::VisualNeedle => 1,
            TaskKind::GridProbe => 0,
        };
        if self.length < min {
            return arg_err(format!("{} needs length >= {min}", self.kind));
        }
        if self.kind == TaskKind::Copy {
            return Ok(());
        }
        let layout = self.layout()?;
        let s2 = self.shuffle_factor * self.shuffle_factor;
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(s2) {
            return arg_err(format!(
                "feature_dim {} must be a positive multiple of shuffle_factor^2 = {s2}",
                self.feature_dim
            ));
        }
        let (pr, pc) = layout.global_patches();
        if self.needle_patches > pr * pc {
            return arg_err(format!(
                "needle_patches {} exceeds the {} patches of an image",
                self.needle_patches,
                pr * pc
            ));
        }
        if self.kind == TaskKind::GridProbe && layout.thumb_patch > vocab::MAX_GRID {
            return arg_err(format!("grid probe supports at most {} rows/cols", vocab::MAX_GRID));
        }
        if !(self.noise >= 0.0) {
            return arg_err("noise must be >= 0");
        }
        Ok(())
    }

    /// Same spec with a different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// A generated sample: the question prompt, its position IDs and the answer.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub query: Prompt,
    pub posmap: PositionMap,
    pub answer: Vec<u32>,
    /// visual_needle: index of the needle image.
    pub needle_image: Option<usize>,
    /// grid_probe: queried thumbnail cell and the payload per thumbnail cell.
    pub grid_cell: Option<(usize, usize)>,
    pub cell_payload: BTreeMap<(usize, usize), u32>,
    /// Per-image patch payload as rendered.
    pub image_payloads: Vec<BTreeMap<(usize, usize), u32>>,
}

impl TaskSample {
    /// Teacher-forced training sequence: query plus all answer tokens except
    /// the last, with the loss on the answer predictions only.
    pub fn example(&self) -> Example {
        let mut prompt = self.query.clone();
        let mut posmap = self.posmap.clone();
        let first = posmap.max_id().map_or(0, |m| m + 1);
        for (i, &tok) in self.answer[..self.answer.len() - 1].iter().enumerate() {
            prompt.push_text(tok);
            posmap.push(first + i);
        }
        let len = prompt.len();
        let q = self.query.len();
        let mut targets = vec![vocab::PAD; len];
        let mut loss_mask = vec![false; len];
        for (i, &tok) in self.answer.iter().enumerate() {
            targets[q - 1 + i] = tok;
            loss_mask[q - 1 + i] = true;
        }
        Example {
            prompt,
            posmap,
            targets,
            loss_mask,
        }
    }
}

fn encoder(spec: &TaskSpec) -> PatchEncoder {
    let s2 = spec.shuffle_factor * spec.shuffle_factor;
    PatchEncoder::new(vocab::SIZE, spec.feature_dim / s2, spec.noise, ENCODER_SEED)
}

fn payload_symbol(rng: &mut ChaCha8Rng) -> u32 {
    rng.gen_range(vocab::PAYLOAD)
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(vocab::FILLER)).collect()
}

/// Needle index for `n` images at `depth`.
pub fn needle_index(n: usize, depth: f64) -> usize {
    ((depth * (n - 1) as f64).round() as usize).min(n - 1)
}

fn draw_layout(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<DhrLayout> {
    if !spec.vary_tiles {
        return spec.layout();
    }
    let rows = rng.gen_range(1..=spec.tile_rows);
    let cols = rng.gen_range(1..=spec.tile_cols);
    DhrLayout::new(rows, cols, spec.tile_patch, spec.shuffle_factor)
}

/// Payload symbol per (row, col) patch of the global grid.
type PayloadMap = BTreeMap<(usize, usize), u32>;

fn render(
    enc: &PatchEncoder,
    layout: DhrLayout,
    symbols: &[Vec<u32>],
    rng: &mut ChaCha8Rng,
) -> Result<(PromptImage, PayloadMap)> {
    let img = enc.render(symbols, rng.gen())?;
    let tokens = tile_image(&img, &layout)?;
    Ok((PromptImage { tokens, layout }, img.payload))
}

/// Generates one sample. Deterministic in `spec`.
pub fn gen_task(spec: &TaskSpec, mode: PositionMode, context_detail: ImageDetail) -> Result<TaskSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::new();
    let mut needle_image = None;
    let mut grid_cell = None;
    let mut cell_payload = BTreeMap::new();
    let mut image_payloads = Vec::new();
    let answer = match spec.kind {
        TaskKind::Copy => {
            let span: Vec<u32> = (0..spec.length).map(|_| payload_symbol(&mut rng)).collect();
            let mut text = vec![vocab::BOS];
            text.extend_from_slice(&span);
            text.push(vocab::SEP);
            items.push(PromptItem::Text(text));
            span
        }
        TaskKind::VisualNeedle => {
            let enc = encoder(spec);
            let needle = needle_index(spec.length, spec.depth);
            let payload = payload_symbol(&mut rng);
            for i in 0..spec.length {
                let layout = draw_layout(spec, &mut rng)?;
                let (pr, pc) = layout.global_patches();
                let mut symbols: Vec<Vec<u32>> = (0..pr)
                    .map(|_| (0..pc).map(|_| rng.gen_range(vocab::FILLER)).collect())
                    .collect();
                if i == needle {
                    let marked: Vec<usize> = match spec.needle_patches {
                        0 => (0..pr * pc).collect(),
                        n => rand::seq::index::sample(&mut rng, pr * pc, n.min(pr * pc)).into_vec(),
                    };
                    for &m in &marked {
                        symbols[m / pc][m % pc] = payload;
                    }
                }
                let (img, map) = render(&enc, layout, &symbols, &mut rng)?;
                items.push(PromptItem::Image(img));
                image_payloads.push(map);
                if spec.gap > 0 {
                    items.push(PromptItem::Text(filler(&mut rng, spec.gap)));
                }
            }
            items.push(PromptItem::Text(vec![vocab::QUERY]));
            needle_image = Some(needle);
            vec![payload]
        }
        TaskKind::GridProbe => {
            let enc = encoder(spec);
            let layout = draw_layout(spec, &mut rng)?;
            let (pr, pc) = layout.global_patches();
            let side = layout.thumb_patch;
            // Each thumbnail cell covers a block of (pr/side) x (pc/side) patches.
            let (br, bc) = (pr / side, pc / side);
            for r in 0..side {
                for c in 0..side {
                    cell_payload.insert((r, c), payload_symbol(&mut rng));
                }
            }
            let mut symbols: Vec<Vec<u32>> = (0..pr)
                .map(|r| (0..pc).map(|c| cell_payload[&(r / br, c / bc)]).collect())
                .collect();
            if spec.needle_patches > 0 {
                let keep = spec.needle_patches.min(br * bc);
                for &(r, c) in cell_payload.keys() {
                    let marked = rand::seq::index::sample(&mut rng, br * bc, keep).into_vec();
                    for k in (0..br * bc).filter(|k| !marked.contains(k)) {
                        symbols[r * br + k / bc][c * bc + k % bc] = rng.gen_range(vocab::FILLER);
                    }
                }
            }
            let (img, map) = render(&enc, layout, &symbols, &mut rng)?;
            items.push(PromptItem::Image(img));
            image_payloads.push(map);
            if spec.length > 0 {
                items.push(PromptItem::Text(filler(&mut rng, spec.length)));
            }
            let cell = (rng.gen_range(0..side), rng.gen_range(0..side));
            items.push(PromptItem::Text(vec![
                vocab::QUERY,
                vocab::ROW0 + cell.0 as u32,
                vocab::COL0 + cell.1 as u32,
            ]));
            grid_cell = Some(cell);
            vec![cell_payload[&cell]]
        }
    };
    let query = Prompt::build(&items, context_detail)?;
    let posmap = assign_position_ids(&query.plan, &query.layouts(), mode)?;
    Ok(TaskSample {
        query,
        posmap,
        answer,
        needle_image,
        grid_cell,
        cell_payload,
        image_payloads,
    })
}

/// Endless stream of training examples drawn around a template spec. Each
/// sample gets a fresh seed from the trainer's RNG; with `random_depth` the
/// needle depth is drawn uniformly.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub template: TaskSpec,
    pub mode: PositionMode,
    pub context_detail: ImageDetail,
    pub random_depth: bool,
}

impl TaskStream {
    pub fn new(template: TaskSpec, mode: PositionMode, context_detail: ImageDetail) -> Self {
        Self {
            template,
            mode,
            context_detail,
            random_depth: true,
        }
    }
}

impl DataStream for TaskStream {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Example>> {
        (0..batch_size)
            .map(|_| {
                let mut spec = self.template.reseeded(rng.gen());
                if self.random_depth {
                    spec.depth = rng.gen_range(0.0..=1.0);
                }
                Ok(gen_task(&spec, self.mode, self.context_detail)?.example())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqplan::SegmentKind;
    use proptest::prelude::*;

    fn needle_spec(n: usize, depth: f64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::VisualNeedle,
            length: n,
            depth,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn copy_echoes_span() {
        let spec = TaskSpec {
            length: 3,
            seed: 11,
            ..TaskSpec::default()
        };
        let s = gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).unwrap();
        let ids = &s.query.token_ids;
        assert_eq!(ids[0], vocab::BOS);
        assert_eq!(*ids.last().unwrap(), vocab::SEP);
        assert_eq!(&ids[1..4], s.answer.as_slice());
        let ex = s.example();
        assert_eq!(ex.prompt.len(), 5 + 2);
        let labelled: Vec<u32> = (0..ex.targets.len())
            .filter(|&p| ex.loss_mask[p])
            .map(|p| ex.targets[p])
            .collect();
        assert_eq!(labelled, s.answer);
        // teacher forcing feeds answer[..n-1] after the separator
        assert_eq!(&ex.prompt.token_ids[5..], &s.answer[..2]);
        assert_eq!(ex.posmap.ids(), &[0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn needle_depth_zero_is_first_segment() {
        let s = gen_task(&needle_spec(1, 0.0), PositionMode::Dhr, ImageDetail::Full).unwrap();
        assert_eq!(s.query.plan.segments()[0].kind, SegmentKind::ImageTiles);
        assert_eq!(s.needle_image, Some(0));
        let s = gen_task(&needle_spec(5, 0.0), PositionMode::Dhr, ImageDetail::Full).unwrap();
        assert_eq!(s.needle_image, Some(0));
        assert!(s.image_payloads[0].values().all(|&v| v == s.answer[0]));
    }

    #[test]
    fn needle_placement() {
        assert_eq!(needle_index(5, 0.5), 2);
        assert_eq!(needle_index(5, 1.0), 4);
        assert_eq!(needle_index(4, 0.5), 2);
        let s = gen_task(&needle_spec(5, 0.75), PositionMode::Vanilla, ImageDetail::Thumbnail).unwrap();
        let n = s.needle_image.unwrap();
        assert_eq!(n, 3);
        for (i, p) in s.image_payloads.iter().enumerate() {
            let is_needle = p.values().all(|&v| v == s.answer[0]);
            assert_eq!(is_needle, i == n);
            if i != n {
                assert!(p.values().all(|v| vocab::FILLER.contains(v)));
            }
        }
        assert_eq!(*s.query.token_ids.last().unwrap(), vocab::QUERY);
    }

    #[test]
    fn partial_needle_marks_exact_patch_count() {
        let spec = TaskSpec {
            needle_patches: 3,
            tile_rows: 2,
            tile_cols: 2,
            ..needle_spec(3, 1.0)
        };
        let s = gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).unwrap();
        let needle = &s.image_payloads[s.needle_image.unwrap()];
        assert_eq!(needle.values().filter(|&&v| v == s.answer[0]).count(), 3);
        assert!(gen_task(
            &TaskSpec {
                needle_patches: 17,
                ..spec
            },
            PositionMode::Dhr,
            ImageDetail::Full
        )
        .is_err());
    }

    #[test]
    fn varied_tiles_stay_in_bounds() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..40 {
            let spec = TaskSpec {
                kind: TaskKind::GridProbe,
                tile_rows: 2,
                tile_cols: 3,
                vary_tiles: true,
                needle_patches: 1,
                seed,
                ..TaskSpec::default()
            };
            let s = gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).unwrap();
            let l = s.query.images[0].layout;
            assert!((1..=2).contains(&l.tile_rows) && (1..=3).contains(&l.tile_cols));
            seen.insert((l.tile_rows, l.tile_cols));
            // every thumbnail cell region shows its payload at least once
            let (pr, pc) = l.global_patches();
            let (br, bc) = (pr / 2, pc / 2);
            for (&(r, c), &sym) in &s.cell_payload {
                let hits = (0..br * bc)
                    .filter(|k| s.image_payloads[0][&(r * br + k / bc, c * bc + k % bc)] == sym)
                    .count();
                assert!(hits >= 1);
            }
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn grid_probe_answer_matches_payload_map() {
        for seed in 0..20 {
            let spec = TaskSpec {
                kind: TaskKind::GridProbe,
                tile_rows: 2,
                tile_cols: 2,
                tile_patch: 2,
                shuffle_factor: 2,
                length: 3,
                seed,
                ..TaskSpec::default()
            };
            let s = gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).unwrap();
            let (r, c) = s.grid_cell.unwrap();
            let tail = &s.query.token_ids[s.query.len() - 3..];
            assert_eq!(tail, &[vocab::QUERY, vocab::ROW0 + r as u32, vocab::COL0 + c as u32]);
            // global patch grid is 8x8; each thumbnail cell covers 4x4 patches
            let map = &s.image_payloads[0];
            assert_eq!(map.len(), 64);
            for dr in 0..4 {
                for dc in 0..4 {
                    assert_eq!(map[&(r * 4 + dr, c * 4 + dc)], s.answer[0]);
                }
            }
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(gen_task(&needle_spec(0, 0.5), PositionMode::Dhr, ImageDetail::Full).is_err());
        assert!(gen_task(&needle_spec(3, 1.5), PositionMode::Dhr, ImageDetail::Full).is_err());
        let spec = TaskSpec {
            kind: TaskKind::GridProbe,
            shuffle_factor: 3,
            feature_dim: 32,
            ..TaskSpec::default()
        };
        assert!(gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).is_err());
        let spec = TaskSpec {
            length: 0,
            ..TaskSpec::default()
        };
        assert!(gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).is_err());
        assert!("needle".parse::<TaskKind>().is_err());
    }

    #[test]
    fn stream_is_seed_deterministic() {
        let mut stream = TaskStream::new(needle_spec(3, 0.5), PositionMode::Dhr, ImageDetail::Full);
        let draw = |stream: &mut TaskStream| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            stream.next_batch(&mut rng, 3).unwrap()
        };
        let (a, b) = (draw(&mut stream), draw(&mut stream));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prompt.token_ids, y.prompt.token_ids);
            assert_eq!(x.targets, y.targets);
            assert_eq!(x.posmap, y.posmap);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generation_is_reproducible(seed in any::<u64>(), kind in 0usize..3, depth in 0.0f64..=1.0) {
            let kind = [TaskKind::Copy, TaskKind::VisualNeedle, TaskKind::GridProbe][kind];
            let spec = TaskSpec { kind, length: 3, depth, tile_rows: 1, tile_cols: 2, seed, ..TaskSpec::default() };
            let a = gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).unwrap();
            let b = gen_task(&spec, PositionMode::Dhr, ImageDetail::Full).unwrap();
            prop_assert_eq!(&a.query.token_ids, &b.query.token_ids);
            prop_assert_eq!(&a.answer, &b.answer);
            prop_assert_eq!(&a.posmap, &b.posmap);
            prop_assert_eq!(&a.image_payloads, &b.image_payloads);
            prop_assert_eq!(a.query.images, b.query.images);
        }
    }
}
