//! Synthetic images, dynamic-high-resolution tiling and the interleaved
//! text/image sequence layout.
//!
//! A [`SequencePlan`] only records segment kinds, lengths and image spans. The
//! actual token IDs and patch features travel alongside it in a [`Prompt`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

/// Upper bound on tiles per image used by [`DhrLayout::validate`].
pub const DEFAULT_MAX_TILES: usize = 12;

/// Row-major grid of equally sized patch feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols * dim);
        for r in 0..rows {
            for c in 0..cols {
                for k in 0..dim {
                    data.push(f(r, c, k));
                }
            }
        }
        Self { rows, cols, dim, data }
    }

    pub fn from_vec(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return shape_err(format!(
                "patch grid {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                data.len()
            ));
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let start = (r * self.cols + c) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let start = (r * self.cols + c) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Number of cells (tokens once the grid is fed to the model).
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the `rows x cols` window starting at (`r0`, `c0`).
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<PatchGrid> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return shape_err(format!(
                "crop {rows}x{cols} at ({r0},{c0}) exceeds {}x{} grid",
                self.rows, self.cols
            ));
        }
        let mut out = PatchGrid::zeros(rows, cols, self.dim);
        for r in 0..rows {
            for c in 0..cols {
                out.cell_mut(r, c).copy_from_slice(self.cell(r0 + r, c0 + c));
            }
        }
        Ok(out)
    }
}

/// Space-to-channel rearrangement: each output cell concatenates the
/// `factor x factor` input cells it covers, in row-major order.
pub fn pixel_shuffle(grid: &PatchGrid, factor: usize) -> Result<PatchGrid> {
    if factor == 0 {
        return arg_err("shuffle factor must be >= 1");
    }
    if !grid.rows.is_multiple_of(factor) || !grid.cols.is_multiple_of(factor) {
        return shape_err(format!(
            "{}x{} grid is not divisible by shuffle factor {factor}",
            grid.rows, grid.cols
        ));
    }
    let (rows, cols) = (grid.rows / factor, grid.cols / factor);
    let dim = grid.dim * factor * factor;
    let mut data = Vec::with_capacity(grid.data.len());
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..factor {
                for j in 0..factor {
                    data.extend_from_slice(grid.cell(r * factor + i, c * factor + j));
                }
            }
        }
    }
    Ok(PatchGrid { rows, cols, dim, data })
}

/// Feature-level stand-in for an encoded image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub patch_grid: PatchGrid,
    /// Symbol painted at a (row, col) patch, used by the task generators.
    pub payload: BTreeMap<(usize, usize), u32>,
}

impl SyntheticImage {
    pub fn new(patch_grid: PatchGrid) -> Result<Self> {
        if patch_grid.rows == 0 || patch_grid.cols == 0 || patch_grid.dim == 0 {
            return shape_err("synthetic image needs at least one patch of non-zero dimension");
        }
        Ok(Self {
            patch_grid,
            payload: BTreeMap::new(),
        })
    }
}

/// Frozen "vision encoder": an embedding table over symbols plus fixed noise.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    table: Vec<Vec<f64>>,
    patch_dim: usize,
    noise: f64,
}

impl PatchEncoder {
    pub fn new(vocab: usize, patch_dim: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab)
            .map(|_| (0..patch_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self {
            table,
            patch_dim,
            noise,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn embedding(&self, symbol: u32) -> &[f64] {
        &self.table[symbol as usize]
    }

    /// Renders a `rows x cols` image where every patch shows `symbols[r][c]`.
    pub fn render(&self, symbols: &[Vec<u32>], noise_seed: u64) -> Result<SyntheticImage> {
        let rows = symbols.len();
        let cols = symbols.first().map_or(0, Vec::len);
        if symbols.iter().any(|row| row.len() != cols) {
            return shape_err("ragged symbol grid");
        }
        if let Some(bad) = symbols.iter().flatten().find(|&&s| s as usize >= self.table.len()) {
            return arg_err(format!("symbol {bad} outside encoder vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let grid = PatchGrid::from_fn(rows, cols, self.patch_dim, |r, c, k| {
            let n: f64 = StandardNormal.sample(&mut rng);
            self.table[symbols[r][c] as usize][k] + self.noise * n
        });
        let mut img = SyntheticImage::new(grid)?;
        for (r, row) in symbols.iter().enumerate() {
            for (c, &s) in row.iter().enumerate() {
                img.payload.insert((r, c), s);
            }
        }
        Ok(img)
    }
}

/// Tile geometry of one image. Tile and thumbnail grids have the same
/// post-shuffle side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhrLayout {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tile_patch: usize,
    pub thumb_patch: usize,
    pub shuffle_factor: usize,
}

impl DhrLayout {
    pub fn new(tile_rows: usize, tile_cols: usize, tile_patch: usize, shuffle_factor: usize) -> Result<Self> {
        let layout = Self {
            tile_rows,
            tile_cols,
            tile_patch,
            thumb_patch: tile_patch,
            shuffle_factor,
        };
        layout.validate(DEFAULT_MAX_TILES)?;
        Ok(layout)
    }

    pub fn validate(&self, max_tiles: usize) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return arg_err("tile grid must have at least one tile");
        }
        if self.tile_patch == 0 || self.shuffle_factor == 0 {
            return arg_err("tile_patch and shuffle_factor must be >= 1");
        }
        if self.tile_patch != self.thumb_patch {
            return arg_err(format!(
                "tile_patch ({}) must equal thumb_patch ({})",
                self.tile_patch, self.thumb_patch
            ));
        }
        if self.num_tiles() > max_tiles {
            return arg_err(format!("{} tiles exceeds the maximum of {max_tiles}", self.num_tiles()));
        }
        Ok(())
    }

    pub fn num_tiles(&self) -> usize {
        self.tile_rows * self.tile_cols
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.tile_patch * self.tile_patch
    }

    pub fn thumb_tokens(&self) -> usize {
        self.thumb_patch * self.thumb_patch
    }

    pub fn tile_tokens(&self) -> usize {
        self.num_tiles() * self.tokens_per_tile()
    }

    /// Post-shuffle token grid covered by all tiles: (rows, cols).
    pub fn global_tokens(&self) -> (usize, usize) {
        (self.tile_rows * self.tile_patch, self.tile_cols * self.tile_patch)
    }

    /// Pre-shuffle patch grid the image must have: (rows, cols).
    pub fn global_patches(&self) -> (usize, usize) {
        let (r, c) = self.global_tokens();
        (r * self.shuffle_factor, c * self.shuffle_factor)
    }

    pub fn tokens(&self, detail: ImageDetail) -> usize {
        match detail {
            ImageDetail::Thumbnail => self.thumb_tokens(),
            ImageDetail::Full => self.tile_tokens() + self.thumb_tokens(),
        }
    }
}

/// Post-shuffle tiles (row-major by tile position) and the thumbnail.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokens {
    pub tiles: Vec<PatchGrid>,
    pub thumbnail: PatchGrid,
}

impl ImageTokens {
    pub fn feature_dim(&self) -> usize {
        self.thumbnail.dim()
    }

    /// Feature of token `index` of tile `tile` (row-major inside the tile).
    pub fn tile_token(&self, tile: usize, index: usize) -> &[f64] {
        let grid = &self.tiles[tile];
        grid.cell(index / grid.cols(), index % grid.cols())
    }

    pub fn thumb_token(&self, index: usize) -> &[f64] {
        let g = &self.thumbnail;
        g.cell(index / g.cols(), index % g.cols())
    }
}

/// Splits an image into tiles plus an average-pooled thumbnail, then
/// pixel-shuffles both.
pub fn tile_image(img: &SyntheticImage, layout: &DhrLayout) -> Result<ImageTokens> {
    layout.validate(usize::MAX)?;
    let grid = &img.patch_grid;
    let (gr, gc) = layout.global_patches();
    if grid.rows() != gr || grid.cols() != gc {
        return shape_err(format!(
            "image is {}x{} patches but layout expects {gr}x{gc}",
            grid.rows(),
            grid.cols()
        ));
    }
    let side = layout.tile_patch * layout.shuffle_factor;
    let mut tiles = Vec::with_capacity(layout.num_tiles());
    for tr in 0..layout.tile_rows {
        for tc in 0..layout.tile_cols {
            let tile = grid.crop(tr * side, tc * side, side, side)?;
            tiles.push(pixel_shuffle(&tile, layout.shuffle_factor)?);
        }
    }

    // Pool windows are tile_rows x tile_cols patches since the thumbnail side
    // equals the tile side.
    let thumb_side = layout.thumb_patch * layout.shuffle_factor;
    let (wr, wc) = (gr / thumb_side, gc / thumb_side);
    let norm = 1.0 / (wr * wc) as f64;
    let mut pooled = PatchGrid::zeros(thumb_side, thumb_side, grid.dim());
    for r in 0..thumb_side {
        for c in 0..thumb_side {
            let out = pooled.cell_mut(r, c);
            for i in 0..wr {
                for j in 0..wc {
                    for (o, v) in out.iter_mut().zip(grid.cell(r * wr + i, c * wc + j)) {
                        *o += v;
                    }
                }
            }
            out.iter_mut().for_each(|o| *o *= norm);
        }
    }
    let thumbnail = pixel_shuffle(&pooled, layout.shuffle_factor)?;
    Ok(ImageTokens { tiles, thumbnail })
}

/// How much of an image a path receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageDetail {
    Thumbnail,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Text,
    ImageTiles,
    ImageThumbnail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub token_count: usize,
    pub image_id: Option<ImageId>,
}

/// What occupies one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Text,
    Tile { image: ImageId, tile: usize, index: usize },
    Thumb { image: ImageId, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePlan {
    segments: Vec<Segment>,
    image_spans: BTreeMap<ImageId, (usize, usize)>,
    total_len: usize,
}

impl SequencePlan {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Inclusive (first, last) sequence index of each image's tokens.
    pub fn image_spans(&self) -> &BTreeMap<ImageId, (usize, usize)> {
        &self.image_spans
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn num_images(&self) -> usize {
        self.image_spans.len()
    }

    /// Per-position slot table. `tokens_per_tile` is looked up in `layouts`.
    pub fn slots(&self, layouts: &BTreeMap<ImageId, DhrLayout>) -> Result<Vec<Slot>> {
        let mut out = Vec::with_capacity(self.total_len);
        for seg in &self.segments {
            match (seg.kind, seg.image_id) {
                (SegmentKind::Text, _) => out.extend(std::iter::repeat_n(Slot::Text, seg.token_count)),
                (SegmentKind::ImageTiles, Some(image)) => {
                    let per = layout_of(layouts, image)?.tokens_per_tile();
                    out.extend((0..seg.token_count).map(|i| Slot::Tile {
                        image,
                        tile: i / per,
                        index: i % per,
                    }));
                }
                (SegmentKind::ImageThumbnail, Some(image)) => {
                    out.extend((0..seg.token_count).map(|index| Slot::Thumb { image, index }));
                }
                _ => return arg_err("image segment without image id"),
            }
        }
        Ok(out)
    }

    /// Appends `n` text tokens to the end of the plan.
    pub fn extend_text(&mut self, n: usize) {
        if n == 0 {
            return;
        }
        match self.segments.last_mut() {
            Some(seg) if seg.kind == SegmentKind::Text => seg.token_count += n,
            _ => self.segments.push(Segment {
                kind: SegmentKind::Text,
                token_count: n,
                image_id: None,
            }),
        }
        self.total_len += n;
    }
}

pub(crate) fn layout_of(layouts: &BTreeMap<ImageId, DhrLayout>, id: ImageId) -> Result<&DhrLayout> {
    layouts
        .get(&id)
        .ok_or_else(|| crate::Error::Argument(format!("no layout for image {}", id.0)))
}

/// Input to [`build_plan`]: a run of text tokens or one tiled image.
#[derive(Debug, Clone, Copy)]
pub enum PlanItem {
    Text(usize),
    Image(DhrLayout),
}

/// Lays items out in order. Each image contributes its tile tokens
/// (row-major by tile, when `context_detail` is `Full`) followed by its
/// thumbnail tokens. Images are numbered in item order.
pub fn build_plan(items: &[PlanItem], context_detail: ImageDetail) -> Result<SequencePlan> {
    if items.is_empty() {
        return arg_err("cannot build a plan from zero items");
    }
    let mut segments = Vec::new();
    let mut image_spans = BTreeMap::new();
    let mut pos = 0usize;
    let mut next_image = 0usize;
    for item in items {
        match *item {
            PlanItem::Text(0) => return arg_err("text item with zero tokens"),
            PlanItem::Text(n) => {
                segments.push(Segment {
                    kind: SegmentKind::Text,
                    token_count: n,
                    image_id: None,
                });
                pos += n;
            }
            PlanItem::Image(layout) => {
                layout.validate(usize::MAX)?;
                let id = ImageId(next_image);
                next_image += 1;
                let start = pos;
                if context_detail == ImageDetail::Full {
                    segments.push(Segment {
                        kind: SegmentKind::ImageTiles,
                        token_count: layout.tile_tokens(),
                        image_id: Some(id),
                    });
                    pos += layout.tile_tokens();
                }
                segments.push(Segment {
                    kind: SegmentKind::ImageThumbnail,
                    token_count: layout.thumb_tokens(),
                    image_id: Some(id),
                });
                pos += layout.thumb_tokens();
                image_spans.insert(id, (start, pos - 1));
            }
        }
    }
    Ok(SequencePlan {
        segments,
        image_spans,
        total_len: pos,
    })
}

/// One image of a prompt: its tokens and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptImage {
    pub tokens: ImageTokens,
    pub layout: DhrLayout,
}

/// Content of a prompt item.
#[derive(Debug, Clone)]
pub enum PromptItem {
    Text(Vec<u32>),
    Image(PromptImage),
}

/// A plan together with the content it lays out.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub plan: SequencePlan,
    /// Token ID per sequence position; image positions hold [`IMAGE_PLACEHOLDER`].
    pub token_ids: Vec<u32>,
    /// Indexed by `ImageId.0`.
    pub images: Vec<PromptImage>,
}

pub const IMAGE_PLACEHOLDER: u32 = 0;

impl Prompt {
    pub fn build(items: &[PromptItem], context_detail: ImageDetail) -> Result<Self> {
        let plan_items: Vec<PlanItem> = items
            .iter()
            .map(|item| match item {
                PromptItem::Text(t) => PlanItem::Text(t.len()),
                PromptItem::Image(img) => PlanItem::Image(img.layout),
            })
            .collect();
        let plan = build_plan(&plan_items, context_detail)?;
        let mut token_ids = Vec::with_capacity(plan.total_len());
        let mut images = Vec::new();
        for item in items {
            match item {
                PromptItem::Text(t) => token_ids.extend_from_slice(t),
                PromptItem::Image(img) => {
                    let tokens = &img.tokens;
                    if tokens.tiles.len() != img.layout.num_tiles()
                        || tokens.thumbnail.len() != img.layout.thumb_tokens()
                        || tokens.tiles.iter().any(|t| t.len() != img.layout.tokens_per_tile())
                    {
                        return shape_err("image tokens do not match their layout");
                    }
                    token_ids.extend(std::iter::repeat_n(
                        IMAGE_PLACEHOLDER,
                        img.layout.tokens(context_detail),
                    ));
                    images.push(img.clone());
                }
            }
        }
        Ok(Self {
            plan,
            token_ids,
            images,
        })
    }

    pub fn layouts(&self) -> BTreeMap<ImageId, DhrLayout> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| (ImageId(i), img.layout))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.plan.total_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_text(&mut self, token: u32) {
        self.plan.extend_text(1);
        self.token_ids.push(token);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting_grid(rows: usize, cols: usize, dim: usize) -> PatchGrid {
        PatchGrid::from_fn(rows, cols, dim, |r, c, k| ((r * cols + c) * dim + k) as f64)
    }

    #[test]
    fn shuffle_shapes() {
        let g = counting_grid(4, 4, 2);
        let s = pixel_shuffle(&g, 2).unwrap();
        assert_eq!((s.rows(), s.cols(), s.dim()), (2, 2, 8));
        assert_eq!(pixel_shuffle(&g, 1).unwrap(), g);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let g = counting_grid(4, 4, 2);
        let s = pixel_shuffle(&g, 2).unwrap();
        let mut a: Vec<i64> = g.data().iter().map(|&v| v as i64).collect();
        let mut b: Vec<i64> = s.data().iter().map(|&v| v as i64).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        // first output cell holds input cells (0,0),(0,1),(1,0),(1,1)
        assert_eq!(s.cell(0, 0), &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn shuffle_rejects_indivisible() {
        let g = counting_grid(3, 4, 1);
        assert!(matches!(pixel_shuffle(&g, 2), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn tiling_geometry() {
        let layout = DhrLayout::new(2, 2, 2, 1).unwrap();
        let img = SyntheticImage::new(counting_grid(4, 4, 3)).unwrap();
        let t = tile_image(&img, &layout).unwrap();
        assert_eq!(t.tiles.len(), 4);
        assert!(t.tiles.iter().all(|g| g.rows() == 2 && g.cols() == 2));
        assert_eq!((t.thumbnail.rows(), t.thumbnail.cols()), (2, 2));
        // tile 1 is the top-right quadrant
        assert_eq!(t.tiles[1].cell(0, 0), img.patch_grid.cell(0, 2));
    }

    #[test]
    fn single_tile_matches_direct_pooling() {
        let layout = DhrLayout::new(1, 1, 2, 2).unwrap();
        let img = SyntheticImage::new(counting_grid(4, 4, 1)).unwrap();
        let t = tile_image(&img, &layout).unwrap();
        // pooling window is 1x1, so thumbnail and the only tile coincide
        assert_eq!(t.tiles[0], t.thumbnail);
        assert_eq!(t.thumbnail, pixel_shuffle(&img.patch_grid, 2).unwrap());
    }

    #[test]
    fn thumbnail_pools_by_tile_grid() {
        let layout = DhrLayout::new(2, 1, 1, 1).unwrap();
        let img = SyntheticImage::new(PatchGrid::from_vec(2, 1, 1, vec![1.0, 3.0]).unwrap()).unwrap();
        let t = tile_image(&img, &layout).unwrap();
        assert_eq!(t.thumbnail.data(), &[2.0]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let layout = DhrLayout::new(2, 3, 2, 2).unwrap();
        let (r, c) = layout.global_patches();
        let img = SyntheticImage::new(PatchGrid::from_fn(r, c, 2, |_, _, _| 0.25)).unwrap();
        let t = tile_image(&img, &layout).unwrap();
        assert!(t.tiles.iter().flat_map(|g| g.data()).all(|&v| v == 0.25));
        assert!(t.thumbnail.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn tile_image_rejects_mismatch() {
        let layout = DhrLayout::new(2, 2, 2, 1).unwrap();
        let img = SyntheticImage::new(counting_grid(4, 5, 1)).unwrap();
        assert!(matches!(tile_image(&img, &layout), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn layout_limits() {
        assert!(DhrLayout::new(3, 5, 2, 1).is_err());
        assert!(DhrLayout::new(3, 4, 2, 1).is_ok());
        let mut l = DhrLayout::new(1, 1, 2, 1).unwrap();
        l.thumb_patch = 3;
        assert!(l.validate(12).is_err());
    }

    #[test]
    fn text_only_plan() {
        let p = build_plan(&[PlanItem::Text(3)], ImageDetail::Full).unwrap();
        assert_eq!(p.total_len(), 3);
        assert!(p.image_spans().is_empty());
    }

    #[test]
    fn worked_plan() {
        let layout = DhrLayout::new(2, 1, 2, 1).unwrap();
        let p = build_plan(
            &[PlanItem::Text(2), PlanItem::Image(layout), PlanItem::Text(1)],
            ImageDetail::Full,
        )
        .unwrap();
        // enumerate: 2 text, 2 tiles x 4, 4 thumbnail, 1 text
        let counted: usize = [2, 4, 4, 4, 1].iter().sum();
        assert_eq!(p.total_len(), counted);
        assert_eq!(p.image_spans()[&ImageId(0)], (2, 13));
        let kinds: Vec<_> = p.segments().iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            [
                SegmentKind::Text,
                SegmentKind::ImageTiles,
                SegmentKind::ImageThumbnail,
                SegmentKind::Text
            ]
        );
    }

    #[test]
    fn two_images_in_order() {
        let a = DhrLayout::new(1, 2, 2, 1).unwrap();
        let b = DhrLayout::new(1, 1, 1, 1).unwrap();
        let p = build_plan(
            &[PlanItem::Image(a), PlanItem::Text(2), PlanItem::Image(b)],
            ImageDetail::Full,
        )
        .unwrap();
        let spans: Vec<_> = p.image_spans().values().copied().collect();
        assert_eq!(spans, vec![(0, 11), (14, 15)]);
    }

    #[test]
    fn thumbnail_only_context() {
        let layout = DhrLayout::new(2, 2, 2, 1).unwrap();
        let p = build_plan(&[PlanItem::Image(layout)], ImageDetail::Thumbnail).unwrap();
        assert_eq!(p.total_len(), 4);
        assert_eq!(p.segments().len(), 1);
    }

    #[test]
    fn empty_plan_is_rejected() {
        assert!(matches!(
            build_plan(&[], ImageDetail::Full),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn encoder_render_is_deterministic() {
        let enc = PatchEncoder::new(8, 4, 0.1, 7);
        let sym = vec![vec![1, 2], vec![3, 4]];
        let a = enc.render(&sym, 11).unwrap();
        let b = enc.render(&sym, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.payload[&(1, 0)], 3);
        assert!(enc.render(&[vec![9]], 0).is_err());
    }
}
