//! Fast invariant suite run by `comemo verify`, plus random-prompt helpers
//! shared with tests and the C API.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::decay::{abel_identity_check, decay_bound};
use crate::error::Result;
use crate::model::{
    argmax, decode, forward, forward_with_bank, MemoryBank, ModelConfig, ModelParams, ParamGroup, Sampling,
};
use crate::pos_encoding::{assign_position_ids, PositionMap, PositionMode, RopeConfig};
use crate::seqplan::{
    tile_image, DhrLayout, ImageDetail, ImageId, PatchGrid, Prompt, PromptImage, PromptItem, SyntheticImage,
};
use crate::training::{grad_check, Example};

/// Random small layout whose shuffle factor divides `d_vit`'s channels.
pub fn random_layout(rng: &mut impl Rng, d_vit: usize) -> DhrLayout {
    let shuffle = if d_vit.is_multiple_of(4) && rng.gen_bool(0.5) {
        2
    } else {
        1
    };
    DhrLayout::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=2),
        rng.gen_range(1..=2),
        shuffle,
    )
    .expect("small layouts are valid")
}

pub fn random_image(rng: &mut impl Rng, layout: DhrLayout, d_vit: usize) -> Result<PromptImage> {
    let (r, c) = layout.global_patches();
    let dim = d_vit / (layout.shuffle_factor * layout.shuffle_factor);
    let grid = PatchGrid::from_fn(r, c, dim, |_, _, _| rng.sample(StandardNormal));
    let tokens = tile_image(&SyntheticImage::new(grid)?, &layout)?;
    Ok(PromptImage { tokens, layout })
}

/// Text/image interleaving with `1..=max_images` images, always ending in
/// text.
pub fn random_prompt(
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    mode: PositionMode,
    max_images: usize,
) -> Result<(Prompt, PositionMap)> {
    let n_images = rng.gen_range(1..=max_images.max(1));
    let mut items = Vec::new();
    let text = |rng: &mut dyn rand::RngCore| {
        let n = rng.gen_range(1..=3);
        PromptItem::Text((0..n).map(|_| rng.gen_range(1..cfg.vocab_size as u32)).collect())
    };
    if rng.gen_bool(0.5) {
        items.push(text(rng));
    }
    for _ in 0..n_images {
        let layout = random_layout(rng, cfg.d_vit);
        items.push(PromptItem::Image(random_image(rng, layout, cfg.d_vit)?));
        items.push(text(rng));
    }
    let prompt = Prompt::build(&items, cfg.context_detail)?;
    let posmap = assign_position_ids(&prompt.plan, &prompt.layouts(), mode)?;
    Ok((prompt, posmap))
}

/// Tiny config for gradient checks: every group present, two mixins.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        mixin_every: 1,
        vocab_size: 16,
        d_vit: 4,
        ffw_mult: 2,
        ..ModelConfig::default()
    }
}

/// Moves every tensor away from its special initial values (unit norms,
/// zero biases and gates) so that no gradient path is trivially inactive.
pub fn jitter_params(params: &mut ModelParams, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, data) in params.tensors_mut() {
        for v in data.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn random_example(rng: &mut impl Rng, cfg: &ModelConfig, mode: PositionMode) -> Result<Example> {
    let (prompt, posmap) = random_prompt(rng, cfg, mode, 2)?;
    let len = prompt.len();
    let targets = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let loss_mask = (0..len).map(|p| p + 1 == len || rng.gen_bool(0.5)).collect();
    Ok(Example {
        prompt,
        posmap,
        targets,
        loss_mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

pub fn check_abel_identity(draws: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..draws {
        let d = [8, 64, 128][i % 3];
        let cfg = RopeConfig::with_default_base(d)?;
        let h: Vec<Complex64> = (0..d / 2)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let delta = rng.gen_range(-4096.0..4096.0);
        let (lhs, rhs) = abel_identity_check(&h, delta, &cfg)?;
        worst = worst.max((lhs - rhs).norm());
    }
    Ok(result(
        "abel_identity",
        worst <= 1e-10,
        format!("max |lhs - rhs| = {worst:.3e}"),
    ))
}

pub fn check_decay_bound(draws: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RopeConfig::with_default_base(64)?;
    let mut violations = 0;
    for _ in 0..draws {
        let q: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let k: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let delta = rng.gen_range(0..=4096) as f64;
        let (value, bound) = decay_bound(&q, &k, delta, &cfg)?;
        if value > bound + 1e-9 {
            violations += 1;
        }
    }
    Ok(result(
        "decay_bound",
        violations == 0,
        format!("{violations} violations in {draws} draws"),
    ))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 4,
        mixin_every: 2,
        vocab_size: 32,
        d_vit: 8,
        ..ModelConfig::default()
    }
}

pub fn check_gate_zero(plans: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..plans {
        let cfg = small_config().with_allocation(
            [
                crate::model::AllocationMode::DhrS,
                crate::model::AllocationMode::DhrX,
                crate::model::AllocationMode::DhrB,
            ][i % 3],
        );
        let base = ModelConfig {
            memory_enabled: false,
            ..cfg.clone()
        };
        let params = ModelParams::init(&cfg, rng.gen());
        let (prompt, posmap) = random_prompt(&mut rng, &cfg, PositionMode::Dhr, 3)?;
        let a = forward(&params, &cfg, &prompt, &posmap)?;
        let b = forward(&params, &base, &prompt, &posmap)?;
        worst = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Ok(result(
        "gate_zero_equivalence",
        worst <= 1e-6,
        format!("max |diff| = {worst:.3e}"),
    ))
}

pub fn check_gradients(coords_per_tensor: usize, seed: u64) -> Result<CheckResult> {
    let cfg = grad_check_config();
    let mut params = ModelParams::init(&cfg, seed);
    jitter_params(&mut params, seed ^ 1, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let examples = (0..2)
        .map(|_| random_example(&mut rng, &cfg, PositionMode::Dhr))
        .collect::<Result<Vec<_>>>()?;
    let report = grad_check(
        &params,
        &cfg,
        &examples,
        &ParamGroup::ALL,
        1e-5,
        coords_per_tensor,
        seed,
    )?;
    let detail = report
        .max_rel_error
        .iter()
        .map(|(g, e)| format!("{}={e:.2e}", g.as_str()))
        .collect::<Vec<_>>()
        .join(" ");
    let all_groups = report.max_rel_error.len() == ParamGroup::ALL.len();
    Ok(result("grad_check", all_groups && report.worst() < 1e-5, detail))
}

/// Greedy cached decoding against full re-forwards of the growing sequence.
pub fn check_cache_consistency(seeds: usize, steps: usize, seed: u64) -> Result<CheckResult> {
    let mut mismatches = 0;
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, rng.gen());
        for m in &mut params.mixins {
            m.gates.attn_gate = rng.gen_range(-1.0..1.0);
            m.gates.ffw_gate = rng.gen_range(-1.0..1.0);
        }
        let (prompt, posmap) = random_prompt(&mut rng, &cfg, PositionMode::Dhr, 2)?;
        let bank = MemoryBank::build(&params, &cfg, &prompt, &posmap)?;
        let cached = decode(&params, &cfg, &prompt, &posmap, &bank, steps, Sampling::Greedy)?;
        let (mut p, mut pm) = (prompt.clone(), posmap.clone());
        let mut reference = Vec::with_capacity(steps);
        for _ in 0..steps {
            let logits = forward(&params, &cfg, &p, &pm)?;
            let row = logits.row(p.len() - 1).to_owned();
            let tok = argmax(&row);
            reference.push(tok);
            let next = pm.max_id().map_or(0, |m| m + 1);
            p.push_text(tok);
            pm.push(next);
        }
        if cached != reference {
            mismatches += 1;
        }
    }
    Ok(result(
        "cache_consistency",
        mismatches == 0,
        format!("{mismatches} of {seeds} sequences differ"),
    ))
}

/// Perturbs the memory of the last image and checks earlier logits.
pub fn check_mask_causality(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < probes {
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, rng.gen());
        for m in &mut params.mixins {
            m.gates.attn_gate = 1.0;
        }
        let (prompt, posmap) = random_prompt(&mut rng, &cfg, PositionMode::Dhr, 3)?;
        if prompt.images.len() < 2 {
            continue;
        }
        let last = ImageId(prompt.images.len() - 1);
        let bank = MemoryBank::build(&params, &cfg, &prompt, &posmap)?;
        let mut perturbed = bank.clone();
        let owners = bank.owners().to_vec();
        for (j, mut row) in perturbed.states_mut().rows_mut().into_iter().enumerate() {
            if owners[j] == last {
                row.mapv_inplace(|v| v + rng.sample::<f64, _>(StandardNormal) * 5.0);
            }
        }
        let a = forward_with_bank(&params, &cfg, &prompt, &posmap, &bank)?.logits;
        let b = forward_with_bank(&params, &cfg, &prompt, &posmap, &perturbed)?.logits;
        let cut = bank.insertion()[&last];
        for p in 0..cut {
            for (x, y) in a.row(p).iter().zip(b.row(p).iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        done += 1;
    }
    Ok(result(
        "mask_causality",
        worst <= 1e-12,
        format!("max earlier-logit diff = {worst:.3e}"),
    ))
}

/// Distinct position IDs per image: thumbnail tokens under RoPE-DHR versus
/// every token under vanilla IDs.
pub fn check_dhr_compression(layouts: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..layouts {
        let layout = DhrLayout::new(rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=4), 1)?;
        let plan = crate::seqplan::build_plan(&[crate::seqplan::PlanItem::Image(layout)], ImageDetail::Full)?;
        let layouts_map = [(ImageId(0), layout)].into_iter().collect();
        let count = |mode| -> Result<usize> {
            let ids = assign_position_ids(&plan, &layouts_map, mode)?;
            Ok(ids.ids().iter().collect::<std::collections::BTreeSet<_>>().len())
        };
        let tp = layout.tile_patch;
        if count(PositionMode::Dhr)? != tp * tp || count(PositionMode::Vanilla)? != (layout.num_tiles() + 1) * tp * tp {
            failures += 1;
        }
    }
    Ok(result(
        "dhr_compression",
        failures == 0,
        format!("{failures} of {layouts} layouts miscounted"),
    ))
}

/// Runs every check; `scale` multiplies the default draw counts.
pub fn run_suite(scale: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let s = scale.max(1);
    Ok(vec![
        check_abel_identity(1000 * s, seed)?,
        check_decay_bound(1000 * s, seed)?,
        check_dhr_compression(100 * s, seed)?,
        check_gate_zero(10 * s, seed)?,
        check_gradients(4 * s, seed)?,
        check_cache_consistency(4 * s, 8, seed)?,
        check_mask_causality(10 * s, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(1, 3).unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn random_prompts_end_in_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small_config();
        for _ in 0..20 {
            let (p, m) = random_prompt(&mut rng, &cfg, PositionMode::DhrNc, 3).unwrap();
            assert_eq!(p.len(), m.len());
            let last = p.plan.segments().last().unwrap();
            assert_eq!(last.kind, crate::seqplan::SegmentKind::Text);
        }
    }
}
