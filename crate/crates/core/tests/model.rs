use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use comemo_core::model::{
    argmax, build_cross_mask, decode, forward, forward_with_bank, mixin_forward, AllocationMode, GateState, MemoryBank,
    ModelConfig, ModelParams, Sampling,
};
use comemo_core::pos_encoding::{PositionMode, RopeConfig};
use comemo_core::seqplan::{build_plan, DhrLayout, ImageDetail, ImageId, PlanItem};
use comemo_core::verify::{jitter_params, random_prompt};

fn small() -> ModelConfig {
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

fn identity_mixin(d: usize, attn_gate: f64) -> comemo_core::model::Mixin {
    let cfg = ModelConfig {
        d_model: d,
        n_heads: 1,
        n_layers: 1,
        mixin_every: 1,
        ..ModelConfig::default()
    };
    let mut m = ModelParams::init(&cfg, 0).mixins.remove(0);
    let eye = Array2::eye(d);
    m.attn.wq = eye.clone();
    m.attn.wk = eye.clone();
    m.attn.wv = eye.clone();
    m.attn.wo = eye;
    m.attn_norm = Array1::ones(d);
    m.gates = GateState {
        attn_gate,
        ffw_gate: 0.0,
    };
    m
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

#[test]
fn mixin_matches_closed_form_with_identity_projections() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h_s = random_matrix(&mut rng, 3, d);
    let h_i = random_matrix(&mut rng, 2, d);
    // one image whose span ends at sequence position 1
    let plan = build_plan(
        &[PlanItem::Image(DhrLayout::new(1, 1, 1, 1).unwrap()), PlanItem::Text(1)],
        ImageDetail::Full,
    )
    .unwrap();
    let mask = build_cross_mask(&plan, &[ImageId(0), ImageId(0)]).unwrap();
    let gate = 0.8f64;
    let rope = RopeConfig::with_default_base(d).unwrap();
    let (out, _) = mixin_forward(&identity_mixin(d, gate), 1, &rope, &h_s, &h_i, &[0; 3], &[0; 2], &mask).unwrap();
    for p in 0..3 {
        let x = h_s.row(p);
        let rms = (x.dot(&x) / d as f64 + 1e-6).sqrt();
        let q = &x / rms;
        let expected = if p >= 1 {
            let scores: Vec<f64> = (0..2).map(|j| q.dot(&h_i.row(j)) / (d as f64).sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let attn = &h_i.row(0) * (w[0] / z) + &h_i.row(1) * (w[1] / z);
            &x + &(attn * gate.tanh())
        } else {
            x.to_owned()
        };
        for (a, b) in out.row(p).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "row {p}: {a} vs {b}");
        }
    }
}

#[test]
fn memory_rotary_ids_change_attention() {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mixin = identity_mixin(d, 1.0);
    mixin.attn.wq = random_matrix(&mut rng, d, d);
    mixin.attn.wk = random_matrix(&mut rng, d, d);
    let h_s = random_matrix(&mut rng, 3, d);
    let h_i = random_matrix(&mut rng, 3, d);
    let plan = build_plan(
        &[PlanItem::Image(DhrLayout::new(1, 1, 1, 1).unwrap()), PlanItem::Text(1)],
        ImageDetail::Full,
    )
    .unwrap();
    let mask = build_cross_mask(&plan, &[ImageId(0); 3]).unwrap();
    let rope = RopeConfig::with_default_base(d).unwrap();
    let probs = |ids: [usize; 3]| {
        mixin_forward(&mixin, 1, &rope, &h_s, &h_i, &[1, 2, 3], &ids, &mask)
            .unwrap()
            .1
    };
    let same = probs([0, 0, 0]);
    let moved = probs([0, 7, 0]);
    let diff = (&same[0] - &moved[0]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff > 1e-3, "attention unchanged: {diff}");
    assert_eq!(same, probs([0, 0, 0]));
}

#[test]
fn forward_does_not_touch_the_bank() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ModelParams::init(&cfg, 3);
    jitter_params(&mut params, 4, 0.1);
    let (prompt, posmap) = random_prompt(&mut rng, &cfg, PositionMode::Dhr, 3).unwrap();
    let bank = MemoryBank::build(&params, &cfg, &prompt, &posmap).unwrap();
    let before = bank.checksum();
    forward_with_bank(&params, &cfg, &prompt, &posmap, &bank).unwrap();
    decode(&params, &cfg, &prompt, &posmap, &bank, 4, Sampling::Greedy).unwrap();
    assert_eq!(bank.checksum(), before);
}

#[test]
fn text_only_prompt_has_empty_bank() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 5);
    let prompt = comemo_core::seqplan::Prompt::build(
        &[comemo_core::seqplan::PromptItem::Text(vec![1, 2, 3])],
        cfg.context_detail,
    )
    .unwrap();
    let posmap =
        comemo_core::pos_encoding::assign_position_ids(&prompt.plan, &prompt.layouts(), PositionMode::Dhr).unwrap();
    let bank = MemoryBank::build(&params, &cfg, &prompt, &posmap).unwrap();
    assert!(bank.is_empty());
    let a = forward(&params, &cfg, &prompt, &posmap).unwrap();
    assert_eq!(a.dim(), (3, 32));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_gates_match_plain_decoder(seed in any::<u64>(), alloc in 0usize..3, mode in 0usize..3) {
        let cfg = small().with_allocation([AllocationMode::DhrS, AllocationMode::DhrX, AllocationMode::DhrB][alloc]);
        let base = ModelConfig { memory_enabled: false, ..cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&cfg, seed);
        jitter_params(&mut params, seed ^ 9, 0.1);
        for m in &mut params.mixins {
            m.gates = GateState::default();
        }
        let mode = [PositionMode::Vanilla, PositionMode::Dhr, PositionMode::DhrNc][mode];
        let (prompt, posmap) = random_prompt(&mut rng, &cfg, mode, 3).unwrap();
        let a = forward(&params, &cfg, &prompt, &posmap).unwrap();
        let b = forward(&params, &base, &prompt, &posmap).unwrap();
        let worst = a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(worst <= 1e-6);
    }

    #[test]
    fn cached_decode_equals_reforward(seed in any::<u64>()) {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&cfg, seed);
        jitter_params(&mut params, seed ^ 3, 0.05);
        let (prompt, posmap) = random_prompt(&mut rng, &cfg, PositionMode::Dhr, 2).unwrap();
        let bank = MemoryBank::build(&params, &cfg, &prompt, &posmap).unwrap();
        let cached = decode(&params, &cfg, &prompt, &posmap, &bank, 6, Sampling::Greedy).unwrap();
        let (mut p, mut pm) = (prompt, posmap);
        for &tok in &cached {
            let logits = forward(&params, &cfg, &p, &pm).unwrap();
            prop_assert_eq!(argmax(&logits.row(p.len() - 1).to_owned()), tok);
            let next = pm.ids().iter().max().unwrap() + 1;
            p.push_text(tok);
            pm.push(next);
        }
    }

    #[test]
    fn cross_mask_sees_images_whose_span_has_ended(
        items in prop::collection::vec((0usize..3, 1usize..3, 1usize..3), 1..5)
    ) {
        let mut plan_items = vec![];
        for &(text, tr, tp) in &items {
            if text > 0 {
                plan_items.push(PlanItem::Text(text));
            }
            plan_items.push(PlanItem::Image(DhrLayout::new(1, tr, tp, 1).unwrap()));
        }
        plan_items.push(PlanItem::Text(1));
        let plan = build_plan(&plan_items, ImageDetail::Full).unwrap();
        let owners: Vec<ImageId> = plan.image_spans().keys().flat_map(|&id| [id, id]).collect();
        let mask = build_cross_mask(&plan, &owners).unwrap();
        for p in 0..plan.total_len() {
            for (j, owner) in owners.iter().enumerate() {
                let end = plan.image_spans()[owner].1;
                prop_assert_eq!(mask.is_visible(p, j), end <= p);
            }
        }
    }
}
