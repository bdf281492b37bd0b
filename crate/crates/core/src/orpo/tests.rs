use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pairs::{build_negative, build_pair, build_pairs, build_positive};
use super::train::{align, mean_margin, AlignOpts};
use super::*;
use crate::hsd::{slate_nll, HsdModel, ModelConfig, ModelKind};
use crate::optim::Adam;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Hierarchical,
        d_model: 8,
        d_ffn: 8,
        l_ctx: 1,
        l_slate: 2,
        l_item: 1,
        n_heads: 2,
        depth: 2,
        codebook_size: 5,
        slate_size: 3,
        beam_width: 2,
        d_user: 2,
        max_history: 3,
    }
}

fn rand_sid(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SemanticID {
    SemanticID::new(
        (0..cfg.depth)
            .map(|_| rng.gen_range(0..cfg.codebook_size))
            .collect(),
    )
}

fn rand_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SlateSample {
    let m = cfg.slate_size;
    SlateSample {
        context: UserContext {
            features: (0..cfg.d_user).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            history: (0..2).map(|_| rand_sid(cfg, rng)).collect(),
        },
        slate: (0..m).map(|_| rand_sid(cfg, rng)).collect(),
        feedback: (0..m).map(|_| rng.gen_range(0.0..5.0)).collect(),
        effective_view: vec![true; m],
        slate_item_ids: Vec::new(),
        disliked: vec![rand_sid(cfg, rng), rand_sid(cfg, rng)],
    }
}

fn rand_model(cfg: &ModelConfig, seed: u64) -> HsdModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = HsdModel::init(cfg.clone(), &mut rng).unwrap();
    for i in 0..model.layout.heads.len() {
        let h = model.layout.heads[i];
        for v in model.params.get_mut(h).data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    model
}

fn rand_pair(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PreferencePair {
    let s = rand_sample(cfg, rng);
    let y_plus = build_positive(&s);
    let mut y_minus = y_plus.clone();
    y_minus.reverse();
    if y_minus == y_plus {
        y_minus[0] = rand_sid(cfg, rng);
    }
    PreferencePair {
        context: s.context,
        y_plus,
        y_minus,
        strategy: Strategy::Permute,
    }
}

#[test]
fn uniform_model_log_odds_are_uniform() {
    // zero heads: π = 1/K per token, z = M·D·log((1/K)/(1−1/K))
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = HsdModel::init(cfg.clone(), &mut rng).unwrap();
    let s = rand_sample(&cfg, &mut rng);
    let tape: Tape<f64> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let z = slate_log_odds(&tape, &vars, &model, &s.context, &s.slate).unwrap();
    let k = cfg.codebook_size as f64;
    let expect = (cfg.slate_size * cfg.depth) as f64 * ((1.0 / k) / (1.0 - 1.0 / k)).ln();
    assert!(
        (tape.scalar_value(z) - expect).abs() < 1e-9,
        "{} vs {expect}",
        tape.scalar_value(z)
    );
}

#[test]
fn per_step_matches_direct_evaluation() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = rand_sample(&cfg, &mut rng);
    // direct oracle: per-token p from the raw logits
    let tape: Tape<f64> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let (_, logits) = token_log_odds(&tape, &vars, &model, &s.context, &s.slate).unwrap();
    let lv = tape.value(logits);
    let k = cfg.codebook_size;
    let targets: Vec<usize> = s.slate.iter().flat_map(|x| x.codes.clone()).collect();
    for (t, &tgt) in targets.iter().enumerate() {
        let row = &lv[t * k..(t + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let p = ((row[tgt] - m).exp() / z).clamp(ODDS_EPS, 1.0 - ODDS_EPS);
        let expect = p.ln() - (1.0 - p).ln();
        let tape2: Tape<f64> = Tape::new();
        let vars2 = model.params.bind(&tape2).unwrap();
        let got =
            per_step_log_odds(&tape2, &vars2, &model, &s.context, &s.slate, t + 1).unwrap();
        assert!(
            (tape2.scalar_value(got) - expect).abs() < 1e-6,
            "token {t}: {} vs {expect}",
            tape2.scalar_value(got)
        );
    }
}

#[test]
fn per_step_rejects_out_of_range() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = rand_sample(&cfg, &mut rng);
    let tape: Tape<f64> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let n = cfg.slate_size * cfg.depth;
    for bad in [0usize, n + 1] {
        assert!(matches!(
            per_step_log_odds(&tape, &vars, &model, &s.context, &s.slate, bad),
            Err(HigrError::Index(_))
        ));
    }
}

#[test]
fn slate_log_odds_is_sum_of_steps() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = rand_sample(&cfg, &mut rng);
    let tape: Tape<f64> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let z = slate_log_odds(&tape, &vars, &model, &s.context, &s.slate).unwrap();
    let mut total = 0.0f64;
    for t in 1..=cfg.slate_size * cfg.depth {
        let step = per_step_log_odds(&tape, &vars, &model, &s.context, &s.slate, t).unwrap();
        total += tape.scalar_value(step);
    }
    assert_eq!(tape.scalar_value(z).to_bits(), total.to_bits());
}

#[test]
fn repeated_evaluation_is_bitwise_stable() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = rand_sample(&cfg, &mut rng);
    let eval = || {
        let tape: Tape<f32> = Tape::new();
        let vars = model.params.bind(&tape).unwrap();
        let z = slate_log_odds(&tape, &vars, &model, &s.context, &s.slate).unwrap();
        tape.scalar_value(z)
    };
    assert_eq!(eval().to_bits(), eval().to_bits());
}

#[test]
fn identical_pair_penalty_is_ln_two() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pair = rand_pair(&cfg, &mut rng);
    pair.y_minus = pair.y_plus.clone();
    let tape: Tape<f64> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let parts = orpo_loss(&tape, &vars, &model, &pair, 0.1).unwrap();
    assert!((tape.scalar_value(parts.penalty) - std::f64::consts::LN_2).abs() < 1e-12);
    let total = tape.scalar_value(parts.total);
    let nll = tape.scalar_value(parts.nll_plus);
    assert!((total - nll - 0.1 * std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn alpha_zero_reduces_to_slate_nll_bitwise() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pair = rand_pair(&cfg, &mut rng);
    let tape: Tape<f32> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let parts = orpo_loss(&tape, &vars, &model, &pair, 0.0f32).unwrap();
    let sample = SlateSample {
        context: pair.context.clone(),
        slate: pair.y_plus.clone(),
        feedback: vec![0.0; cfg.slate_size],
        effective_view: vec![false; cfg.slate_size],
        slate_item_ids: Vec::new(),
        disliked: Vec::new(),
    };
    let tape2: Tape<f32> = Tape::new();
    let vars2 = model.params.bind(&tape2).unwrap();
    let nll = slate_nll(&tape2, &vars2, &model, &sample).unwrap();
    assert_eq!(
        tape.scalar_value(parts.total).to_bits(),
        tape2.scalar_value(nll).to_bits()
    );
}

#[test]
fn margin_is_antisymmetric() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let pair = rand_pair(&cfg, &mut rng);
    let swapped = PreferencePair {
        context: pair.context.clone(),
        y_plus: pair.y_minus.clone(),
        y_minus: pair.y_plus.clone(),
        strategy: pair.strategy,
    };
    let margin = |p: &PreferencePair| {
        let tape: Tape<f32> = Tape::new();
        let vars = model.params.bind(&tape).unwrap();
        let zp = slate_log_odds(&tape, &vars, &model, &p.context, &p.y_plus).unwrap();
        let zm = slate_log_odds(&tape, &vars, &model, &p.context, &p.y_minus).unwrap();
        let d = tape.sub(zp, zm).unwrap();
        tape.scalar_value(d)
    };
    assert_eq!(margin(&pair).to_bits(), (-margin(&swapped)).to_bits());
}

#[test]
fn exactly_two_policy_forwards_per_pair() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pair = rand_pair(&cfg, &mut rng);
    let tape: Tape<f32> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    let before = model.forward_counter.get();
    orpo_loss(&tape, &vars, &model, &pair, 0.1f32).unwrap();
    assert_eq!(model.forward_counter.get() - before, 2);
}

#[test]
fn penalty_gradient_in_margin_is_negative() {
    // d(−log σ(x))/dx = σ(x) − 1 < 0 for every x
    for x in [-5.0, -0.3, 0.0, 0.7, 4.0] {
        let tape: Tape<f64> = Tape::new();
        let m = tape.leaf(vec![x], vec![1], true).unwrap();
        let p = tape.neg(tape.log_sigmoid(m).unwrap()).unwrap();
        let grads = tape.backward(p).unwrap();
        assert!(grads.get(m).unwrap()[0] < 0.0, "x={x}");
    }
}

#[test]
fn one_step_increases_margin() {
    let cfg = tiny_cfg();
    let mut model = rand_model(&cfg, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pair = rand_pair(&cfg, &mut rng);
    let before = mean_margin(&model, std::slice::from_ref(&pair)).unwrap();
    let mut opt = Adam::new(&model.params, 1e-3, 0.0);
    let tape: Tape<f32> = Tape::new();
    let vars = model.params.bind(&tape).unwrap();
    // isolate the preference term so the NLL pull cannot mask the check
    let parts = orpo_loss(&tape, &vars, &model, &pair, 1.0f32).unwrap();
    let grads = tape.backward(parts.penalty).unwrap();
    opt.step(&mut model.params, &vars, &grads);
    let after = mean_margin(&model, std::slice::from_ref(&pair)).unwrap();
    assert!(after > before, "{before} -> {after}");
}

// ── Pair construction ────────────────────────────────────────────────

#[test]
fn positive_sorts_by_feedback_descending() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut s = rand_sample(&cfg, &mut rng);
    s.slate = vec![
        SemanticID::new(vec![0, 0]),
        SemanticID::new(vec![1, 1]),
        SemanticID::new(vec![2, 2]),
    ];
    s.feedback = vec![3.0, 1.0, 2.0];
    let y = build_positive(&s);
    assert_eq!(
        y,
        vec![
            SemanticID::new(vec![0, 0]),
            SemanticID::new(vec![2, 2]),
            SemanticID::new(vec![1, 1]),
        ]
    );
    // idempotence on an already-sorted slate
    let mut sorted = s.clone();
    sorted.slate = y.clone();
    sorted.feedback = vec![3.0, 2.0, 1.0];
    assert_eq!(build_positive(&sorted), y);
}

#[test]
fn positive_matches_reference_sort() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let s = rand_sample(&cfg, &mut rng);
        let got = build_positive(&s);
        // reference: stable pairing on (−feedback, exposure index)
        let mut idx: Vec<usize> = (0..s.slate.len()).collect();
        idx.sort_by(|&a, &b| {
            s.feedback[b]
                .partial_cmp(&s.feedback[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let expect: Vec<SemanticID> = idx.into_iter().map(|i| s.slate[i].clone()).collect();
        assert_eq!(got, expect);
    }
}

#[test]
fn permute_single_item_unavailable() {
    let cfg = ModelConfig {
        slate_size: 1,
        ..tiny_cfg()
    };
    let model = rand_model(&cfg, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let s = rand_sample(&cfg, &mut rng);
    let y = build_positive(&s);
    let got = build_negative(&y, &s, Strategy::Permute, &model, &[], &mut rng).unwrap();
    assert!(got.is_none());
}

#[test]
fn permute_yields_a_different_permutation() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let s = rand_sample(&cfg, &mut rng);
        let y = build_positive(&s);
        if y.iter().all(|x| x == &y[0]) {
            continue;
        }
        let got = build_negative(&y, &s, Strategy::Permute, &model, &[], &mut rng)
            .unwrap()
            .unwrap();
        assert_ne!(got, y);
        let mut a = got.clone();
        let mut b = y.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b, "not a permutation");
    }
}

#[test]
fn replace_uses_disliked_items() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut s = rand_sample(&cfg, &mut rng);
    s.disliked = vec![SemanticID::new(vec![4, 4]), SemanticID::new(vec![3, 4])];
    let y = build_positive(&s);
    let got = build_negative(&y, &s, Strategy::ReplaceNegative, &model, &[], &mut rng)
        .unwrap()
        .unwrap();
    assert!(
        got.iter().any(|x| s.disliked.contains(x)),
        "no disliked item in {got:?}"
    );
    assert_ne!(got, y);
}

#[test]
fn replace_unavailable_without_disliked_pool() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 28);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut s = rand_sample(&cfg, &mut rng);
    s.disliked.clear();
    let y = build_positive(&s);
    let got = build_negative(&y, &s, Strategy::ReplaceNegative, &model, &[], &mut rng).unwrap();
    assert!(got.is_none());
}

#[test]
fn anchor_repeat_picks_near_duplicates() {
    // make layer-0 embeddings dominate the similarity: near items then
    // share the anchor's first code
    let cfg = tiny_cfg();
    let mut model = rand_model(&cfg, 30);
    {
        let d = cfg.d_model;
        let t0 = model.params.get_mut(model.layout.sid_emb[0]);
        for v in t0.data.iter_mut() {
            *v = 0.0;
        }
        // one-hot style rows scaled large
        for c in 0..cfg.codebook_size {
            t0.data[c * d + c] = 10.0;
        }
        let t1 = model.params.get_mut(model.layout.sid_emb[1]);
        for v in t1.data.iter_mut() {
            *v *= 0.01;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut catalog = Vec::new();
    for a in 0..cfg.codebook_size {
        for b in 0..cfg.codebook_size {
            catalog.push(SemanticID::new(vec![a, b]));
        }
    }
    let mut s = rand_sample(&cfg, &mut rng);
    s.slate[0] = SemanticID::new(vec![2, 1]);
    s.feedback = vec![5.0, 1.0, 0.5];
    let y = build_positive(&s);
    assert_eq!(y[0].codes, vec![2, 1]);
    let got = build_negative(&y, &s, Strategy::AnchorRepeat, &model, &catalog, &mut rng)
        .unwrap()
        .unwrap();
    assert_eq!(got.len(), cfg.slate_size);
    for item in &got {
        assert_eq!(item.codes[0], 2, "non-near-duplicate {item:?}");
    }
}

#[test]
fn build_pair_falls_back_when_strategy_unavailable() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut s = rand_sample(&cfg, &mut rng);
    s.disliked.clear(); // replace unavailable → must fall back to others
    let align = AlignConfig {
        alpha: 0.1,
        mix: [0.0, 1.0, 0.0],
    };
    // only replace allowed and it is unavailable → no pair
    let got = build_pair(&s, &model, &[], &align, &mut rng).unwrap();
    assert!(got.is_none());
    // default mix falls back to permute/anchor instead
    let align = AlignConfig::default();
    let catalog: Vec<SemanticID> = (0..cfg.codebook_size)
        .flat_map(|a| (0..cfg.codebook_size).map(move |b| SemanticID::new(vec![a, b])))
        .collect();
    let got = build_pair(&s, &model, &catalog, &align, &mut rng).unwrap();
    assert!(got.is_some());
    assert_ne!(got.unwrap().strategy, Strategy::ReplaceNegative);
}

#[test]
fn build_pairs_is_deterministic() {
    let cfg = tiny_cfg();
    let model = rand_model(&cfg, 34);
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let samples: Vec<SlateSample> = (0..10).map(|_| rand_sample(&cfg, &mut rng)).collect();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_pairs(&samples, &model, &AlignConfig::default(), &mut rng).unwrap()
    };
    let (a, b) = (run(1), run(1));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.y_plus, y.y_plus);
        assert_eq!(x.y_minus, y.y_minus);
        assert_eq!(x.strategy, y.strategy);
    }
}

#[test]
fn invalid_mix_rejected() {
    let bad = AlignConfig {
        alpha: 0.1,
        mix: [0.5, 0.5, 0.5],
    };
    assert!(matches!(bad.validate(), Err(HigrError::Config(_))));
    let neg = AlignConfig {
        alpha: -0.1,
        mix: [0.4, 0.3, 0.3],
    };
    assert!(matches!(neg.validate(), Err(HigrError::Config(_))));
}

#[test]
fn align_improves_margin() {
    let cfg = tiny_cfg();
    let mut model = rand_model(&cfg, 36);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let samples: Vec<SlateSample> = (0..8).map(|_| rand_sample(&cfg, &mut rng)).collect();
    let acfg = AlignConfig::default();
    let mut prng = ChaCha8Rng::seed_from_u64(38);
    let pairs = build_pairs(&samples, &model, &acfg, &mut prng).unwrap();
    let before = mean_margin(&model, &pairs).unwrap();
    let opts = AlignOpts {
        steps: 60,
        batch_size: 4,
        lr: 1e-3,
        weight_decay: 0.0,
        seed: 0,
        log_every: 10,
    };
    align(&mut model, &pairs, &acfg, &opts).unwrap();
    let after = mean_margin(&model, &pairs).unwrap();
    assert!(after > before, "{before} -> {after}");
}
