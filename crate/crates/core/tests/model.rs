use armor::datagen::{generate_episode, Label};
use armor::diffcore::kernels;
use armor::model::*;
use armor::rng;
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        ffn_dim: 32,
        ..ModelConfig::default()
    }
}

fn frames(seed: u64) -> Vec<f64> {
    generate_episode(seed, Label::Failure, Some((seed % 8) as usize)).unwrap().frames_flat()
}

/// Model with every parameter (including zero-initialised ones) random.
fn scrambled(seed: u64) -> Model {
    let mut m = Model::new(small(), seed).unwrap();
    let mut r = rng::stream(seed, &[99]);
    let ids: Vec<_> = m.store().ids().collect();
    for id in ids {
        for v in m.store_mut().value_mut(id).data_mut() {
            *v += 0.3 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r);
        }
    }
    m
}

fn zero(m: &mut Model, name: &str) {
    let id = m.store().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.store_mut().value_mut(id).data_mut().fill(0.0);
}

#[test]
fn encoding_shape_and_locality() {
    let m = scrambled(1);
    let a = frames(3);
    let mut b = a.clone();
    for v in &mut b[3 * 16..4 * 16] {
        *v += 0.5;
    }
    let ea = m.encode(&a).unwrap();
    let eb = m.encode(&b).unwrap();
    assert_eq!(ea.shape(), &[12, 16]);
    for t in 0..12 {
        assert_eq!(ea.row(t) == eb.row(t), t != 3, "frame {t}");
    }
}

#[test]
fn zero_frames_encode_bias_only() {
    let m = scrambled(2);
    let e = m.encode(&vec![0.0; 12 * 16]).unwrap();
    let s = m.store();
    let b = s.get("encoder.proj.b").unwrap().data();
    let mut act = b.to_vec();
    kernels::gelu_inplace(&mut act);
    let (want, _, _) = kernels::layernorm(&act, s.get("encoder.ln.g").unwrap().data(), s.get("encoder.ln.b").unwrap().data());
    for t in 0..12 {
        for (x, y) in e.row(t).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_logits_give_uniform_steps() {
    let mut m = scrambled(3);
    zero(&mut m, "lm_head.out.w");
    zero(&mut m, "lm_head.out.b");
    let v = m.vocab().len();
    let mut r = rng::stream(0, &[]);
    let (toks, dists) = m
        .decode_reasoning(&frames(1), &ConditioningContext::initial(), Decoding::Sample { temperature: 0.7 }, &mut r)
        .unwrap();
    assert_eq!(toks.len(), dists.len());
    for d in &dists {
        assert!((kernels::entropy(d) - (v as f64).ln()).abs() < 1e-12);
    }
    let target = [5, 9, EOS];
    let tf = m.ntp_teacher_forced(&frames(1), &ConditioningContext::initial(), &target).unwrap();
    let ntp = armor::diffcore::losses::ntp_loss(&tf, &target).unwrap();
    assert!((ntp - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn sampling_frequencies_follow_first_step_distribution() {
    let m = scrambled(4);
    let f = frames(2);
    let ctx = ConditioningContext::initial();
    let n = 10_000;
    let mut counts = vec![0usize; m.vocab().len()];
    let mut first = None;
    let mut r = rng::stream(7, &[]);
    for _ in 0..n {
        let (toks, dists) = m.decode_reasoning(&f, &ctx, Decoding::Sample { temperature: 1.0 }, &mut r).unwrap();
        counts[toks[0]] += 1;
        first.get_or_insert(dists[0].clone());
    }
    let p = first.unwrap();
    for (c, pi) in counts.iter().zip(&p) {
        let sigma = (n as f64 * pi * (1.0 - pi)).sqrt();
        assert!((*c as f64 - n as f64 * pi).abs() <= 3.0 * sigma + 1.0, "count {c} p {pi}");
    }
}

#[test]
fn inverse_cdf_sampler_frequencies() {
    let p = [0.1, 0.0, 0.25, 0.4, 0.25];
    let mut r = rng::stream(1, &[]);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_index(&p, &mut r)] += 1;
    }
    assert_eq!(counts[1], 0);
    for (c, pi) in counts.iter().zip(p) {
        let sigma = (n as f64 * pi * (1.0 - pi)).sqrt();
        assert!((*c as f64 - n as f64 * pi).abs() <= 3.0 * sigma);
    }
}

#[test]
fn heads_share_the_backbone() {
    let base = scrambled(5);
    let f = frames(4);
    let ctx = ConditioningContext::from_prediction(Label::Failure, &[7, 8, 9]);
    let p0 = base.classify(&f, &ctx).unwrap();
    let d0 = base.ntp_teacher_forced(&f, &ctx, &[10, EOS]).unwrap();
    // Token 7 appears in the context of both heads.
    for (name, at) in [("decoder.0.ffn.up.w", 0), ("encoder.proj.w", 0), ("embed.tokens", 7 * 16)] {
        let mut m = base.clone();
        let id = m.store().id(name).unwrap();
        m.store_mut().value_mut(id).data_mut()[at] += 0.5;
        assert_ne!(m.classify(&f, &ctx).unwrap(), p0, "{name}");
        assert_ne!(m.ntp_teacher_forced(&f, &ctx, &[10, EOS]).unwrap(), d0, "{name}");
    }
}

#[test]
fn previous_detection_changes_classifier_input() {
    let m = Model::new(small(), 0).unwrap();
    let s = m.context_tokens(&ConditioningContext::from_prediction(Label::Success, &[9]));
    let f = m.context_tokens(&ConditioningContext::from_prediction(Label::Failure, &[9]));
    assert_ne!(s, f);
    assert_eq!(m.context_tokens(&ConditioningContext::initial()), vec![COND_NONE, SEP]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forced_decoding_matches_teacher_forcing(seed in any::<u64>(), prefix in proptest::collection::vec(7usize..41, 0..10)) {
        let m = scrambled(seed % 8);
        let f = frames(seed);
        let ctx = ConditioningContext::from_prediction(Label::Success, &prefix);
        let mut target = prefix.clone();
        target.push(EOS);
        let tf = m.ntp_teacher_forced(&f, &ctx, &target).unwrap();
        let mut r = rng::stream(seed, &[]);
        let (toks, dists) = m.decode_reasoning(&f, &ctx, Decoding::Forced(&target), &mut r).unwrap();
        prop_assert_eq!(toks, target);
        prop_assert_eq!(dists, tf);
    }

    #[test]
    fn entropies_are_bounded(seed in any::<u64>(), temp in 0.05f64..2.0) {
        let m = scrambled(seed % 4);
        let mut r = rng::stream(seed, &[]);
        let out = m.predict_round(&frames(seed), &ConditioningContext::initial(), temp, &mut r).unwrap();
        let v = m.vocab().len() as f64;
        prop_assert!(out.det_prob > 0.0 && out.det_prob < 1.0);
        prop_assert!(out.h_det >= 0.0 && out.h_det <= std::f64::consts::LN_2 + 1e-15);
        prop_assert!(out.h_reason >= 0.0 && out.h_reason <= v.ln() + 1e-12);
        prop_assert_eq!(out.det_label == Label::Failure, out.det_prob >= 0.5);
        prop_assert!(out.reasoning.len() <= 12);
    }
}
