use armor::diffcore::{checkpoint, kernels, losses, AdamW, CosineSchedule, Graph, LearningRates, ParamGroup, ParamStore, Tensor};
use armor::rng::{self, Rng};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn randn(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn store(seed: u64, rows: usize, d: usize) -> ParamStore {
    let mut r = rng::stream(seed, &[]);
    let mut s = ParamStore::new();
    let mut add = |name: &str, shape: Vec<usize>| {
        let n = shape.iter().product();
        s.add(name, Tensor::new(shape, randn(&mut r, n)).unwrap(), ParamGroup::Heads).unwrap();
    };
    add("x", vec![rows, d]);
    add("w", vec![d, d]);
    add("b", vec![d]);
    add("g", vec![d]);
    add("beta", vec![d]);
    add("table", vec![5, d]);
    add("q", vec![1, d]);
    add("out", vec![d, 3]);
    s
}

/// A composite of every tape op ending in weighted bce + nll.
fn loss(s: &ParamStore, rows: usize) -> (Graph, armor::diffcore::Var) {
    let mut g = Graph::new();
    let p = |g: &mut Graph, n: &str| g.param(s, s.id(n).unwrap());
    let x = p(&mut g, "x");
    let w = p(&mut g, "w");
    let b = p(&mut g, "b");
    let h = g.dense(x, w, b).unwrap();
    let h = g.gelu(h);
    let (gm, bt) = (p(&mut g, "g"), p(&mut g, "beta"));
    let h = g.layernorm(h, gm, bt).unwrap();
    let table = p(&mut g, "table");
    let e = g.embed(table, &[1, 4]).unwrap();
    let seq = g.concat_rows(&[e, h]).unwrap();
    let n = rows + 2;
    let a = g
        .attention(seq, seq, seq, vec![kernels::AttnSegment::causal(0..n, 0..n)], 2)
        .unwrap();
    let a = g.scale(a, 0.7);
    let r = g.add(a, seq).unwrap();
    let q = p(&mut g, "q");
    let c = g.cross_attention(q, r, r, 2).unwrap();
    let pooled = g.mean_pool(r, vec![0..2, 1..n]).unwrap();
    let both = g.concat_rows(&[c, pooled]).unwrap();
    let picked = g.gather_rows(both, vec![0, 2, 1]).unwrap();
    let out = p(&mut g, "out");
    let logits = g.matmul(picked, out).unwrap();
    let probs = g.softmax(logits);
    let nll = g.nll(probs, &[0, 2, 1], &[0.5, 1.0, 0.25]).unwrap();
    let z = g.gather_rows(logits, vec![1]).unwrap();
    let z = g.sum(z);
    let sig = g.sigmoid(z);
    let bce = g.bce(sig, &[1.0], &[0.8]).unwrap();
    let total = g.add(nll, bce).unwrap();
    (g, total)
}

fn value(s: &ParamStore, rows: usize) -> f64 {
    let (g, l) = loss(s, rows);
    g.value(l).data()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn composite_graph_matches_finite_differences(seed in any::<u64>(), rows in 1usize..4) {
        let d = 4;
        let mut s = store(seed, rows, d);
        let (g, l) = loss(&s, rows);
        g.backward(l).unwrap().accumulate_into(&mut s);
        let h = 1e-5;
        let ids: Vec<_> = s.ids().collect();
        for id in ids {
            for j in 0..s.value(id).len() {
                let orig = s.value(id).data()[j];
                s.value_mut(id).data_mut()[j] = orig + h;
                let up = value(&s, rows);
                s.value_mut(id).data_mut()[j] = orig - h;
                let down = value(&s, rows);
                s.value_mut(id).data_mut()[j] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = s.grad(id)[j];
                let err = (num - ana).abs();
                prop_assert!(
                    err <= 1e-7 || err / num.abs().max(ana.abs()) <= 1e-4,
                    "{}[{}]: analytic {} numeric {}", s.name(id), j, ana, num
                );
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = kernels::softmax_rows(&xs, xs.len());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn losses_are_non_negative(p in 0.0f64..=1.0, y in prop_oneof![Just(0.0), Just(1.0)]) {
        prop_assert!(losses::bce(p, y) >= 0.0);
    }
}

#[test]
fn linear_case_gradient_is_input() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::matrix(3, 2, vec![0.1; 6]).unwrap(), ParamGroup::Heads).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
    let wv = g.param(&s, w);
    let y = g.matmul(x, wv).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap().accumulate_into(&mut s);
    assert_eq!(s.grad(w), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
}

#[test]
fn zero_weight_branch_has_zero_gradient() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap(), ParamGroup::Heads).unwrap();
    let b = s.add("b", Tensor::matrix(1, 2, vec![0.7, 0.1]).unwrap(), ParamGroup::Heads).unwrap();
    let mut g = Graph::new();
    let (av, bv) = (g.param(&s, a), g.param(&s, b));
    let sa = g.sigmoid(av);
    let sb = g.sigmoid(bv);
    let both = g.concat_rows(&[sa, sb]).unwrap();
    let l = g.bce(both, &[1.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    g.backward(l).unwrap().accumulate_into(&mut s);
    assert_eq!(s.grad(b), &[0.0, 0.0]);
    assert!(s.grad(a).iter().all(|v| *v != 0.0));
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    assert!(matches!(g.backward(x), Err(armor::Error::Backward(_))));
    let mut other = Graph::new();
    other.constant(Tensor::scalar(1.0));
    let l = other.constant(Tensor::scalar(2.0));
    assert!(matches!(Graph::new().backward(l), Err(armor::Error::Backward(_))));
}

#[test]
fn loss_reference_values() {
    assert!((losses::bce(0.5, 1.0) - 0.693147).abs() < 1e-6);
    assert!(losses::bce(1.0 - 1e-12, 1.0) < 1e-11);
    let uniform = vec![vec![1.0 / 24.0; 24]; 5];
    let ntp = losses::ntp_loss(&uniform, &[0, 3, 7, 23, 11]).unwrap();
    assert!((ntp - 3.178054).abs() < 1e-6);
    assert!(losses::ntp_loss(&[], &[]).is_err());
    assert_eq!(kernels::softmax_rows(&[0.0, 0.0], 2), vec![0.5, 0.5]);
    assert_eq!(kernels::sigmoid(0.0), 0.5);
    assert!((kernels::bernoulli_entropy(0.5) - std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn single_key_cross_attention_returns_value() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(3, 4, vec![0.3, -1.0, 2.0, 0.1, 5.0, 0.0, -2.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let v = g.constant(Tensor::matrix(1, 4, vec![1.5, -0.5, 0.25, 2.0]).unwrap());
    let o = g.cross_attention(q, v, v, 2).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(o).row(r), &[1.5, -0.5, 0.25, 2.0]);
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let e = g.matmul(a, b).unwrap_err().to_string();
    assert!(e.contains("matmul") && e.contains("2x3"), "{e}");
}

fn one_param(value: f64, grad: f64) -> ParamStore {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::matrix(1, 1, vec![value]).unwrap(), ParamGroup::Heads).unwrap();
    s.grad_mut(id)[0] = grad;
    s
}

#[test]
fn adam_zero_gradient_no_decay_is_identity() {
    let mut s = one_param(0.37, 0.0);
    let mut opt = AdamW::default();
    opt.step(&mut s, &LearningRates { heads: 0.1, encoder: 0.1 }, 0.0).unwrap();
    assert_eq!(s.get("p").unwrap().data(), &[0.37]);
}

#[test]
fn adam_constant_gradient_moves_by_lr_against_sign() {
    // With a constant gradient the bias-corrected moments are g and g², so
    // every update is -lr·g/(|g| + eps).
    for g in [3.0, -0.02] {
        let mut s = one_param(1.0, g);
        let id = s.id("p").unwrap();
        let mut opt = AdamW::default();
        let lr = LearningRates { heads: 1e-3, encoder: 1e-3 };
        for _ in 0..50 {
            let before = s.value(id).data()[0];
            s.grad_mut(id)[0] = g;
            opt.step(&mut s, &lr, 0.0).unwrap();
            let step = s.value(id).data()[0] - before;
            assert!((step + 1e-3 * g.signum()).abs() < 1e-8, "step {step}");
        }
    }
}

#[test]
fn nan_gradient_names_parameter() {
    let mut s = one_param(1.0, f64::NAN);
    let e = AdamW::default().step(&mut s, &LearningRates { heads: 1.0, encoder: 1.0 }, 0.0).unwrap_err();
    assert!(matches!(e, armor::Error::NonFiniteGradient(ref n) if n == "p"));
}

#[test]
fn schedule_warmup_and_decay() {
    let s = CosineSchedule::new(100, 0.03);
    assert_eq!(s.warmup_steps, 3);
    assert_eq!(s.factor(0), 0.0);
    assert_eq!(s.factor(3), 1.0);
    assert!(s.factor(100).abs() < 1e-15);
    assert!((s.factor(3 + 97 / 2) - 0.5).abs() < 0.02);
}

#[test]
fn checkpoint_is_bit_exact() {
    let s = store(11, 2, 4);
    let bytes = checkpoint::encode(&s);
    assert_eq!(&bytes[..6], b"ARMOR1");
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.len(), s.len());
    for ((name, t), id) in back.iter().zip(s.ids()) {
        assert_eq!(name, s.name(id));
        assert_eq!(t, s.value(id));
    }
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
}
