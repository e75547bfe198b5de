use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::model::{Integration, ModelConfig};

fn cfg() -> TrainConfig {
    TrainConfig {
        warmup_steps: 5000,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let c = cfg();
    assert_eq!(lr_schedule(&c, 0), 3e-4);
    assert_eq!(lr_schedule(&c, 5000), 5e-4);
    assert_eq!(lr_schedule(&c, 20000), 2.5e-4);
    assert!((lr_schedule(&c, 2500) - 4e-4).abs() < 1e-18);
}

proptest! {
    #[test]
    fn lr_continuous_at_warmup(w in 1usize..100_000) {
        let c = TrainConfig { warmup_steps: w, ..TrainConfig::default() };
        let left = c.lr_start + (c.lr_peak - c.lr_start) * (w as f64 - 1e-9) / w as f64;
        prop_assert!((lr_schedule(&c, w) - c.lr_peak).abs() < 1e-15);
        prop_assert!((left - c.lr_peak).abs() < 1e-12);
        prop_assert!(lr_schedule(&c, w + 1) < c.lr_peak);
    }
}

fn logits(g: &mut Graph, rows: Vec<Vec<f64>>) -> Var {
    g.constant(Tensor::from_rows(&rows).unwrap()).unwrap()
}

#[test]
fn smoothed_ce_examples() {
    let mut g = Graph::new();
    let l = logits(&mut g, vec![vec![3f64.ln(), 0.0]]);
    let v = label_smoothed_ce(&mut g, l, &[0], 0.1, None).unwrap();
    let want = 0.9 * (4.0f64 / 3.0).ln() + 0.1 * (((4.0f64 / 3.0).ln() + 4f64.ln()) / 2.0);
    assert!((g.value(v).item() - want).abs() < 1e-12);

    let u = logits(&mut g, vec![vec![0.7; 6]; 3]);
    for eps in [0.0, 0.1, 0.5] {
        let v = label_smoothed_ce(&mut g, u, &[1, 2, 5], eps, None).unwrap();
        assert!((g.value(v).item() - 6f64.ln()).abs() < 1e-12);
    }

    let l = logits(&mut g, vec![vec![1.0, 2.0, 0.5], vec![0.1, -1.0, 0.3]]);
    let v = label_smoothed_ce(&mut g, l, &[1, 2], 0.0, None).unwrap();
    let nll = |r: [f64; 3], t: usize| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[t];
    let want = (nll([1.0, 2.0, 0.5], 1) + nll([0.1, -1.0, 0.3], 2)) / 2.0;
    assert!((g.value(v).item() - want).abs() < 1e-12);
}

#[test]
fn padding_is_excluded() {
    let mut g = Graph::new();
    let l = logits(&mut g, vec![vec![1.0, 2.0, 0.5, 0.0], vec![0.3, 0.1, -1.0, 2.0]]);
    let one = logits(&mut g, vec![vec![1.0, 2.0, 0.5, 0.0]]);
    let a = label_smoothed_ce(&mut g, l, &[1, 0], 0.1, Some(&[true, false])).unwrap();
    let b = label_smoothed_ce(&mut g, one, &[1], 0.1, Some(&[true])).unwrap();
    assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-14);
    assert!(matches!(label_smoothed_ce(&mut g, l, &[0, 0], 0.1, Some(&[false, false])), Err(Error::Usage(_))));
}

#[test]
fn gate_penalty_examples() {
    let mut g = Graph::new();
    let loss = g.constant(Tensor::scalar(1.5)).unwrap();
    let ones: Vec<Var> = (0..2).map(|_| g.constant(Tensor::full(&[3, 4], 1.0)).unwrap()).collect();
    let l = gate_regularized_loss(&mut g, loss, &ones, 0.04, ContextMode::Text).unwrap();
    assert_eq!(g.value(l).item(), 1.5);

    let halves: Vec<Var> = (0..4).map(|_| g.constant(Tensor::full(&[5, 8], 0.5)).unwrap()).collect();
    let l = gate_regularized_loss(&mut g, loss, &halves, 0.0, ContextMode::Text).unwrap();
    assert_eq!(g.value(l).item(), 1.5);
    let l = gate_regularized_loss(&mut g, loss, &halves, 0.04, ContextMode::Text).unwrap();
    assert!((g.value(l).item() - 1.5 - 0.08).abs() < 1e-15);

    assert!(matches!(
        gate_regularized_loss(&mut g, loss, &[], 0.04, ContextMode::None),
        Err(Error::Usage(_))
    ));
    assert!(gate_regularized_loss(&mut g, loss, &[], 0.0, ContextMode::None).is_ok());
}

proptest! {
    #[test]
    fn regularized_loss_never_below_plain(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let mut r = rng::seeded(seed);
        let mut g = Graph::new();
        let loss = g.constant(Tensor::scalar(r.gen_range(0.0..5.0))).unwrap();
        let lams: Vec<Var> = (0..2)
            .map(|_| {
                let z = Tensor::new(vec![2, 3], (0..6).map(|_| r.gen_range(-4.0..4.0)).collect()).unwrap();
                let z = g.constant(z).unwrap();
                g.sigmoid(z).unwrap()
            })
            .collect();
        let l = gate_regularized_loss(&mut g, loss, &lams, alpha, ContextMode::Text).unwrap();
        prop_assert!(g.value(l).item() >= g.value(loss).item());
    }
}

#[test]
fn penalty_gradient_pushes_every_gate_up() {
    let mut r = rng::seeded(3);
    let mut g = Graph::new();
    let z = Tensor::new(vec![4, 6], (0..24).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
    let zv = g.leaf(z.clone(), true).unwrap();
    let lam = g.sigmoid(zv).unwrap();
    let before = g.value(lam).clone();
    let zero = g.constant(Tensor::scalar(0.0)).unwrap();
    let l = gate_regularized_loss(&mut g, zero, &[lam], 0.04, ContextMode::Text).unwrap();
    let grad = g.backward(l).unwrap().wrt(&g, zv);
    assert!(grad.data().iter().all(|&d| d < 0.0));
    let stepped: Vec<f64> = z.data().iter().zip(grad.data()).map(|(a, d)| a - 10.0 * d).collect();
    for (s, b) in stepped.iter().zip(before.data()) {
        assert!(1.0 / (1.0 + (-s).exp()) > *b);
    }
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
    s
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut s = store_with(&[1.0]);
    s.get_mut(ParamId(0)).grad = Tensor::new(vec![1], vec![1.0]).unwrap();
    let mut adam = Adam::new();
    adam.step(&mut s, 0.1).unwrap();
    let m = 0.1;
    let v = 0.02 * 1.0;
    let want = 1.0 - 0.1 * (m / 0.1) / ((v / (1.0f64 - 0.98)).sqrt() + 1e-9);
    assert!((s.get(ParamId(0)).value.data()[0] - want).abs() < 1e-12);
    assert!((s.get(ParamId(0)).value.data()[0] - 0.9).abs() < 1e-8);

    let mut z = store_with(&[0.3, -2.0]);
    let mut adam = Adam::new();
    for _ in 0..5 {
        adam.step(&mut z, 0.1).unwrap();
    }
    assert_eq!(z.get(ParamId(0)).value.data(), &[0.3, -2.0]);
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut s = store_with(&[1.0, 2.0]);
    s.get_mut(ParamId(0)).grad = Tensor::new(vec![2], vec![0.5, f64::NAN]).unwrap();
    let err = Adam::new().step(&mut s, 0.1).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains('p')));
    assert_eq!(s.get(ParamId(0)).value.data(), &[1.0, 2.0]);
}

fn tiny_model(mode: ContextMode) -> Model {
    Model::new(
        ModelConfig {
            encoder_layers: 1,
            decoder_layers: 2,
            context_layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            conv_channels: 2,
            vocab_size: 8,
            context_mode: mode,
            integration: Integration::Parallel,
            dropout: 0.1,
            ..ModelConfig::default()
        },
        5,
    )
    .unwrap()
}

fn samples(n: usize, seed: u64) -> Vec<TrainSample> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|i| {
            let frames = r.gen_range(8..20);
            let f = FeatureMatrix::new(frames, (0..frames * 40).map(|_| r.gen_range(-1.0..1.0)).collect(), "s");
            TrainSample {
                key: format!("s{i}"),
                features: Arc::new(f),
                target: (0..r.gen_range(1..4)).map(|_| r.gen_range(4..8)).collect(),
                ctx_text: (0..r.gen_range(0..3)).map(|_| r.gen_range(4..8)).collect(),
                ctx_audio: None,
                duration_s: frames as f64 / 100.0,
            }
        })
        .collect()
}

#[test]
fn make_batches_filters_and_is_seeded() {
    let mut data = samples(10, 1);
    let c = TrainConfig { batch_pairs: 3, ..TrainConfig::default() };
    let b = make_batches(&data, &c, &mut rng::seeded(4)).unwrap();
    assert_eq!(b.dropped, 0);
    assert_eq!(b.batches.iter().map(Vec::len).sum::<usize>(), 10);
    assert_eq!(b.batches.len(), 4);
    assert_eq!(b, make_batches(&data, &c, &mut rng::seeded(4)).unwrap());

    data[2].duration_s = 20.5;
    data[5].duration_s = 20.0;
    let b = make_batches(&data, &c, &mut rng::seeded(4)).unwrap();
    assert_eq!(b.dropped, 1);
    assert!(b.batches.iter().flatten().all(|&i| i != 2));
    assert!(b.batches.iter().flatten().any(|&i| i == 5));

    for s in &mut data {
        s.duration_s = 30.0;
    }
    assert!(matches!(make_batches(&data, &c, &mut rng::seeded(4)), Err(Error::Usage(_))));
}

#[test]
fn base_model_rejects_alpha() {
    let mut m = tiny_model(ContextMode::None);
    assert!(matches!(Trainer::new(&mut m, TrainConfig::default()), Err(Error::Usage(_))));
    assert!(Trainer::new(&mut m, TrainConfig { alpha: 0.0, ..TrainConfig::default() }).is_ok());
}

#[test]
fn frozen_encoder_stays_bitwise_equal() {
    let data = samples(12, 2);
    let mut m = tiny_model(ContextMode::Text);
    let before = m.clone();
    let c = TrainConfig { batch_pairs: 4, steps: 100, warmup_steps: 10, freeze_encoder: true, ..TrainConfig::default() };
    let mut t = Trainer::new(&mut m, c).unwrap();
    t.train_step(&mut m, &data).unwrap();
    let dec = "dec.l0.ff1.w";
    assert_ne!(m.params.by_name(dec).unwrap().value, before.params.by_name(dec).unwrap().value);
    t.run(&mut m, &data, |_| {}).unwrap();
    for (id, p) in m.params.iter() {
        if p.name.starts_with("enc.") {
            assert_eq!(p.value, before.params.get(id).value, "{}", p.name);
            assert!(!t.adam.has_state(id));
        } else {
            assert!(t.adam.has_state(id), "{}", p.name);
        }
    }
}

#[test]
fn training_is_deterministic_and_logs_gates() {
    let data = samples(16, 3);
    let run = || {
        let mut m = tiny_model(ContextMode::Text);
        let c = TrainConfig { batch_pairs: 4, steps: 50, warmup_steps: 10, seed: 9, ..TrainConfig::default() };
        let mut t = Trainer::new(&mut m, c).unwrap();
        t.run(&mut m, &data, |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.len(), 50);
    for l in &a {
        // a batch whose contexts are all empty records no gates
        assert!(matches!(l.mean_lambda_per_layer.len(), 0 | 2));
        assert!(l.loss_prime >= l.loss);
        assert!(l.mean_lambda_per_layer.iter().all(|&x| x > 0.0 && x < 1.0));
    }
    assert!(a.last().unwrap().loss < a[0].loss);
    let json = serde_json::to_string(&a[0]).unwrap();
    for key in ["\"step\"", "\"lr\"", "\"L\"", "\"L_prime\"", "\"mean_lambda_per_layer\""] {
        assert!(json.contains(key), "{json}");
    }
}

#[test]
fn batch_loss_matches_monolithic_reduction() {
    // per-sample graphs summed equal the token-averaged loss of the batch
    let data = samples(3, 4);
    let mut m = tiny_model(ContextMode::Text);
    m.config.dropout = 0.0;
    let c = TrainConfig { alpha: 0.04, spec_augment: None, ..TrainConfig::default() };
    let (l, lp) = validation_loss(&m, &data, &c).unwrap();
    let mut ce = 0.0;
    let mut pen_num = 0.0;
    let mut tokens = 0.0;
    for s in &data {
        let mut fwd = Fwd::eval(&m.params);
        let out = m.forward(&mut fwd, &s.features, s.context(ContextMode::Text), &s.decoder_input()).unwrap();
        let v = fwd.g.smoothed_cross_entropy(out.logits, &s.decoder_output(), 0.1).unwrap();
        ce += fwd.g.value(v).item();
        tokens += s.decoder_output().len() as f64;
        for lam in &out.lambdas {
            pen_num += fwd.g.value(*lam).data().iter().map(|x| 1.0 - x).sum::<f64>() / 8.0;
        }
    }
    assert!((l - ce / tokens).abs() < 1e-12);
    assert!((lp - l - 0.04 * pen_num / tokens).abs() < 1e-12);
}
