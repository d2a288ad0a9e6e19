use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::check::check_gradients;
use crate::nn::Graph;
use crate::synth::{simulate, SimConfig, SimOutput};

fn mini_sim(days: usize) -> SimOutput {
    let mut cfg = SimConfig {
        regions: 3,
        horizon_days: days,
        ..Default::default()
    };
    cfg.region_scale.truncate(3);
    cfg.types.truncate(2);
    cfg.departments.truncate(1);
    cfg.size_capacities(0.7);
    simulate(&cfg).unwrap()
}

fn mini_model_config(window: usize, d: usize) -> ModelConfig {
    let mut m = ModelConfig {
        window,
        hidden_width: 16,
        ..Default::default()
    };
    m.temporal.model_dim = d;
    m.temporal.heads = 2;
    m.inter.hidden = d;
    m.inter.heads = 2;
    m
}

fn mini_prepared(out: &SimOutput, window: usize) -> PreparedData {
    let cfg = DataConfig {
        window,
        ..Default::default()
    };
    prepare(&out.dataset(), &out.region_labels(), &HashMap::new(), &cfg).unwrap()
}

#[test]
fn embedding_dimension() {
    assert_eq!(embedding_dim(6, 32), 227);
    let e_inter = Tensor::filled(6, 32, 0.5);
    let e = assemble_embedding(&e_inter, &[1.0; 32], [1.0, 2.0, 3.0], Variant::Full).unwrap();
    assert_eq!(e.len(), 227);
    assert_eq!(&e[224..], &[1.0, 2.0, 3.0]);
    let v = assemble_embedding(&e_inter, &[1.0; 32], [1.0, 2.0, 3.0], Variant::NoVariation).unwrap();
    assert_eq!(&v[224..], &[0.0; 3]);
    assert_eq!(&v[..224], &e[..224]);
    let ct = assemble_embedding(&e_inter, &[1.0; 32], [1.0, 2.0, 3.0], Variant::NoCrossType).unwrap();
    assert!(ct[..192].iter().all(|x| *x == 0.0));
    assert!(assemble_embedding(&e_inter, &[1.0; 31], [0.0; 3], Variant::Full).is_err());
}

#[test]
fn variant_labels_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.label().parse::<Variant>().unwrap(), v);
    }
    assert_eq!("ct".parse::<Variant>().unwrap(), Variant::NoCrossType);
    assert!("-x".parse::<Variant>().is_err());
}

#[test]
fn zero_head_gives_softplus_of_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "h", 5, &[8], OutputActivation::Softplus, &mut rng);
    for id in mlp.params() {
        let v = store.value_mut(id);
        v.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(
        2,
        5,
        vec![1.0, -2.0, 3.0, 0.5, 9.0, 0.0, 0.0, 1.0, 1.0, 1.0],
    ));
    let y = mlp.forward(&mut g, &store, x).unwrap();
    for v in &g.value(y).data {
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn identity_head_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "h", 1, &[], OutputActivation::Identity, &mut rng);
    *store.value_mut(mlp.output.weight) = Tensor::identity(1);
    *store.value_mut(mlp.output.bias) = Tensor::zeros(1, 1);
    let mut g = Graph::new();
    let x = g.input(Tensor::row_vector(vec![3.0]));
    let y = mlp.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).data, vec![3.0]);
}

#[test]
fn non_finite_activation_names_the_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "h", 2, &[4], OutputActivation::Softplus, &mut rng);
    let mut g = Graph::new();
    let x = g.input(Tensor::row_vector(vec![f64::INFINITY, 1.0]));
    let err = mlp.forward(&mut g, &store, x).unwrap_err();
    assert!(err.to_string().contains("layer 0"), "{err}");
}

#[test]
fn head_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "h", 5, &[8], OutputActivation::Softplus, &mut rng);
    let x = Tensor::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
    let report = check_gradients(&mut store, &mlp.params(), 1e-4, |g, s| {
        let xi = g.input(x.clone());
        let y = mlp.forward(g, s, xi).unwrap();
        g.mse(y, vec![0.3, 1.2, 0.0, 2.0])
    });
    for c in report {
        assert!(c.passes(1e-3), "{}: {}", c.param, c.max_rel_error);
    }
}

fn random_batch(m: usize, n: usize, t: usize, days: usize, rng: &mut ChaCha8Rng) -> BatchInputs {
    let tokens = (0..n)
        .map(|_| {
            Tensor::from_vec(
                days * m * t,
                2,
                (0..days * m * t * 2).map(|_| rng.random_range(-1.5..1.5)).collect(),
            )
        })
        .collect();
    let slots: Vec<(usize, usize, usize)> = (0..7).map(|k| (k % days, k % m, k % n)).collect();
    let intra = Tensor::from_vec(
        slots.len(),
        3,
        (0..slots.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    BatchInputs {
        days,
        tokens,
        slots,
        intra,
        inter_mask: None,
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (m, n, t, d) = (3, 2, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = mini_model_config(t, d);
    for variant in [Variant::Full, Variant::NoCrossType] {
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &cfg, m, n, &mut rng).unwrap();
        let batch = random_batch(m, n, t, 2, &mut rng);
        let targets: Vec<f64> = (0..batch.slots.len()).map(|k| 0.2 * k as f64).collect();
        let params = net.params(variant);
        let report = check_gradients(&mut store, &params, 1e-5, |g, s| {
            let y = net.forward(g, s, &batch, variant).unwrap();
            g.mse(y, targets.clone())
        });
        assert_eq!(report.len(), params.len());
        for c in report {
            assert!(c.passes(1e-3), "{variant} {}: {}", c.param, c.max_rel_error);
        }
    }
}

#[test]
fn requests_on_one_cell_share_day_features() {
    let (m, n, t, d) = (3, 2, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let net = Network::new(&mut store, &mini_model_config(t, d), m, n, &mut rng).unwrap();
    let mut batch = random_batch(m, n, t, 1, &mut rng);
    batch.slots = vec![(0, 1, 1), (0, 1, 1)];
    batch.intra = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.9, -0.4, 2.0]);
    let mut g = Graph::new();
    let day = net.encode_days(&mut g, &store, &batch.tokens, 1, Variant::Full);
    let e = net.assemble(&mut g, day, 1, &batch.slots, &batch.intra, None, Variant::Full);
    let e = g.value(e);
    let k = n * d + d;
    assert_eq!(&e.row(0)[..k], &e.row(1)[..k]);
    assert_ne!(&e.row(0)[k..], &e.row(1)[k..]);
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        patience: epochs,
        ..Default::default()
    }
}

#[test]
fn constant_target_is_learned() {
    let mut out = mini_sim(60);
    for r in out.requests.iter_mut() {
        if r.service_time_days.is_some() {
            r.service_time_days = Some(2.0);
        }
    }
    let data = mini_prepared(&out, 7);
    let mut cfg = quick_train(50);
    cfg.validation_fraction = 0.0;
    // The logged loss is taken under dropout; fit without it.
    cfg.inter_dropout = 0.0;
    let (_, log) = train(&data, &mini_model_config(7, 8), &cfg).unwrap();
    let last = log.epochs.last().unwrap().train_loss;
    // Targets scale to 1.0, so the scaled loss is relative to the squared target.
    assert!(last < 1e-3, "final loss {last}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let out = mini_sim(60);
    let data = mini_prepared(&out, 7);
    let mcfg = mini_model_config(7, 8);
    let tcfg = quick_train(3);
    let (a, la) = train(&data, &mcfg, &tcfg).unwrap();
    let (b, lb) = train(&data, &mcfg, &tcfg).unwrap();
    assert_eq!(la, lb);
    let pa = predict_samples(&a, &data, &data.test).unwrap();
    let pb = predict_samples(&b, &data, &data.test).unwrap();
    assert_eq!(pa, pb);
    assert!(pa.iter().all(|v| *v >= 0.0));

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &a).unwrap();
    let c = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(c.manifest, a.manifest);
    assert_eq!(predict_samples(&c, &data, &data.test).unwrap(), pa);

    bytes[0] = b'X';
    assert!(matches!(read_checkpoint(bytes.as_slice()), Err(Error::Checkpoint(_))));
}

#[test]
fn predictor_matches_batch_path_and_handles_edge_cases() {
    let out = mini_sim(60);
    let data = mini_prepared(&out, 7);
    let (model, _) = train(&data, &mini_model_config(7, 8), &quick_train(2)).unwrap();
    let batch = predict_samples(&model, &data, &data.test).unwrap();
    let predictor = Predictor::new(model, data.panel.clone()).unwrap();
    let ds = out.dataset();
    for (s, want) in data.test.iter().zip(&batch).take(25) {
        let r = &ds.requests[s.request];
        let req = PredictRequest {
            created_at: r.created_at,
            request_type: r.request_type.clone(),
            region: r.region_id,
            workload: s.intra.workload,
        };
        let p = predictor.predict(&req).unwrap();
        assert!(!p.fallback);
        assert!(
            (p.service_time_days - want).abs() < 1e-9,
            "{} vs {want}",
            p.service_time_days
        );
        assert_eq!(p, predictor.predict(&req).unwrap());
    }

    let first = &ds.requests[0];
    let early = PredictRequest {
        created_at: first.created_at,
        request_type: first.request_type.clone(),
        region: first.region_id,
        workload: 2.0,
    };
    let p = predictor.predict(&early).unwrap();
    assert!(p.fallback);
    assert_eq!(p.service_time_days, p.components.mean);

    let pony = PredictRequest {
        request_type: "Pony Rides".into(),
        ..early
    };
    match predictor.predict(&pony) {
        Err(Error::UnknownType { known, .. }) => assert_eq!(known, ds.type_vocabulary),
        other => panic!("expected vocabulary error, got {other:?}"),
    }
}
