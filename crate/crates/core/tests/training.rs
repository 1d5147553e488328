use pignn::autodiff::{Tape, Tensor};
use pignn::eval::rollout;
use pignn::loss::{apply_bc_var, build_node_features, initial_field, pde_residual, Discretization, Observation, ObservationSet};
use pignn::mesh::{generate_mesh, DomainRect};
use pignn::model::{Model, ModelConfig};
use pignn::pde::{heat_inverse_spec, PdeKind, PdeSpec};
use pignn::stencil::DegreePolicy;
use pignn::train::{Checkpoint, TrainConfig, TrainError, Trainer};

fn disc(density: usize) -> Discretization {
    let mesh = generate_mesh(&DomainRect::unit_square(density, 0.2, 5)).unwrap();
    Discretization::new(&mesh, DegreePolicy::Auto).unwrap()
}

fn small(kind: PdeKind) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        steps: 3,
        dt: 1e-3,
        model: ModelConfig { latent: 8, hidden: vec![8, 8], blocks: 1 },
        zero_decoder_output: false,
        seed: 11,
        ..TrainConfig::for_pde(kind)
    }
}

fn rel_close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * scale)
}

/// Gradient of one step's physics loss at a fixed input state, on a fresh tape
/// running the full step (edge encoder included).
fn single_step_grads(model: &Model, spec: &PdeSpec, d: &Discretization, u: &Tensor, t: f64, dt: f64, scale: f64) -> (Vec<Tensor>, Tensor) {
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, true);
    let net = model.bind(&vars).unwrap();
    let feats = build_node_features(u, d.kinds(), &d.coords, spec, t, &model.layout).unwrap();
    let fv = tape.constant(feats);
    let uv = tape.constant(u.clone());
    let raw = net.step(&mut tape, &d.graph, uv, fv).unwrap();
    let next = apply_bc_var(&mut tape, raw, spec, t + dt, d).unwrap();
    let r = pde_residual(&mut tape, u, next, dt, t, d, spec, None).unwrap();
    let sq = tape.square(r).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let loss = tape.scale(s, scale).unwrap();
    let g = tape.backward(loss).unwrap();
    (vars.iter().map(|v| g.wrt(*v)).collect(), tape.detach(next))
}

#[test]
fn rollout_gradient_is_sum_of_isolated_step_gradients() {
    let d = disc(2);
    assert_eq!(d.node_count(), 9);
    let spec = PdeSpec::default_for(PdeKind::Heat);
    let cfg = TrainConfig { steps: 2, ..small(PdeKind::Heat) };
    let t = Trainer::new(spec.clone(), &d, cfg.clone(), None).unwrap();
    let eval = t.evaluate().unwrap();

    let scale = 1.0 / (2 * d.interior.len()) as f64;
    let u0 = initial_field(&spec, &d, 0.0);
    let (g0, u1) = single_step_grads(&t.model, &spec, &d, &u0, 0.0, cfg.dt, scale);
    let (g1, _) = single_step_grads(&t.model, &spec, &d, &u1, cfg.dt, cfg.dt, scale);
    for (i, acc) in eval.grads.iter().enumerate() {
        let mut sum = g0[i].clone();
        sum.axpy(1.0, &g1[i]);
        assert!(rel_close(acc, &sum, 1e-10), "parameter {i}");
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let d = disc(4);
    let spec = PdeSpec::default_for(PdeKind::Heat);
    let run = || {
        let mut t = Trainer::new(spec.clone(), &d, small(PdeKind::Heat), None).unwrap();
        t.train().unwrap();
        (t.history, t.model.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn one_update_per_epoch_and_parameters_frozen_in_forward_problems() {
    let d = disc(4);
    let spec = PdeSpec::default_for(PdeKind::Burgers);
    let mut t = Trainer::new(spec.clone(), &d, TrainConfig { steps: 5, ..small(PdeKind::Burgers) }, None).unwrap();
    t.train().unwrap();
    assert_eq!(t.adam.step, 4);
    assert_eq!(t.history.len(), 4);
    assert_eq!(t.spec, spec);

    // A forward run on the inverse problem keeps k fixed.
    let inv = heat_inverse_spec(2.5);
    let mut t = Trainer::new(inv, &d, small(PdeKind::HeatInverse), None).unwrap();
    t.train().unwrap();
    assert_eq!(t.lambda(), Some(2.5));
    assert!(t.history.iter().all(|r| r.lambda.is_none() && r.gamma == 0.0));
}

#[test]
fn best_snapshot_holds_lowest_loss_parameters() {
    let d = disc(4);
    let spec = PdeSpec::default_for(PdeKind::Heat);
    let mut t = Trainer::new(spec, &d, TrainConfig { epochs: 6, ..small(PdeKind::Heat) }, None).unwrap();
    let mut params_before = Vec::new();
    while t.epoch < 6 {
        params_before.push(t.model.params.clone());
        t.run_epoch().unwrap();
    }
    let best = t.best.clone().unwrap();
    let min = t.history.iter().map(|r| r.loss_total).fold(f64::INFINITY, f64::min);
    assert_eq!(best.loss, min);
    assert_eq!(best.params, params_before[best.epoch]);
    assert_eq!(t.best_model().params, best.params);
}

#[test]
fn resumed_training_matches_continuous_training() {
    let d = disc(4);
    let spec = heat_inverse_spec(6.0);
    let truth = heat_inverse_spec(4.0);
    let cfg = TrainConfig { epochs: 5, ..small(PdeKind::HeatInverse) };
    let obs = pignn::train::sample_observations(&truth, &d, 5, cfg.steps, cfg.dt, 0.0, 2).unwrap();

    let mut full = Trainer::new(spec.clone(), &d, cfg.clone(), Some(&obs)).unwrap();
    full.train().unwrap();

    let mut first = Trainer::new(spec, &d, cfg, Some(&obs)).unwrap();
    for _ in 0..3 {
        first.run_epoch().unwrap();
    }
    let bytes = first.to_checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let contents = ck.contents().unwrap();
    assert_eq!(contents.mesh, d.mesh);
    let mut resumed = Trainer::from_checkpoint(&contents, &d, Some(&obs)).unwrap();
    resumed.train().unwrap();

    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.lambda(), full.lambda());
    assert_eq!(resumed.adam, full.adam);
}

#[test]
fn checkpoint_file_roundtrip_is_byte_identical() {
    let d = disc(3);
    let mut t = Trainer::new(PdeSpec::default_for(PdeKind::Heat), &d, small(PdeKind::Heat), None).unwrap();
    t.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    t.to_checkpoint().save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut bytes = std::fs::read(&a).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TrainError::Checkpoint(_))));
    assert!(Checkpoint::load(dir.path().join("missing.bin")).is_err());
}

#[test]
fn self_generated_observations_leave_k_unchanged() {
    let d = disc(4);
    let spec = heat_inverse_spec(3.0);
    let cfg = TrainConfig { gamma_start: 1.0, gamma_end: 1.0, epochs: 3, ..small(PdeKind::HeatInverse) };
    let model = Model::init(pignn::loss::layout_for(&spec, true), cfg.model.clone(), cfg.seed).unwrap();
    let series = rollout(&model, &spec, &d, cfg.steps, cfg.dt, 0.0).unwrap();
    let mut records = Vec::new();
    for (k, f) in series.fields.iter().enumerate().skip(1) {
        for &i in d.interior.iter().take(6) {
            records.push(Observation { x: d.coords[i], t: series.time(k), values: f.row(i).to_vec() });
        }
    }
    let obs = ObservationSet { records };
    let mut t = Trainer::with_model(spec, &d, cfg, model, Some(&obs)).unwrap();
    let first = t.run_epoch().unwrap();
    assert!(first.loss_total < 1e-20, "{}", first.loss_total);
    assert_eq!(t.lambda(), Some(3.0));
}

#[test]
fn inverse_training_records_gamma_schedule_and_k() {
    let d = disc(4);
    let cfg = TrainConfig { epochs: 6, ..small(PdeKind::HeatInverse) };
    let obs = pignn::train::sample_observations(&heat_inverse_spec(4.0), &d, 5, cfg.steps, cfg.dt, 0.0, 1).unwrap();
    let mut t = Trainer::new(heat_inverse_spec(8.0), &d, cfg, Some(&obs)).unwrap();
    t.train().unwrap();
    let g: Vec<f64> = t.history.iter().map(|r| r.gamma).collect();
    assert_eq!(g[0], 0.9);
    assert!((g[3] - 0.5).abs() < 1e-12 && (g[5] - 0.5).abs() < 1e-12);
    assert!(t.history.iter().all(|r| r.lambda.is_some()));
    assert_ne!(t.lambda(), Some(8.0));
}

#[test]
fn observation_sampling_rules() {
    let d = disc(4);
    let obs = pignn::train::sample_observations(&heat_inverse_spec(4.0), &d, 5, 3, 0.01, 0.0, 9).unwrap();
    assert_eq!(obs.len(), 15);
    for o in &obs.records {
        let expected = (4.0 * o.t * o.x[0] + o.x[1]).cos();
        assert!((o.values[0] - expected).abs() < 1e-15);
        assert!(o.t > 0.0);
        assert!(d.interior.iter().any(|&i| d.coords[i] == o.x));
    }
    let again = pignn::train::sample_observations(&heat_inverse_spec(4.0), &d, 5, 3, 0.01, 0.0, 9).unwrap();
    assert_eq!(obs, again);
    assert!(pignn::train::sample_observations(&heat_inverse_spec(4.0), &d, 0, 3, 0.01, 0.0, 9).is_err());
    assert!(pignn::train::sample_observations(&PdeSpec::default_for(PdeKind::FitzHughNagumo), &d, 2, 3, 0.01, 0.0, 9).is_err());
}

#[test]
fn divergent_training_reports_epoch_and_step() {
    let d = disc(4);
    let spec = PdeSpec::default_for(PdeKind::Heat);
    let mut t = Trainer::new(spec, &d, small(PdeKind::Heat), None).unwrap();
    t.model.params[0] = Tensor::filled(t.model.params[0].rows(), t.model.params[0].cols(), f64::NAN);
    match t.run_epoch() {
        Err(TrainError::NonFiniteLoss { epoch: 0, step: 0 }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("NaN parameters must abort"),
    }
}
