mod common;

use std::f64::consts::PI;

use common::{random_cloud, rng, tiny_reg_config, tiny_vae_config};
use pointgmm::autodiff::{Tape, Tensor, grad_check};
use pointgmm::decoder::{hgmm_loss, level_groups};
use pointgmm::encoder::kl_value;
use pointgmm::hgmm::{Point3, PointCloud};
use pointgmm::model::{RegModel, VaeModel};
use pointgmm::nn::{Bound, ParamStore};
use pointgmm::shapes::{Family, ProceduralShape, corpus, sample_shape};
use pointgmm::training::{
    Adam, AdamConfig, PairConfig, TrainConfig, cosine_loss, generation_loss, generation_step, l1_loss, shape_loss,
    synthesize_pair, train_registration, train_vae, transformation_loss,
};
use pointgmm::transform::{RigidTransform, wrap_angle};
use proptest::prelude::*;
use rand::Rng;

fn scalar_store(x: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("theta", Tensor::row(vec![x]));
    store
}

#[test]
fn adam_solves_quadratic() {
    let mut store = scalar_store(1.0);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let mut steps = 0;
    while store.tensors()[0].data()[0].abs() >= 1e-3 {
        let theta = store.tensors()[0].data()[0];
        adam.step(&mut store, &[Tensor::row(vec![2.0 * theta])], 1e-2).unwrap();
        steps += 1;
        assert!(steps <= 2000, "theta = {theta}");
    }
}

#[test]
fn adam_constant_gradient_decreases_monotonically() {
    let mut store = scalar_store(0.0);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let mut prev = 0.0;
    for _ in 0..500 {
        adam.step(&mut store, &[Tensor::row(vec![1.0])], 1e-3).unwrap();
        let now = store.tensors()[0].data()[0];
        assert!(now < prev);
        prev = now;
    }
    assert_eq!(adam.steps(), 500);
}

#[test]
fn schedules_are_exact() {
    let cfg = TrainConfig::default();
    for e in 0..2000 {
        assert_eq!(cfg.lr_at(e), 1e-4 * 0.5f64.powi((e / 200) as i32));
        assert_eq!(cfg.kl_weight_at(e), 0.98f64.powi((e / 100) as i32));
    }
}

fn arb_transform() -> impl Strategy<Value = RigidTransform> {
    (-10.0..10.0f64, prop::array::uniform3(-5.0..5.0f64))
        .prop_map(|(phi, v)| RigidTransform::new(phi, Point3::new(v[0], v[1], v[2])))
}

proptest! {
    #[test]
    fn transform_group_laws(a in arb_transform(), b in arb_transform(), x in prop::array::uniform3(-5.0..5.0f64)) {
        let x = Point3::new(x[0], x[1], x[2]);
        prop_assert!(a.phi > -PI && a.phi <= PI);
        let id = a.inverse().compose(&a);
        prop_assert!(wrap_angle(id.phi).abs() <= 1e-12);
        prop_assert!(id.v.norm() <= 1e-12);
        prop_assert!((id.apply(&x) - x).norm() <= 1e-12);
        let lhs = b.compose(&a).apply(&x);
        let rhs = b.apply(&a.apply(&x));
        prop_assert!((lhs - rhs).norm() <= 1e-12);
    }
}

fn cuboid() -> ProceduralShape {
    ProceduralShape::cuboid([1.0, 0.6, 0.4])
}

#[test]
fn full_coverage_without_rotation_returns_canonical_points() {
    let cfg = PairConfig { points: 200, max_rotation: 0.0, coverage: [1.0, 1.0], noise_sigma: 0.0, center: false };
    let pair = synthesize_pair(&cuboid(), &cfg, 3).unwrap();
    assert_eq!(pair.t, RigidTransform::identity());
    let mut idx = pair.indices.clone();
    idx.sort_unstable();
    assert_eq!(idx, (0..200).collect::<Vec<_>>());
    for (k, &i) in pair.indices.iter().enumerate() {
        assert_eq!(pair.x.points()[k], pair.x_c.points()[i]);
    }
}

#[test]
fn transformed_cloud_is_transform_of_canonical() {
    let cfg = TrainConfig::default().pair_config();
    for seed in 0..20 {
        let pair = synthesize_pair(&cuboid(), &cfg, seed).unwrap();
        for (c, t) in pair.x_c.points().iter().zip(pair.x_t.points()) {
            assert!((pair.t.apply(c) - t).norm() <= 1e-12);
        }
        // the partial input is centered before noise is added
        let clean = PointCloud::new(pair.indices.iter().map(|&i| pair.x_t.points()[i]).collect()).unwrap();
        assert!(clean.centroid().norm() <= 1e-12);
        assert!(pair.t.phi.abs() <= PI);
    }
}

#[test]
fn retained_fraction_tracks_requested_coverage() {
    let cfg = PairConfig { points: 512, max_rotation: PI, coverage: [0.3, 0.8], noise_sigma: 0.02, center: true };
    let shape = cuboid();
    let x_c = sample_shape(&shape, 512, 0).unwrap();
    for seed in 0..1000 {
        let pair = pointgmm::training::synthesize_from(x_c.clone(), &cfg, seed).unwrap();
        let f = pair.x.len() as f64 / 512.0;
        assert!((f - pair.coverage).abs() <= 0.02, "seed {seed}: {f} vs {}", pair.coverage);
        assert!((0.3..=0.8).contains(&pair.coverage));
        let mut idx = pair.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), pair.x.len());
    }
}

#[test]
fn supervision_terms_vanish_at_truth_and_peak_antipodally() {
    let mut r = rng(1);
    for _ in 0..50 {
        let phi: f64 = r.random_range(-PI..PI);
        let v = Point3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mut tape = Tape::new();
        let rot = tape.constant(Tensor::row(vec![phi.cos(), phi.sin()])).unwrap();
        let cos = cosine_loss(&mut tape, rot, phi).unwrap();
        assert!(tape.value(cos).item().abs() <= 1e-15);
        let flipped = tape.constant(Tensor::row(vec![(phi + PI).cos(), (phi + PI).sin()])).unwrap();
        let anti = cosine_loss(&mut tape, flipped, phi).unwrap();
        assert!((tape.value(anti).item() - 2.0).abs() <= 1e-12);
        let pred = tape.constant(Tensor::row(vec![v.x, v.y, v.z])).unwrap();
        let l1 = l1_loss(&mut tape, pred, &v).unwrap();
        assert_eq!(tape.value(l1).item(), 0.0);
    }
    assert_eq!(kl_value(&[0.0; 7], &[0.0; 7]), 0.0);
}

fn training_clouds(count: usize, points: usize) -> Vec<PointCloud> {
    corpus(&Family::ALL, count, 4).iter().enumerate().map(|(i, s)| sample_shape(s, points, i as u64).unwrap()).collect()
}

#[test]
fn zero_kl_weight_reduces_to_hgmm_loss() {
    let model = VaeModel::new(tiny_vae_config(vec![2, 3]), 2).unwrap();
    let cloud = &training_clouds(1, 40)[0];
    let eps = [0.3, -0.1, 1.2, 0.4];
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape).unwrap();
    let terms = generation_loss(&mut tape, &model, &p, cloud, Some(&eps), 0.0, None).unwrap();
    let lat = model.encoder.forward(&mut tape, &p, cloud, Some(&eps)).unwrap();
    let tree = model.decoder.forward(&mut tape, &p, lat.z).unwrap();
    let direct = hgmm_loss(&mut tape, &tree, cloud).unwrap();
    assert_eq!(tape.value(terms.total).item(), tape.value(direct.total).item());
}

#[test]
fn step_loss_equals_sum_of_independent_terms() {
    let mut model = VaeModel::new(tiny_vae_config(vec![2, 2]), 5).unwrap();
    let clouds = training_clouds(3, 30);
    let eps: Vec<Vec<f64>> = (0..3).map(|i| vec![0.1 * i as f64, -0.5, 0.7, 0.0]).collect();
    let kl_weight = 0.37;
    let mut want = 0.0;
    for (cloud, e) in clouds.iter().zip(&eps) {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape).unwrap();
        let lat = model.encoder.forward(&mut tape, &p, cloud, Some(e)).unwrap();
        let (mu, ls) = (tape.value(lat.z_mu).data().to_vec(), tape.value(lat.log_sigma).data().to_vec());
        let z = tape.value(lat.z).data().to_vec();
        let tree = model.decode(&z).unwrap();
        let mut nll = 0.0;
        for level in 1..=tree.depth() {
            nll -= pointgmm::hgmm::depth_log_likelihood(&tree, cloud, level).unwrap() / cloud.len() as f64;
        }
        want += (nll + kl_weight * kl_value(&mu, &ls)) / 3.0;
    }
    let batch: Vec<&PointCloud> = clouds.iter().collect();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let stats = generation_step(&mut model, &mut adam, &batch, &eps, kl_weight, 1e-3).unwrap();
    assert!((stats.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", stats.total);
    let parts: f64 = stats.hgmm.iter().sum::<f64>() + kl_weight * stats.kl;
    assert!((stats.total - parts).abs() <= 1e-12 * want.abs().max(1.0));
}

fn short_config() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 2, points: 32, lr: 1e-3, seed: 9, ..TrainConfig::default() }
}

#[test]
fn vae_training_traces_are_reproducible() {
    let clouds = training_clouds(4, 32);
    let run = || {
        let mut model = VaeModel::new(tiny_vae_config(vec![2, 2]), 1).unwrap();
        let mut seen = Vec::new();
        let records = train_vae(&mut model, &clouds, &short_config(), |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        (records, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    for r in &a {
        assert_eq!(r.kl_weight, 1.0);
        assert!(r.loss_kl.is_some() && r.loss_t.is_none());
    }
}

#[test]
fn registration_training_traces_are_reproducible() {
    let shapes = corpus(&[Family::Chair], 3, 2);
    let run = || {
        let mut model = RegModel::new(tiny_reg_config(vec![2, 2]), 1).unwrap();
        train_registration(&mut model, &shapes, &short_config(), |_| {}).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    for r in &a {
        assert!((r.loss_total - r.loss_t.unwrap() - r.loss_c.unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn registration_loss_gradients() {
    let model = RegModel::new(tiny_reg_config(vec![2, 2]), 11).unwrap();
    let cfg = PairConfig { points: 24, max_rotation: PI, coverage: [0.5, 0.6], noise_sigma: 0.02, center: true };
    let pair = synthesize_pair(&cuboid(), &cfg, 12).unwrap();
    let train = TrainConfig::default();
    let theta: Vec<Tensor> = model.params.tensors().to_vec();

    // partitions of the current forward values, held fixed under perturbation
    let groups = |zero_t: bool, target: &PointCloud| {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape).unwrap();
        let (lat, _) = model.encoder.forward(&mut tape, &p, &pair.x).unwrap();
        let z = model.latent(&mut tape, lat.z_t, lat.z_c, zero_t).unwrap();
        let tree = model.decoder.forward(&mut tape, &p, z).unwrap();
        level_groups(&tree.to_tree(&tape).unwrap(), target).unwrap()
    };
    let g_t = groups(false, &pair.x_t);
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(transformation_loss(tape, &model, &p, &pair, &train, Some(&g_t))?.total)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "transformation pass: {err}");

    let g_c = groups(true, &pair.x_c);
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(shape_loss(tape, &model, &p, &pair, Some(&g_c))?.total)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "shape pass: {err}");
}

#[test]
fn generation_loss_gradient() {
    let model = VaeModel::new(tiny_vae_config(vec![2, 2]), 13).unwrap();
    let cloud = random_cloud(&mut rng(14), 12, 0.8);
    let eps = [0.2, -0.4, 0.9, -1.1];
    let groups = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape).unwrap();
        let lat = model.encoder.forward(&mut tape, &p, &cloud, Some(&eps)).unwrap();
        let tree = model.decoder.forward(&mut tape, &p, lat.z).unwrap();
        level_groups(&tree.to_tree(&tape).unwrap(), &cloud).unwrap()
    };
    let theta: Vec<Tensor> = model.params.tensors().to_vec();
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(generation_loss(tape, &model, &p, &cloud, Some(&eps), 0.5, Some(&groups))?.total)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}
