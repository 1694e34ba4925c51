mod common;

use common::{random_cloud, rng};
use pointgmm::autodiff::{Tape, Tensor, grad_check};
use pointgmm::encoder::{
    EncoderConfig, PointNet, RegEncoder, RegEncoderConfig, VaeEncoder, invariant_features, kl_divergence, kl_value,
};
use pointgmm::hgmm::{Point3, PointCloud};
use pointgmm::nn::{Bound, ParamStore};
use pointgmm::transform::rotation_z;
use rand::Rng;
use rand::seq::SliceRandom;

fn small_vae(seed: u64) -> (VaeEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = VaeEncoder::new(EncoderConfig { widths: vec![5, 6], latent_dim: 3 }, &mut store, "e", &mut rng(seed))
        .unwrap();
    (enc, store)
}

fn pointnet_output(net: &PointNet, store: &ParamStore, cloud: &PointCloud) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let data = cloud.points().iter().flat_map(|q| [q.x, q.y, q.z]).collect();
    let x = tape.constant(Tensor::matrix(cloud.len(), 3, data).unwrap()).unwrap();
    let out = net.forward(&mut tape, &p, x).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn permutation_gives_bit_identical_encodings() {
    let (enc, store) = small_vae(1);
    let mut r = rng(2);
    let cloud = random_cloud(&mut r, 50, 1.0);
    let mut pts = cloud.points().to_vec();
    pts.shuffle(&mut r);
    let shuffled = PointCloud::new(pts).unwrap();
    assert_eq!(pointnet_output(enc.pointnet(), &store, &cloud), pointnet_output(enc.pointnet(), &store, &shuffled));
    assert_eq!(enc.encode_mean(&store, &cloud).unwrap(), enc.encode_mean(&store, &shuffled).unwrap());

    let mut rs = ParamStore::new();
    let reg = RegEncoder::new(RegEncoderConfig { widths: vec![4, 5], z_t_dim: 3, z_c_dim: 2 }, &mut rs, "r", &mut r)
        .unwrap();
    assert_eq!(reg.encode(&rs, &cloud).unwrap(), reg.encode(&rs, &shuffled).unwrap());
}

#[test]
fn repeated_point_encodes_like_single_point() {
    let (enc, store) = small_vae(3);
    let one = PointCloud::from_rows(&[[0.2, -0.4, 0.9]]).unwrap();
    let many = PointCloud::from_rows(&[[0.2, -0.4, 0.9]; 17]).unwrap();
    assert_eq!(pointnet_output(enc.pointnet(), &store, &one), pointnet_output(enc.pointnet(), &store, &many));
}

#[test]
fn pointnet_gradient_on_eight_points() {
    let (enc, store) = small_vae(4);
    let mut r = rng(5);
    let cloud = random_cloud(&mut r, 8, 1.0);
    let data: Vec<f64> = cloud.points().iter().flat_map(|q| [q.x, q.y, q.z]).collect();
    let mix: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let theta: Vec<Tensor> = store.tensors().to_vec();
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = tape.constant(Tensor::matrix(8, 3, data.clone())?)?;
            let f = enc.pointnet().forward(tape, &p, x)?;
            let w = tape.constant(Tensor::row(mix.clone()))?;
            let prod = tape.mul(f, w)?;
            tape.sum(prod)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn reparameterized_latent_and_kl_gradients() {
    let (enc, store) = small_vae(6);
    let mut r = rng(7);
    let cloud = random_cloud(&mut r, 10, 1.0);
    let eps = [0.7, -1.3, 0.2];
    let mix = [0.5, -2.0, 1.5];
    let theta: Vec<Tensor> = store.tensors().to_vec();
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let lat = enc.forward(tape, &p, &cloud, Some(&eps))?;
            let w = tape.constant(Tensor::row(mix.to_vec()))?;
            let zw = tape.mul(lat.z, w)?;
            let zw = tape.sum(zw)?;
            let kl = kl_divergence(tape, lat.z_mu, lat.log_sigma)?;
            tape.add(zw, kl)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");

    // dz/dσ = ε through the reparameterization, by central differences on σ
    let sigma = [0.4, 1.1, 2.5];
    let mu = [0.1, 0.2, -0.3];
    let z = |s: &[f64]| -> Vec<f64> { (0..3).map(|i| mu[i] + eps[i] * s[i]).collect() };
    for i in 0..3 {
        let mut up = sigma;
        let mut down = sigma;
        up[i] += 1e-6;
        down[i] -= 1e-6;
        let fd = (z(&up)[i] - z(&down)[i]) / 2e-6;
        assert!((fd - eps[i]).abs() < 1e-8);
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let lat = enc.forward(&mut tape, &p, &cloud, Some(&eps)).unwrap();
    let (m, ls, zz) = (tape.value(lat.z_mu).data(), tape.value(lat.log_sigma).data(), tape.value(lat.z).data());
    for i in 0..3 {
        assert!((zz[i] - (m[i] + eps[i] * ls[i].exp())).abs() < 1e-15);
    }
}

#[test]
fn kl_matches_textbook_form() {
    let mut r = rng(8);
    for _ in 0..20 {
        let mu: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let ls: Vec<f64> = (0..5).map(|_| r.random_range(-1.5..1.5)).collect();
        // Σ [ln(1/σ) + (σ² + μ²)/2 − 1/2]
        let want: f64 = mu.iter().zip(&ls).map(|(m, l)| -l + ((2.0 * l).exp() + m * m) / 2.0 - 0.5).sum();
        assert!((kl_value(&mu, &ls) - want).abs() < 1e-12);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(mu.clone())).unwrap();
        let b = tape.constant(Tensor::row(ls.clone())).unwrap();
        let kl = kl_divergence(&mut tape, a, b).unwrap();
        assert!((tape.value(kl).item() - want).abs() < 1e-12);
    }
}

#[test]
fn invariant_features_are_rotation_invariant() {
    let mut r = rng(9);
    for _ in 0..20 {
        let cloud = random_cloud(&mut r, 30, 2.0);
        let rot = rotation_z(r.random_range(-3.2..3.2));
        let rotated: Vec<Point3> = cloud.points().iter().map(|p| rot * p).collect();
        let a = invariant_features(cloud.points());
        let b = invariant_features(&rotated);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn shape_code_ignores_z_rotation_and_default_sizes() {
    let mut store = ParamStore::new();
    let enc = RegEncoder::new(RegEncoderConfig::default(), &mut store, "r", &mut rng(10)).unwrap();
    let mut r = rng(11);
    let cloud = random_cloud(&mut r, 64, 1.0).translated(&Point3::new(0.5, -0.2, 0.3));
    let rot = rotation_z(1.1);
    let rotated = PointCloud::new(cloud.points().iter().map(|p| rot * p).collect()).unwrap();
    let (zt_a, zc_a) = enc.encode(&store, &cloud).unwrap();
    let (zt_b, zc_b) = enc.encode(&store, &rotated).unwrap();
    assert_eq!((zt_a.len(), zc_a.len()), (128, 256));
    let dc = zc_a.iter().zip(&zc_b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dc <= 1e-9, "{dc}");
    let dt = zt_a.iter().zip(&zt_b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dt > 1e-6);
}
