//! Independent oracles and random instance generators shared by the
//! integration tests. Nothing here calls the likelihood code under test.
#![allow(dead_code)]

use nalgebra::Matrix3;
use pointgmm::hgmm::{Gaussian, HgmmTree, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn3(rng: &mut ChaCha8Rng) -> Point3 {
    Point3::from_fn(|_, _| rng.sample(StandardNormal))
}

pub fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    a * a.transpose() * 0.3 + Matrix3::identity() * 0.05
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // make the group sum exact so tree validation is not at the mercy of rounding
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    w
}

pub fn random_mixture(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Gaussian> {
    random_weights(rng, n)
        .into_iter()
        .map(|w| Gaussian::new(w, randn3(rng) * spread, random_spd(rng)).unwrap())
        .collect()
}

pub fn random_tree(rng: &mut ChaCha8Rng, branching: &[usize]) -> HgmmTree {
    let mut levels = Vec::new();
    let mut parents = 1;
    for &b in branching {
        let mut level = Vec::new();
        for _ in 0..parents {
            level.extend(random_mixture(rng, b, 2.0));
        }
        parents *= b;
        levels.push(level);
    }
    HgmmTree::new(branching.to_vec(), levels).unwrap()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> PointCloud {
    PointCloud::new((0..n).map(|_| randn3(rng) * spread).collect()).unwrap()
}

/// Density through an explicit inverse and determinant.
pub fn naive_pdf(g: &Gaussian, x: &Point3) -> f64 {
    let cov = g.cov();
    let inv = cov.try_inverse().unwrap();
    let d = x - g.mean();
    let m = (d.transpose() * inv * d)[(0, 0)];
    (-0.5 * m).exp() / ((2.0 * std::f64::consts::PI).powi(3) * cov.determinant()).sqrt()
}

pub fn naive_log_pdf(g: &Gaussian, x: &Point3) -> f64 {
    let cov = g.cov();
    let inv = cov.try_inverse().unwrap();
    let d = x - g.mean();
    let m = (d.transpose() * inv * d)[(0, 0)];
    -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + m)
}

/// Σ_i log Σ_j π_j N(x_i | Θ_j) without any log-space tricks.
pub fn naive_mixture_ll(siblings: &[Gaussian], cloud: &PointCloud) -> f64 {
    cloud
        .points()
        .iter()
        .map(|x| siblings.iter().map(|g| g.weight() * naive_pdf(g, x)).sum::<f64>().ln())
        .sum()
}

/// Children of `node` at 0-based level `li - 1` (root when `li == 0`).
fn children(tree: &HgmmTree, li: usize, node: usize) -> std::ops::Range<usize> {
    let b = tree.branching()[li];
    node * b..(node + 1) * b
}

/// Walks one point down the tree, enumerating every sibling at each level.
pub fn path_of(tree: &HgmmTree, x: &Point3, level: usize) -> Vec<usize> {
    let mut path = Vec::new();
    let mut node = 0;
    for li in 0..level {
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for j in children(tree, li, node) {
            let g = &tree.levels()[li][j];
            let v = g.weight() * naive_pdf(g, x);
            if v > best_val {
                best_val = v;
                best = Some(j);
            }
        }
        node = best.unwrap();
        path.push(node);
    }
    path
}

/// Depth likelihood computed point by point from enumerated paths.
pub fn oracle_depth_ll(tree: &HgmmTree, cloud: &PointCloud, level: usize) -> f64 {
    let li = level - 1;
    cloud
        .points()
        .iter()
        .map(|x| {
            let parent = if li == 0 { 0 } else { *path_of(tree, x, li).last().unwrap() };
            children(tree, li, parent)
                .map(|j| {
                    let g = &tree.levels()[li][j];
                    g.weight() * naive_pdf(g, x)
                })
                .sum::<f64>()
                .ln()
        })
        .sum()
}

/// Product of weights along each leaf's ancestor path.
pub fn path_weights(tree: &HgmmTree) -> Vec<f64> {
    let depth = tree.depth();
    let leaves = tree.leaves().len();
    (0..leaves)
        .map(|leaf| {
            let mut idx = leaf;
            let mut w = 1.0;
            for li in (0..depth).rev() {
                w *= tree.levels()[li][idx].weight();
                idx /= tree.branching()[li];
            }
            w
        })
        .collect()
}

/// Small VAE so gradient checks and short training runs stay cheap.
pub fn tiny_vae_config(branching: Vec<usize>) -> pointgmm::model::VaeConfig {
    use pointgmm::decoder::DecoderConfig;
    use pointgmm::encoder::EncoderConfig;
    pointgmm::model::VaeConfig {
        encoder: EncoderConfig { widths: vec![6, 8], latent_dim: 4 },
        decoder: DecoderConfig { branching, latent_dim: 4, feature_dim: 6, d_k: 3, use_attention: true, hierarchical: true },
    }
}

pub fn tiny_reg_config(branching: Vec<usize>) -> pointgmm::model::RegConfig {
    use pointgmm::decoder::DecoderConfig;
    use pointgmm::encoder::RegEncoderConfig;
    pointgmm::model::RegConfig {
        encoder: RegEncoderConfig { widths: vec![6, 8], z_t_dim: 3, z_c_dim: 3 },
        decoder: DecoderConfig { branching, latent_dim: 6, feature_dim: 6, d_k: 3, use_attention: true, hierarchical: true },
        head_hidden: 5,
    }
}
