//! Hierarchical hard EM.
//!
//! Each level is fitted top-down: the root mixture on the whole cloud, then
//! every node's children on the points the current tree routes to it.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgmm::{COV_FLOOR, Gaussian, HgmmTree, Point3, PointCloud, hard_partition};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub branching: Vec<usize>,
    pub max_iters: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { branching: vec![8, 4, 4, 4], max_iters: 50, tol: 1e-6, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(Error::Usage("branching must be non-empty with positive fan-outs".into()));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::Usage("max_iters must be at least 1 and tol positive".into()));
        }
        Ok(())
    }
}

/// One fitted mixture and the hard-assignment objective after every E-step.
#[derive(Clone, Debug)]
pub struct LevelFit {
    pub components: Vec<Gaussian>,
    pub objective: Vec<f64>,
}

/// Fits `fan_out` Gaussians to `points` by hard EM.
///
/// With fewer points than `fan_out` only that many components are fitted;
/// the rest are zero-weight copies of the first. If an iteration would
/// lower the objective (possible only through the covariance regularizer)
/// the previous estimate is kept and fitting stops.
pub fn fit_level(points: &[Point3], fan_out: usize, max_iters: usize, tol: f64, seed: u64) -> Result<LevelFit> {
    if points.is_empty() {
        return Err(Error::Domain("cannot fit a mixture to no points".into()));
    }
    if fan_out == 0 {
        return Err(Error::Usage("fan-out must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = fan_out.min(points.len());
    let means = kmeanspp(points, k, &mut rng);
    let assign: Vec<usize> = points
        .iter()
        .map(|p| argmin(means.iter().map(|m| (p - m).norm_squared())))
        .collect();
    let mut comps = m_step(points, &assign, k)?;
    let (mut assign, mut obj) = e_step(points, &comps)?;
    let mut trace = vec![obj];
    for _ in 1..max_iters {
        let next = m_step(points, &assign, k)?;
        let (next_assign, next_obj) = e_step(points, &next)?;
        if next_obj < obj {
            break;
        }
        let done = (next_obj - obj).abs() <= tol * obj.abs().max(f64::MIN_POSITIVE);
        comps = next;
        assign = next_assign;
        obj = next_obj;
        trace.push(obj);
        if done {
            break;
        }
    }
    let first = comps[0].clone();
    comps.extend((k..fan_out).map(|_| first.with_weight(0.0)));
    Ok(LevelFit { components: comps, objective: trace })
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn kmeanspp(points: &[Point3], k: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let mut means = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - means[0]).norm_squared()).collect();
    while means.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let m = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - m).norm_squared());
        }
        means.push(m);
    }
    means
}

/// Maximum-likelihood estimates per cluster with `COV_FLOOR · I` added.
/// An empty cluster becomes a zero-weight copy of the largest one.
fn m_step(points: &[Point3], assign: &[usize], k: usize) -> Result<Vec<Gaussian>> {
    let n = points.len() as f64;
    let mut count = vec![0usize; k];
    let mut sum = vec![Point3::zeros(); k];
    for (p, &a) in points.iter().zip(assign) {
        count[a] += 1;
        sum[a] += p;
    }
    let means: Vec<Point3> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { *s }).collect();
    let mut cov = vec![Matrix3::zeros(); k];
    for (p, &a) in points.iter().zip(assign) {
        let d = p - means[a];
        cov[a] += d * d.transpose();
    }
    let largest = (0..k).max_by_key(|&j| (count[j], std::cmp::Reverse(j))).expect("k >= 1");
    let fitted = |j: usize| -> Result<Gaussian> {
        let c = count[j] as f64;
        Gaussian::new(c / n, means[j], cov[j] / c + Matrix3::identity() * COV_FLOOR)
    };
    (0..k)
        .map(|j| if count[j] > 0 { fitted(j) } else { Ok(fitted(largest)?.with_weight(0.0)) })
        .collect()
}

/// Hard assignment by weighted density and the resulting objective
/// `Σ_i log(π_a N(x_i | a))`.
fn e_step(points: &[Point3], comps: &[Gaussian]) -> Result<(Vec<usize>, f64)> {
    let dens = comps.iter().map(Gaussian::density).collect::<Result<Vec<_>>>()?;
    let mut obj = 0.0;
    let assign = points
        .iter()
        .map(|x| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, d) in dens.iter().enumerate() {
                let v = d.log_weighted(x);
                if v > best.1 {
                    best = (j, v);
                }
            }
            obj += best.1;
            best.0
        })
        .collect();
    Ok((assign, obj))
}

/// Fits a full tree top-down.
pub fn fit_tree(cloud: &PointCloud, config: &EmConfig) -> Result<HgmmTree> {
    config.validate()?;
    let points = cloud.points();
    let root = fit_level(points, config.branching[0], config.max_iters, config.tol, derive_seed(config.seed, 0))?;
    let mut levels = vec![root.components];
    for li in 1..config.branching.len() {
        let partial = HgmmTree::new(config.branching[..li].to_vec(), levels.clone())?;
        let subsets = hard_partition(&partial, cloud, li)?.subsets(levels[li - 1].len());
        let b = config.branching[li];
        let mut next = Vec::with_capacity(subsets.len() * b);
        for (j, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                let parent = &levels[li - 1][j];
                next.push(parent.with_weight(1.0));
                next.extend((1..b).map(|_| parent.with_weight(0.0)));
                continue;
            }
            let pts: Vec<Point3> = subset.iter().map(|&i| points[i]).collect();
            let stream = ((li as u64) << 32) | j as u64;
            let fit = fit_level(&pts, b, config.max_iters, config.tol, derive_seed(config.seed, stream))?;
            next.extend(fit.components);
        }
        levels.push(next);
    }
    HgmmTree::new(config.branching.clone(), levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_gets_floor_covariance() {
        let p = Point3::new(1.0, -2.0, 0.5);
        let fit = fit_level(&[p], 1, 10, 1e-6, 0).unwrap();
        let g = &fit.components[0];
        assert_eq!(g.weight(), 1.0);
        assert_eq!(*g.mean(), p);
        assert!((g.cov() - Matrix3::identity() * COV_FLOOR).abs().max() < 1e-18);
    }

    #[test]
    fn fewer_points_than_fan_out_pads_inactive() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)];
        let fit = fit_level(&pts, 4, 10, 1e-6, 1).unwrap();
        assert_eq!(fit.components.len(), 4);
        let active = fit.components.iter().filter(|g| g.is_active()).count();
        assert_eq!(active, 2);
        let sum: f64 = fit.components.iter().map(Gaussian::weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_config_rejected() {
        let cloud = PointCloud::from_rows(&[[0.0; 3]]).unwrap();
        let cfg = EmConfig { max_iters: 0, ..EmConfig::default() };
        assert!(fit_tree(&cloud, &cfg).is_err());
        assert!(fit_level(&[], 2, 5, 1e-6, 0).is_err());
    }
}
