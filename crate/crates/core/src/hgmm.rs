//! Hierarchical Gaussian mixture models.
//!
//! An [`HgmmTree`] is a complete tree of weighted 3-D Gaussians. The children
//! of every node form a mixture that refines the node's own Gaussian; the
//! root is implicit and its children make up level 1. Levels are addressed
//! 1-based throughout the public API (`1..=depth`).
//!
//! Likelihoods follow the hard-partition scheme: every point is routed down
//! the tree by taking, at each level, the sibling with the largest weighted
//! density, and the likelihood at level `d` is the sum over level-`d-1` nodes
//! of the mixture likelihood of that node's children on the points routed to
//! it.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Minimum eigenvalue of every covariance, in model units squared.
pub const COV_FLOOR: f64 = 1e-6;

/// Tolerance on sibling weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One weighted component: weight, mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    weight: f64,
    mean: Point3,
    cov: Matrix3<f64>,
}

/// Symmetrizes `cov` and lifts it until its computed smallest eigenvalue is
/// at least [`COV_FLOOR`]. Rebuilding from clamped eigenvalues can land a
/// rounding error below the floor.
fn floored(cov: Matrix3<f64>) -> Matrix3<f64> {
    let mut cov = (cov + cov.transpose()) * 0.5;
    for _ in 0..4 {
        let eig = cov.symmetric_eigenvalues();
        let min = eig.min();
        if min >= COV_FLOOR {
            break;
        }
        let slack = 4.0 * f64::EPSILON * eig.amax();
        cov += Matrix3::identity() * (COV_FLOOR - min + slack);
    }
    cov
}

impl Gaussian {
    /// Builds a component, symmetrizing `cov` and clamping its eigenvalues to
    /// at least [`COV_FLOOR`].
    pub fn new(weight: f64, mean: Point3, cov: Matrix3<f64>) -> Result<Self> {
        if !weight.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&weight) {
            return Err(Error::invalid(format!("weight {weight} outside [0, 1]")));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite mean or covariance"));
        }
        let mut cov = (cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);
        if eig.eigenvalues.min() < COV_FLOOR {
            let clamped = eig.eigenvalues.map(|l| l.max(COV_FLOOR));
            let q = eig.eigenvectors;
            cov = q * Matrix3::from_diagonal(&clamped) * q.transpose();
        }
        Ok(Self { weight: weight.clamp(0.0, 1.0), mean, cov: floored(cov) })
    }

    /// Builds `Σ = Uᵀ diag(λ) U` from orthonormal rows `u` and eigenvalues
    /// already at or above the floor.
    pub(crate) fn from_eigen(weight: f64, mean: Point3, u: &Matrix3<f64>, lambda: &Point3) -> Self {
        let cov = u.transpose() * Matrix3::from_diagonal(lambda) * u;
        Self { weight, mean, cov: floored(cov) }
    }

    pub fn isotropic(weight: f64, mean: Point3, variance: f64) -> Result<Self> {
        Self::new(weight, mean, Matrix3::identity() * variance)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &Point3 {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix3<f64> {
        &self.cov
    }

    /// Zero-weight components are padding and never generate points.
    pub fn is_active(&self) -> bool {
        self.weight > 0.0
    }

    pub(crate) fn with_weight(&self, weight: f64) -> Self {
        Self { weight, ..self.clone() }
    }

    pub(crate) fn density(&self) -> Result<Density> {
        Density::new(self)
    }
}

/// Cached factorization used to evaluate a component many times.
#[derive(Clone, Debug)]
pub(crate) struct Density {
    mean: Point3,
    chol: Matrix3<f64>,
    log_norm: f64,
    log_weight: f64,
}

impl Density {
    fn new(g: &Gaussian) -> Result<Self> {
        let chol = g
            .cov
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?
            .unpack();
        let log_det = 2.0 * (0..3).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            mean: g.mean,
            chol,
            log_norm: -0.5 * (3.0 * LN_2PI + log_det),
            log_weight: g.weight.ln(),
        })
    }

    pub(crate) fn log_pdf(&self, x: &Point3) -> f64 {
        let d = x - self.mean;
        // forward substitution with the lower Cholesky factor
        let l = &self.chol;
        let y0 = d[0] / l[(0, 0)];
        let y1 = (d[1] - l[(1, 0)] * y0) / l[(1, 1)];
        let y2 = (d[2] - l[(2, 0)] * y0 - l[(2, 1)] * y1) / l[(2, 2)];
        self.log_norm - 0.5 * (y0 * y0 + y1 * y1 + y2 * y2)
    }

    pub(crate) fn log_weighted(&self, x: &Point3) -> f64 {
        if self.log_weight == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        self.log_weight + self.log_pdf(x)
    }
}

/// Non-empty ordered set of finite 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("point cloud is empty"));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::domain("point cloud has non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point3::new(r[0], r[1], r[2])).collect())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean point. Each coordinate is summed in sorted order so the result
    /// does not depend on the point order.
    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        Point3::from_fn(|axis, _| {
            let mut v: Vec<f64> = self.points.iter().map(|p| p[axis]).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / n
        })
    }

    pub fn translated(&self, v: &Point3) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| p + v).collect() }
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

/// Complete tree of Gaussians with a fixed fan-out per level.
#[derive(Clone, Debug, PartialEq)]
pub struct HgmmTree {
    branching: Vec<usize>,
    levels: Vec<Vec<Gaussian>>,
}

impl HgmmTree {
    /// Validates level sizes against `branching` and that every sibling
    /// group's weights sum to one.
    pub fn new(branching: Vec<usize>, levels: Vec<Vec<Gaussian>>) -> Result<Self> {
        if branching.is_empty() || branching.contains(&0) {
            return Err(Error::invalid("branching must be non-empty with positive fan-outs"));
        }
        if branching.len() != levels.len() {
            return Err(Error::invalid(format!(
                "{} levels given for branching of depth {}",
                levels.len(),
                branching.len()
            )));
        }
        let mut size = 1;
        for (li, (&b, level)) in branching.iter().zip(&levels).enumerate() {
            size *= b;
            if level.len() != size {
                return Err(Error::invalid(format!(
                    "level {} has {} nodes, expected {size}",
                    li + 1,
                    level.len()
                )));
            }
            for (g, group) in level.chunks(b).enumerate() {
                let sum: f64 = group.iter().map(Gaussian::weight).sum();
                if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                    return Err(Error::invalid(format!(
                        "level {} sibling group {g} weights sum to {sum}",
                        li + 1
                    )));
                }
            }
        }
        Ok(Self { branching, levels })
    }

    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    pub fn branching(&self) -> &[usize] {
        &self.branching
    }

    /// Nodes at `level` (1-based).
    pub fn level(&self, level: usize) -> &[Gaussian] {
        &self.levels[level - 1]
    }

    pub fn levels(&self) -> &[Vec<Gaussian>] {
        &self.levels
    }

    pub fn leaves(&self) -> &[Gaussian] {
        self.levels.last().expect("tree has at least one level")
    }

    /// Node indices at `level + 1` that are children of node `index` at
    /// `level`; `level == 0` addresses the root.
    pub fn children(&self, level: usize, index: usize) -> Range<usize> {
        let b = self.branching[level];
        index * b..(index + 1) * b
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.depth() {
            return Err(Error::domain(format!(
                "level {level} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }

    fn densities(&self, upto: usize) -> Result<Vec<Vec<Density>>> {
        self.levels[..upto]
            .iter()
            .map(|level| level.iter().map(Gaussian::density).collect())
            .collect()
    }
}

/// Hard assignment of every point to one node of a level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub level: usize,
    pub assignment: Vec<usize>,
}

impl Partition {
    /// Point indices per node; `nodes` is the size of the level.
    pub fn subsets(&self, nodes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); nodes];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

/// `log N(x | μ, Σ)`, excluding the weight.
pub fn gaussian_log_pdf(g: &Gaussian, x: &Point3) -> Result<f64> {
    Ok(g.density()?.log_pdf(x))
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_siblings(siblings: &[Gaussian]) -> Result<()> {
    if siblings.is_empty() {
        return Err(Error::domain("mixture has no components"));
    }
    let sum: f64 = siblings.iter().map(Gaussian::weight).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::invalid(format!("mixture weights sum to {sum}")));
    }
    Ok(())
}

/// `Σ_i log Σ_j π_j N(x_i | Θ_j)`.
pub fn mixture_log_likelihood(siblings: &[Gaussian], cloud: &PointCloud) -> Result<f64> {
    check_siblings(siblings)?;
    let dens: Vec<Density> = siblings.iter().map(Gaussian::density).collect::<Result<_>>()?;
    Ok(cloud
        .points()
        .iter()
        .map(|x| log_sum_exp(dens.iter().map(|d| d.log_weighted(x))))
        .sum())
}

/// Posterior responsibilities, one row per point.
///
/// Rows where every weighted density is `-inf` get a uniform posterior.
pub fn posteriors(siblings: &[Gaussian], cloud: &PointCloud) -> Result<DMatrix<f64>> {
    check_siblings(siblings)?;
    let dens: Vec<Density> = siblings.iter().map(Gaussian::density).collect::<Result<_>>()?;
    let j = dens.len();
    let mut out = DMatrix::zeros(cloud.len(), j);
    let mut row = vec![0.0; j];
    for (i, x) in cloud.points().iter().enumerate() {
        for (r, d) in row.iter_mut().zip(&dens) {
            *r = d.log_weighted(x);
        }
        let lse = log_sum_exp(row.iter().copied());
        for c in 0..j {
            out[(i, c)] = if lse == f64::NEG_INFINITY {
                1.0 / j as f64
            } else {
                (row[c] - lse).exp()
            };
        }
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn route(dens: &[Vec<Density>], tree: &HgmmTree, x: &Point3, level: usize) -> usize {
    let mut node = 0;
    for li in 0..level {
        let children = tree.children(li, node);
        let offset = children.start;
        node = offset + argmax(dens[li][children].iter().map(|d| d.log_weighted(x)));
    }
    node
}

/// Routes every point down to `level` (1-based) by weighted-density argmax
/// among siblings.
pub fn hard_partition(tree: &HgmmTree, cloud: &PointCloud, level: usize) -> Result<Partition> {
    tree.check_level(level)?;
    let dens = tree.densities(level)?;
    let assignment = cloud.points().iter().map(|x| route(&dens, tree, x, level)).collect();
    Ok(Partition { level, assignment })
}

/// Hard-partition log-likelihood of the mixtures at `level` (1-based).
pub fn depth_log_likelihood(tree: &HgmmTree, cloud: &PointCloud, level: usize) -> Result<f64> {
    tree.check_level(level)?;
    let dens = tree.densities(level)?;
    let li = level - 1;
    Ok(cloud
        .points()
        .iter()
        .map(|x| {
            let parent = if li == 0 { 0 } else { route(&dens, tree, x, li) };
            log_sum_exp(dens[li][tree.children(li, parent)].iter().map(|d| d.log_weighted(x)))
        })
        .sum())
}

/// Leaf Gaussians with each weight multiplied along its ancestor path.
pub fn flatten_leaves(tree: &HgmmTree) -> Vec<Gaussian> {
    let mut weights: Vec<f64> = vec![1.0];
    for (li, level) in tree.levels.iter().enumerate() {
        let b = tree.branching[li];
        weights = level
            .iter()
            .enumerate()
            .map(|(j, g)| weights[j / b] * g.weight)
            .collect();
    }
    tree.leaves()
        .iter()
        .zip(weights)
        .map(|(g, w)| g.with_weight(w))
        .collect()
}

/// Draws `count` points from the flattened leaf mixture.
pub fn sample_points(tree: &HgmmTree, count: usize, seed: u64) -> Result<PointCloud> {
    Ok(sample_labeled(tree, count, seed)?.0)
}

/// [`sample_points`] together with the leaf index that produced each point.
pub fn sample_labeled(tree: &HgmmTree, count: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if count == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    let leaves = flatten_leaves(tree);
    let index = WeightedIndex::new(leaves.iter().map(Gaussian::weight))
        .map_err(|e| Error::invalid(format!("leaf weights: {e}")))?;
    let chols: Vec<Matrix3<f64>> = leaves
        .iter()
        .map(|g| {
            g.cov
                .cholesky()
                .map(|c| c.unpack())
                .ok_or_else(|| Error::invalid("covariance is not positive definite"))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(count);
    let points = (0..count)
        .map(|_| {
            let k = index.sample(&mut rng);
            labels.push(k);
            let z = Point3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            leaves[k].mean + chols[k] * z
        })
        .collect();
    Ok((PointCloud::new(points)?, labels))
}

/// Standard normal log-density constant `-(3/2) ln 2π`.
pub fn standard_log_norm() -> f64 {
    -1.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn std_gauss(w: f64) -> Gaussian {
        Gaussian::isotropic(w, Point3::zeros(), 1.0).unwrap()
    }

    #[test]
    fn log_pdf_standard_and_scaled() {
        let origin = Point3::zeros();
        let v = gaussian_log_pdf(&std_gauss(1.0), &origin).unwrap();
        assert_relative_eq!(v, -2.756_815_599_614_018, epsilon = 1e-9);
        let g = Gaussian::isotropic(1.0, Point3::zeros(), 4.0).unwrap();
        let v = gaussian_log_pdf(&g, &origin).unwrap();
        assert_relative_eq!(v, standard_log_norm() - 1.5 * 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_floor_is_applied() {
        let g = Gaussian::new(1.0, Point3::zeros(), Matrix3::from_diagonal(&Point3::new(1.0, 0.0, -2.0)))
            .unwrap();
        let eig = SymmetricEigen::new(*g.cov());
        assert!(eig.eigenvalues.min() >= COV_FLOOR * (1.0 - 1e-9));
    }

    #[test]
    fn weight_outside_unit_interval_rejected() {
        assert!(Gaussian::isotropic(1.5, Point3::zeros(), 1.0).is_err());
        assert!(Gaussian::isotropic(f64::NAN, Point3::zeros(), 1.0).is_err());
    }

    #[test]
    fn empty_cloud_is_domain_error() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::Domain(_))));
    }

    #[test]
    fn mixture_of_duplicates_matches_single() {
        let cloud = PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let one = mixture_log_likelihood(&[std_gauss(1.0)], &cloud).unwrap();
        let two = mixture_log_likelihood(&[std_gauss(0.5), std_gauss(0.5)], &cloud).unwrap();
        assert_relative_eq!(one, standard_log_norm(), epsilon = 1e-12);
        assert_relative_eq!(one, two, epsilon = 1e-12);
    }

    #[test]
    fn mixture_is_finite_far_from_means() {
        let cloud = PointCloud::from_rows(&[[50.0, 0.0, 0.0], [0.0, -50.0, 50.0]]).unwrap();
        let v = mixture_log_likelihood(&[std_gauss(0.5), std_gauss(0.5)], &cloud).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn posterior_symmetry_and_single_component() {
        let a = Gaussian::isotropic(0.5, Point3::new(-1.0, 0.0, 0.0), 1.0).unwrap();
        let b = Gaussian::isotropic(0.5, Point3::new(1.0, 0.0, 0.0), 1.0).unwrap();
        let cloud = PointCloud::from_rows(&[[0.0, 3.0, -1.0]]).unwrap();
        let p = posteriors(&[a, b], &cloud).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p[(0, 1)], 0.5, epsilon = 1e-12);
        let p = posteriors(&[std_gauss(1.0)], &cloud).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
    }

    #[test]
    fn posterior_underflow_rows_are_uniform() {
        let a = Gaussian::isotropic(0.5, Point3::new(-1.0, 0.0, 0.0), COV_FLOOR).unwrap();
        let b = Gaussian::isotropic(0.5, Point3::new(1.0, 0.0, 0.0), COV_FLOOR).unwrap();
        let cloud = PointCloud::from_rows(&[[1e200, 0.0, 0.0]]).unwrap();
        let p = posteriors(&[a, b], &cloud).unwrap();
        assert_relative_eq!(p[(0, 0)] + p[(0, 1)], 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let a = std_gauss(0.5);
        let tree = HgmmTree::new(vec![2], vec![vec![a.clone(), a]]).unwrap();
        let cloud = PointCloud::from_rows(&[[0.3, 0.1, 0.0]]).unwrap();
        assert_eq!(hard_partition(&tree, &cloud, 1).unwrap().assignment, vec![0]);
    }

    #[test]
    fn separated_clusters_partition() {
        let a = Gaussian::isotropic(0.5, Point3::new(-5.0, 0.0, 0.0), 1.0).unwrap();
        let b = Gaussian::isotropic(0.5, Point3::new(5.0, 0.0, 0.0), 1.0).unwrap();
        let tree = HgmmTree::new(vec![2], vec![vec![a, b]]).unwrap();
        let cloud =
            PointCloud::from_rows(&[[-4.0, 0.0, 0.0], [6.0, 1.0, 0.0], [-5.5, 0.0, 1.0]]).unwrap();
        assert_eq!(hard_partition(&tree, &cloud, 1).unwrap().assignment, vec![0, 1, 0]);
    }

    #[test]
    fn replicated_children_preserve_likelihood() {
        let a = Gaussian::isotropic(0.3, Point3::new(-1.0, 0.0, 0.0), 0.5).unwrap();
        let b = Gaussian::isotropic(0.7, Point3::new(1.0, 0.5, 0.0), 2.0).unwrap();
        let l2 = vec![a.with_weight(0.5), a.with_weight(0.5), b.with_weight(0.5), b.with_weight(0.5)];
        let tree = HgmmTree::new(vec![2, 2], vec![vec![a.clone(), b.clone()], l2]).unwrap();
        let cloud =
            PointCloud::from_rows(&[[0.0, 0.0, 0.0], [2.0, 1.0, -1.0], [-1.0, 0.2, 0.3]]).unwrap();
        // level 2 sees each point only through its own parent, at full weight
        let l1 = depth_log_likelihood(&tree, &cloud, 1).unwrap();
        let l2 = depth_log_likelihood(&tree, &cloud, 2).unwrap();
        let part = hard_partition(&tree, &cloud, 1).unwrap();
        let expected: f64 = cloud
            .points()
            .iter()
            .zip(&part.assignment)
            .map(|(x, &p)| gaussian_log_pdf(&tree.level(1)[p], x).unwrap())
            .sum();
        assert_relative_eq!(l2, expected, epsilon = 1e-12);
        assert!(l2 >= l1 - 1e-12);
        assert_relative_eq!(l1, mixture_log_likelihood(tree.level(1), &cloud).unwrap(), epsilon = 0.0);
    }

    #[test]
    fn flatten_uniform_binary_tree() {
        let g = std_gauss(0.5);
        let tree = HgmmTree::new(vec![2, 2], vec![vec![g.clone(); 2], vec![g; 4]]).unwrap();
        let leaves = flatten_leaves(&tree);
        assert_eq!(leaves.len(), 4);
        for l in leaves {
            assert_relative_eq!(l.weight(), 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn sampling_single_point_reproducible() {
        let tree = HgmmTree::new(vec![1], vec![vec![std_gauss(1.0)]]).unwrap();
        let a = sample_points(&tree, 1, 7).unwrap();
        let b = sample_points(&tree, 1, 7).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        assert!(sample_points(&tree, 0, 7).is_err());
    }

    #[test]
    fn tree_rejects_bad_weights_and_sizes() {
        let g = std_gauss(0.4);
        assert!(HgmmTree::new(vec![2], vec![vec![g.clone(), g.clone()]]).is_err());
        assert!(HgmmTree::new(vec![3], vec![vec![g.clone(), g]]).is_err());
    }

    #[test]
    fn level_out_of_range() {
        let tree = HgmmTree::new(vec![1], vec![vec![std_gauss(1.0)]]).unwrap();
        let cloud = PointCloud::from_rows(&[[0.0; 3]]).unwrap();
        assert!(depth_log_likelihood(&tree, &cloud, 0).is_err());
        assert!(hard_partition(&tree, &cloud, 2).is_err());
    }
}
