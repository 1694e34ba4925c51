//! Latent vector → hGMM tree.
//!
//! The root latent is split by an MLP into the first level's node features.
//! Every later level first lets siblings exchange information through a
//! single-head self-attention block (weights shared per level), then splits
//! each node into its children with another MLP. A per-level extraction MLP
//! maps every node feature to 16 raw numbers: a weight logit, a mean, a
//! `3x3` matrix that Gram-Schmidt turns into eigenvectors, and the square
//! roots of the eigenvalues.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hgmm::{COV_FLOOR, Gaussian, HgmmTree, Point3, PointCloud, hard_partition};
use crate::nn::{Bound, Linear, Mlp, ParamStore};

/// Width of the raw per-Gaussian output: `1 + 3 + 9 + 3`.
pub const RAW_GAUSSIAN_DIM: usize = 16;

/// Initial bias of the `√λ` outputs.
const SQRT_LAMBDA_BIAS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub branching: Vec<usize>,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub d_k: usize,
    pub use_attention: bool,
    /// `false` emits only the last level as one flat mixture.
    pub hierarchical: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            branching: vec![8, 4, 4, 4],
            latent_dim: 256,
            feature_dim: 512,
            d_k: 64,
            use_attention: true,
            hierarchical: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(Error::Usage("branching must be non-empty with positive fan-outs".into()));
        }
        if self.feature_dim == 0 || self.d_k == 0 || self.latent_dim == 0 {
            return Err(Error::Usage("decoder dimensions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn leaves(&self) -> usize {
        self.branching.iter().product()
    }

    /// Branching of the emitted tree.
    pub fn output_branching(&self) -> Vec<usize> {
        if self.hierarchical { self.branching.clone() } else { vec![self.leaves()] }
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
}

/// Decoder layout; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    splits: Vec<Mlp>,
    attention: Vec<Option<Attention>>,
    extract: Vec<Mlp>,
}

/// One level of a decoded tree, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecodedLevel {
    /// Log weights, one row per sibling group (`groups x fan_out`).
    pub log_pi: Var,
    pub mu: Var,
    /// Orthonormal eigenvector rows, `K x 9`.
    pub u: Var,
    /// Eigenvalues, `K x 3`, at or above [`COV_FLOOR`].
    pub lam: Var,
    pub fan_out: usize,
}

#[derive(Clone, Debug)]
pub struct DecodedTree {
    pub branching: Vec<usize>,
    pub levels: Vec<DecodedLevel>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.feature_dim;
        let depth = config.branching.len();
        let mut splits = Vec::with_capacity(depth);
        let mut attention = Vec::with_capacity(depth);
        for (li, &b) in config.branching.iter().enumerate() {
            let fan_in = if li == 0 { config.latent_dim } else { h };
            attention.push(if li > 0 && config.use_attention {
                Some(Attention {
                    q: Linear::new(store, &format!("{prefix}.attn{li}.q"), h, config.d_k, rng),
                    k: Linear::new(store, &format!("{prefix}.attn{li}.k"), h, config.d_k, rng),
                    v: Linear::new(store, &format!("{prefix}.attn{li}.v"), h, h, rng),
                })
            } else {
                None
            });
            splits.push(Mlp::new(store, &format!("{prefix}.split{li}"), fan_in, h, b * h, rng));
        }
        let extract_levels: Vec<usize> = if config.hierarchical { (0..depth).collect() } else { vec![depth - 1] };
        let extract = extract_levels
            .into_iter()
            .map(|li| {
                let mlp = Mlp::new(store, &format!("{prefix}.extract{li}"), h, h, RAW_GAUSSIAN_DIM, rng);
                let bias = store.get_mut(mlp.out.b).data_mut();
                bias[13..16].fill(SQRT_LAMBDA_BIAS);
                mlp
            })
            .collect();
        Ok(Self { config, splits, attention, extract })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Splits each of the `M` parent rows into `fan_out` child rows.
    pub fn mlp_split(&self, tape: &mut Tape<'_>, p: &Bound, parents: Var, level: usize) -> Result<Var> {
        let split = self.splits.get(level).ok_or_else(|| Error::shape(format!("no split at level {level}")))?;
        let m = tape.value(parents).rows();
        let out = split.forward(tape, p, parents)?;
        tape.reshape(out, &[m * self.config.branching[level], self.config.feature_dim])
    }

    /// Self-attention inside each consecutive group of `group` rows, using
    /// the projections that precede split `level`.
    pub fn attention_split(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        features: Var,
        group: usize,
        level: usize,
    ) -> Result<Var> {
        let attn = self
            .attention
            .get(level)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::shape(format!("no attention at level {level}")))?;
        let rows = tape.value(features).rows();
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(format!("{rows} rows do not form groups of {group}")));
        }
        let q = attn.q.forward(tape, p, features)?;
        let k = attn.k.forward(tape, p, features)?;
        let v = attn.v.forward(tape, p, features)?;
        let scale = 1.0 / (self.config.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(rows / group);
        for g in 0..rows / group {
            let (qg, kg, vg) = (
                tape.slice_rows(q, g * group, group)?,
                tape.slice_rows(k, g * group, group)?,
                tape.slice_rows(v, g * group, group)?,
            );
            let kt = tape.transpose(kg)?;
            let scores = tape.matmul(qg, kt)?;
            let scores = tape.scale(scores, scale)?;
            let alpha = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(alpha, vg)?);
        }
        if outs.len() == 1 { Ok(outs[0]) } else { tape.concat(&outs, 0) }
    }

    /// Raw 16-vectors for every row of `features`.
    pub fn extract_gaussians(&self, tape: &mut Tape<'_>, p: &Bound, features: Var, level: usize) -> Result<Var> {
        let idx = if self.config.hierarchical { level } else { 0 };
        let mlp = self.extract.get(idx).ok_or_else(|| Error::shape(format!("no extraction at level {level}")))?;
        mlp.forward(tape, p, features)
    }

    /// Node features of every level, top-down.
    pub fn features(&self, tape: &mut Tape<'_>, p: &Bound, z: Var) -> Result<Vec<Var>> {
        let (r, c) = tape.value(z).expect_rank2("decode")?;
        if r != 1 || c != self.config.latent_dim {
            return Err(Error::shape(format!(
                "latent is {r}x{c}, decoder expects 1x{}",
                self.config.latent_dim
            )));
        }
        let mut feats = vec![self.mlp_split(tape, p, z, 0)?];
        for li in 1..self.config.branching.len() {
            let prev = *feats.last().expect("non-empty");
            let input = if self.config.use_attention {
                self.attention_split(tape, p, prev, self.config.branching[li - 1], li)?
            } else {
                prev
            };
            feats.push(self.mlp_split(tape, p, input, li)?);
        }
        Ok(feats)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, z: Var) -> Result<DecodedTree> {
        let feats = self.features(tape, p, z)?;
        let levels = if self.config.hierarchical {
            feats
                .iter()
                .enumerate()
                .map(|(li, &f)| {
                    let raw = self.extract_gaussians(tape, p, f, li)?;
                    assemble_gaussians(tape, raw, self.config.branching[li])
                })
                .collect::<Result<_>>()?
        } else {
            let last = feats.len() - 1;
            let raw = self.extract_gaussians(tape, p, feats[last], last)?;
            vec![assemble_gaussians(tape, raw, self.config.leaves())?]
        };
        Ok(DecodedTree { branching: self.config.output_branching(), levels })
    }

    /// Decodes a latent vector to a detached tree.
    pub fn decode(&self, store: &ParamStore, z: &[f64]) -> Result<HgmmTree> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let z = tape.constant(Tensor::row(z.to_vec()))?;
        self.forward(&mut tape, &p, z)?.to_tree(&tape)
    }
}

/// Turns raw `K x 16` outputs into mixture parameters for sibling groups of
/// `fan_out`: softmax weights per group, Gram-Schmidt eigenvectors and
/// squared, floored eigenvalues.
pub fn assemble_gaussians(tape: &mut Tape<'_>, raw: Var, fan_out: usize) -> Result<DecodedLevel> {
    let (k, c) = tape.value(raw).expect_rank2("assemble_gaussians")?;
    if c != RAW_GAUSSIAN_DIM || fan_out == 0 || k % fan_out != 0 {
        return Err(Error::shape(format!("cannot assemble {k}x{c} raw outputs in groups of {fan_out}")));
    }
    let logits = tape.slice_cols(raw, 0, 1)?;
    let logits = tape.reshape(logits, &[k / fan_out, fan_out])?;
    let log_pi = tape.log_softmax(logits, 1)?;
    let mu = tape.slice_cols(raw, 1, 3)?;
    let u_hat = tape.slice_cols(raw, 4, 9)?;
    let u = tape.gram_schmidt(u_hat)?;
    let sqrt_lam = tape.slice_cols(raw, 13, 3)?;
    let lam = tape.square(sqrt_lam)?;
    let lam = tape.clamp_min(lam, COV_FLOOR)?;
    Ok(DecodedLevel { log_pi, mu, u, lam, fan_out })
}

impl DecodedLevel {
    pub fn gaussians(&self, tape: &Tape<'_>) -> Vec<Gaussian> {
        let (lp, mu, u, lam) = (tape.value(self.log_pi), tape.value(self.mu), tape.value(self.u), tape.value(self.lam));
        (0..mu.rows())
            .map(|j| {
                let w = lp.data()[j].exp().min(1.0);
                let um = Matrix3::from_row_slice(u.row_slice(j));
                Gaussian::from_eigen(w, Point3::from_row_slice(mu.row_slice(j)), &um, &Point3::from_row_slice(lam.row_slice(j)))
            })
            .collect()
    }
}

impl DecodedTree {
    pub fn to_tree(&self, tape: &Tape<'_>) -> Result<HgmmTree> {
        HgmmTree::new(self.branching.clone(), self.levels.iter().map(|l| l.gaussians(tape)).collect())
    }
}

/// Loss terms on the tape.
#[derive(Clone, Debug)]
pub struct HgmmLoss {
    pub total: Var,
    /// `-ℓ_d / |X|` for each level.
    pub per_level: Vec<Var>,
}

/// Parent-group index of every point at every level (all zero at level 1).
pub fn level_groups(tree: &HgmmTree, cloud: &PointCloud) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![vec![0; cloud.len()]];
    for level in 1..tree.depth() {
        out.push(hard_partition(tree, cloud, level)?.assignment);
    }
    Ok(out)
}

/// Negative hGMM log-likelihood summed over levels, per point.
///
/// Hard assignments come from the current forward values and are constants
/// for the backward pass.
pub fn hgmm_loss(tape: &mut Tape<'_>, tree: &DecodedTree, cloud: &PointCloud) -> Result<HgmmLoss> {
    let detached = tree.to_tree(tape)?;
    let groups = level_groups(&detached, cloud)?;
    hgmm_loss_with_groups(tape, tree, cloud, &groups)
}

/// [`hgmm_loss`] with caller-supplied assignments.
pub fn hgmm_loss_with_groups(
    tape: &mut Tape<'_>,
    tree: &DecodedTree,
    cloud: &PointCloud,
    groups: &[Vec<usize>],
) -> Result<HgmmLoss> {
    if groups.len() != tree.levels.len() {
        return Err(Error::shape("one group assignment per level required"));
    }
    let points: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    let n = points.len() as f64;
    let mut per_level = Vec::with_capacity(tree.levels.len());
    for (level, grp) in tree.levels.iter().zip(groups) {
        let log_pi = tape.gather_rows(level.log_pi, grp)?;
        let dens = tape.group_log_density(&points, grp, level.fan_out, level.mu, level.u, level.lam)?;
        let joint = tape.add(log_pi, dens)?;
        let lse = tape.log_sum_exp(joint, 1)?;
        let ll = tape.sum(lse)?;
        per_level.push(tape.scale(ll, -1.0 / n)?);
    }
    let mut total = per_level[0];
    for &l in &per_level[1..] {
        total = tape.add(total, l)?;
    }
    Ok(HgmmLoss { total, per_level })
}
