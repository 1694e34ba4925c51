//! Optimization loops, the Adam optimizer and training-pair synthesis.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::decoder::{HgmmLoss, hgmm_loss, hgmm_loss_with_groups};
use crate::encoder::kl_divergence;
use crate::error::{Error, Result};
use crate::hgmm::{Point3, PointCloud, depth_log_likelihood};
use crate::model::{RegModel, VaeModel};
use crate::nn::{Bound, ParamStore};
use crate::seed::derive_seed;
use crate::shapes::{ProceduralShape, sample_shape};
use crate::transform::{RigidTransform, rotation_z};

pub use crate::transform::wrap_angle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("one gradient per parameter tensor required"));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Sum of parameter gradients over several backward passes.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    grads: Vec<Tensor>,
}

impl GradAccumulator {
    pub fn new(params: &ParamStore) -> Self {
        Self { grads: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn add(&mut self, grads: &Gradients, bound: &Bound, scale: f64) {
        for (acc, &var) in self.grads.iter_mut().zip(bound.vars()) {
            if let Some(g) = grads.get(var) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Backpropagates `scale · output` straight into the sums.
    pub fn backward(&mut self, tape: &Tape<'_>, output: Var, bound: &Bound, scale: f64) -> Result<()> {
        tape.backward_into(output, bound.vars(), &mut self.grads, scale)
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub kl_weight: f64,
    pub kl_decay: f64,
    pub kl_decay_every: usize,
    /// Weight of the translation L1 term.
    pub translation_weight: f64,
    /// Weight of the rotation cosine term.
    pub rotation_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub coverage: [f64; 2],
    /// Largest absolute rotation of synthesized pairs, radians.
    pub max_rotation: f64,
    pub points: usize,
    /// Registration pairs drawn per epoch; `0` means one per shape.
    pub pairs_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 200,
            epochs: 200,
            kl_weight: 1.0,
            kl_decay: 0.98,
            kl_decay_every: 100,
            translation_weight: 20.0,
            rotation_weight: 10.0,
            batch_size: 8,
            seed: 0,
            noise_sigma: 0.02,
            coverage: [0.3, 0.8],
            max_rotation: PI,
            points: 512,
            pairs_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.lr_decay, self.kl_decay];
        if positive.iter().any(|v| !(*v > 0.0)) || self.lr_decay_every == 0 || self.kl_decay_every == 0 {
            return Err(Error::Usage("learning rate, decays and decay periods must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.points == 0 {
            return Err(Error::Usage("epochs, batch size and points must be at least 1".into()));
        }
        if !(self.kl_weight >= 0.0 && self.translation_weight >= 0.0 && self.rotation_weight >= 0.0) {
            return Err(Error::Usage("loss weights must be non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_rotation >= 0.0) {
            return Err(Error::Usage("noise and max rotation must be non-negative".into()));
        }
        let [lo, hi] = self.coverage;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Usage(format!("coverage range [{lo}, {hi}] must lie within (0, 1]")));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// KL weight for 0-based `epoch`.
    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        self.kl_weight * self.kl_decay.powi((epoch / self.kl_decay_every) as i32)
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            points: self.points,
            max_rotation: self.max_rotation,
            coverage: self.coverage,
            noise_sigma: self.noise_sigma,
            center: true,
        }
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub loss_total: f64,
    /// hGMM term per level.
    pub loss_hgmm: Vec<f64>,
    pub loss_kl: Option<f64>,
    pub loss_t: Option<f64>,
    pub loss_c: Option<f64>,
}

/// Writes records as CSV with a header derived from the first record.
pub fn write_csv(mut out: impl Write, records: &[EpochRecord]) -> Result<()> {
    let Some(first) = records.first() else { return Ok(()) };
    let mut header = vec!["epoch".to_string(), "loss_total".to_string()];
    header.extend((1..=first.loss_hgmm.len()).map(|d| format!("loss_hgmm_d{d}")));
    for (name, v) in [("loss_kl", first.loss_kl), ("loss_t", first.loss_t), ("loss_c", first.loss_c)] {
        if v.is_some() {
            header.push(name.to_string());
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.loss_total.to_string()];
        row.extend(r.loss_hgmm.iter().map(f64::to_string));
        row.extend([r.loss_kl, r.loss_t, r.loss_c].into_iter().flatten().map(|v| v.to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn value(tape: &Tape<'_>, v: Var) -> f64 {
    tape.value(v).item()
}

/// Loss terms of one generation sample on the tape.
#[derive(Clone, Debug)]
pub struct GenerationTerms {
    pub total: Var,
    pub hgmm: HgmmLoss,
    pub kl: Var,
}

/// `L_hGMM + kl_weight · KL` for one cloud. `groups` freezes the hard
/// partition; by default it is computed from the forward values.
pub fn generation_loss(
    tape: &mut Tape<'_>,
    model: &VaeModel,
    p: &Bound,
    cloud: &PointCloud,
    eps: Option<&[f64]>,
    kl_weight: f64,
    groups: Option<&[Vec<usize>]>,
) -> Result<GenerationTerms> {
    let lat = model.encoder.forward(tape, p, cloud, eps)?;
    let tree = model.decoder.forward(tape, p, lat.z)?;
    let hgmm = match groups {
        Some(g) => hgmm_loss_with_groups(tape, &tree, cloud, g)?,
        None => hgmm_loss(tape, &tree, cloud)?,
    };
    let kl = kl_divergence(tape, lat.z_mu, lat.log_sigma)?;
    let weighted = tape.scale(kl, kl_weight)?;
    let total = tape.add(hgmm.total, weighted)?;
    Ok(GenerationTerms { total, hgmm, kl })
}

/// Batch-mean losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub hgmm: Vec<f64>,
    pub kl: f64,
    pub loss_t: f64,
    pub loss_c: f64,
}

impl StepStats {
    fn accumulate(&mut self, other: &StepStats, w: f64) {
        self.total += w * other.total;
        if self.hgmm.len() < other.hgmm.len() {
            self.hgmm.resize(other.hgmm.len(), 0.0);
        }
        for (a, b) in self.hgmm.iter_mut().zip(&other.hgmm) {
            *a += w * b;
        }
        self.kl += w * other.kl;
        self.loss_t += w * other.loss_t;
        self.loss_c += w * other.loss_c;
    }
}

/// One Adam step on the mean generation loss of `batch`.
pub fn generation_step(
    model: &mut VaeModel,
    adam: &mut Adam,
    batch: &[&PointCloud],
    eps: &[Vec<f64>],
    kl_weight: f64,
    lr: f64,
) -> Result<StepStats> {
    if batch.is_empty() || batch.len() != eps.len() {
        return Err(Error::shape("one noise vector per batch cloud required"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut acc = GradAccumulator::new(&model.params);
    let mut stats = StepStats::default();
    for (cloud, e) in batch.iter().zip(eps) {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape)?;
        let terms = generation_loss(&mut tape, model, &p, cloud, Some(e), kl_weight, None)?;
        acc.backward(&tape, terms.total, &p, w)?;
        let s = StepStats {
            total: value(&tape, terms.total),
            hgmm: terms.hgmm.per_level.iter().map(|&v| value(&tape, v)).collect(),
            kl: value(&tape, terms.kl),
            ..StepStats::default()
        };
        stats.accumulate(&s, w);
    }
    check_finite(&stats)?;
    adam.step(&mut model.params, acc.grads(), lr)?;
    Ok(stats)
}

fn check_finite(stats: &StepStats) -> Result<()> {
    if !stats.total.is_finite() || stats.hgmm.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss became non-finite: {stats:?}")));
    }
    Ok(())
}

fn standard_normal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    order
}

/// Trains the VAE; `on_epoch` sees every record as it is produced.
pub fn train_vae(
    model: &mut VaeModel,
    clouds: &[PointCloud],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if clouds.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let latent = model.config.encoder.latent_dim;
    let noise_seed = derive_seed(config.seed, u64::MAX);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let kl_weight = config.kl_weight_at(epoch);
        let order = epoch_order(clouds.len(), config.seed, epoch);
        let mut stats = StepStats::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PointCloud> = chunk.iter().map(|&i| &clouds[i]).collect();
            let eps: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| standard_normal(latent, derive_seed(noise_seed, (epoch * clouds.len() + i) as u64)))
                .collect();
            let s = generation_step(model, &mut adam, &batch, &eps, kl_weight, lr)?;
            stats.accumulate(&s, chunk.len() as f64 / clouds.len() as f64);
        }
        let record = EpochRecord {
            epoch,
            lr,
            kl_weight,
            loss_total: stats.total,
            loss_hgmm: stats.hgmm,
            loss_kl: Some(stats.kl),
            loss_t: None,
            loss_c: None,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

/// Mean per-point log-likelihood of the deepest level of each decoded
/// evaluation-mode latent.
pub fn mean_leaf_log_likelihood(model: &VaeModel, clouds: &[PointCloud]) -> Result<f64> {
    let mut total = 0.0;
    for cloud in clouds {
        let z = model.encoder.encode_mean(&model.params, cloud)?;
        let tree = model.decode(&z)?;
        total += depth_log_likelihood(&tree, cloud, tree.depth())? / cloud.len() as f64;
    }
    Ok(total / clouds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub points: usize,
    pub max_rotation: f64,
    pub coverage: [f64; 2],
    pub noise_sigma: f64,
    /// Translate so the partial cloud is centered; otherwise `v = 0`.
    pub center: bool,
}

/// A synthesized registration example.
#[derive(Clone, Debug)]
pub struct PairSample {
    /// Noisy, centered partial cloud (network input).
    pub x: PointCloud,
    pub x_c: PointCloud,
    /// `T · x_c`.
    pub x_t: PointCloud,
    pub t: RigidTransform,
    /// Indices of `x` within `x_c`, ascending.
    pub indices: Vec<usize>,
    pub coverage: f64,
}

/// Smallest partial cloud handed to the encoders.
pub const MIN_PARTIAL_POINTS: usize = 16;

/// Indices of the `count` points nearest to `points[seed]` (ties by index),
/// in ascending order.
pub fn nearest_subset(points: &[Point3], seed: usize, count: usize) -> Vec<usize> {
    let s = points[seed];
    let d: Vec<f64> = points.iter().map(|p| (p - s).norm_squared()).collect();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Samples a canonical cloud, rotates it, cuts a partial patch by
/// nearest-neighbour growth from a random seed point, centers the patch and
/// adds noise to it.
pub fn synthesize_pair(shape: &ProceduralShape, config: &PairConfig, seed: u64) -> Result<PairSample> {
    let x_c = sample_shape(shape, config.points, derive_seed(seed, 0))?;
    synthesize_from(x_c, config, seed)
}

/// [`synthesize_pair`] for a given canonical cloud.
pub fn synthesize_from(x_c: PointCloud, config: &PairConfig, seed: u64) -> Result<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let phi = uniform(&mut rng, -config.max_rotation, config.max_rotation);
    let coverage = uniform(&mut rng, config.coverage[0], config.coverage[1]);
    let n = x_c.len();
    let m = ((coverage * n as f64).round() as usize).clamp(MIN_PARTIAL_POINTS.min(n), n);
    let r = rotation_z(phi);
    let x_r: Vec<Point3> = x_c.points().iter().map(|p| r * p).collect();
    let indices = nearest_subset(&x_r, rng.random_range(0..n), m);
    let v = if config.center {
        let patch = PointCloud::new(indices.iter().map(|&i| x_r[i]).collect())?;
        -patch.centroid()
    } else {
        Point3::zeros()
    };
    let t = RigidTransform { phi, v };
    let x_t = PointCloud::new(x_r.iter().map(|p| p + v).collect())?;
    let x = indices
        .iter()
        .map(|&i| {
            let noise = Point3::from_fn(|_, _| {
                if config.noise_sigma > 0.0 { config.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng) } else { 0.0 }
            });
            x_t.points()[i] + noise
        })
        .collect();
    Ok(PairSample { x: PointCloud::new(x)?, x_c, x_t, t, indices, coverage })
}

/// Loss terms of the transformation pass on the tape.
#[derive(Clone, Debug)]
pub struct TransformationTerms {
    pub total: Var,
    pub hgmm: HgmmLoss,
    pub l1: Var,
    pub cos: Var,
}

/// `1 − (ĉ cos φ + ŝ sin φ)` for a unit prediction `rot = (ĉ, ŝ)`.
pub fn cosine_loss(tape: &mut Tape<'_>, rot: Var, phi: f64) -> Result<Var> {
    let target = tape.constant(Tensor::row(vec![phi.cos(), phi.sin()]))?;
    let dot = tape.mul(rot, target)?;
    let dot = tape.sum(dot)?;
    let neg = tape.scale(dot, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// `Σ |v̂ − v|`.
pub fn l1_loss(tape: &mut Tape<'_>, pred: Var, target: &Point3) -> Result<Var> {
    let t = tape.constant(Tensor::row(vec![target.x, target.y, target.z]))?;
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d)?;
    tape.sum(a)
}

/// `L_hGMM(X_t) + γ₁ L1(v̂, v) + γ₂ L_cos(φ̂, φ)`, decoding `z_t ⊕ z_c`.
pub fn transformation_loss(
    tape: &mut Tape<'_>,
    model: &RegModel,
    p: &Bound,
    pair: &PairSample,
    config: &TrainConfig,
    groups: Option<&[Vec<usize>]>,
) -> Result<TransformationTerms> {
    let (lat, centroid) = model.encoder.forward(tape, p, &pair.x)?;
    let tv = model.transform_head(tape, p, lat.z_t)?;
    let z = model.latent(tape, lat.z_t, lat.z_c, false)?;
    let tree = model.decoder.forward(tape, p, z)?;
    let hgmm = match groups {
        Some(g) => hgmm_loss_with_groups(tape, &tree, &pair.x_t, g)?,
        None => hgmm_loss(tape, &tree, &pair.x_t)?,
    };
    let l1 = l1_loss(tape, tv.trans, &(pair.t.v - centroid))?;
    let cos = cosine_loss(tape, tv.rot, pair.t.phi)?;
    let a = tape.scale(l1, config.translation_weight)?;
    let b = tape.scale(cos, config.rotation_weight)?;
    let total = tape.add(hgmm.total, a)?;
    let total = tape.add(total, b)?;
    Ok(TransformationTerms { total, hgmm, l1, cos })
}

/// `L_hGMM(X_c)` decoding `0 ⊕ z_c`.
pub fn shape_loss(
    tape: &mut Tape<'_>,
    model: &RegModel,
    p: &Bound,
    pair: &PairSample,
    groups: Option<&[Vec<usize>]>,
) -> Result<HgmmLoss> {
    let (lat, _) = model.encoder.forward(tape, p, &pair.x)?;
    let z = model.latent(tape, lat.z_t, lat.z_c, true)?;
    let tree = model.decoder.forward(tape, p, z)?;
    match groups {
        Some(g) => hgmm_loss_with_groups(tape, &tree, &pair.x_c, g),
        None => hgmm_loss(tape, &tree, &pair.x_c),
    }
}

/// Transformation pass then shape pass, each followed by an Adam step.
pub fn registration_step(
    model: &mut RegModel,
    adam: &mut Adam,
    batch: &[PairSample],
    config: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::shape("empty registration batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut stats = StepStats::default();

    let mut acc = GradAccumulator::new(&model.params);
    for pair in batch {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape)?;
        let terms = transformation_loss(&mut tape, model, &p, pair, config, None)?;
        acc.backward(&tape, terms.total, &p, w)?;
        let s = StepStats {
            loss_t: value(&tape, terms.total),
            hgmm: terms.hgmm.per_level.iter().map(|&v| value(&tape, v)).collect(),
            ..StepStats::default()
        };
        stats.accumulate(&s, w);
    }
    if !stats.loss_t.is_finite() {
        return Err(Error::NonFinite(format!("transformation loss became non-finite: {stats:?}")));
    }
    adam.step(&mut model.params, acc.grads(), lr)?;

    let mut acc = GradAccumulator::new(&model.params);
    for pair in batch {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape)?;
        let loss = shape_loss(&mut tape, model, &p, pair, None)?;
        acc.backward(&tape, loss.total, &p, w)?;
        stats.loss_c += w * value(&tape, loss.total);
    }
    if !stats.loss_c.is_finite() {
        return Err(Error::NonFinite(format!("shape loss became non-finite: {stats:?}")));
    }
    adam.step(&mut model.params, acc.grads(), lr)?;
    stats.total = stats.loss_t + stats.loss_c;
    Ok(stats)
}

/// Trains the registration network on pairs synthesized from `shapes`.
pub fn train_registration(
    model: &mut RegModel,
    shapes: &[ProceduralShape],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if shapes.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    let pair_cfg = config.pair_config();
    let per_epoch = if config.pairs_per_epoch == 0 { shapes.len() } else { config.pairs_per_epoch };
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let pair_seed = derive_seed(config.seed, u64::MAX - 1);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = epoch_order(shapes.len(), config.seed, epoch);
        let mut stats = StepStats::default();
        let slots: Vec<usize> = (0..per_epoch).collect();
        for chunk in slots.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&k| {
                    let shape = &shapes[order[k % shapes.len()]];
                    synthesize_pair(shape, &pair_cfg, derive_seed(pair_seed, (epoch * per_epoch + k) as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let s = registration_step(model, &mut adam, &batch, config, lr)?;
            stats.accumulate(&s, chunk.len() as f64 / per_epoch as f64);
        }
        let record = EpochRecord {
            epoch,
            lr,
            kl_weight: 0.0,
            loss_total: stats.total,
            loss_hgmm: stats.hgmm,
            loss_kl: None,
            loss_t: Some(stats.loss_t),
            loss_c: Some(stats.loss_c),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}
