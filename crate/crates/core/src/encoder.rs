//! Point-cloud encoders.
//!
//! [`PointNet`] runs a shared per-point MLP and max-pools over points, so
//! its output does not depend on point order. [`VaeEncoder`] adds the
//! Gaussian latent head used for generation; [`RegEncoder`] holds the two
//! deterministic encoders used for registration, one on Cartesian
//! coordinates and one on z-rotation invariant features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hgmm::{Point3, PointCloud};
use crate::nn::{Bound, Linear, ParamStore, points_tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Per-point MLP widths; the last one is the pooled feature size.
    pub widths: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 512], latent_dim: 256 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.latent_dim == 0 {
            return Err(Error::Usage("encoder widths and latent size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PointNet {
    layers: Vec<Linear>,
}

impl PointNet {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(store, &format!("{name}.l{i}"), fan_in, w, rng);
                fan_in = w;
                l
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    /// `N x input` per-point values to a `1 x output` feature.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let (n, c) = tape.value(x).expect_rank2("pointnet")?;
        if n == 0 {
            return Err(Error::Domain("cannot encode an empty cloud".into()));
        }
        if c != self.input_dim() {
            return Err(Error::shape(format!("pointnet expects {} columns, got {c}", self.input_dim())));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        tape.max_pool(h, 0)
    }
}

/// Latent variables of one encoded cloud.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub z_mu: Var,
    pub log_sigma: Var,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct VaeEncoder {
    config: EncoderConfig,
    pointnet: PointNet,
    mu: Linear,
    log_sigma: Linear,
}

impl VaeEncoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let pointnet = PointNet::new(store, &format!("{prefix}.pointnet"), 3, &config.widths, rng);
        let f = pointnet.output_dim();
        let mu = Linear::new(store, &format!("{prefix}.mu"), f, config.latent_dim, rng);
        let log_sigma = Linear::new(store, &format!("{prefix}.log_sigma"), f, config.latent_dim, rng);
        Ok(Self { config, pointnet, mu, log_sigma })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn pointnet(&self) -> &PointNet {
        &self.pointnet
    }

    /// Encodes `cloud`; `eps` is the reparameterization noise, `None` for
    /// evaluation mode (`z = z_mu`).
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, cloud: &PointCloud, eps: Option<&[f64]>) -> Result<LatentVars> {
        let x = tape.constant(points_tensor(cloud.points()))?;
        let feat = self.pointnet.forward(tape, p, x)?;
        self.head(tape, p, feat, eps)
    }

    pub fn head(&self, tape: &mut Tape<'_>, p: &Bound, feat: Var, eps: Option<&[f64]>) -> Result<LatentVars> {
        let z_mu = self.mu.forward(tape, p, feat)?;
        let log_sigma = self.log_sigma.forward(tape, p, feat)?;
        let z = match eps {
            None => z_mu,
            Some(e) => {
                if e.len() != self.config.latent_dim {
                    return Err(Error::shape(format!("noise has {} values, latent has {}", e.len(), self.config.latent_dim)));
                }
                let sigma = tape.exp(log_sigma)?;
                let e = tape.constant(Tensor::row(e.to_vec()))?;
                let noise = tape.mul(sigma, e)?;
                tape.add(z_mu, noise)?
            }
        };
        Ok(LatentVars { z_mu, log_sigma, z })
    }

    /// Evaluation-mode latent mean.
    pub fn encode_mean(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let lat = self.forward(&mut tape, &p, cloud, None)?;
        Ok(tape.value(lat.z_mu).data().to_vec())
    }
}

/// `KL[N(μ, σ²) ‖ N(0, I)] = ½ Σ (μ² + σ² − 1 − 2 log σ)`.
pub fn kl_divergence(tape: &mut Tape<'_>, z_mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(z_mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, two_ls)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum(t)?;
    tape.scale(s, 0.5)
}

/// Plain-number KL, for checking.
pub fn kl_value(z_mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * z_mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
        .sum::<f64>()
}

/// Per-point `(√(x² + y²), z)`.
pub fn invariant_features(points: &[Point3]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x.hypot(p.y), p.z]).collect();
    Tensor::matrix(points.len(), 2, data).expect("sized")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegEncoderConfig {
    pub widths: Vec<usize>,
    pub z_t_dim: usize,
    pub z_c_dim: usize,
}

impl Default for RegEncoderConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 512], z_t_dim: 128, z_c_dim: 256 }
    }
}

impl RegEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.z_t_dim == 0 || self.z_c_dim == 0 {
            return Err(Error::Usage("registration encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Transformation code `z_t` and shape code `z_c`, each `1 x dim`.
#[derive(Clone, Copy, Debug)]
pub struct RegLatent {
    pub z_t: Var,
    pub z_c: Var,
}

#[derive(Clone, Debug)]
pub struct RegEncoder {
    config: RegEncoderConfig,
    e_t: PointNet,
    e_t_out: Linear,
    e_c: PointNet,
    e_c_out: Linear,
}

impl RegEncoder {
    pub fn new(config: RegEncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let e_t = PointNet::new(store, &format!("{prefix}.e_t"), 3, &config.widths, rng);
        let e_t_out = Linear::new(store, &format!("{prefix}.e_t.out"), e_t.output_dim(), config.z_t_dim, rng);
        let e_c = PointNet::new(store, &format!("{prefix}.e_c"), 2, &config.widths, rng);
        let e_c_out = Linear::new(store, &format!("{prefix}.e_c.out"), e_c.output_dim(), config.z_c_dim, rng);
        Ok(Self { config, e_t, e_t_out, e_c, e_c_out })
    }

    pub fn config(&self) -> &RegEncoderConfig {
        &self.config
    }

    /// Encodes a cloud that is already centered on its centroid.
    pub fn forward_centered(&self, tape: &mut Tape<'_>, p: &Bound, points: &[Point3]) -> Result<RegLatent> {
        if points.is_empty() {
            return Err(Error::Domain("cannot encode an empty cloud".into()));
        }
        let x = tape.constant(points_tensor(points))?;
        let f_t = self.e_t.forward(tape, p, x)?;
        let z_t = self.e_t_out.forward(tape, p, f_t)?;
        let inv = tape.constant(invariant_features(points))?;
        let f_c = self.e_c.forward(tape, p, inv)?;
        let z_c = self.e_c_out.forward(tape, p, f_c)?;
        Ok(RegLatent { z_t, z_c })
    }

    /// Centers `cloud` and encodes it; also returns the centroid removed.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, cloud: &PointCloud) -> Result<(RegLatent, Point3)> {
        let c = cloud.centroid();
        let centered: Vec<Point3> = cloud.points().iter().map(|q| q - c).collect();
        Ok((self.forward_centered(tape, p, &centered)?, c))
    }

    /// `(z_t, z_c)` as plain vectors.
    pub fn encode(&self, store: &ParamStore, cloud: &PointCloud) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let (lat, _) = self.forward(&mut tape, &p, cloud)?;
        Ok((tape.value(lat.z_t).data().to_vec(), tape.value(lat.z_c).data().to_vec()))
    }
}
