//! The two trainable models: a VAE for generation and the disentangled
//! registration network.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderConfig, RegEncoder, RegEncoderConfig, VaeEncoder};
use crate::error::{Error, Result};
use crate::hgmm::{HgmmTree, PointCloud};
use crate::io::Checkpoint;
use crate::nn::{Bound, Mlp, ParamStore};

pub const VAE_KIND: &str = "vae";
pub const REG_KIND: &str = "registration";

/// Encoder output and decoder feature width of the desk-scale presets.
pub const DESK_WIDTH: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl VaeConfig {
    /// Reduced widths and a two-level [4, 4] tree for single-machine runs.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig { widths: vec![64, 128, DESK_WIDTH], latent_dim: 256 },
            decoder: DecoderConfig { branching: vec![4, 4], feature_dim: DESK_WIDTH, ..DecoderConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.latent_dim != self.decoder.latent_dim {
            return Err(Error::Usage(format!(
                "encoder latent size {} differs from decoder latent size {}",
                self.encoder.latent_dim, self.decoder.latent_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder: VaeEncoder,
    pub decoder: Decoder,
    pub params: ParamStore,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = VaeEncoder::new(config.encoder.clone(), &mut params, "enc", &mut rng)?;
        let decoder = Decoder::new(config.decoder.clone(), &mut params, "dec", &mut rng)?;
        Ok(Self { config, encoder, decoder, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(VAE_KIND, serde_json::to_value(&self.config).expect("config serializes"), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(VAE_KIND)?;
        let config: VaeConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&ckpt.store()?)?;
        Ok(model)
    }

    pub fn decode(&self, z: &[f64]) -> Result<HgmmTree> {
        self.decoder.decode(&self.params, z)
    }

    /// Evaluation-mode latent `Z_μ`.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        self.encoder.encode_mean(&self.params, cloud)
    }

    /// Draw from the standard normal latent prior.
    pub fn sample_prior(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.config.encoder.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub encoder: RegEncoderConfig,
    /// `latent_dim` must equal `z_t_dim + z_c_dim`.
    pub decoder: DecoderConfig,
    pub head_hidden: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        let encoder = RegEncoderConfig::default();
        let decoder = DecoderConfig { latent_dim: encoder.z_t_dim + encoder.z_c_dim, ..DecoderConfig::default() };
        Self { encoder, decoder, head_hidden: 128 }
    }
}

impl RegConfig {
    /// Desk-scale counterpart of [`VaeConfig::desk`].
    pub fn desk() -> Self {
        let encoder = RegEncoderConfig { widths: vec![64, 128, DESK_WIDTH], ..RegEncoderConfig::default() };
        let decoder = DecoderConfig {
            branching: vec![4, 4],
            latent_dim: encoder.z_t_dim + encoder.z_c_dim,
            feature_dim: DESK_WIDTH,
            ..DecoderConfig::default()
        };
        Self { encoder, decoder, head_hidden: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.latent_dim != self.encoder.z_t_dim + self.encoder.z_c_dim {
            return Err(Error::Usage("decoder latent size must equal z_t + z_c sizes".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Usage("transform head width must be positive".into()));
        }
        Ok(())
    }
}

/// Predicted transform on the tape: unit `(cos, sin)` and translation.
#[derive(Clone, Copy, Debug)]
pub struct TransformVars {
    pub rot: Var,
    pub trans: Var,
}

#[derive(Clone, Debug)]
pub struct RegModel {
    pub config: RegConfig,
    pub encoder: RegEncoder,
    pub decoder: Decoder,
    pub head: Mlp,
    pub params: ParamStore,
}

impl RegModel {
    pub fn new(config: RegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = RegEncoder::new(config.encoder.clone(), &mut params, "enc", &mut rng)?;
        let decoder = Decoder::new(config.decoder.clone(), &mut params, "dec", &mut rng)?;
        let head = Mlp::new(&mut params, "head", config.encoder.z_t_dim, config.head_hidden, 5, &mut rng);
        Ok(Self { config, encoder, decoder, head, params })
    }

    /// Transform-MLP on `z_t`; the rotation pair is normalized to unit length.
    pub fn transform_head(&self, tape: &mut Tape<'_>, p: &Bound, z_t: Var) -> Result<TransformVars> {
        let out = self.head.forward(tape, p, z_t)?;
        let raw = tape.slice_cols(out, 0, 2)?;
        let trans = tape.slice_cols(out, 2, 3)?;
        let sq = tape.square(raw)?;
        let n2 = tape.sum(sq)?;
        let n2 = tape.add_scalar(n2, 1e-12)?;
        let n = tape.sqrt(n2)?;
        let inv = tape.recip(n)?;
        let rot = tape.scale_by(raw, inv)?;
        Ok(TransformVars { rot, trans })
    }

    /// `z_t ⊕ z_c`, or `0 ⊕ z_c` when `zero_t`.
    pub fn latent(&self, tape: &mut Tape<'_>, z_t: Var, z_c: Var, zero_t: bool) -> Result<Var> {
        let t = if zero_t { tape.constant(Tensor::zeros(&[1, self.config.encoder.z_t_dim]))? } else { z_t };
        tape.concat(&[t, z_c], 1)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(REG_KIND, serde_json::to_value(&self.config).expect("config serializes"), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(REG_KIND)?;
        let config: RegConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&ckpt.store()?)?;
        Ok(model)
    }
}
