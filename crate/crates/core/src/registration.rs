//! Rigid registration through canonical poses.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::hgmm::{Point3, PointCloud};
use crate::model::RegModel;
use crate::seed::derive_seed;
use crate::shapes::{ProceduralShape, sample_shape};
use crate::training::{PairConfig, synthesize_from};
use crate::transform::{RigidTransform, rotation_z, wrap_angle};

/// Transform from the canonical pose to `cloud`'s pose.
pub fn estimate_canonical(model: &RegModel, cloud: &PointCloud) -> Result<RigidTransform> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape)?;
    let (lat, centroid) = model.encoder.forward(&mut tape, &p, cloud)?;
    let tv = model.transform_head(&mut tape, &p, lat.z_t)?;
    let rot = tape.value(tv.rot).data();
    let t = tape.value(tv.trans).data();
    Ok(RigidTransform::new(rot[1].atan2(rot[0]), Point3::new(t[0], t[1], t[2]) + centroid))
}

/// `target ∘ source⁻¹`, written so equal inputs give exactly the identity.
pub fn relative_transform(source: &RigidTransform, target: &RigidTransform) -> RigidTransform {
    let phi = wrap_angle(target.phi - source.phi);
    RigidTransform { phi, v: target.v - rotation_z(phi) * source.v }
}

/// Transform mapping `source` coordinates into `target` coordinates.
pub fn register(model: &RegModel, source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    let ts = estimate_canonical(model, source)?;
    let tt = estimate_canonical(model, target)?;
    Ok(relative_transform(&ts, &tt))
}

/// `(1/N) Σ ‖T·s_i − t_i‖²` over index-paired clouds.
pub fn registration_mse(source: &PointCloud, target: &PointCloud, transform: &RigidTransform) -> Result<f64> {
    if source.len() != target.len() {
        return Err(Error::shape(format!("clouds have {} and {} points", source.len(), target.len())));
    }
    let r = transform.rotation();
    let sum: f64 = source
        .points()
        .iter()
        .zip(target.points())
        .map(|(s, t)| (r * s + transform.v - t).norm_squared())
        .sum();
    Ok(sum / source.len() as f64)
}

/// Mean squared distance from each transformed source point to its nearest
/// target point, for clouds without known correspondences.
pub fn nearest_neighbour_mse(source: &PointCloud, target: &PointCloud, transform: &RigidTransform) -> f64 {
    let sum: f64 = source
        .points()
        .iter()
        .map(|s| {
            let p = transform.apply(s);
            target.points().iter().map(|t| (p - t).norm_squared()).fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / source.len() as f64
}

/// Outcome of registering one synthesized pair.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub pair: usize,
    pub mse: f64,
    pub identity_mse: f64,
    pub random_mse: f64,
    /// Absolute wrapped error of the recovered relative rotation.
    pub phi_error: f64,
    /// Absolute true relative rotation.
    pub phi_true: f64,
}

/// Registers `pairs` source/target partials drawn from the same canonical
/// cloud of a shape and scores them on the full transformed clouds.
pub fn evaluate(
    model: &RegModel,
    shapes: &[ProceduralShape],
    config: &PairConfig,
    pairs: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if shapes.is_empty() {
        return Err(Error::Domain("no evaluation shapes".into()));
    }
    (0..pairs)
        .map(|k| {
            let s = derive_seed(seed, k as u64);
            let x_c = sample_shape(&shapes[k % shapes.len()], config.points, derive_seed(s, 0))?;
            let src = synthesize_from(x_c.clone(), config, derive_seed(s, 1))?;
            let tgt = synthesize_from(x_c, config, derive_seed(s, 2))?;
            let est = register(model, &src.x, &tgt.x)?;
            let truth = relative_transform(&src.t, &tgt.t);
            let guess_phi = ChaCha8Rng::seed_from_u64(derive_seed(s, 3)).random_range(-PI..PI);
            let guess = RigidTransform::new(guess_phi, Point3::zeros());
            Ok(EvalRow {
                pair: k,
                mse: registration_mse(&src.x_t, &tgt.x_t, &est)?,
                identity_mse: registration_mse(&src.x_t, &tgt.x_t, &RigidTransform::identity())?,
                random_mse: registration_mse(&src.x_t, &tgt.x_t, &guess)?,
                phi_error: wrap_angle(est.phi - truth.phi).abs(),
                phi_true: truth.phi.abs(),
            })
        })
        .collect()
}
