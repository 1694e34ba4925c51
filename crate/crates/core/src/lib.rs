pub mod autodiff;
pub mod decoder;
pub mod em;
pub mod encoder;
pub mod error;
pub mod hgmm;
pub mod io;
pub mod model;
pub mod nn;
pub mod registration;
pub mod seed;
pub mod shapes;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
pub use hgmm::{Gaussian, HgmmTree, Partition, Point3, PointCloud};
pub use transform::RigidTransform;
