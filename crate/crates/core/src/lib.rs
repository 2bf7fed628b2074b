//! Style-camouflaged adversarial images.
//!
//! Crafts adversarial examples whose perturbation is confined to a masked
//! region and rendered in the appearance of a reference style image, by
//! minimizing a weighted sum of style, content, smoothness and adversarial
//! losses. Optional physical adaptation makes the result survive random
//! rotation, scaling, colour shift and background changes.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the common instantiations.

pub mod attack;
pub mod data;
pub mod desk;
pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use attack::{run_attack, AttackResult, AttackSettings, AttackSpec, LambdaSchedule};
pub use error::{Error, Result};
pub use image::{composite, make_rect_mask, project_valid, ImagePlane, RegionMask};
pub use losses::{AttackMode, LossBreakdown, LossWeights};
pub use model::{Classifier, FeatureExtractor, GradientProvider};
pub use scalar::Scalar;
pub use tensor::Tensor3;

pub type Image32 = ImagePlane<f32>;
pub type Image64 = ImagePlane<f64>;
pub type Cnn32 = nn::SmallCnn<f32>;
pub type Cnn64 = nn::SmallCnn<f64>;
