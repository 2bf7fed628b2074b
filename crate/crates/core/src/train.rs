//! Training the desk-scale reference networks on the procedural dataset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::Result;
use crate::image::ImagePlane;
use crate::nn::{softmax, CnnConfig, ParamGrads, SmallCnn};
use crate::optim::AdamGroup;
use crate::resample::Resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;
use crate::transforms::{apply_transform, sample_transform, TransformRanges};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    /// Side of the generated images before they are resized to the network input.
    pub image_size: usize,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mass spread uniformly over all classes in the training targets.
    pub label_smoothing: f64,
    /// Fraction of samples rendered as physical scenes (transformed onto a
    /// background) so the classifier also recognizes objects in context.
    pub scene_fraction: f64,
    pub scene_ranges: TransformRanges,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 128,
            samples: 1500,
            epochs: 8,
            batch_size: 16,
            learning_rate: 3e-3,
            label_smoothing: 0.1,
            scene_fraction: 0.35,
            scene_ranges: TransformRanges::default(),
        }
    }
}

/// Default desk-scale architecture: three conv blocks over a 32×32 input.
pub fn desk_config() -> CnnConfig {
    CnnConfig {
        channels: vec![8, 16, 32],
        input_size: 32,
        num_classes: data::num_classes(),
        label_names: data::label_names(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_epoch_loss: f64,
    pub train_accuracy: f64,
}

/// Renders one training example: a pattern image, sometimes placed into a
/// random scene, resized to the network input.
fn example<T: Scalar>(opts: &TrainOptions, input: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor3<T>, usize)> {
    let label = rng.gen_range(0..data::num_classes());
    let img: ImagePlane<T> = data::pattern_image(label, opts.image_size, rng)?;
    let img = if rng.gen_bool(opts.scene_fraction.clamp(0.0, 1.0)) {
        let side = opts.scene_ranges.max_extent(opts.image_size, opts.image_size).ceil() as usize;
        let bg = data::background_image(side, side, rng)?;
        let t = sample_transform(&opts.scene_ranges, rng)?;
        apply_transform(&img, &bg, &t)?
    } else {
        img
    };
    let x = Resize::new(img.height(), img.width(), input, input).apply(img.tensor());
    let mean = T::lit(crate::model::CNN_PIXEL_MEAN);
    Ok((x.map(|v| v - mean), label))
}

/// Generates the training set described by `opts`.
pub fn make_training_set<T: Scalar>(opts: &TrainOptions, input: usize) -> Result<Vec<(Tensor3<T>, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.samples).map(|_| example(opts, input, &mut rng)).collect()
}

/// Trains a fresh network with softmax cross-entropy and Adam.
pub fn train<T: Scalar>(config: CnnConfig, opts: &TrainOptions) -> Result<(SmallCnn<T>, TrainReport)> {
    let set = make_training_set::<T>(opts, config.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x005e_ed0f_7a1e);
    let mut net = SmallCnn::new_random(config, &mut rng)?;
    let mut grads = ParamGrads::zeros_like(&net);
    let lens: Vec<usize> = grads.bufs.iter().map(Vec::len).collect();
    let mut opt = AdamGroup::new(lens, T::lit(opts.learning_rate));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut last_loss = f64::NAN;
    let smooth = opts.label_smoothing.clamp(0.0, 1.0);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            grads.clear();
            for &i in batch {
                let (x, label) = &set[i];
                let (trace, logits) = net.logits(x);
                let mut p = softmax(&logits);
                let k = p.len() as f64;
                for (c, pc) in p.iter_mut().enumerate() {
                    let q = smooth / k + if c == *label { 1.0 - smooth } else { 0.0 };
                    epoch_loss -= q * pc.max(T::lit(1e-12)).ln().to_f64_lossy();
                    *pc -= T::lit(q);
                }
                net.logits_backward(&trace, &p, Some(&mut grads), false);
            }
            let inv = T::one() / T::lit(batch.len() as f64);
            grads.bufs.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v *= inv));
            opt.step(net.params_mut(), &grads.bufs);
        }
        last_loss = epoch_loss / set.len() as f64;
        log::debug!("epoch {epoch}: mean cross-entropy {last_loss:.4}");
    }
    let correct = set
        .iter()
        .filter(|(x, label)| {
            let logits = net.logits(x).1;
            argmax(&logits) == *label
        })
        .count();
    Ok((
        net,
        TrainReport {
            final_epoch_loss: last_loss,
            train_accuracy: correct as f64 / set.len() as f64,
        },
    ))
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
