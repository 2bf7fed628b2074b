//! Ready-made desk-scale setup: a classifier and a feature extractor trained
//! on different seeds, plus held-out corpus, style and background generators.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::Result;
use crate::image::ImagePlane;
use crate::model::{load_weights, save_weights, CnnClassifier, CnnFeatureExtractor};
use crate::nn::SmallCnn;
use crate::scalar::Scalar;
use crate::train::{desk_config, train, TrainOptions};
use crate::transforms::{BackgroundPool, TransformRanges};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskOptions {
    pub classifier_seed: u64,
    pub extractor_seed: u64,
    /// Shared training options; the seed field is replaced per network.
    pub train: TrainOptions,
}

impl Default for DeskOptions {
    fn default() -> Self {
        Self {
            classifier_seed: 1,
            extractor_seed: 2,
            train: TrainOptions::default(),
        }
    }
}

impl DeskOptions {
    fn options_for(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            seed,
            ..self.train.clone()
        }
    }

    fn cache_name(&self, role: &str, seed: u64) -> String {
        let t = &self.train;
        format!(
            "{role}-s{seed}-n{}-e{}-i{}-ls{}.json",
            t.samples, t.epochs, t.image_size, t.label_smoothing
        )
    }
}

/// Trained networks for one desk setup.
#[derive(Debug, Clone)]
pub struct Desk<T> {
    pub classifier: CnnClassifier<T>,
    pub extractor: CnnFeatureExtractor<T>,
}

impl<T: Scalar> Desk<T> {
    pub fn from_networks(classifier: SmallCnn<T>, extractor: SmallCnn<T>) -> Self {
        Self {
            classifier: CnnClassifier::new(classifier),
            extractor: CnnFeatureExtractor::new(extractor),
        }
    }

    /// Trains both networks from scratch.
    pub fn train(opts: &DeskOptions) -> Result<Self> {
        let (clf, rep) = train::<T>(desk_config(), &opts.options_for(opts.classifier_seed))?;
        log::info!("classifier trained: {rep:?}");
        let (fe, rep) = train::<T>(desk_config(), &opts.options_for(opts.extractor_seed))?;
        log::info!("extractor trained: {rep:?}");
        Ok(Self::from_networks(clf, fe))
    }

    /// Loads both networks from `dir` when cached there, otherwise trains and
    /// saves them.
    pub fn load_or_train(dir: impl AsRef<Path>, opts: &DeskOptions) -> Result<Self> {
        let dir = dir.as_ref();
        let clf_path = dir.join(opts.cache_name("classifier", opts.classifier_seed));
        let fe_path = dir.join(opts.cache_name("extractor", opts.extractor_seed));
        if let (Ok(c), Ok(f)) = (load_weights::<T>(&clf_path), load_weights::<T>(&fe_path)) {
            return Ok(Self::from_networks(c, f));
        }
        let desk = Self::train(opts)?;
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        save_weights(desk.classifier.network(), &clf_path)?;
        save_weights(desk.extractor.network(), &fe_path)?;
        Ok(desk)
    }
}

/// A held-out labelled image.
#[derive(Debug, Clone)]
pub struct CorpusItem<T> {
    pub image: ImagePlane<T>,
    pub label: usize,
}

/// `n` labelled images cycling through the classes.
pub fn corpus<T: Scalar>(n: usize, size: usize, seed: u64) -> Result<Vec<CorpusItem<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % data::num_classes();
            Ok(CorpusItem {
                image: data::pattern_image(label, size, &mut rng)?,
                label,
            })
        })
        .collect()
}

pub fn styles<T: Scalar>(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePlane<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| data::style_image(size, size, &mut rng)).collect()
}

/// `n` backgrounds large enough for `size`×`size` foregrounds under `ranges`.
pub fn backgrounds<T: Scalar>(n: usize, size: usize, ranges: &TransformRanges, seed: u64) -> Result<BackgroundPool<T>> {
    let side = ranges.max_extent(size, size).ceil() as usize + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs = (0..n)
        .map(|_| {
            let s = side + rng.gen_range(0..8);
            data::background_image(s, s, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    BackgroundPool::new(imgs)
}
