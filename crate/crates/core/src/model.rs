//! Adapter contracts for the feature extractor and the attacked classifier,
//! plus the reference adapters backed by [`SmallCnn`].
//!
//! The attack only ever talks to these traits. The extractor supplies style
//! and content representations; the classifier supplies probabilities and the
//! pixel gradient of any scalar function of them. Nothing else of the
//! classifier is visible to the attack (gray-box setting).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nn::{softmax, softmax_backward, CnnConfig, Conv3x3, Dense, SmallCnn};
use crate::resample::Resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Activations keyed by layer name.
pub type FeatureMap<T> = BTreeMap<String, Tensor3<T>>;

pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    /// All layers this extractor can expose, shallow to deep.
    fn layer_names(&self) -> Vec<String>;
    fn style_layers(&self) -> &[String];
    fn content_layers(&self) -> &[String];

    /// One `C×H×W` activation per requested layer.
    fn extract_features(&self, img: &ImagePlane<T>, layers: &[String]) -> Result<FeatureMap<T>>;

    /// Extracts `layers` and returns, alongside them, the pixel gradient of the
    /// scalar whose activation gradients `upstream` computes from the features.
    fn features_with_pullback(
        &self,
        img: &ImagePlane<T>,
        layers: &[String],
        upstream: &mut dyn FnMut(&FeatureMap<T>) -> FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, Tensor3<T>)>;
}

pub trait Classifier<T: Scalar>: Send + Sync {
    fn num_classes(&self) -> usize;

    fn label_names(&self) -> Option<&[String]> {
        None
    }

    /// Softmax probabilities; non-negative and summing to one.
    fn predict_probs(&self, img: &ImagePlane<T>) -> Result<Vec<T>>;

    /// Probabilities plus the pixel gradient of a scalar `L(p)`, where
    /// `upstream(p)` returns `∂L/∂p`.
    fn probs_with_pullback(
        &self,
        img: &ImagePlane<T>,
        upstream: &mut dyn FnMut(&[T]) -> Vec<T>,
    ) -> Result<(Vec<T>, Tensor3<T>)>;
}

impl<T: Scalar, C: Classifier<T> + ?Sized> Classifier<T> for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn label_names(&self) -> Option<&[String]> {
        (**self).label_names()
    }
    fn predict_probs(&self, img: &ImagePlane<T>) -> Result<Vec<T>> {
        (**self).predict_probs(img)
    }
    fn probs_with_pullback(
        &self,
        img: &ImagePlane<T>,
        upstream: &mut dyn FnMut(&[T]) -> Vec<T>,
    ) -> Result<(Vec<T>, Tensor3<T>)> {
        (**self).probs_with_pullback(img, upstream)
    }
}

/// A scalar loss of an image with an analytic pixel gradient.
///
/// Non-differentiable points (a zero-length difference vector in the
/// smoothness term, a probability at the clamp floor) use the zero subgradient.
pub trait GradientProvider<T: Scalar> {
    fn value(&self, img: &ImagePlane<T>) -> Result<T>;
    fn value_and_grad(&self, img: &ImagePlane<T>) -> Result<(T, Tensor3<T>)>;
}

/// `∂loss/∂pixels`, shaped like the image.
pub fn loss_gradient<T: Scalar>(loss: &(impl GradientProvider<T> + ?Sized), img: &ImagePlane<T>) -> Result<Tensor3<T>> {
    Ok(loss.value_and_grad(img)?.1)
}

/// A loss that ignores its input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLoss<T>(pub T);

impl<T: Scalar> GradientProvider<T> for ConstantLoss<T> {
    fn value(&self, _img: &ImagePlane<T>) -> Result<T> {
        Ok(self.0)
    }
    fn value_and_grad(&self, img: &ImagePlane<T>) -> Result<(T, Tensor3<T>)> {
        let t = img.tensor();
        Ok((self.0, Tensor3::zeros(t.channels(), t.height(), t.width())))
    }
}

/// Sum of all pixel values.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelSum;

impl<T: Scalar> GradientProvider<T> for PixelSum {
    fn value(&self, img: &ImagePlane<T>) -> Result<T> {
        Ok(img.tensor().sum())
    }
    fn value_and_grad(&self, img: &ImagePlane<T>) -> Result<(T, Tensor3<T>)> {
        let t = img.tensor();
        Ok((t.sum(), Tensor3::filled(t.channels(), t.height(), t.width(), T::one())))
    }
}

/// Pixel preprocessing shared by the CNN adapters: inputs are centred by
/// subtracting 0.5 per channel; no per-channel scaling.
pub const CNN_PIXEL_MEAN: f64 = 0.5;

fn preprocess<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let m = T::lit(CNN_PIXEL_MEAN);
    x.map(|v| v - m)
}

fn layer_index(names: &[String], layer: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
}

/// Fully convolutional feature extractor: runs the conv trunk at the image's
/// own resolution.
#[derive(Debug, Clone)]
pub struct CnnFeatureExtractor<T> {
    net: SmallCnn<T>,
    names: Vec<String>,
    style: Vec<String>,
    content: Vec<String>,
}

impl<T: Scalar> CnnFeatureExtractor<T> {
    /// Style layers default to every conv block, content to the deepest one.
    pub fn new(net: SmallCnn<T>) -> Self {
        let names = net.config().layer_names();
        let style = names.clone();
        let content = vec![names.last().cloned().expect("at least one block")];
        Self {
            net,
            names,
            style,
            content,
        }
    }

    pub fn with_layers(mut self, style: Vec<String>, content: Vec<String>) -> Result<Self> {
        for l in style.iter().chain(&content) {
            layer_index(&self.names, l)?;
        }
        self.style = style;
        self.content = content;
        Ok(self)
    }

    pub fn network(&self) -> &SmallCnn<T> {
        &self.net
    }

    fn indices(&self, layers: &[String]) -> Result<Vec<usize>> {
        layers.iter().map(|l| layer_index(&self.names, l)).collect()
    }
}

impl<T: Scalar> FeatureExtractor<T> for CnnFeatureExtractor<T> {
    fn layer_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn style_layers(&self) -> &[String] {
        &self.style
    }

    fn content_layers(&self) -> &[String] {
        &self.content
    }

    fn extract_features(&self, img: &ImagePlane<T>, layers: &[String]) -> Result<FeatureMap<T>> {
        let idx = self.indices(layers)?;
        let Some(&deepest) = idx.iter().max() else {
            return Ok(FeatureMap::new());
        };
        let trace = self.net.trunk_forward(&preprocess(img.tensor()), deepest + 1);
        Ok(layers
            .iter()
            .zip(&idx)
            .map(|(l, &i)| (l.clone(), trace.activations[i].clone()))
            .collect())
    }

    fn features_with_pullback(
        &self,
        img: &ImagePlane<T>,
        layers: &[String],
        upstream: &mut dyn FnMut(&FeatureMap<T>) -> FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, Tensor3<T>)> {
        let idx = self.indices(layers)?;
        let t = img.tensor();
        let Some(&deepest) = idx.iter().max() else {
            return Ok((FeatureMap::new(), Tensor3::zeros(t.channels(), t.height(), t.width())));
        };
        let trace = self.net.trunk_forward(&preprocess(t), deepest + 1);
        let feats: FeatureMap<T> = layers
            .iter()
            .zip(&idx)
            .map(|(l, &i)| (l.clone(), trace.activations[i].clone()))
            .collect();
        let grads = upstream(&feats);
        let mut per_block: Vec<Option<&Tensor3<T>>> = vec![None; deepest + 1];
        for (l, g) in &grads {
            let i = layer_index(&self.names, l)?;
            if i > deepest {
                return Err(Error::UnknownLayer(format!("{l} (gradient for an unextracted layer)")));
            }
            if g.shape() != trace.activations[i].shape() {
                return Err(Error::ShapeMismatch(format!("gradient for layer {l}")));
            }
            per_block[i] = Some(g);
        }
        let grad = self
            .net
            .trunk_backward(&trace, &per_block, None, None, true)
            .expect("input gradient requested");
        Ok((feats, grad))
    }
}

/// Classifier adapter: bilinear resize to the network's input size (part of
/// the differentiable path), centring, conv trunk, dense head, softmax.
#[derive(Debug, Clone)]
pub struct CnnClassifier<T> {
    net: SmallCnn<T>,
}

impl<T: Scalar> CnnClassifier<T> {
    pub fn new(net: SmallCnn<T>) -> Self {
        Self { net }
    }

    pub fn network(&self) -> &SmallCnn<T> {
        &self.net
    }

    fn resize_for(&self, img: &ImagePlane<T>) -> Resize<T> {
        let s = self.net.config().input_size;
        Resize::new(img.height(), img.width(), s, s)
    }
}

impl<T: Scalar> Classifier<T> for CnnClassifier<T> {
    fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    fn label_names(&self) -> Option<&[String]> {
        let names = &self.net.config().label_names;
        (!names.is_empty()).then_some(names.as_slice())
    }

    fn predict_probs(&self, img: &ImagePlane<T>) -> Result<Vec<T>> {
        let x = preprocess(&self.resize_for(img).apply(img.tensor()));
        Ok(softmax(&self.net.logits(&x).1))
    }

    fn probs_with_pullback(
        &self,
        img: &ImagePlane<T>,
        upstream: &mut dyn FnMut(&[T]) -> Vec<T>,
    ) -> Result<(Vec<T>, Tensor3<T>)> {
        let resize = self.resize_for(img);
        let x = preprocess(&resize.apply(img.tensor()));
        let (trace, logits) = self.net.logits(&x);
        let probs = softmax(&logits);
        let gp = upstream(&probs);
        if gp.len() != probs.len() {
            return Err(Error::ShapeMismatch(format!(
                "probability gradient has {} entries, expected {}",
                gp.len(),
                probs.len()
            )));
        }
        let gz = softmax_backward(&probs, &gp);
        let gx = self
            .net
            .logits_backward(&trace, &gz, None, true)
            .expect("input gradient requested");
        Ok((probs, resize.apply_adjoint(&gx)))
    }
}

/// On-disk weights for [`SmallCnn`]: a JSON document with the architecture and
/// every parameter array in `f64`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub format: String,
    pub version: u32,
    pub config: CnnConfig,
    pub convs: Vec<LayerWeights>,
    pub head: LayerWeights,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const WEIGHTS_FORMAT: &str = "camo-small-cnn";
pub const WEIGHTS_VERSION: u32 = 1;

impl WeightsFile {
    pub fn from_network<T: Scalar>(net: &SmallCnn<T>) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        Self {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            config: net.config().clone(),
            convs: net
                .convs
                .iter()
                .map(|c| LayerWeights {
                    inputs: c.in_ch,
                    outputs: c.out_ch,
                    weight: f(&c.weight),
                    bias: f(&c.bias),
                })
                .collect(),
            head: LayerWeights {
                inputs: net.head.inputs,
                outputs: net.head.outputs,
                weight: f(&net.head.weight),
                bias: f(&net.head.bias),
            },
        }
    }

    pub fn into_network<T: Scalar>(self) -> Result<SmallCnn<T>> {
        let f = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<_>>();
        let convs = self
            .convs
            .into_iter()
            .map(|l| Conv3x3 {
                in_ch: l.inputs,
                out_ch: l.outputs,
                weight: f(l.weight),
                bias: f(l.bias),
            })
            .collect();
        let head = Dense {
            inputs: self.head.inputs,
            outputs: self.head.outputs,
            weight: f(self.head.weight),
            bias: f(self.head.bias),
        };
        SmallCnn::from_parts(self.config, convs, head)
    }
}

pub fn save_weights<T: Scalar>(net: &SmallCnn<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(&WeightsFile::from_network(net)).map_err(|e| Error::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<SmallCnn<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.format != WEIGHTS_FORMAT || file.version != WEIGHTS_VERSION {
        return Err(Error::Weights {
            path: path.to_path_buf(),
            reason: format!("unsupported format {} v{}", file.format, file.version),
        });
    }
    file.into_network().map_err(|e| Error::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
