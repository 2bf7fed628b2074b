//! The camouflage objective: style, content, smoothness and adversarial terms.
//!
//! ```text
//! L = w_s·L_style + w_c·L_content + w_m·L_smooth + λ·L_adv
//! ```
//!
//! * `L_style`   – Σ over style layers of ‖G(F_l(x_s)) − G(F_l(x'))‖², with the
//!   Gram matrix normalized by `C·H·W` of the layer.
//! * `L_content` – Σ over content layers of ‖F_l(x) − F_l(x')‖².
//! * `L_smooth`  – Σ_{c,i,j} √((x'_{i+1,j} − x'_{i,j})² + (x'_{i,j+1} − x'_{i,j})²);
//!   differences past the last row/column are zero (no wrap-around).
//! * `L_adv`     – `log p_y(x')` (untargeted) or `−log p_t(x') + log p_y(x')`
//!   (targeted), with probabilities clamped to `[1e-12, 1]` inside the logs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::model::{Classifier, FeatureExtractor, FeatureMap, GradientProvider};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor3;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Term weights. Only `lambda_adv` is meant to vary between runs; the other
/// three are fixed constants with defaults `1e4`, `1`, `1e-3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub w_style: f64,
    pub w_content: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1000.0,
            w_style: 1e4,
            w_content: 1.0,
            w_smooth: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("w_style", self.w_style),
            ("w_content", self.w_content),
            ("w_smooth", self.w_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_adv = lambda;
        self
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub style: f64,
    pub content: f64,
    pub smooth: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(style: f64, content: f64, smooth: f64, adversarial: f64, w: &LossWeights) -> Self {
        Self {
            style,
            content,
            smooth,
            adversarial,
            total: w.w_style * style + w.w_content * content + w.w_smooth * smooth + w.lambda_adv * adversarial,
        }
    }

    /// Same terms, total recomputed under different weights.
    pub fn reweighted(&self, w: &LossWeights) -> Self {
        Self::compose(self.style, self.content, self.smooth, self.adversarial, w)
    }

    pub fn is_finite(&self) -> bool {
        [self.style, self.content, self.smooth, self.adversarial, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6e} style={:.6e} content={:.6e} smooth={:.6e} adv={:.6e}",
            self.total, self.style, self.content, self.smooth, self.adversarial
        )
    }
}

/// Untargeted (push the true class down) or targeted (pull a chosen class up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackMode {
    Untargeted { true_label: usize },
    Targeted { true_label: usize, target_label: usize },
}

impl AttackMode {
    pub fn untargeted(true_label: usize) -> Self {
        AttackMode::Untargeted { true_label }
    }

    pub fn targeted(true_label: usize, target_label: usize) -> Result<Self> {
        if true_label == target_label {
            return Err(Error::InvalidMode(format!(
                "target label {target_label} equals the true label"
            )));
        }
        Ok(AttackMode::Targeted {
            true_label,
            target_label,
        })
    }

    pub fn true_label(&self) -> usize {
        match *self {
            AttackMode::Untargeted { true_label } | AttackMode::Targeted { true_label, .. } => true_label,
        }
    }

    pub fn target_label(&self) -> Option<usize> {
        match *self {
            AttackMode::Untargeted { .. } => None,
            AttackMode::Targeted { target_label, .. } => Some(target_label),
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackMode::Targeted { .. })
    }

    pub fn name(&self) -> &'static str {
        if self.is_targeted() {
            "targeted"
        } else {
            "untargeted"
        }
    }

    pub fn check(&self, num_classes: usize) -> Result<()> {
        for label in std::iter::once(self.true_label()).chain(self.target_label()) {
            if label >= num_classes {
                return Err(Error::InvalidLabel { label, num_classes });
            }
        }
        if self.target_label() == Some(self.true_label()) {
            return Err(Error::InvalidMode("target label equals the true label".into()));
        }
        Ok(())
    }
}

/// Gram matrix of a `C×H×W` activation, `C×C` row-major, divided by `C·H·W`.
pub fn gram_matrix<T: Scalar>(act: &Tensor3<T>) -> Vec<T> {
    let c = act.channels();
    let norm = T::lit((c * act.plane_len()) as f64);
    let mut g = vec![T::zero(); c * c];
    for i in 0..c {
        for j in i..c {
            let v = dot(act.plane(i), act.plane(j)) / norm;
            g[i * c + j] = v;
            g[j * c + i] = v;
        }
    }
    g
}

/// Squared Frobenius distance between Gram matrices and the activation
/// gradient of that distance.
fn gram_distance_grad<T: Scalar>(act: &Tensor3<T>, target: &[T]) -> (T, Tensor3<T>) {
    let c = act.channels();
    let norm = T::lit((c * act.plane_len()) as f64);
    let g = gram_matrix(act);
    let diff: Vec<T> = g.iter().zip(target).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|&d| d * d).sum();
    // d/dF ||G - Gs||^2 = 4 (G - Gs) F / N for symmetric G.
    let mut grad = Tensor3::zeros(c, act.height(), act.width());
    let four_over_n = T::lit(4.0) / norm;
    for i in 0..c {
        let dst = grad.plane_mut(i);
        for j in 0..c {
            let coef = diff[i * c + j] * four_over_n;
            if coef != T::zero() {
                axpy(coef, act.plane(j), dst);
            }
        }
    }
    (loss, grad)
}

fn gram_distance<T: Scalar>(act: &Tensor3<T>, target: &[T]) -> T {
    gram_matrix(act)
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

fn squared_distance<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> T {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn check_same_dims<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Style distance between `adv` and `style_img` over the extractor's style layers.
pub fn style_loss<T: Scalar, F: FeatureExtractor<T> + ?Sized>(
    fe: &F,
    adv: &ImagePlane<T>,
    style_img: &ImagePlane<T>,
) -> Result<T> {
    let layers = fe.style_layers().to_vec();
    let a = fe.extract_features(adv, &layers)?;
    let s = fe.extract_features(style_img, &layers)?;
    Ok(layers.iter().map(|l| gram_distance(&a[l], &gram_matrix(&s[l]))).sum())
}

/// Content distance between `orig` and `adv` over the extractor's content layers.
pub fn content_loss<T: Scalar, F: FeatureExtractor<T> + ?Sized>(
    fe: &F,
    orig: &ImagePlane<T>,
    adv: &ImagePlane<T>,
) -> Result<T> {
    check_same_dims(orig, adv, "content loss")?;
    let layers = fe.content_layers().to_vec();
    let a = fe.extract_features(orig, &layers)?;
    let b = fe.extract_features(adv, &layers)?;
    Ok(layers.iter().map(|l| squared_distance(&a[l], &b[l])).sum())
}

/// Smoothness of one `h×w` plane.
pub fn smoothness_plane<T: Scalar>(plane: &[T], h: usize, w: usize) -> T {
    let mut total = T::zero();
    for i in 0..h {
        for j in 0..w {
            let v = plane[i * w + j];
            let dv = if i + 1 < h {
                plane[(i + 1) * w + j] - v
            } else {
                T::zero()
            };
            let dh = if j + 1 < w { plane[i * w + j + 1] - v } else { T::zero() };
            total += (dv * dv + dh * dh).sqrt();
        }
    }
    total
}

fn smoothness_plane_grad<T: Scalar>(plane: &[T], h: usize, w: usize, grad: &mut [T]) -> T {
    let mut total = T::zero();
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let v = plane[k];
            let dv = if i + 1 < h { plane[k + w] - v } else { T::zero() };
            let dh = if j + 1 < w { plane[k + 1] - v } else { T::zero() };
            let r = (dv * dv + dh * dh).sqrt();
            total += r;
            if r > T::zero() {
                let (gv, gh) = (dv / r, dh / r);
                grad[k] -= gv + gh;
                if i + 1 < h {
                    grad[k + w] += gv;
                }
                if j + 1 < w {
                    grad[k + 1] += gh;
                }
            }
        }
    }
    total
}

/// Total-variation style smoothness, summed over channels.
pub fn smoothness_loss<T: Scalar>(adv: &ImagePlane<T>) -> T {
    let t = adv.tensor();
    (0..t.channels())
        .map(|c| smoothness_plane(t.plane(c), t.height(), t.width()))
        .sum()
}

fn smoothness_value_and_grad<T: Scalar>(adv: &ImagePlane<T>) -> (T, Tensor3<T>) {
    let t = adv.tensor();
    let mut grad = Tensor3::zeros(t.channels(), t.height(), t.width());
    let mut total = T::zero();
    for c in 0..t.channels() {
        total += smoothness_plane_grad(t.plane(c), t.height(), t.width(), grad.plane_mut(c));
    }
    (total, grad)
}

#[inline]
fn clamped_log<T: Scalar>(p: T) -> T {
    if p.is_nan() {
        return p;
    }
    p.max(T::lit(PROB_FLOOR)).min(T::one()).ln()
}

#[inline]
fn clamped_log_grad<T: Scalar>(p: T) -> T {
    if p > T::lit(PROB_FLOOR) && p <= T::one() {
        T::one() / p
    } else {
        T::zero()
    }
}

/// Adversarial loss evaluated on a probability vector.
pub fn adversarial_loss_from_probs<T: Scalar>(probs: &[T], mode: &AttackMode) -> Result<T> {
    mode.check(probs.len())?;
    let y = clamped_log(probs[mode.true_label()]);
    Ok(match mode.target_label() {
        None => y,
        Some(t) => y - clamped_log(probs[t]),
    })
}

/// `∂L_adv/∂p` for [`adversarial_loss_from_probs`].
pub fn adversarial_loss_prob_grad<T: Scalar>(probs: &[T], mode: &AttackMode) -> Vec<T> {
    let mut g = vec![T::zero(); probs.len()];
    let y = mode.true_label();
    g[y] += clamped_log_grad(probs[y]);
    if let Some(t) = mode.target_label() {
        g[t] -= clamped_log_grad(probs[t]);
    }
    g
}

pub fn adversarial_loss<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    mode: &AttackMode,
) -> Result<T> {
    mode.check(clf.num_classes())?;
    adversarial_loss_from_probs(&clf.predict_probs(adv)?, mode)
}

/// Adversarial loss, its pixel gradient and the probabilities it was computed from.
pub fn adversarial_value_and_grad<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    mode: &AttackMode,
) -> Result<(T, Tensor3<T>, Vec<T>)> {
    mode.check(clf.num_classes())?;
    let (probs, grad) = clf.probs_with_pullback(adv, &mut |p| adversarial_loss_prob_grad(p, mode))?;
    let value = adversarial_loss_from_probs(&probs, mode)?;
    Ok((value, grad, probs))
}

/// Evaluates every term and composes them with `weights`.
///
/// A zero `w_content` disables the content term; it is then reported as 0.
pub fn total_loss<T, F, C>(
    fe: &F,
    clf: &C,
    orig: &ImagePlane<T>,
    adv: &ImagePlane<T>,
    style_img: &ImagePlane<T>,
    mode: &AttackMode,
    weights: &LossWeights,
) -> Result<LossBreakdown>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    weights.validate()?;
    let style = style_loss(fe, adv, style_img)?.to_f64_lossy();
    let content = if weights.w_content > 0.0 {
        content_loss(fe, orig, adv)?.to_f64_lossy()
    } else {
        0.0
    };
    let smooth = smoothness_loss(adv).to_f64_lossy();
    let adversarial = adversarial_loss(clf, adv, mode)?.to_f64_lossy();
    Ok(LossBreakdown::compose(style, content, smooth, adversarial, weights))
}

/// Camouflage part of the objective (style + content + smoothness) with the
/// reference features of the style and original images computed once.
pub struct Camouflage<'a, T: Scalar, F: FeatureExtractor<T> + ?Sized> {
    fe: &'a F,
    style_layers: Vec<String>,
    content_layers: Vec<String>,
    all_layers: Vec<String>,
    style_grams: FeatureMap<T>,
    content_targets: FeatureMap<T>,
    weights: LossWeights,
}

/// Camouflage term values before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamouflageTerms {
    pub style: f64,
    pub content: f64,
    pub smooth: f64,
}

impl<'a, T: Scalar, F: FeatureExtractor<T> + ?Sized> Camouflage<'a, T, F> {
    pub fn new(fe: &'a F, orig: &ImagePlane<T>, style_img: &ImagePlane<T>, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        check_same_dims(orig, style_img, "style image must match the original's resolution")?;
        let style_layers = fe.style_layers().to_vec();
        let content_layers = if weights.w_content > 0.0 {
            fe.content_layers().to_vec()
        } else {
            Vec::new()
        };
        let style_feats = fe.extract_features(style_img, &style_layers)?;
        let style_grams = style_feats
            .iter()
            .map(|(l, a)| {
                let c = a.channels();
                (l.clone(), Tensor3::from_vec(1, c, c, gram_matrix(a)).expect("c*c gram"))
            })
            .collect();
        let content_targets = fe.extract_features(orig, &content_layers)?;
        let mut all_layers = style_layers.clone();
        for l in &content_layers {
            if !all_layers.contains(l) {
                all_layers.push(l.clone());
            }
        }
        Ok(Self {
            fe,
            style_layers,
            content_layers,
            all_layers,
            style_grams,
            content_targets,
            weights,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn terms(&self, adv: &ImagePlane<T>) -> Result<CamouflageTerms> {
        let feats = self.fe.extract_features(adv, &self.all_layers)?;
        let style: T = self
            .style_layers
            .iter()
            .map(|l| gram_distance(&feats[l], self.style_grams[l].data()))
            .sum();
        let content: T = self
            .content_layers
            .iter()
            .map(|l| squared_distance(&feats[l], &self.content_targets[l]))
            .sum();
        Ok(CamouflageTerms {
            style: style.to_f64_lossy(),
            content: content.to_f64_lossy(),
            smooth: smoothness_loss(adv).to_f64_lossy(),
        })
    }

    /// Term values and the gradient of `w_s·style + w_c·content + w_m·smooth`.
    pub fn terms_and_grad(&self, adv: &ImagePlane<T>) -> Result<(CamouflageTerms, Tensor3<T>)> {
        self.partial_terms_and_grad(adv, self.weights.w_style, self.weights.w_content, self.weights.w_smooth)
    }

    /// Like [`Self::terms_and_grad`] with explicit term weights; a zero weight
    /// drops that term from the gradient (its value is still reported).
    pub fn partial_terms_and_grad(
        &self,
        adv: &ImagePlane<T>,
        w_style: f64,
        w_content: f64,
        w_smooth: f64,
    ) -> Result<(CamouflageTerms, Tensor3<T>)> {
        let (ws, wc, wm) = (T::lit(w_style), T::lit(w_content), T::lit(w_smooth));
        let mut style = T::zero();
        let mut content = T::zero();
        let (_, mut grad) = self.fe.features_with_pullback(adv, &self.all_layers, &mut |feats| {
            let mut grads = FeatureMap::new();
            for l in &self.style_layers {
                let (v, mut g) = gram_distance_grad(&feats[l], self.style_grams[l].data());
                style += v;
                g.scale(ws);
                grads.insert(l.clone(), g);
            }
            for l in &self.content_layers {
                let a = &feats[l];
                let t = &self.content_targets[l];
                content += squared_distance(a, t);
                let mut g = Tensor3::zeros(a.channels(), a.height(), a.width());
                for ((gv, &x), &y) in g.data_mut().iter_mut().zip(a.data()).zip(t.data()) {
                    *gv = T::lit(2.0) * (x - y) * wc;
                }
                match grads.get_mut(l) {
                    Some(existing) => existing.add_scaled(T::one(), &g),
                    None => {
                        grads.insert(l.clone(), g);
                    }
                }
            }
            grads
        })?;
        let (smooth, sg) = smoothness_value_and_grad(adv);
        grad.add_scaled(wm, &sg);
        Ok((
            CamouflageTerms {
                style: style.to_f64_lossy(),
                content: content.to_f64_lossy(),
                smooth: smooth.to_f64_lossy(),
            },
            grad,
        ))
    }
}

/// The full digital objective as a [`GradientProvider`].
pub struct CamouflageObjective<'a, T: Scalar, F: FeatureExtractor<T> + ?Sized, C: Classifier<T> + ?Sized> {
    pub camouflage: Camouflage<'a, T, F>,
    pub clf: &'a C,
    pub mode: AttackMode,
}

impl<'a, T, F, C> CamouflageObjective<'a, T, F, C>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    pub fn new(
        fe: &'a F,
        clf: &'a C,
        orig: &ImagePlane<T>,
        style_img: &ImagePlane<T>,
        mode: AttackMode,
        weights: LossWeights,
    ) -> Result<Self> {
        mode.check(clf.num_classes())?;
        Ok(Self {
            camouflage: Camouflage::new(fe, orig, style_img, weights)?,
            clf,
            mode,
        })
    }

    pub fn breakdown(&self, adv: &ImagePlane<T>) -> Result<LossBreakdown> {
        let t = self.camouflage.terms(adv)?;
        let a = adversarial_loss(self.clf, adv, &self.mode)?.to_f64_lossy();
        Ok(LossBreakdown::compose(
            t.style,
            t.content,
            t.smooth,
            a,
            self.camouflage.weights(),
        ))
    }

    pub fn breakdown_and_grad(&self, adv: &ImagePlane<T>) -> Result<(LossBreakdown, Tensor3<T>)> {
        let (t, mut grad) = self.camouflage.terms_and_grad(adv)?;
        let (a, ga, _) = adversarial_value_and_grad(self.clf, adv, &self.mode)?;
        let w = self.camouflage.weights();
        grad.add_scaled(T::lit(w.lambda_adv), &ga);
        Ok((
            LossBreakdown::compose(t.style, t.content, t.smooth, a.to_f64_lossy(), w),
            grad,
        ))
    }
}

impl<'a, T, F, C> GradientProvider<T> for CamouflageObjective<'a, T, F, C>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    fn value(&self, img: &ImagePlane<T>) -> Result<T> {
        Ok(T::lit(self.breakdown(img)?.total))
    }

    fn value_and_grad(&self, img: &ImagePlane<T>) -> Result<(T, Tensor3<T>)> {
        let (b, g) = self.breakdown_and_grad(img)?;
        Ok((T::lit(b.total), g))
    }
}

/// A single unweighted term as a [`GradientProvider`], for gradient checks.
pub enum Term<'a, T: Scalar, F: FeatureExtractor<T> + ?Sized, C: Classifier<T> + ?Sized> {
    Style(Camouflage<'a, T, F>),
    Content(Camouflage<'a, T, F>),
    Smoothness,
    Adversarial(&'a C, AttackMode),
}

impl<'a, T, F, C> Term<'a, T, F, C>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    pub fn style(fe: &'a F, orig: &ImagePlane<T>, style_img: &ImagePlane<T>) -> Result<Self> {
        Ok(Term::Style(Camouflage::new(
            fe,
            orig,
            style_img,
            LossWeights::default(),
        )?))
    }

    pub fn content(fe: &'a F, orig: &ImagePlane<T>) -> Result<Self> {
        Ok(Term::Content(Camouflage::new(fe, orig, orig, LossWeights::default())?))
    }
}

impl<'a, T, F, C> GradientProvider<T> for Term<'a, T, F, C>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    fn value(&self, img: &ImagePlane<T>) -> Result<T> {
        Ok(match self {
            Term::Style(c) => T::lit(c.terms(img)?.style),
            Term::Content(c) => T::lit(c.terms(img)?.content),
            Term::Smoothness => smoothness_loss(img),
            Term::Adversarial(clf, mode) => adversarial_loss(*clf, img, mode)?,
        })
    }

    fn value_and_grad(&self, img: &ImagePlane<T>) -> Result<(T, Tensor3<T>)> {
        Ok(match self {
            Term::Style(c) => {
                let (t, g) = c.partial_terms_and_grad(img, 1.0, 0.0, 0.0)?;
                (T::lit(t.style), g)
            }
            Term::Content(c) => {
                let (t, g) = c.partial_terms_and_grad(img, 0.0, 1.0, 0.0)?;
                (T::lit(t.content), g)
            }
            Term::Smoothness => smoothness_value_and_grad(img),
            Term::Adversarial(clf, mode) => {
                let (v, g, _) = adversarial_value_and_grad(*clf, img, mode)?;
                (v, g)
            }
        })
    }
}
