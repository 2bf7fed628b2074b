//! Simulated physical conditions: rotation, scaling, colour shift and
//! composition onto a random background.
//!
//! A transform maps the adversarial image (the foreground) into a canvas the
//! size of a background image. Canvas pixels whose inverse-mapped position
//! falls inside the foreground take the bilinearly sampled, colour-shifted
//! foreground value; every other pixel keeps the background value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::losses::{adversarial_loss_from_probs, adversarial_loss_prob_grad, AttackMode};
use crate::model::Classifier;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Ranges the transform distribution samples from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    /// Rotation is uniform in `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-channel additive offset, uniform in `[-color_offset, color_offset]`.
    pub color_offset: f64,
    /// Global brightness multiplier, uniform in `[1 - brightness, 1 + brightness]`.
    pub brightness: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            scale_min: 0.7,
            scale_max: 1.3,
            color_offset: 0.1,
            brightness: 0.2,
        }
    }
}

impl TransformRanges {
    /// Ranges that only ever produce the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            color_offset: 0.0,
            brightness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rotation_deg,
            self.scale_min,
            self.scale_max,
            self.color_offset,
            self.brightness,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("non-finite transform range".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::InvalidRange(format!(
                "rotation_deg {} not in [0, 180]",
                self.rotation_deg
            )));
        }
        if self.scale_min <= 0.0 || self.scale_min > self.scale_max {
            return Err(Error::InvalidRange(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.color_offset) {
            return Err(Error::InvalidRange(format!(
                "color_offset {} not in [0, 1]",
                self.color_offset
            )));
        }
        if !(0.0..1.0).contains(&self.brightness) {
            return Err(Error::InvalidRange(format!(
                "brightness {} not in [0, 1)",
                self.brightness
            )));
        }
        Ok(())
    }

    /// Largest side of the transformed footprint for a `h×w` foreground over
    /// every parameter in range.
    pub fn max_extent(&self, h: usize, w: usize) -> f64 {
        let r = self.rotation_deg.min(90.0).to_radians();
        // |cos|h + |sin|w is maximized over [0, r] at r or at atan(w/h) if inside.
        let side = |a: usize, b: usize| {
            let (a, b) = (a as f64, b as f64);
            let peak = b.atan2(a);
            let at = |t: f64| a * t.cos().abs() + b * t.sin().abs();
            if peak <= r {
                at(peak)
            } else {
                at(r).max(at(0.0))
            }
        };
        self.scale_max * side(h, w).max(side(w, h))
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub color_offset: [f64; 3],
    pub brightness: f64,
    /// Where the footprint's bounding box sits in the background, as fractions
    /// of the free space `(bg_h − extent_h, bg_w − extent_w)`.
    pub placement: (f64, f64),
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            color_offset: [0.0; 3],
            brightness: 1.0,
            placement: (0.5, 0.5),
        }
    }

    /// Bounding box `(height, width)` of the transformed `h×w` foreground.
    pub fn extent(&self, h: usize, w: usize) -> (f64, f64) {
        let t = self.rotation_deg.to_radians();
        let (c, s) = (t.cos().abs(), t.sin().abs());
        let (h, w) = (h as f64, w as f64);
        (self.scale * (h * c + w * s), self.scale * (w * c + h * s))
    }
}

/// Draws one transform. Parameters are consumed from `rng` in a fixed order
/// (rotation, scale, three offsets, brightness, placement row, placement column)
/// so a seed fully determines the sequence.
pub fn sample_transform(ranges: &TransformRanges, rng: &mut impl Rng) -> Result<TransformParams> {
    ranges.validate()?;
    let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let rotation_deg = sym(rng, ranges.rotation_deg);
    let scale = if ranges.scale_max > ranges.scale_min {
        rng.gen_range(ranges.scale_min..=ranges.scale_max)
    } else {
        ranges.scale_min
    };
    let color_offset = [
        sym(rng, ranges.color_offset),
        sym(rng, ranges.color_offset),
        sym(rng, ranges.color_offset),
    ];
    let brightness = 1.0 + sym(rng, ranges.brightness);
    let placement = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
    Ok(TransformParams {
        rotation_deg,
        scale,
        color_offset,
        brightness,
        placement,
    })
}

/// Non-empty set of background images.
#[derive(Debug, Clone)]
pub struct BackgroundPool<T> {
    images: Vec<ImagePlane<T>>,
}

impl<T: Scalar> BackgroundPool<T> {
    pub fn new(images: Vec<ImagePlane<T>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidConfig("background pool is empty".into()));
        }
        Ok(Self { images })
    }

    /// Fails unless every background holds the largest footprint of an
    /// `h×w` foreground under `ranges`.
    pub fn check_fits(&self, h: usize, w: usize, ranges: &TransformRanges) -> Result<()> {
        let need = ranges.max_extent(h, w);
        for (i, bg) in self.images.iter().enumerate() {
            if (bg.height().min(bg.width()) as f64) + 1e-9 < need {
                return Err(Error::PlacementOutOfBounds(format!(
                    "background {i} is {}x{} but transformed foreground may span {need:.1} pixels",
                    bg.height(),
                    bg.width()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &ImagePlane<T> {
        &self.images[i]
    }

    pub fn images(&self) -> &[ImagePlane<T>] {
        &self.images
    }

    pub fn cast<U: Scalar>(&self) -> BackgroundPool<U> {
        BackgroundPool {
            images: self.images.iter().map(|i| i.cast()).collect(),
        }
    }
}

/// A transform together with the background it is composited onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub transform: TransformParams,
    pub background: usize,
}

pub fn sample_scene<T: Scalar>(
    ranges: &TransformRanges,
    pool: &BackgroundPool<T>,
    rng: &mut impl Rng,
) -> Result<Scene> {
    let transform = sample_transform(ranges, rng)?;
    let background = rng.gen_range(0..pool.len());
    Ok(Scene { transform, background })
}

/// One canvas pixel's bilinear source taps in the foreground.
#[derive(Debug, Clone, Copy)]
struct Tap {
    out: usize,
    src: [usize; 4],
    wts: [f64; 4],
}

/// Precomputed geometry of a transform for a given foreground/background size.
struct Geometry {
    taps: Vec<Tap>,
}

fn geometry(fg: (usize, usize), bg: (usize, usize), t: &TransformParams) -> Result<Geometry> {
    let (h, w) = fg;
    let (bh, bw) = bg;
    let (eh, ew) = t.extent(h, w);
    const SLACK: f64 = 1e-9;
    if eh > bh as f64 + SLACK || ew > bw as f64 + SLACK {
        return Err(Error::PlacementOutOfBounds(format!(
            "footprint {eh:.2}x{ew:.2} exceeds background {bh}x{bw}"
        )));
    }
    if !(0.0..=1.0).contains(&t.placement.0) || !(0.0..=1.0).contains(&t.placement.1) {
        return Err(Error::PlacementOutOfBounds(format!(
            "placement {:?} outside [0, 1]",
            t.placement
        )));
    }
    let top = t.placement.0 * (bh as f64 - eh).max(0.0);
    let left = t.placement.1 * (bw as f64 - ew).max(0.0);
    let (cy, cx) = (top + eh / 2.0, left + ew / 2.0);
    let theta = t.rotation_deg.to_radians();
    let (cos, sin) = (theta.cos(), theta.sin());
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut taps = Vec::new();
    let y0 = (top.floor() as usize).saturating_sub(1);
    let y1 = ((top + eh).ceil() as usize + 1).min(bh);
    let x0 = (left.floor() as usize).saturating_sub(1);
    let x1 = ((left + ew).ceil() as usize + 1).min(bw);
    for i in y0..y1 {
        for j in x0..x1 {
            let py = i as f64 + 0.5 - cy;
            let px = j as f64 + 0.5 - cx;
            // Inverse rotation (x right, y down), then inverse scale.
            let qx = (cos * px + sin * py) / t.scale;
            let qy = (-sin * px + cos * py) / t.scale;
            if qy < -hh || qy >= hh || qx < -hw || qx >= hw {
                continue;
            }
            let u = (qy + hh - 0.5).clamp(0.0, (h - 1) as f64);
            let v = (qx + hw - 0.5).clamp(0.0, (w - 1) as f64);
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (u1, v1) = ((u0 + 1).min(h - 1), (v0 + 1).min(w - 1));
            let (fu, fv) = (u - u0 as f64, v - v0 as f64);
            taps.push(Tap {
                out: i * bw + j,
                src: [u0 * w + v0, u0 * w + v1, u1 * w + v0, u1 * w + v1],
                wts: [(1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv), fu * fv],
            });
        }
    }
    Ok(Geometry { taps })
}

/// Renders `img` transformed by `t` onto `bg`.
pub fn apply_transform<T: Scalar>(
    img: &ImagePlane<T>,
    bg: &ImagePlane<T>,
    t: &TransformParams,
) -> Result<ImagePlane<T>> {
    Ok(render(img, bg, t)?.0)
}

/// Canvas plus the data needed for the adjoint.
struct Rendered {
    geo: Geometry,
    /// Per tap and channel: whether the colour-shifted value was inside `[0, 1]`.
    unclamped: Vec<[bool; 3]>,
}

fn render<T: Scalar>(
    img: &ImagePlane<T>,
    bg: &ImagePlane<T>,
    t: &TransformParams,
) -> Result<(ImagePlane<T>, Rendered)> {
    let geo = geometry(img.dims(), bg.dims(), t)?;
    let mut canvas = bg.tensor().clone();
    let bright = T::lit(t.brightness);
    let mut unclamped = Vec::with_capacity(geo.taps.len());
    for tap in &geo.taps {
        let mut flags = [false; 3];
        for (c, flag) in flags.iter_mut().enumerate() {
            let plane = img.tensor().plane(c);
            let mut s = T::zero();
            for k in 0..4 {
                s += T::lit(tap.wts[k]) * plane[tap.src[k]];
            }
            let v = bright * s + T::lit(t.color_offset[c]);
            *flag = v >= T::zero() && v <= T::one();
            canvas.plane_mut(c)[tap.out] = v.max(T::zero()).min(T::one());
        }
        unclamped.push(flags);
    }
    Ok((ImagePlane::from_tensor(canvas)?, Rendered { geo, unclamped }))
}

/// Adjoint of the foreground part of [`apply_transform`]: canvas gradient to
/// foreground gradient. Clamped colour values pass no gradient.
fn render_adjoint<T: Scalar>(
    r: &Rendered,
    fg: (usize, usize),
    brightness: f64,
    grad_canvas: &Tensor3<T>,
) -> Tensor3<T> {
    let mut g = Tensor3::zeros(3, fg.0, fg.1);
    let b = T::lit(brightness);
    for (tap, flags) in r.geo.taps.iter().zip(&r.unclamped) {
        for (c, &live) in flags.iter().enumerate() {
            if !live {
                continue;
            }
            let up = grad_canvas.plane(c)[tap.out] * b;
            let dst = g.plane_mut(c);
            for k in 0..4 {
                dst[tap.src[k]] += T::lit(tap.wts[k]) * up;
            }
        }
    }
    g
}

/// Adversarial loss of `adv` seen through `scene`.
pub fn scene_adv_loss<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    pool: &BackgroundPool<T>,
    scene: &Scene,
    mode: &AttackMode,
) -> Result<T> {
    let canvas = apply_transform(adv, pool.get(scene.background), &scene.transform)?;
    adversarial_loss_from_probs(&clf.predict_probs(&canvas)?, mode)
}

/// Scene loss and its gradient with respect to the foreground pixels.
pub fn scene_adv_value_and_grad<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    pool: &BackgroundPool<T>,
    scene: &Scene,
    mode: &AttackMode,
) -> Result<(T, Tensor3<T>)> {
    mode.check(clf.num_classes())?;
    let (canvas, rendered) = render(adv, pool.get(scene.background), &scene.transform)?;
    let (probs, g_canvas) = clf.probs_with_pullback(&canvas, &mut |p| adversarial_loss_prob_grad(p, mode))?;
    let value = adversarial_loss_from_probs(&probs, mode)?;
    Ok((
        value,
        render_adjoint(&rendered, adv.dims(), scene.transform.brightness, &g_canvas),
    ))
}

/// Predicted class ranking of `adv` seen through `scene`.
pub fn scene_probs<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    pool: &BackgroundPool<T>,
    scene: &Scene,
) -> Result<Vec<T>> {
    clf.predict_probs(&apply_transform(adv, pool.get(scene.background), &scene.transform)?)
}

/// Worst (largest) adversarial loss over `k` sampled scenes, with the scene
/// attaining it. Ties keep the earliest sample.
pub fn worst_case_adv_loss<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    pool: &BackgroundPool<T>,
    ranges: &TransformRanges,
    mode: &AttackMode,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(T, Scene)> {
    if k == 0 {
        return Err(Error::InvalidConfig("worst-case sampling needs k >= 1".into()));
    }
    let mut best: Option<(T, Scene)> = None;
    for _ in 0..k {
        let scene = sample_scene(ranges, pool, rng)?;
        let loss = scene_adv_loss(clf, adv, pool, &scene, mode)?;
        if best.as_ref().is_none_or(|(b, _)| loss > *b) {
            best = Some((loss, scene));
        }
    }
    Ok(best.expect("k >= 1"))
}
