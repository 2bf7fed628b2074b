//! Canonical RGB image planes and binary region masks.
//!
//! Pixels live in a normalized `[0, 1]` float domain internally. The 8-bit
//! `[0, 255]` domain only appears at the file boundary (see [`crate::io`]).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Smallest supported image side.
pub const MIN_SIDE: usize = 8;

/// A 3-channel image, channel-major, normalized to `[0, 1]`.
///
/// Values outside `[0, 1]` are representable (an optimizer step may overshoot)
/// but every projection ([`project_valid`]) restores the range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane<T> {
    pixels: Tensor3<T>,
}

impl<T: Scalar> ImagePlane<T> {
    pub const CHANNELS: usize = 3;

    pub fn from_tensor(pixels: Tensor3<T>) -> Result<Self> {
        let (c, h, w) = pixels.shape();
        if c != Self::CHANNELS {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{h}x{w} is smaller than the minimum {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if !pixels.is_finite() {
            return Err(Error::InvalidImage("non-finite pixel value".into()));
        }
        Ok(Self { pixels })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::from_tensor(Tensor3::from_vec(Self::CHANNELS, height, width, data)?)
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::from_tensor(Tensor3::filled(Self::CHANNELS, height, width, value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        Self::from_tensor(Tensor3::from_fn(Self::CHANNELS, height, width, f))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    #[inline]
    pub fn tensor(&self) -> &Tensor3<T> {
        &self.pixels
    }

    /// Mutable access to the raw values. Callers are responsible for
    /// re-projecting before the image is handed to anything that assumes range.
    #[inline]
    pub fn tensor_mut(&mut self) -> &mut Tensor3<T> {
        &mut self.pixels
    }

    pub fn into_tensor(self) -> Tensor3<T> {
        self.pixels
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        self.pixels.data()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.pixels.get(c, y, x)
    }

    /// True when every element is within `[0, 1]`.
    pub fn is_in_range(&self) -> bool {
        self.data().iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn cast<U: Scalar>(&self) -> ImagePlane<U> {
        ImagePlane {
            pixels: self.pixels.cast(),
        }
    }
}

/// Binary `H×W` mask of the modifiable attack region, broadcast over channels.
///
/// Always non-empty; its complement is the region kept from the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl RegionMask {
    pub fn from_bools(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} mask values for {height}x{width}",
                data.len()
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::InvalidMask("attack region is empty".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Row-major flags, one per pixel.
    pub fn flags(&self) -> &[bool] {
        &self.data
    }

    /// Number of pixels in the attack region.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of the image covered by the attack region.
    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn check_matches<T: Scalar>(&self, img: &ImagePlane<T>) -> Result<()> {
        if self.dims() != img.dims() {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs image {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

/// `mask ⊙ adv + (1 − mask) ⊙ orig`, an exact elementwise select.
pub fn composite<T: Scalar>(adv: &ImagePlane<T>, orig: &ImagePlane<T>, mask: &RegionMask) -> Result<ImagePlane<T>> {
    let mut out = adv.clone();
    composite_in_place(&mut out, orig, mask)?;
    Ok(out)
}

/// In-place form of [`composite`]: pixels outside the mask are overwritten
/// with the original's values.
pub fn composite_in_place<T: Scalar>(adv: &mut ImagePlane<T>, orig: &ImagePlane<T>, mask: &RegionMask) -> Result<()> {
    if adv.dims() != orig.dims() {
        return Err(Error::ShapeMismatch(format!(
            "adversarial {:?} vs original {:?}",
            adv.dims(),
            orig.dims()
        )));
    }
    mask.check_matches(orig)?;
    let n = mask.data.len();
    for c in 0..ImagePlane::<T>::CHANNELS {
        let src = &orig.pixels.plane(c)[..n];
        let dst = adv.pixels.plane_mut(c);
        for ((d, &s), &m) in dst.iter_mut().zip(src).zip(&mask.data) {
            if !m {
                *d = s;
            }
        }
    }
    Ok(())
}

/// Clamps every element into `[0, 1]`.
pub fn project_valid<T: Scalar>(img: &ImagePlane<T>) -> ImagePlane<T> {
    let mut out = img.clone();
    project_valid_in_place(&mut out);
    out
}

pub fn project_valid_in_place<T: Scalar>(img: &mut ImagePlane<T>) {
    for v in img.pixels.data_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
}

/// Square `size×size` attack region with its top-left corner at `(top, left)`.
pub fn make_rect_mask(height: usize, width: usize, top: usize, left: usize, size: usize) -> Result<RegionMask> {
    if size == 0 || top + size > height || left + size > width {
        return Err(Error::OutOfBounds(format!(
            "{size}x{size} square at ({top}, {left}) does not fit {height}x{width}"
        )));
    }
    let mut data = vec![false; height * width];
    for y in top..top + size {
        data[y * width + left..y * width + left + size].fill(true);
    }
    RegionMask::from_bools(height, width, data)
}
