//! Separable bilinear resizing as an explicit linear operator.
//!
//! Upsampling is plain bilinear interpolation with clamp-to-edge. When
//! downsampling, the triangle kernel is widened by the reduction factor so
//! every input pixel contributes (the usual antialiased "bilinear" filter).
//! Because the operator is linear, its adjoint gives exact gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[derive(Debug, Clone)]
struct AxisTaps<T> {
    /// `(first input index, weights)` per output index.
    taps: Vec<(usize, Vec<T>)>,
    input_len: usize,
}

impl<T: Scalar> AxisTaps<T> {
    fn new(input_len: usize, output_len: usize) -> Self {
        let scale = input_len as f64 / output_len as f64;
        let support = scale.max(1.0);
        let taps = (0..output_len)
            .map(|o| {
                let center = (o as f64 + 0.5) * scale - 0.5;
                let lo = (center - support).floor().max(0.0) as usize;
                let hi = ((center + support).ceil() as usize).min(input_len - 1);
                let mut w: Vec<f64> = (lo..=hi)
                    .map(|i| (1.0 - ((i as f64 - center) / support).abs()).max(0.0))
                    .collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    w.iter_mut().for_each(|v| *v /= total);
                } else {
                    // Center sits outside the input: clamp to the nearest edge.
                    w.iter_mut().for_each(|v| *v = 0.0);
                    let nearest = center.round().clamp(0.0, (input_len - 1) as f64) as usize;
                    w[nearest - lo] = 1.0;
                }
                // Trim zero-weight taps at both ends.
                let first = w.iter().position(|&v| v != 0.0).unwrap_or(0);
                let last = w.iter().rposition(|&v| v != 0.0).unwrap_or(0);
                (lo + first, w[first..=last].iter().map(|&v| T::lit(v)).collect())
            })
            .collect();
        Self { taps, input_len }
    }
}

/// A resize from one spatial size to another, applied per channel.
#[derive(Debug, Clone)]
pub struct Resize<T> {
    rows: AxisTaps<T>,
    cols: AxisTaps<T>,
}

impl<T: Scalar> Resize<T> {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0, "empty resize");
        Self {
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.rows.input_len, self.cols.input_len)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows.taps.len(), self.cols.taps.len())
    }

    pub fn is_identity(&self) -> bool {
        self.input_dims() == self.output_dims()
    }

    pub fn apply(&self, input: &Tensor3<T>) -> Tensor3<T> {
        let (c, h, w) = input.shape();
        assert_eq!((h, w), self.input_dims(), "resize input shape");
        if self.is_identity() {
            return input.clone();
        }
        let (oh, ow) = self.output_dims();
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = Tensor3::zeros(c, oh, ow);
        for ch in 0..c {
            let plane = input.plane(ch);
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for (ox, (start, wts)) in self.cols.taps.iter().enumerate() {
                    tmp[y * ow + ox] = crate::scalar::dot(wts, &row[*start..*start + wts.len()]);
                }
            }
            let dst = out.plane_mut(ch);
            for (oy, (start, wts)) in self.rows.taps.iter().enumerate() {
                let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                for (k, &wt) in wts.iter().enumerate() {
                    let y = start + k;
                    crate::scalar::axpy(wt, &tmp[y * ow..(y + 1) * ow], out_row);
                }
            }
        }
        out
    }

    /// Adjoint of [`Resize::apply`]: maps an output-space gradient back to
    /// input space.
    pub fn apply_adjoint(&self, grad_out: &Tensor3<T>) -> Tensor3<T> {
        let (c, oh, ow) = grad_out.shape();
        assert_eq!((oh, ow), self.output_dims(), "resize adjoint shape");
        if self.is_identity() {
            return grad_out.clone();
        }
        let (h, w) = self.input_dims();
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            let g = grad_out.plane(ch);
            for (oy, (start, wts)) in self.rows.taps.iter().enumerate() {
                let g_row = &g[oy * ow..(oy + 1) * ow];
                for (k, &wt) in wts.iter().enumerate() {
                    let y = start + k;
                    crate::scalar::axpy(wt, g_row, &mut tmp[y * ow..(y + 1) * ow]);
                }
            }
            let dst = out.plane_mut(ch);
            for y in 0..h {
                let row = &mut dst[y * w..(y + 1) * w];
                for (ox, (start, wts)) in self.cols.taps.iter().enumerate() {
                    let gv = tmp[y * ow + ox];
                    crate::scalar::axpy(gv, wts, &mut row[*start..*start + wts.len()]);
                }
            }
        }
        out
    }
}

/// Resizes an image with [`Resize`].
pub fn resize_image<T: Scalar>(
    img: &crate::image::ImagePlane<T>,
    height: usize,
    width: usize,
) -> crate::error::Result<crate::image::ImagePlane<T>> {
    let r = Resize::new(img.height(), img.width(), height, width);
    crate::image::ImagePlane::from_tensor(r.apply(img.tensor()))
}
