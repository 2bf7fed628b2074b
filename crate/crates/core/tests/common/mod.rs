//! Shared fixtures and scalar-loop reference implementations.
#![allow(dead_code, clippy::needless_range_loop)]

use camo_core::desk::{Desk, DeskOptions};
use camo_core::model::WeightsFile;
use camo_core::nn::SmallCnn;
use camo_core::{GradientProvider, ImagePlane};
use rand::Rng;

/// Desk networks, trained once and cached under the cargo target directory.
pub fn desk() -> Desk<f32> {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("desk-models");
    Desk::load_or_train(dir, &DeskOptions::default()).expect("desk networks")
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImagePlane<f64> {
    ImagePlane::from_fn(h, w, |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
}

pub fn random_image_f32(h: usize, w: usize, rng: &mut impl Rng) -> ImagePlane<f32> {
    ImagePlane::from_fn(h, w, |_, _, _| rng.gen_range(0.0f32..1.0)).unwrap()
}

/// Plain nested-vector activation `[c][y][x]`.
pub type Act = Vec<Vec<Vec<f64>>>;

pub fn image_to_act(img: &ImagePlane<f64>) -> Act {
    let (h, w) = img.dims();
    (0..3)
        .map(|c| (0..h).map(|y| (0..w).map(|x| img.get(c, y, x)).collect()).collect())
        .collect()
}

/// Reference forward pass: per block, zero-padded 3×3 convolution, SiLU and
/// 2×2 average pooling. Returns every block's post-SiLU activation and the
/// deepest pooled map.
pub fn reference_trunk(net: &SmallCnn<f64>, img: &ImagePlane<f64>) -> (Vec<Act>, Act) {
    let wf = WeightsFile::from_network(net);
    let mut cur: Act = image_to_act(img)
        .into_iter()
        .map(|p| {
            p.into_iter()
                .map(|r| r.into_iter().map(|v| v - 0.5).collect())
                .collect()
        })
        .collect();
    let mut acts = Vec::new();
    for layer in &wf.convs {
        let (cin, h, w) = (cur.len(), cur[0].len(), cur[0][0].len());
        let mut a = vec![vec![vec![0.0; w]; h]; layer.outputs];
        for co in 0..layer.outputs {
            for y in 0..h {
                for x in 0..w {
                    let mut s = layer.bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wt = layer.weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                                s += wt * cur[ci][sy as usize][sx as usize];
                            }
                        }
                    }
                    a[co][y][x] = s / (1.0 + (-s).exp());
                }
            }
        }
        let pooled: Act = a
            .iter()
            .map(|p| {
                (0..h / 2)
                    .map(|y| {
                        (0..w / 2)
                            .map(|x| {
                                (p[2 * y][2 * x] + p[2 * y][2 * x + 1] + p[2 * y + 1][2 * x] + p[2 * y + 1][2 * x + 1])
                                    / 4.0
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        acts.push(a);
        cur = pooled;
    }
    (acts, cur)
}

/// Reference class probabilities for a network whose input size equals the
/// image size (so no resampling is involved).
pub fn reference_probs(net: &SmallCnn<f64>, img: &ImagePlane<f64>) -> Vec<f64> {
    let wf = WeightsFile::from_network(net);
    let (_, pooled) = reference_trunk(net, img);
    let flat: Vec<f64> = pooled.iter().flatten().flatten().copied().collect();
    let logits: Vec<f64> = (0..wf.head.outputs)
        .map(|o| {
            let mut s = wf.head.bias[o];
            for (i, v) in flat.iter().enumerate() {
                s += wf.head.weight[o * wf.head.inputs + i] * v;
            }
            s
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits.iter().map(|l| (l - m).exp() / z).collect()
}

pub fn reference_gram(a: &Act) -> Vec<Vec<f64>> {
    let (c, h, w) = (a.len(), a[0].len(), a[0][0].len());
    let n = (c * h * w) as f64;
    let mut g = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += a[i][y][x] * a[j][y][x];
                }
            }
            g[i][j] = s / n;
        }
    }
    g
}

pub fn reference_gram_distance(a: &Act, b: &Act) -> f64 {
    let (ga, gb) = (reference_gram(a), reference_gram(b));
    let mut s = 0.0;
    for i in 0..ga.len() {
        for j in 0..ga.len() {
            s += (ga[i][j] - gb[i][j]).powi(2);
        }
    }
    s
}

pub fn reference_sq_distance(a: &Act, b: &Act) -> f64 {
    let mut s = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        for (ra, rb) in pa.iter().zip(pb) {
            for (x, y) in ra.iter().zip(rb) {
                s += (x - y).powi(2);
            }
        }
    }
    s
}

/// Isotropic total variation with zero differences past the last row and column.
pub fn reference_smoothness(img: &ImagePlane<f64>) -> f64 {
    let (h, w) = img.dims();
    let mut s = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = img.get(c, y, x);
                let down = if y + 1 < h { img.get(c, y + 1, x) - v } else { 0.0 };
                let right = if x + 1 < w { img.get(c, y, x + 1) - v } else { 0.0 };
                s += (down * down + right * right).sqrt();
            }
        }
    }
    s
}

pub fn reference_adversarial(probs: &[f64], true_label: usize, target: Option<usize>) -> f64 {
    let lg = |p: f64| p.clamp(1e-12, 1.0).ln();
    match target {
        None => lg(probs[true_label]),
        Some(t) => lg(probs[true_label]) - lg(probs[t]),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Central difference of `f` along flat coordinate `k`.
pub fn central_difference(f: &dyn GradientProvider<f64>, img: &ImagePlane<f64>, k: usize, h: f64) -> f64 {
    let (ih, iw) = img.dims();
    let mut plus = img.data().to_vec();
    let mut minus = plus.clone();
    plus[k] += h;
    minus[k] -= h;
    let fp = f.value(&ImagePlane::from_vec(ih, iw, plus).unwrap()).unwrap();
    let fm = f.value(&ImagePlane::from_vec(ih, iw, minus).unwrap()).unwrap();
    (fp - fm) / (2.0 * h)
}

/// Result of comparing an analytic gradient with central differences.
pub struct GradCheck {
    pub worst: f64,
    /// `(coordinate, analytic, numeric)` where the relative error exceeded the tolerance.
    pub failures: Vec<(usize, f64, f64)>,
}

/// Compares the analytic gradient with central differences at `coords`
/// random coordinates. Differences below the round-off resolution of the
/// difference quotient (`4·eps·|f|/h`) count as agreement.
pub fn gradient_check(
    f: &dyn GradientProvider<f64>,
    img: &ImagePlane<f64>,
    coords: usize,
    h: f64,
    tol: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    let (v, g) = f.value_and_grad(img).unwrap();
    let resolution = 4.0 * f64::EPSILON * v.abs().max(1.0) / h;
    let mut out = GradCheck {
        worst: 0.0,
        failures: Vec::new(),
    };
    for _ in 0..coords {
        let k = rng.gen_range(0..img.data().len());
        let (a, n) = (g.data()[k], central_difference(f, img, k, h));
        let e = if (a - n).abs() <= resolution {
            0.0
        } else {
            rel_err(a, n)
        };
        out.worst = out.worst.max(e);
        if e > tol {
            out.failures.push((k, a, n));
        }
    }
    out
}
