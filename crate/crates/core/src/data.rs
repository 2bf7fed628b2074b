//! Procedural desk-scale data: a ten-class pattern dataset, smooth background
//! fields and blotchy camouflage style textures, plus the corpus manifest.
//!
//! Everything is generated from a seed at any resolution, so tests and the
//! CLI can build a labelled corpus without downloading anything.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;

pub const CLASS_NAMES: [&str; 10] = [
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "checkerboard",
    "disk",
    "ring",
    "cross",
    "square-frame",
    "dot-grid",
    "antidiagonal-stripes",
];

pub fn num_classes() -> usize {
    CLASS_NAMES.len()
}

pub fn label_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

/// Two colours whose luma differs by at least 0.3.
fn contrasting_pair(rng: &mut impl Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        if (luma(a) - luma(b)).abs() >= 0.3 {
            return (a, b);
        }
    }
}

/// Soft indicator: ~1 for `d < 0`, ~0 for `d > 0`, one-pixel transition.
fn soft_inside(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// One sample of class `class` at `size×size`, in `[0, 1]`.
pub fn pattern_image<T: Scalar>(class: usize, size: usize, rng: &mut impl Rng) -> Result<ImagePlane<T>> {
    if class >= CLASS_NAMES.len() {
        return Err(Error::InvalidLabel {
            label: class,
            num_classes: CLASS_NAMES.len(),
        });
    }
    let s = size as f64;
    let unit = s / 128.0;
    let (bg, fg) = contrasting_pair(rng);
    let period = rng.gen_range(18.0..30.0) * unit;
    let phase = rng.gen_range(0.0..1.0);
    let cy = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let cx = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let radius = rng.gen_range(0.24..0.36) * s;
    let thick = rng.gen_range(0.08..0.13) * s;
    let noise = 0.04;
    let stripe = |t: f64| {
        let f = (t / period + phase).rem_euclid(1.0);
        if f < 0.5 {
            1.0
        } else {
            0.0
        }
    };
    let weight = |y: f64, x: f64| -> f64 {
        match class {
            0 => stripe(y),
            1 => stripe(x),
            2 => stripe((x + y) / std::f64::consts::SQRT_2),
            3 => {
                let a = stripe(x) > 0.5;
                let b = stripe(y) > 0.5;
                if a ^ b {
                    1.0
                } else {
                    0.0
                }
            }
            4 => soft_inside((y - cy).hypot(x - cx) - radius),
            5 => soft_inside(((y - cy).hypot(x - cx) - radius).abs() - thick / 2.0),
            6 => {
                let arm = radius * 1.2;
                let v = soft_inside((x - cx).abs() - thick / 2.0) * soft_inside((y - cy).abs() - arm);
                let h = soft_inside((y - cy).abs() - thick / 2.0) * soft_inside((x - cx).abs() - arm);
                v.max(h)
            }
            7 => {
                let d = (y - cy).abs().max((x - cx).abs());
                soft_inside((d - radius).abs() - thick / 2.0)
            }
            8 => {
                let gy = (y / period + phase).rem_euclid(1.0) - 0.5;
                let gx = (x / period + phase).rem_euclid(1.0) - 0.5;
                soft_inside(gy.hypot(gx) * period - period * 0.28)
            }
            _ => stripe((x - y) / std::f64::consts::SQRT_2),
        }
    };
    let mut noise_field = vec![0.0; 3 * size * size];
    noise_field.iter_mut().for_each(|v| *v = rng.gen_range(-noise..noise));
    ImagePlane::from_fn(size, size, |c, y, x| {
        let w = weight(y as f64 + 0.5, x as f64 + 0.5);
        let v = w * fg[c] + (1.0 - w) * bg[c] + noise_field[(c * size + y) * size + x];
        T::lit(v.clamp(0.0, 1.0))
    })
}

/// Sum of a few random low-frequency sinusoids per channel.
fn smooth_field(h: usize, w: usize, waves: usize, max_freq: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base = rng.gen_range(0.2..0.8);
        let comps: Vec<(f64, f64, f64, f64)> = (0..waves)
            .map(|_| {
                (
                    rng.gen_range(-max_freq..max_freq),
                    rng.gen_range(-max_freq..max_freq),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.05..0.2),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                let v: f64 = comps
                    .iter()
                    .map(|&(ky, kx, ph, amp)| amp * (std::f64::consts::TAU * (ky * fy + kx * fx) + ph).sin())
                    .sum();
                out[(c * h + y) * w + x] = base + v;
            }
        }
    }
    out
}

/// A smooth colour field, used as a physical-scene background.
pub fn background_image<T: Scalar>(height: usize, width: usize, rng: &mut impl Rng) -> Result<ImagePlane<T>> {
    let f = smooth_field(height, width, 4, 2.0, rng);
    ImagePlane::from_fn(height, width, |c, y, x| {
        T::lit(f[(c * height + y) * width + x].clamp(0.0, 1.0))
    })
}

/// Blotchy camouflage texture: a smooth scalar field quantized into a
/// random palette of four colours.
pub fn style_image<T: Scalar>(height: usize, width: usize, rng: &mut impl Rng) -> Result<ImagePlane<T>> {
    let field = smooth_field(height, width, 7, 5.0, rng);
    let palette: Vec<[f64; 3]> = (0..4).map(|_| random_color(rng)).collect();
    let n = height * width;
    ImagePlane::from_fn(height, width, |c, y, x| {
        let v = field[y * width + x] - field[n + y * width + x] + 0.5 * field[2 * n + y * width + x];
        let idx = ((v.rem_euclid(1.0)) * 4.0).floor().clamp(0.0, 3.0) as usize;
        T::lit(palette[idx][c])
    })
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

/// Corpus manifest: a CSV file with header `path,label,target,mask`; the last
/// two columns may be empty. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let mut entries = Vec::new();
        for row in reader.deserialize::<ManifestEntry>() {
            let mut e = row.map_err(|e| err(e.to_string()))?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if let Some(m) = &e.mask {
                if m.is_relative() {
                    e.mask = Some(base.join(m));
                }
            }
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(err("no entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_class_renders_in_range_and_deterministically() {
        for class in 0..num_classes() {
            let a: ImagePlane<f32> = pattern_image(class, 64, &mut ChaCha8Rng::seed_from_u64(class as u64)).unwrap();
            let b: ImagePlane<f32> = pattern_image(class, 64, &mut ChaCha8Rng::seed_from_u64(class as u64)).unwrap();
            assert_eq!(a, b);
            assert!(a.is_in_range());
        }
        assert!(pattern_image::<f32>(10, 64, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn backgrounds_and_styles_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(background_image::<f64>(40, 50, &mut rng).unwrap().is_in_range());
        assert!(style_image::<f64>(40, 50, &mut rng).unwrap().is_in_range());
    }

    #[test]
    fn manifest_round_trip_with_optional_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, "path,label,target,mask\na.png,3,,\nb.png,1,4,m.png\n").unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].path, dir.path().join("a.png"));
        assert_eq!(m.entries[0].target, None);
        assert_eq!(m.entries[1].target, Some(4));
        assert_eq!(m.entries[1].mask, Some(dir.path().join("m.png")));
        let p2 = dir.path().join("again.csv");
        m.save(&p2).unwrap();
        assert_eq!(Manifest::load(&p2).unwrap(), m);
        std::fs::write(&p, "path,label,target,mask\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Manifest { .. })));
    }
}
