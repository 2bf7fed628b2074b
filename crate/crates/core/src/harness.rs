//! Ablation grids: success rates over λ, region size and attack mode.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{predicate_on_probs, run_attack, AttackSettings, AttackSpec, LambdaSchedule};
use crate::error::{Error, Result};
use crate::image::{make_rect_mask, ImagePlane};
use crate::losses::AttackMode;
use crate::model::{Classifier, FeatureExtractor};
use crate::resample::resize_image;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Untargeted,
    Targeted,
}

impl ModeKind {
    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Untargeted => "untargeted",
            ModeKind::Targeted => "targeted",
        }
    }
}

impl std::str::FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untargeted" => Ok(ModeKind::Untargeted),
            "targeted" => Ok(ModeKind::Targeted),
            other => Err(Error::InvalidMode(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Center,
    /// Seeded per image, identical across cells.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    pub region_sizes: Vec<usize>,
    pub modes: Vec<ModeKind>,
    pub placement: Placement,
    pub seed: u64,
    pub workers: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambdas: (1..=10).map(|i| i as f64 * 1000.0).collect(),
            region_sizes: vec![40, 60, 80, 100, 120],
            modes: vec![ModeKind::Untargeted, ModeKind::Targeted],
            placement: Placement::Center,
            seed: 0,
            workers: 1,
        }
    }
}

impl GridConfig {
    /// Checks the lists against a corpus of `height`×`width` images.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.lambdas.is_empty() || self.region_sizes.is_empty() || self.modes.is_empty() {
            problems.push("lambdas, region_sizes and modes must be non-empty".to_string());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            problems.push(format!("lambda {l} must be finite and >= 0"));
        }
        if let Some(s) = self.region_sizes.iter().find(|&&s| s == 0 || s > height.min(width)) {
            problems.push(format!("region size {s} does not fit {height}x{width} images"));
        }
        if self.workers == 0 {
            problems.push("workers must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Cells in report order: mode, then λ, then region size.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &lambda in &self.lambdas {
                for &region_size in &self.region_sizes {
                    out.push(CellKey {
                        mode,
                        lambda,
                        region_size,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: ModeKind,
    pub lambda: f64,
    pub region_size: usize,
}

/// One corpus image for the grid.
#[derive(Debug, Clone)]
pub struct GridItem<T> {
    pub image: ImagePlane<T>,
    pub label: usize,
    /// Used for targeted cells; drawn at random when absent.
    pub target: Option<usize>,
}

/// Outcome of one attack in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub cell: usize,
    pub item: usize,
    pub mode: ModeKind,
    pub lambda: f64,
    pub region_size: usize,
    pub target: Option<usize>,
    pub top1: bool,
    pub top5: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: ModeKind,
    pub lambda: f64,
    pub region_size: usize,
    pub n: usize,
    pub top1_successes: usize,
    pub top5_successes: usize,
    pub errors: usize,
    pub top1_rate: f64,
    pub top5_rate: f64,
    /// Standard error of `top1_rate`.
    pub stderr: f64,
    pub top5_stderr: f64,
}

/// `sqrt(p (1 - p) / n)`.
pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

impl CellResult {
    fn from_records(key: CellKey, records: &[&AttackRecord]) -> Self {
        let n = records.len();
        let top1 = records.iter().filter(|r| r.top1).count();
        let top5 = records.iter().filter(|r| r.top5).count();
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            mode: key.mode,
            lambda: key.lambda,
            region_size: key.region_size,
            n,
            top1_successes: top1,
            top5_successes: top5,
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            top1_rate: rate(top1),
            top5_rate: rate(top5),
            stderr: binomial_stderr(rate(top1), n),
            top5_stderr: binomial_stderr(rate(top5), n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<CellResult>,
    pub records: Vec<AttackRecord>,
}

impl GridResult {
    pub fn cell(&self, mode: ModeKind, lambda: f64, region_size: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.lambda == lambda && c.region_size == region_size)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the attacks in cell `cell`: the grid seed xor the cell index.
pub fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed ^ cell as u64
}

/// Random target for `item`, different from its label and shared by all cells.
pub fn random_target(seed: u64, item: usize, label: usize, num_classes: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 * item as u64 + 1));
    let t = rng.gen_range(0..num_classes - 1);
    if t >= label {
        t + 1
    } else {
        t
    }
}

fn region_origin(placement: Placement, seed: u64, item: usize, size: usize, h: usize, w: usize) -> (usize, usize) {
    match placement {
        Placement::Center => ((h - size) / 2, (w - size) / 2),
        Placement::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 * item as u64 + 2) ^ size as u64);
            (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size))
        }
    }
}

/// Runs one fixed-λ attack per (cell, image).
///
/// `template` supplies everything but the schedule, which is pinned to the
/// cell's λ. `style` is resized to each image's resolution. `on_record` is
/// called as each attack finishes; with several workers the call order is
/// not deterministic but the returned result is.
#[allow(clippy::too_many_arguments)]
pub fn run_grid<T, F, C>(
    cfg: &GridConfig,
    template: &AttackSettings<T>,
    style: &ImagePlane<T>,
    items: &[GridItem<T>],
    fe: &F,
    clf: &C,
    on_record: &(dyn Fn(&AttackRecord) -> Result<()> + Sync),
) -> Result<GridResult>
where
    T: Scalar,
    F: FeatureExtractor<T> + Sync + ?Sized,
    C: Classifier<T> + Sync + ?Sized,
{
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidConfig("grid corpus is empty".into()))?;
    let (h, w) = first.image.dims();
    if let Some(bad) = items.iter().find(|i| i.image.dims() != (h, w)) {
        return Err(Error::ShapeMismatch(format!(
            "corpus images must share one resolution, found {:?} and {:?}",
            (h, w),
            bad.image.dims()
        )));
    }
    cfg.validate(h, w)?;
    let num_classes = clf.num_classes();
    if num_classes < 2 {
        return Err(Error::InvalidConfig("targeted cells need at least two classes".into()));
    }
    let style = resize_image(style, h, w)?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..items.len()).map(move |i| (c, i)))
        .collect();
    let sink_error = Mutex::new(None::<Error>);
    let job = |&(cell, item): &(usize, usize)| -> Result<AttackRecord> {
        let key = cells[cell];
        let it = &items[item];
        let target = match key.mode {
            ModeKind::Untargeted => None,
            ModeKind::Targeted => Some(
                it.target
                    .unwrap_or_else(|| random_target(cfg.seed, item, it.label, num_classes)),
            ),
        };
        let mut record = AttackRecord {
            cell,
            item,
            mode: key.mode,
            lambda: key.lambda,
            region_size: key.region_size,
            target,
            top1: false,
            top5: false,
            iterations: 0,
            error: None,
        };
        let outcome = (|| -> Result<(bool, bool, usize)> {
            let mode = match target {
                None => AttackMode::untargeted(it.label),
                Some(t) => AttackMode::targeted(it.label, t)?,
            };
            let (top, left) = region_origin(cfg.placement, cfg.seed, item, key.region_size, h, w);
            let mut settings = template.clone();
            settings.schedule = LambdaSchedule::fixed(key.lambda);
            settings.seed = mix(cell_seed(cfg.seed, cell), item as u64);
            let spec = AttackSpec {
                orig: it.image.clone(),
                style_img: style.clone(),
                mask: make_rect_mask(h, w, top, left, key.region_size)?,
                mode,
                settings,
            };
            let res = run_attack(&spec, fe, clf)?;
            let probs = clf.predict_probs(&res.adv)?;
            Ok((
                predicate_on_probs(&probs, &mode, 1),
                predicate_on_probs(&probs, &mode, 5),
                res.iterations_used,
            ))
        })();
        match outcome {
            Ok((t1, t5, iters)) => {
                record.top1 = t1;
                record.top5 = t5;
                record.iterations = iters;
            }
            Err(e) => {
                log::warn!("attack on item {item} in cell {cell} failed: {e}");
                record.error = Some(e.to_string());
            }
        }
        if let Err(e) = on_record(&record) {
            sink_error.lock().expect("sink lock").get_or_insert(e);
        }
        Ok(record)
    };
    let records: Vec<AttackRecord> = if cfg.workers <= 1 {
        jobs.iter().map(job).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(job).collect::<Result<_>>())?
    };
    if let Some(e) = sink_error.into_inner().expect("sink lock") {
        return Err(e);
    }
    let cells = cells
        .iter()
        .enumerate()
        .map(|(ci, &key)| {
            let rs: Vec<&AttackRecord> = records.iter().filter(|r| r.cell == ci).collect();
            CellResult::from_records(key, &rs)
        })
        .collect();
    Ok(GridResult { cells, records })
}

pub const REPORT_HEADER: &str = "mode,lambda,region_size,top1_rate,top5_rate,n,stderr";

/// Path of the summary record that accompanies a report at `path`.
pub fn summary_path(path: &Path) -> PathBuf {
    path.with_extension("summary.json")
}

/// Renders the report table. Rates and stderr use six decimals.
pub fn render_report(res: &GridResult) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for c in &res.cells {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{:.6}\n",
            c.mode.name(),
            c.lambda,
            c.region_size,
            c.top1_rate,
            c.top5_rate,
            c.n,
            c.stderr
        ));
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    cells: &'a [CellResult],
    attacks: usize,
    errors: usize,
    mean_top1_rate: f64,
    mean_top5_rate: f64,
}

/// Writes the table to `path` and the summary record next to it.
pub fn emit_report(res: &GridResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_report(res)).map_err(|e| Error::io(path, e))?;
    let k = res.cells.len().max(1) as f64;
    let summary = Summary {
        cells: &res.cells,
        attacks: res.records.len(),
        errors: res.records.iter().filter(|r| r.error.is_some()).count(),
        mean_top1_rate: res.cells.iter().map(|c| c.top1_rate).sum::<f64>() / k,
        mean_top5_rate: res.cells.iter().map(|c| c.top5_rate).sum::<f64>() / k,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Sink(e.to_string()))?;
    let sp = summary_path(path);
    std::fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))
}

/// One parsed report row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub mode: ModeKind,
    pub lambda: f64,
    pub region_size: usize,
    pub top1_rate: f64,
    pub top5_rate: f64,
    pub n: usize,
    pub stderr: f64,
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Appends one JSON line per finished attack, flushing each, and writes a
/// completion marker only when [`ProgressLog::finish`] is called.
pub struct ProgressLog {
    file: Mutex<BufWriter<File>>,
    marker: PathBuf,
}

pub const COMPLETE_MARKER: &str = "COMPLETE";

impl ProgressLog {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("progress.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let marker = dir.join(COMPLETE_MARKER);
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        Ok(Self {
            file: Mutex::new(BufWriter::new(file)),
            marker,
        })
    }

    pub fn record(&self, r: &AttackRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Sink(e.to_string()))?;
        let mut f = self
            .file
            .lock()
            .map_err(|_| Error::Sink("progress log poisoned".into()))?;
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|e| Error::Sink(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        std::fs::write(&self.marker, "ok\n").map_err(|e| Error::io(&self.marker, e))
    }
}
