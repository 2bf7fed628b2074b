use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use camo_core::attack::{scene_success_rate, PhysicalSettings};
use camo_core::data::{Manifest, ManifestEntry};
use camo_core::desk::{self, Desk, DeskOptions};
use camo_core::harness::{self, GridConfig, GridItem, ProgressLog};
use camo_core::io::{load_image, load_image_dir, load_mask, save_image};
use camo_core::model::{load_weights, save_weights, CnnClassifier, CnnFeatureExtractor};
use camo_core::resample::resize_image;
use camo_core::transforms::{sample_scene, BackgroundPool, Scene};
use camo_core::{
    make_rect_mask, run_attack, AttackMode, AttackSettings, AttackSpec, Classifier, ImagePlane, LambdaSchedule,
    LossWeights, Scalar,
};

use crate::config::{Command, ModelKind, RunConfig};
use crate::RunDir;

pub const REPORT_FILE: &str = "report.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Runs `command`; `Ok(false)` means the run completed without success.
pub fn execute<T: Scalar>(command: Command, cfg: &RunConfig, dir: &RunDir) -> Result<bool> {
    match command {
        Command::Attack => attack::<T>(cfg, dir),
        Command::Grid => grid::<T>(cfg, dir),
        Command::EvalTransforms => eval_transforms::<T>(cfg, dir),
        Command::Train => train::<T>(cfg, dir),
        Command::MakeCorpus => make_corpus::<T>(cfg, dir),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("{key} is required"))
}

fn classifier<T: Scalar>(cfg: &RunConfig) -> Result<CnnClassifier<T>> {
    let path = required(&cfg.model.classifier, "model.classifier")?;
    match cfg.model.kind {
        ModelKind::SmallCnn => Ok(CnnClassifier::new(load_weights(path)?)),
    }
}

fn extractor<T: Scalar>(cfg: &RunConfig) -> Result<CnnFeatureExtractor<T>> {
    let path = required(&cfg.model.extractor, "model.extractor")?;
    let net = match cfg.model.kind {
        ModelKind::SmallCnn => load_weights::<T>(path)?,
    };
    let names = net.config().layer_names();
    let m = &cfg.model;
    if m.style_layers.is_empty() && m.content_layers.is_empty() {
        return Ok(CnnFeatureExtractor::new(net));
    }
    let style = if m.style_layers.is_empty() {
        names.clone()
    } else {
        m.style_layers.clone()
    };
    let content = if m.content_layers.is_empty() {
        names.last().cloned().into_iter().collect()
    } else {
        m.content_layers.clone()
    };
    Ok(CnnFeatureExtractor::new(net).with_layers(style, content)?)
}

fn pool<T: Scalar>(cfg: &RunConfig) -> Result<BackgroundPool<T>> {
    let dir = required(&cfg.physical.backgrounds, "physical.backgrounds")?;
    Ok(BackgroundPool::new(load_image_dir(dir)?)?)
}

fn settings<T: Scalar>(cfg: &RunConfig) -> Result<AttackSettings<T>> {
    let a = &cfg.attack;
    let physical = if a.physical {
        let p = &cfg.physical;
        Some(PhysicalSettings {
            k: p.k,
            success_fraction: p.success_fraction,
            validation_batch: p.validation_batch,
            ..PhysicalSettings::new(pool(cfg)?, p.ranges())
        })
    } else {
        None
    };
    Ok(AttackSettings {
        weights: LossWeights {
            w_style: a.w_style,
            w_content: a.w_content,
            w_smooth: a.w_smooth,
            ..LossWeights::default()
        },
        schedule: LambdaSchedule {
            start: a.lambda_start,
            step: a.lambda_step,
            max: a.lambda_max,
        },
        max_iters_per_lambda: a.max_iters,
        step_size: a.step_size,
        top_k: a.top_k,
        content: a.content,
        physical,
        seed: cfg.seed,
    })
}

fn mode(label: usize, target: Option<usize>) -> Result<AttackMode> {
    Ok(match target {
        Some(t) => AttackMode::targeted(label, t)?,
        None => AttackMode::untargeted(label),
    })
}

fn attack<T: Scalar>(cfg: &RunConfig, dir: &RunDir) -> Result<bool> {
    let a = &cfg.attack;
    let orig = load_image::<T>(required(&a.orig, "attack.orig")?)?;
    let (h, w) = orig.dims();
    let style = resize_image(&load_image::<T>(required(&a.style, "attack.style")?)?, h, w)?;
    let mask = match (&a.mask, a.region) {
        (Some(m), _) => load_mask(m)?,
        (None, Some([top, left, size])) => make_rect_mask(h, w, top, left, size)?,
        (None, None) => anyhow::bail!("attack.mask or attack.region is required"),
    };
    let label = a.label.context("attack.label is required")?;
    let clf = classifier::<T>(cfg)?;
    let fe = extractor::<T>(cfg)?;
    let spec = AttackSpec {
        orig,
        style_img: style,
        mask,
        mode: mode(label, a.target)?,
        settings: settings(cfg)?,
    };
    spec.validate(clf.num_classes())?;
    dir.log(format!(
        "attacking {}x{} image, {} masked pixels, mode {:?}",
        h,
        w,
        spec.mask.count(),
        spec.mode
    ));
    let res = run_attack(&spec, &fe, &clf)?;
    let names = clf.label_names().map(<[String]>::to_vec).unwrap_or_default();
    let record = res.record(spec.mode, &names);
    res.write_to_dir(&dir.path, &record)?;
    dir.log(format!(
        "success {} at lambda {} after {} iterations; top-1 {} ({:.4})",
        res.success, res.final_lambda, res.iterations_used, res.final_top1, res.final_confidence
    ));
    Ok(res.success)
}

fn grid<T: Scalar>(cfg: &RunConfig, dir: &RunDir) -> Result<bool> {
    let g = &cfg.grid;
    let manifest = Manifest::load(required(&g.manifest, "grid.manifest")?)?;
    if manifest.entries.iter().any(|e| e.mask.is_some()) {
        dir.log("manifest masks are ignored; grid regions come from grid.region_sizes");
    }
    let items = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(GridItem {
                image: load_image::<T>(&e.path)?,
                label: e.label,
                target: e.target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let style = load_image::<T>(required(&g.style, "grid.style")?)?;
    let clf = classifier::<T>(cfg)?;
    let fe = extractor::<T>(cfg)?;
    let grid_cfg = GridConfig {
        lambdas: g.lambdas.clone(),
        region_sizes: g.region_sizes.clone(),
        modes: g.modes.clone(),
        placement: g.placement,
        seed: cfg.seed,
        workers: g.workers,
    };
    let cells = grid_cfg.cells().len();
    dir.log(format!(
        "grid: {cells} cells x {} images, {} workers",
        items.len(),
        g.workers
    ));
    let report = dir.join(REPORT_FILE);
    for stale in [harness::summary_path(&report), report.clone()] {
        if stale.exists() {
            std::fs::remove_file(&stale)?;
        }
    }
    let progress = ProgressLog::create(&dir.path)?;
    let res = harness::run_grid(&grid_cfg, &settings(cfg)?, &style, &items, &fe, &clf, &|r| {
        progress.record(r)
    })?;
    harness::emit_report(&res, &report)?;
    progress.finish()?;
    let errors: usize = res.cells.iter().map(|c| c.errors).sum();
    if errors > 0 {
        dir.log(format!("{errors} attack(s) failed with an error; see progress.jsonl"));
    }
    dir.log(format!("report written to {}", report.display()));
    Ok(true)
}

#[derive(Serialize)]
struct EvalRecord {
    label: usize,
    target: Option<usize>,
    top_k: usize,
    clean_top1: usize,
    samples: usize,
    success_rate: f64,
    success_fraction: f64,
    scenes: Vec<Scene>,
}

fn eval_transforms<T: Scalar>(cfg: &RunConfig, dir: &RunDir) -> Result<bool> {
    let e = &cfg.eval;
    let img = load_image::<T>(required(&e.image, "eval.image")?)?;
    let label = e.label.context("eval.label is required")?;
    let clf = classifier::<T>(cfg)?;
    ensure!(
        label < clf.num_classes(),
        "eval.label {label} exceeds the classifier's {} classes",
        clf.num_classes()
    );
    let mode = mode(label, e.target)?;
    let pool = pool::<T>(cfg)?;
    let ranges = cfg.physical.ranges();
    pool.check_fits(img.height(), img.width(), &ranges)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scenes = (0..e.samples)
        .map(|_| sample_scene(&ranges, &pool, &mut rng))
        .collect::<camo_core::Result<Vec<_>>>()?;
    let rate = scene_success_rate(&clf, &img, &pool, &scenes, &mode, e.top_k)?;
    let clean_top1 = camo_core::attack::ranking(&clf.predict_probs(&img)?)[0];
    let record = EvalRecord {
        label,
        target: e.target,
        top_k: e.top_k,
        clean_top1,
        samples: e.samples,
        success_rate: rate,
        success_fraction: cfg.physical.success_fraction,
        scenes,
    };
    std::fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    dir.log(format!("success rate {rate:.4} over {} scenes", e.samples));
    Ok(rate >= cfg.physical.success_fraction)
}

fn desk_options(cfg: &RunConfig) -> DeskOptions {
    let t = &cfg.train;
    let mut opts = DeskOptions {
        classifier_seed: t.classifier_seed,
        extractor_seed: t.extractor_seed,
        ..DeskOptions::default()
    };
    opts.train.image_size = t.image_size;
    opts.train.samples = t.samples;
    opts.train.epochs = t.epochs;
    opts.train.batch_size = t.batch_size;
    opts.train.learning_rate = t.learning_rate;
    opts.train.label_smoothing = t.label_smoothing;
    opts.train.scene_fraction = t.scene_fraction;
    opts
}

pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const EXTRACTOR_FILE: &str = "extractor.json";

fn train<T: Scalar>(cfg: &RunConfig, dir: &RunDir) -> Result<bool> {
    let opts = desk_options(cfg);
    dir.log(format!(
        "training on {} samples for {} epochs",
        opts.train.samples, opts.train.epochs
    ));
    let desk = Desk::<T>::train(&opts)?;
    save_weights(desk.classifier.network(), dir.join(CLASSIFIER_FILE))?;
    save_weights(desk.extractor.network(), dir.join(EXTRACTOR_FILE))?;
    dir.log("weights saved");
    Ok(true)
}

fn save_all<T: Scalar>(imgs: &[ImagePlane<T>], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    imgs.iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("{prefix}-{i:03}.png"));
            save_image(img, &path)?;
            Ok(path)
        })
        .collect()
}

fn make_corpus<T: Scalar>(cfg: &RunConfig, dir: &RunDir) -> Result<bool> {
    let c = &cfg.corpus;
    let items = desk::corpus::<T>(c.images, c.size, cfg.seed)?;
    let imgs: Vec<_> = items.iter().map(|i| i.image.clone()).collect();
    let paths = save_all(&imgs, &dir.join("images"), "item")?;
    let manifest = Manifest {
        entries: items
            .iter()
            .zip(&paths)
            .map(|(it, p)| ManifestEntry {
                path: p.strip_prefix(&dir.path).unwrap_or(p).to_path_buf(),
                label: it.label,
                target: None,
                mask: None,
            })
            .collect(),
    };
    manifest.save(dir.join(MANIFEST_FILE))?;
    let styles = desk::styles::<T>(c.styles, c.size, cfg.seed.wrapping_add(1))?;
    save_all(&styles, &dir.join("styles"), "style")?;
    let ranges = cfg.physical.ranges();
    let bgs = desk::backgrounds::<T>(c.backgrounds, c.size, &ranges, cfg.seed.wrapping_add(2))?;
    save_all(bgs.images(), &dir.join("backgrounds"), "bg")?;
    dir.log(format!(
        "wrote {} images, {} styles and {} backgrounds",
        c.images, c.styles, c.backgrounds
    ));
    Ok(true)
}
