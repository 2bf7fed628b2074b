//! The attack engine: masked Adam descent on the camouflage objective inside
//! a λ-escalation search.
//!
//! Every iterate is clamped to `[0, 1]` and re-composited with the original
//! under the mask, so pixels outside the attack region never change.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{composite_in_place, project_valid_in_place, ImagePlane, RegionMask};
use crate::losses::{adversarial_value_and_grad, AttackMode, Camouflage, LossBreakdown, LossWeights};
use crate::model::{Classifier, FeatureExtractor};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::transforms::{
    sample_scene, scene_adv_value_and_grad, scene_probs, worst_case_adv_loss, BackgroundPool, Scene, TransformRanges,
};

/// λ values `start, start + step, …` up to and including `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub start: f64,
    pub step: f64,
    pub max: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            start: 1000.0,
            step: 1000.0,
            max: 10000.0,
        }
    }
}

impl LambdaSchedule {
    pub fn fixed(lambda: f64) -> Self {
        Self {
            start: lambda,
            step: 1.0,
            max: lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.start.is_finite() && self.step.is_finite() && self.max.is_finite();
        if !finite || self.start < 0.0 || self.step <= 0.0 || self.start > self.max {
            return Err(Error::InvalidConfig(format!(
                "lambda schedule needs 0 <= start <= max and step > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u32;
        loop {
            let v = self.start + self.step * i as f64;
            if v > self.max + 1e-9 * self.max.abs().max(1.0) {
                break;
            }
            out.push(v);
            i += 1;
        }
        out
    }
}

/// When the content term participates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentPolicy {
    /// On, unless the mask covers less than [`SMALL_REGION_FRACTION`] of the image.
    #[default]
    Auto,
    Always,
    Never,
}

/// Masks below this coverage skip the content term under [`ContentPolicy::Auto`].
pub const SMALL_REGION_FRACTION: f64 = 0.05;

/// Physical adaptation: worst case over `k` sampled scenes per step, success
/// when at least `success_fraction` of a fresh validation batch is fooled.
#[derive(Debug, Clone)]
pub struct PhysicalSettings<T> {
    pub pool: BackgroundPool<T>,
    pub ranges: TransformRanges,
    pub k: usize,
    pub success_fraction: f64,
    pub validation_batch: usize,
}

impl<T: Scalar> PhysicalSettings<T> {
    pub fn new(pool: BackgroundPool<T>, ranges: TransformRanges) -> Self {
        Self {
            pool,
            ranges,
            k: 4,
            success_fraction: 0.8,
            validation_batch: 16,
        }
    }

    fn validate(&self, dims: (usize, usize)) -> Result<()> {
        self.ranges.validate()?;
        if self.k == 0 || self.validation_batch == 0 {
            return Err(Error::InvalidConfig(
                "physical k and validation batch must be >= 1".into(),
            ));
        }
        if !(self.success_fraction > 0.0 && self.success_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "success fraction {} not in (0, 1]",
                self.success_fraction
            )));
        }
        self.pool.check_fits(dims.0, dims.1, &self.ranges)
    }
}

/// Everything about an attack except the images, mask and labels.
#[derive(Debug, Clone)]
pub struct AttackSettings<T> {
    /// `lambda_adv` here is ignored; λ comes from the schedule.
    pub weights: LossWeights,
    pub schedule: LambdaSchedule,
    pub max_iters_per_lambda: usize,
    pub step_size: f64,
    pub top_k: usize,
    pub content: ContentPolicy,
    pub physical: Option<PhysicalSettings<T>>,
    pub seed: u64,
}

impl<T: Scalar> Default for AttackSettings<T> {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            schedule: LambdaSchedule::default(),
            max_iters_per_lambda: 300,
            step_size: 0.01,
            top_k: 1,
            content: ContentPolicy::Auto,
            physical: None,
            seed: 0,
        }
    }
}

/// A complete attack problem.
#[derive(Debug, Clone)]
pub struct AttackSpec<T> {
    pub orig: ImagePlane<T>,
    /// Must already be at the original's resolution.
    pub style_img: ImagePlane<T>,
    pub mask: RegionMask,
    pub mode: AttackMode,
    pub settings: AttackSettings<T>,
}

impl<T: Scalar> AttackSpec<T> {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.orig.dims() != self.style_img.dims() {
            return Err(Error::ShapeMismatch(format!(
                "style image {:?} vs original {:?}",
                self.style_img.dims(),
                self.orig.dims()
            )));
        }
        if !self.orig.is_in_range() || !self.style_img.is_in_range() {
            return Err(Error::InvalidImage("input images must lie in [0, 1]".into()));
        }
        self.mask.check_matches(&self.orig)?;
        self.mode.check(num_classes)?;
        let s = &self.settings;
        s.weights.validate()?;
        s.schedule.validate()?;
        if !(s.step_size > 0.0 && s.step_size <= 1.0) {
            return Err(Error::InvalidConfig(format!("step size {} not in (0, 1]", s.step_size)));
        }
        if s.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        if let Some(p) = &s.physical {
            p.validate(self.orig.dims())?;
        }
        Ok(())
    }

    /// Term weights at a given λ, with the content policy applied.
    pub fn weights_at(&self, lambda: f64) -> LossWeights {
        let mut w = self.settings.weights.with_lambda(lambda);
        let off = match self.settings.content {
            ContentPolicy::Always => false,
            ContentPolicy::Never => true,
            ContentPolicy::Auto => self.mask.coverage() < SMALL_REGION_FRACTION,
        };
        if off {
            w.w_content = 0.0;
        }
        w
    }
}

/// Class indices ordered by descending probability; ties go to the lower index.
pub fn ranking<T: Scalar>(probs: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Targeted: the target is among the `top_k` classes. Untargeted: the true
/// class is not the top-1 class (independent of `top_k`).
pub fn predicate_on_probs<T: Scalar>(probs: &[T], mode: &AttackMode, top_k: usize) -> bool {
    let order = ranking(probs);
    match mode.target_label() {
        Some(t) => order.iter().take(top_k.max(1)).any(|&c| c == t),
        None => order.first() != Some(&mode.true_label()),
    }
}

pub fn success_predicate<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    mode: &AttackMode,
    top_k: usize,
) -> Result<bool> {
    Ok(predicate_on_probs(&clf.predict_probs(adv)?, mode, top_k))
}

/// Fraction of `scenes` in which `adv` satisfies the predicate.
pub fn scene_success_rate<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    adv: &ImagePlane<T>,
    pool: &BackgroundPool<T>,
    scenes: &[Scene],
    mode: &AttackMode,
    top_k: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for s in scenes {
        if predicate_on_probs(&scene_probs(clf, adv, pool, s)?, mode, top_k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scenes.len().max(1) as f64)
}

/// What an observer sees at every evaluated iterate.
#[derive(Debug)]
pub struct Iterate<'a, T> {
    pub lambda: f64,
    pub iteration: usize,
    pub image: &'a ImagePlane<T>,
    pub breakdown: &'a LossBreakdown,
}

/// Outcome of one fixed-λ optimization.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    /// Last iterate (the success iterate on success).
    pub adv: ImagePlane<T>,
    pub success: bool,
    pub iterations: usize,
    /// One breakdown per evaluated iterate, the last one belonging to `adv`.
    pub trace: Vec<LossBreakdown>,
    /// Lowest-adversarial-loss iterate and its loss.
    pub best: (ImagePlane<T>, f64),
    /// Physical mode: the validation scenes of the final check.
    pub validation_scenes: Vec<Scene>,
}

/// Minimizes the objective at a fixed λ starting from `init`.
///
/// Each iteration evaluates the loss and the success predicate on the current
/// iterate, returns on success, and otherwise takes one Adam step followed by
/// range projection and mask compositing. At most `max_iters_per_lambda`
/// steps are taken; the final iterate is evaluated too.
pub fn optimize_at_lambda<T, F, C>(
    spec: &AttackSpec<T>,
    fe: &F,
    clf: &C,
    lambda: f64,
    init: &ImagePlane<T>,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn FnMut(&Iterate<'_, T>),
) -> Result<StageOutcome<T>>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    let weights = spec.weights_at(lambda);
    weights.validate()?;
    let camo = Camouflage::new(fe, &spec.orig, &spec.style_img, weights)?;
    let settings = &spec.settings;
    let mut x = init.clone();
    project_valid_in_place(&mut x);
    composite_in_place(&mut x, &spec.orig, &spec.mask)?;
    let mut opt = Adam::new(x.data().len(), T::lit(settings.step_size));
    let lam = T::lit(lambda);
    let mut trace = Vec::new();
    let mut best: Option<(ImagePlane<T>, f64)> = None;
    let mut validation_scenes = Vec::new();
    let mask_flags = spec.mask.flags();
    for iteration in 0..=settings.max_iters_per_lambda {
        let (terms, mut grad) = camo.terms_and_grad(&x)?;
        let (adv_loss, adv_grad, success) = match &settings.physical {
            None => {
                let (v, g, probs) = adversarial_value_and_grad(clf, &x, &spec.mode)?;
                (v, g, predicate_on_probs(&probs, &spec.mode, settings.top_k))
            }
            Some(phys) => {
                let (_, scene) = worst_case_adv_loss(clf, &x, &phys.pool, &phys.ranges, &spec.mode, phys.k, rng)?;
                let (v, g) = scene_adv_value_and_grad(clf, &x, &phys.pool, &scene, &spec.mode)?;
                validation_scenes = (0..phys.validation_batch)
                    .map(|_| sample_scene(&phys.ranges, &phys.pool, rng))
                    .collect::<Result<_>>()?;
                let rate = scene_success_rate(clf, &x, &phys.pool, &validation_scenes, &spec.mode, settings.top_k)?;
                (v, g, rate >= phys.success_fraction)
            }
        };
        let breakdown = LossBreakdown::compose(
            terms.style,
            terms.content,
            terms.smooth,
            adv_loss.to_f64_lossy(),
            &weights,
        );
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                lambda,
                iteration,
                breakdown: breakdown.to_string(),
            });
        }
        observer(&Iterate {
            lambda,
            iteration,
            image: &x,
            breakdown: &breakdown,
        });
        trace.push(breakdown);
        if best.as_ref().is_none_or(|(_, b)| breakdown.adversarial < *b) {
            best = Some((x.clone(), breakdown.adversarial));
        }
        if success || iteration == settings.max_iters_per_lambda {
            return Ok(StageOutcome {
                adv: x,
                success,
                iterations: iteration,
                trace,
                best: best.expect("at least one iterate"),
                validation_scenes,
            });
        }
        grad.add_scaled(lam, &adv_grad);
        let plane = mask_flags.len();
        for (i, g) in grad.data_mut().iter_mut().enumerate() {
            if !mask_flags[i % plane] {
                *g = T::zero();
            }
        }
        opt.step(x.tensor_mut().data_mut(), grad.data());
        project_valid_in_place(&mut x);
        composite_in_place(&mut x, &spec.orig, &spec.mask)?;
    }
    unreachable!("loop returns on its last iteration")
}

/// Per-λ record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub lambda: f64,
    pub iterations: usize,
    pub success: bool,
    pub trace: Vec<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct AttackResult<T> {
    pub adv: ImagePlane<T>,
    pub success: bool,
    pub final_lambda: f64,
    pub iterations_used: usize,
    pub stages: Vec<StageTrace>,
    pub final_top1: usize,
    pub final_confidence: f64,
    /// Physical mode: scenes of the deciding validation check.
    pub validation_scenes: Vec<Scene>,
}

impl<T> AttackResult<T> {
    /// Every recorded breakdown, stage after stage.
    pub fn loss_trace(&self) -> Vec<LossBreakdown> {
        self.stages.iter().flat_map(|s| s.trace.iter().copied()).collect()
    }
}

/// Runs the λ search: stages in schedule order, each warm-started from the
/// previous stage's last iterate, stopping at the first success. Without a
/// success the lowest-adversarial-loss iterate seen is returned.
pub fn run_attack<T, F, C>(spec: &AttackSpec<T>, fe: &F, clf: &C) -> Result<AttackResult<T>>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    run_attack_observed(spec, fe, clf, &mut |_| {})
}

pub fn run_attack_observed<T, F, C>(
    spec: &AttackSpec<T>,
    fe: &F,
    clf: &C,
    observer: &mut dyn FnMut(&Iterate<'_, T>),
) -> Result<AttackResult<T>>
where
    T: Scalar,
    F: FeatureExtractor<T> + ?Sized,
    C: Classifier<T> + ?Sized,
{
    spec.validate(clf.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.settings.seed);
    let mut x = spec.orig.clone();
    let mut stages = Vec::new();
    let mut iterations_used = 0;
    let mut best: Option<(ImagePlane<T>, f64)> = None;
    let lambdas = spec.settings.schedule.values();
    let mut outcome = None;
    for &lambda in &lambdas {
        let out = optimize_at_lambda(spec, fe, clf, lambda, &x, &mut rng, observer)?;
        log::debug!(
            "lambda {lambda}: {} iterations, success={}",
            out.iterations,
            out.success
        );
        iterations_used += out.iterations;
        stages.push(StageTrace {
            lambda,
            iterations: out.iterations,
            success: out.success,
            trace: out.trace.clone(),
        });
        if best.as_ref().is_none_or(|(_, b)| out.best.1 < *b) {
            best = Some(out.best.clone());
        }
        x = out.adv.clone();
        let done = out.success;
        outcome = Some((lambda, out));
        if done {
            break;
        }
    }
    let (final_lambda, out) = outcome.expect("schedule has at least one value");
    let (adv, validation_scenes) = if out.success {
        (out.adv, out.validation_scenes)
    } else {
        (best.expect("at least one iterate").0, Vec::new())
    };
    let probs = clf.predict_probs(&adv)?;
    let top1 = ranking(&probs)[0];
    Ok(AttackResult {
        final_top1: top1,
        final_confidence: probs[top1].to_f64_lossy(),
        adv,
        success: out.success,
        final_lambda,
        iterations_used,
        stages,
        validation_scenes,
    })
}

/// Machine-readable summary of an [`AttackResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub success: bool,
    pub mode: AttackMode,
    pub final_lambda: f64,
    pub iterations_used: usize,
    pub final_top1: usize,
    pub final_label: Option<String>,
    pub final_confidence: f64,
    pub stages: Vec<StageTrace>,
}

pub const ADVERSARIAL_FILE: &str = "adversarial.png";
pub const RESULT_FILE: &str = "result.json";
pub const TRACE_FILE: &str = "loss_trace.csv";

impl<T: Scalar> AttackResult<T> {
    pub fn record(&self, mode: AttackMode, label_names: &[String]) -> ResultRecord {
        ResultRecord {
            success: self.success,
            mode,
            final_lambda: self.final_lambda,
            iterations_used: self.iterations_used,
            final_top1: self.final_top1,
            final_label: label_names.get(self.final_top1).cloned(),
            final_confidence: self.final_confidence,
            stages: self.stages.clone(),
        }
    }

    /// Writes the adversarial image, the result record and the loss trace
    /// into `dir`, which must exist.
    pub fn write_to_dir(&self, dir: impl AsRef<std::path::Path>, record: &ResultRecord) -> Result<()> {
        let dir = dir.as_ref();
        crate::io::save_image(&self.adv, dir.join(ADVERSARIAL_FILE))?;
        let path = dir.join(RESULT_FILE);
        let json = serde_json::to_string_pretty(record).map_err(|e| Error::Sink(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let path = dir.join(TRACE_FILE);
        let mut out = String::from("stage,lambda,iteration,style,content,smooth,adversarial,total\n");
        for (si, st) in self.stages.iter().enumerate() {
            for (i, b) in st.trace.iter().enumerate() {
                out.push_str(&format!(
                    "{si},{},{i},{:e},{:e},{:e},{:e},{:e}\n",
                    st.lambda, b.style, b.content, b.smooth, b.adversarial, b.total
                ));
            }
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }
}
