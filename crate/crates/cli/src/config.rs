//! Run configuration: a TOML file plus `--section.key=value` overrides.
//!
//! Every field has a default, unknown keys are rejected, and validation
//! reports all problems at once.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use camo_core::attack::ContentPolicy;
use camo_core::harness::{ModeKind, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Attack,
    Grid,
    EvalTransforms,
    Train,
    MakeCorpus,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Attack => "attack",
            Command::Grid => "grid",
            Command::EvalTransforms => "eval-transforms",
            Command::Train => "train",
            Command::MakeCorpus => "make-corpus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of the run directories.
    pub output_dir: PathBuf,
    /// Run directory name; defaults to `<command>-<timestamp>-seed<seed>`.
    pub run_name: Option<String>,
    /// Allow reusing an existing run directory.
    pub force: bool,
    pub precision: Precision,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub physical: PhysicalConfig,
    pub grid: GridSection,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            run_name: None,
            force: false,
            precision: Precision::F32,
            model: ModelConfig::default(),
            attack: AttackConfig::default(),
            physical: PhysicalConfig::default(),
            grid: GridSection::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

/// Network adapter used to load `model.classifier` and `model.extractor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// JSON weights written by `camo train`.
    #[default]
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Weights of the attacked classifier.
    pub classifier: Option<PathBuf>,
    /// Weights of the network supplying style and content features.
    pub extractor: Option<PathBuf>,
    /// Feature layers for the style term; empty means every layer.
    pub style_layers: Vec<String>,
    /// Feature layers for the content term; empty means the deepest layer.
    pub content_layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub orig: Option<PathBuf>,
    pub style: Option<PathBuf>,
    /// Lossless mask image; nonzero pixels may change.
    pub mask: Option<PathBuf>,
    /// Square region `[top, left, size]`, used when no mask file is given.
    pub region: Option<[usize; 3]>,
    pub label: Option<usize>,
    /// Target class; untargeted when absent.
    pub target: Option<usize>,
    pub top_k: usize,
    pub lambda_start: f64,
    pub lambda_step: f64,
    pub lambda_max: f64,
    pub max_iters: usize,
    pub step_size: f64,
    pub w_style: f64,
    pub w_content: f64,
    pub w_smooth: f64,
    pub content: ContentPolicy,
    /// Optimize against sampled physical transforms (see `[physical]`).
    pub physical: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let w = camo_core::LossWeights::default();
        let s = camo_core::LambdaSchedule::default();
        Self {
            orig: None,
            style: None,
            mask: None,
            region: None,
            label: None,
            target: None,
            top_k: 1,
            lambda_start: s.start,
            lambda_step: s.step,
            lambda_max: s.max,
            max_iters: 300,
            step_size: 0.01,
            w_style: w.w_style,
            w_content: w.w_content,
            w_smooth: w.w_smooth,
            content: ContentPolicy::Auto,
            physical: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConfig {
    /// Directory of lossless background images.
    pub backgrounds: Option<PathBuf>,
    pub k: usize,
    pub success_fraction: f64,
    pub validation_batch: usize,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub color_offset: f64,
    pub brightness: f64,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        let r = camo_core::transforms::TransformRanges::default();
        Self {
            backgrounds: None,
            k: 4,
            success_fraction: 0.8,
            validation_batch: 16,
            rotation_deg: r.rotation_deg,
            scale_min: r.scale_min,
            scale_max: r.scale_max,
            color_offset: r.color_offset,
            brightness: r.brightness,
        }
    }
}

impl PhysicalConfig {
    pub fn ranges(&self) -> camo_core::transforms::TransformRanges {
        camo_core::transforms::TransformRanges {
            rotation_deg: self.rotation_deg,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            color_offset: self.color_offset,
            brightness: self.brightness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub manifest: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub lambdas: Vec<f64>,
    pub region_sizes: Vec<usize>,
    pub modes: Vec<ModeKind>,
    pub placement: Placement,
    pub workers: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = camo_core::harness::GridConfig::default();
        Self {
            manifest: None,
            style: None,
            lambdas: g.lambdas,
            region_sizes: g.region_sizes,
            modes: g.modes,
            placement: g.placement,
            workers: g.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub image: Option<PathBuf>,
    pub label: Option<usize>,
    pub target: Option<usize>,
    pub top_k: usize,
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            image: None,
            label: None,
            target: None,
            top_k: 1,
            samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub classifier_seed: u64,
    pub extractor_seed: u64,
    pub image_size: usize,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub scene_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = camo_core::desk::DeskOptions::default();
        Self {
            classifier_seed: d.classifier_seed,
            extractor_seed: d.extractor_seed,
            image_size: d.train.image_size,
            samples: d.train.samples,
            epochs: d.train.epochs,
            batch_size: d.train.batch_size,
            learning_rate: d.train.learning_rate,
            label_smoothing: d.train.label_smoothing,
            scene_fraction: d.train.scene_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub images: usize,
    pub size: usize,
    pub styles: usize,
    pub backgrounds: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            images: 20,
            size: 128,
            styles: 1,
            backgrounds: 8,
        }
    }
}

/// Every problem found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub problems: Vec<String>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.problems.len())?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// Sets `path` (dot-separated) in `table`, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| format!("empty key in `{path}`"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` in `{path}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads a flag value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `--a.b=v`, `--a.b v` and `--flag` into `(key, value)` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, toml::Value)>, ValidationError> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(body) = a.strip_prefix("--") else {
            problems.push(format!(
                "unexpected argument `{a}` (overrides look like --section.key=value)"
            ));
            i += 1;
            continue;
        };
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.replace('-', "_"), parse_value(v)));
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((body.replace('-', "_"), parse_value(&args[i + 1])));
            i += 2;
        } else {
            out.push((body.replace('-', "_"), toml::Value::Boolean(true)));
            i += 1;
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(ValidationError { problems })
    }
}

/// Loads the file (if any), applies overrides on top and deserializes.
/// Relative paths in the file resolve against the file's directory; relative
/// paths given as overrides resolve against the working directory.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig, ValidationError> {
    let fail = |p: String| ValidationError { problems: vec![p] };
    let mut table = match file {
        Some(f) => {
            let text = std::fs::read_to_string(f).map_err(|e| fail(format!("cannot read {}: {e}", f.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| fail(format!("{}: {e}", f.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(base) = file.and_then(Path::parent) {
        let parsed: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| fail(e.message().to_string()))?;
        let resolved = parsed.resolve_paths(base);
        table = toml::Table::try_from(&resolved).map_err(|e| fail(e.to_string()))?;
    }
    let mut problems = Vec::new();
    for (k, v) in overrides {
        if let Err(p) = set_dotted(&mut table, k, v.clone()) {
            problems.push(p);
        }
    }
    if !problems.is_empty() {
        return Err(ValidationError { problems });
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| fail(e.message().trim().to_string()))?;
    let cwd = std::env::current_dir().map_err(|e| fail(format!("cannot read the working directory: {e}")))?;
    Ok(cfg.resolve_paths(&cwd))
}

fn collect_nulls(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    if let serde_json::Value::Object(map) = v {
        for (k, v) in map {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            if v.is_null() {
                out.push(key);
            } else {
                collect_nulls(v, &key, out);
            }
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    fn resolve_paths(mut self, base: &Path) -> Self {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        for p in [
            &mut self.model.classifier,
            &mut self.model.extractor,
            &mut self.attack.orig,
            &mut self.attack.style,
            &mut self.attack.mask,
            &mut self.physical.backgrounds,
            &mut self.grid.manifest,
            &mut self.grid.style,
            &mut self.eval.image,
        ] {
            rebase(base, p);
        }
        self
    }

    /// The fully resolved configuration as TOML, preceded by a comment
    /// naming the optional keys left unset.
    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("configuration serializes");
        let json = serde_json::to_value(self).expect("configuration serializes");
        let mut unset = Vec::new();
        collect_nulls(&json, "", &mut unset);
        if unset.is_empty() {
            body
        } else {
            format!("# unset: {}\n{body}", unset.join(", "))
        }
    }

    pub fn validate(&self, command: Command) -> Result<(), ValidationError> {
        let mut v = Checks::default();
        match command {
            Command::Attack => {
                self.check_models(&mut v, true);
                v.file("attack.orig", &self.attack.orig, true);
                v.file("attack.style", &self.attack.style, true);
                v.file("attack.mask", &self.attack.mask, false);
                v.check(
                    self.attack.mask.is_some() || self.attack.region.is_some(),
                    "attack.mask or attack.region is required",
                );
                v.required("attack.label", self.attack.label.is_some());
                if let (Some(l), Some(t)) = (self.attack.label, self.attack.target) {
                    v.check(l != t, "attack.target must differ from attack.label");
                }
                if let Some([_, _, size]) = self.attack.region {
                    v.check(size > 0, "attack.region size must be > 0");
                }
                self.check_attack(&mut v);
                if self.attack.physical {
                    self.check_physical(&mut v);
                }
            }
            Command::Grid => {
                self.check_models(&mut v, true);
                v.file("grid.manifest", &self.grid.manifest, true);
                v.file("grid.style", &self.grid.style, true);
                self.check_attack(&mut v);
                let g = &self.grid;
                v.check(!g.lambdas.is_empty(), "grid.lambdas must be non-empty");
                v.check(
                    g.lambdas.iter().all(|l| l.is_finite() && *l > 0.0),
                    "grid.lambdas must all be > 0",
                );
                v.check(!g.region_sizes.is_empty(), "grid.region_sizes must be non-empty");
                v.check(
                    g.region_sizes.iter().all(|&s| s > 0),
                    "grid.region_sizes must all be > 0",
                );
                v.check(!g.modes.is_empty(), "grid.modes must be non-empty");
                v.check(g.workers >= 1, "grid.workers must be >= 1");
                if self.attack.physical {
                    self.check_physical(&mut v);
                }
            }
            Command::EvalTransforms => {
                self.check_models(&mut v, false);
                v.file("eval.image", &self.eval.image, true);
                v.required("eval.label", self.eval.label.is_some());
                if let (Some(l), Some(t)) = (self.eval.label, self.eval.target) {
                    v.check(l != t, "eval.target must differ from eval.label");
                }
                v.check(matches!(self.eval.top_k, 1 | 5), "eval.top_k must be 1 or 5");
                v.check(self.eval.samples >= 1, "eval.samples must be >= 1");
                self.check_physical(&mut v);
            }
            Command::Train => {
                let t = &self.train;
                v.check(t.image_size >= 8, "train.image_size must be >= 8");
                v.check(t.samples >= 1, "train.samples must be >= 1");
                v.check(t.epochs >= 1, "train.epochs must be >= 1");
                v.check(t.batch_size >= 1, "train.batch_size must be >= 1");
                v.check(t.learning_rate > 0.0, "train.learning_rate must be > 0");
                v.check(
                    (0.0..1.0).contains(&t.label_smoothing),
                    "train.label_smoothing must be in [0, 1)",
                );
                v.check(
                    (0.0..=1.0).contains(&t.scene_fraction),
                    "train.scene_fraction must be in [0, 1]",
                );
                v.check(
                    t.classifier_seed != t.extractor_seed,
                    "train.classifier_seed and train.extractor_seed must differ",
                );
            }
            Command::MakeCorpus => {
                let c = &self.corpus;
                v.check(c.images >= 1, "corpus.images must be >= 1");
                v.check(c.size >= 8, "corpus.size must be >= 8");
                v.check(c.styles >= 1, "corpus.styles must be >= 1");
                v.check(c.backgrounds >= 1, "corpus.backgrounds must be >= 1");
                self.check_ranges(&mut v);
            }
        }
        if let Some(name) = &self.run_name {
            v.check(
                !name.is_empty() && !name.contains(['/', '\\']) && name != "." && name != "..",
                "run_name must be a plain directory name",
            );
        }
        v.finish()
    }

    fn check_models(&self, v: &mut Checks, need_extractor: bool) {
        v.file("model.classifier", &self.model.classifier, true);
        if need_extractor {
            v.file("model.extractor", &self.model.extractor, true);
        }
    }

    fn check_attack(&self, v: &mut Checks) {
        let a = &self.attack;
        v.check(a.lambda_start > 0.0, "attack.lambda_start must be > 0");
        v.check(a.lambda_step > 0.0, "attack.lambda_step must be > 0");
        v.check(
            a.lambda_max >= a.lambda_start,
            "attack.lambda_max must be >= attack.lambda_start",
        );
        v.check(
            a.step_size > 0.0 && a.step_size <= 1.0,
            "attack.step_size must be in (0, 1]",
        );
        v.check(a.max_iters >= 1, "attack.max_iters must be >= 1");
        v.check(matches!(a.top_k, 1 | 5), "attack.top_k must be 1 or 5");
        for (name, w) in [
            ("w_style", a.w_style),
            ("w_content", a.w_content),
            ("w_smooth", a.w_smooth),
        ] {
            v.check(
                w.is_finite() && w >= 0.0,
                &format!("attack.{name} must be finite and >= 0"),
            );
        }
    }

    fn check_physical(&self, v: &mut Checks) {
        let p = &self.physical;
        v.dir("physical.backgrounds", &p.backgrounds);
        v.check(p.k >= 1, "physical.k must be >= 1");
        v.check(
            p.success_fraction > 0.0 && p.success_fraction <= 1.0,
            "physical.success_fraction must be in (0, 1]",
        );
        v.check(p.validation_batch >= 1, "physical.validation_batch must be >= 1");
        self.check_ranges(v);
    }

    fn check_ranges(&self, v: &mut Checks) {
        if let Err(e) = self.physical.ranges().validate() {
            v.problems.push(format!("physical ranges: {e}"));
        }
    }
}

#[derive(Default)]
struct Checks {
    problems: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, msg: &str) {
        if !ok {
            self.problems.push(msg.to_string());
        }
    }

    fn required(&mut self, key: &str, present: bool) {
        self.check(present, &format!("{key} is required"));
    }

    fn file(&mut self, key: &str, p: &Option<PathBuf>, required: bool) {
        match p {
            None if required => self.problems.push(format!("{key} is required")),
            None => {}
            Some(p) if !p.is_file() => self.problems.push(format!("{key}: {} does not exist", p.display())),
            Some(_) => {}
        }
    }

    fn dir(&mut self, key: &str, p: &Option<PathBuf>) {
        match p {
            None => self.problems.push(format!("{key} is required")),
            Some(p) if !p.is_dir() => self.problems.push(format!("{key}: {} is not a directory", p.display())),
            Some(_) => {}
        }
    }

    fn finish(self) -> Result<(), ValidationError> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(ValidationError {
                problems: self.problems,
            })
        }
    }
}
