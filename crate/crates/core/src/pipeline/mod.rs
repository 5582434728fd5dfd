//! Two-stage pipeline: train the prompt generator on the source domain,
//! derive one box per image from its predictions, fine-tune the promptable
//! segmenter's decoder on the source domain, and evaluate on every domain.
//! Also runs the ablation grids.
//!
//! Prompt boxes are always expressed in segmenter-resolution pixels.

pub mod commands;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agm::{slots_for_position, train_agm, Agm, AgmConfig, AgmTraining};
use crate::data::{
    self, generate_synthetic_domain, load_dataset, DatasetManifest, DomainEntry, DomainRole, DomainSample, DomainStyle,
    ShapeFamily, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::losses::{dice_score, LossConfig};
use crate::nn::{IterationUnit, OptimConfig};
use crate::prompt::{bbox_from_mask, generate_prompt, jitter_prompt, prompt_quality, BoundingBoxPrompt, Connectivity, PromptRecord, PromptTable};
use crate::scalar::Scalar;
use crate::segmenter::{finetune_decoder, FinetuneOptions, PromptAugmentation, Segmenter, SegmenterConfig};
use crate::sufm::{NoiseMode, SufmConfig};
use crate::training::{csv_error, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub name: String,
    pub role: DomainRole,
    pub style: DomainStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub root: PathBuf,
    pub image_size: (usize, usize),
    pub samples_per_domain: usize,
    pub train_fraction: f64,
    pub shape_family: ShapeFamily,
    /// Generator seed; the pipeline seed when absent.
    pub seed: Option<u64>,
    pub domains: Vec<SyntheticDomain>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let domain = |name: &str, role, style| SyntheticDomain { name: name.into(), role, style };
        Self {
            root: PathBuf::from("data/synthetic"),
            image_size: (128, 128),
            samples_per_domain: 80,
            train_fraction: 0.8,
            shape_family: ShapeFamily::Blob,
            seed: None,
            domains: vec![
                domain(
                    "source",
                    DomainRole::Source,
                    DomainStyle { intensity_offset: 0.0, gamma: 1.0, noise_std: 0.05, blur_sigma: 0.5, texture_amp: 0.05 },
                ),
                domain(
                    "target_a",
                    DomainRole::Target,
                    DomainStyle { intensity_offset: 0.1, gamma: 0.5, noise_std: 0.1, blur_sigma: 1.0, texture_amp: 0.15 },
                ),
                domain(
                    "target_b",
                    DomainRole::Target,
                    DomainStyle { intensity_offset: -0.1, gamma: 2.0, noise_std: 0.08, blur_sigma: 0.0, texture_amp: 0.25 },
                ),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSplit {
    /// Every image of a target domain.
    All,
    /// Only the held-out split, as for the source.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Existing dataset manifest; the synthetic dataset is used when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub normalize: bool,
    pub target_split: TargetSplit,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: None, synthetic: SyntheticSpec::default(), normalize: true, target_split: TargetSplit::All }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgmSection {
    pub model: AgmConfig,
    pub optim: OptimConfig,
    /// `false` trains the variant without feature-statistics perturbation.
    pub sufm: bool,
}

impl Default for AgmSection {
    fn default() -> Self {
        Self { model: AgmConfig::default(), optim: OptimConfig::default(), sufm: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterSection {
    pub model: SegmenterConfig,
    pub optim: OptimConfig,
    pub augmentation: PromptAugmentation,
    pub freeze_image_encoder: bool,
    pub freeze_prompt_encoder: bool,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        Self {
            model: SegmenterConfig::default(),
            optim: OptimConfig { batch_size: 4, iterations: 200, ..OptimConfig::default() },
            augmentation: PromptAugmentation::default(),
            freeze_image_encoder: true,
            freeze_prompt_encoder: true,
        }
    }
}

/// Box degradation for sensitivity runs: rescale about the centre and shift
/// by up to `shift_fraction` of the longer image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub scale: f64,
    pub shift_fraction: f64,
}

impl JitterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(self.shift_fraction >= 0.0) {
            return Err(Error::Config(format!("invalid jitter {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSection {
    pub connectivity: Connectivity,
    pub padding: usize,
    pub use_gt_boxes: bool,
    pub jitter: Option<JitterSpec>,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { connectivity: Connectivity::Four, padding: 0, use_gt_boxes: false, jitter: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub threshold: f64,
    pub overlays_per_domain: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { threshold: 0.5, overlays_per_domain: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub positions: Vec<String>,
    pub distributions: Vec<NoiseMode>,
    pub jitter: JitterSpec,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            positions: ["0-1", "2", "3", "4", "5"].map(String::from).to_vec(),
            distributions: NoiseMode::ALL.to_vec(),
            jitter: JitterSpec { scale: 1.5, shift_fraction: 0.1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

/// Everything one run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub agm: AgmSection,
    pub sufm: SufmConfig,
    pub segmenter: SegmenterSection,
    pub loss: LossConfig,
    pub prompts: PromptSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub output: OutputSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            agm: AgmSection::default(),
            sufm: SufmConfig::default(),
            segmenter: SegmenterSection::default(),
            loss: LossConfig::default(),
            prompts: PromptSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a TOML file. Relative paths inside are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.synthetic.root);
        resolve(&mut cfg.output.dir);
        if let Some(m) = cfg.data.manifest.as_mut() {
            resolve(m);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.agm.model.validate()?;
        self.segmenter.model.validate()?;
        self.sufm.validate()?;
        if !self.segmenter.freeze_image_encoder || !self.segmenter.freeze_prompt_encoder {
            return Err(Error::Config("only frozen image and prompt encoders are supported".into()));
        }
        for optim in [&self.agm.optim, &self.segmenter.optim] {
            if optim.batch_size == 0 || !(optim.learning_rate >= 0.0) {
                return Err(Error::Config("batch size must be positive and the learning rate non-negative".into()));
            }
        }
        if !(0.0..1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1), got {}", self.eval.threshold)));
        }
        if let Some(j) = &self.prompts.jitter {
            j.validate()?;
        }
        let syn = &self.data.synthetic;
        if self.data.manifest.is_none() {
            if syn.samples_per_domain == 0 {
                return Err(Error::Config("synthetic domains need at least one sample".into()));
            }
            for d in &syn.domains {
                d.style.validate()?;
            }
            self.synthetic_manifest().validate()?;
        }
        for label in &self.ablation.positions {
            for s in slots_for_position(label)? {
                if s >= self.agm.model.num_slots() {
                    return Err(Error::Config(format!("ablation position `{label}` is out of range")));
                }
            }
        }
        Ok(())
    }

    fn synthetic_manifest(&self) -> DatasetManifest {
        let syn = &self.data.synthetic;
        DatasetManifest {
            root: PathBuf::from("."),
            train_fraction: syn.train_fraction,
            split_seed: self.synthetic_seed(),
            domains: syn.domains.iter().map(|d| DomainEntry { name: d.name.clone(), role: d.role }).collect(),
            records: Vec::new(),
        }
    }

    fn synthetic_seed(&self) -> u64 {
        self.data.synthetic.seed.unwrap_or(self.seed)
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.data.manifest {
            Some(p) => p.clone(),
            None => self.data.synthetic.root.join(MANIFEST_FILE),
        }
    }

    /// Iteration budgets as stated in ablation tables.
    pub fn budget_label(&self) -> String {
        let unit = |u: IterationUnit| match u {
            IterationUnit::Steps => "steps",
            IterationUnit::Epochs => "epochs",
        };
        format!(
            "agm {} {}; segmenter {} {}",
            self.agm.optim.iterations,
            unit(self.agm.optim.iteration_unit),
            self.segmenter.optim.iterations,
            unit(self.segmenter.optim.iteration_unit)
        )
    }
}

/// Generate every synthetic domain in memory, with pixels exactly as they
/// are stored on disk.
pub fn synthesize<T: Scalar>(cfg: &PipelineConfig) -> Result<Vec<DomainSample<T>>> {
    let syn = &cfg.data.synthetic;
    let mut out = Vec::new();
    for d in &syn.domains {
        out.extend(generate_synthetic_domain(
            &d.name,
            syn.samples_per_domain,
            &d.style,
            syn.shape_family,
            syn.image_size,
            cfg.synthetic_seed(),
        )?);
    }
    for s in &mut out {
        s.image = data::quantize_8bit(&s.image);
    }
    Ok(out)
}

/// Write the synthetic dataset and its manifest; returns the manifest path.
pub fn write_synthetic(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let root = &cfg.data.synthetic.root;
    std::fs::create_dir_all(root)?;
    let samples = synthesize::<f64>(cfg)?;
    data::write_domain(root, &samples)?;
    let path = root.join(MANIFEST_FILE);
    cfg.synthetic_manifest().write(&path)?;
    Ok(path)
}

/// One domain at both model resolutions, aligned index by index.
#[derive(Clone, Debug)]
pub struct DomainData<T: Scalar> {
    pub name: String,
    pub role: DomainRole,
    pub agm: Vec<DomainSample<T>>,
    pub seg: Vec<DomainSample<T>>,
}

impl<T: Scalar> DomainData<T> {
    fn new(name: &str, role: DomainRole, samples: &[DomainSample<T>], cfg: &PipelineConfig) -> Self {
        let prep = |size| samples.iter().map(|s| s.preprocessed(size, cfg.data.normalize)).collect();
        Self {
            name: name.to_string(),
            role,
            agm: prep(cfg.agm.model.input_size),
            seg: prep(cfg.segmenter.model.image_size),
        }
    }

    pub fn len(&self) -> usize {
        self.seg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seg.is_empty()
    }
}

/// Training and evaluation splits, preprocessed.
#[derive(Clone, Debug)]
pub struct Prepared<T: Scalar> {
    pub source_train: DomainData<T>,
    pub source_test: DomainData<T>,
    pub targets: Vec<DomainData<T>>,
}

impl<T: Scalar> Prepared<T> {
    /// Evaluation domains: the source test split, then every target.
    pub fn eval_domains(&self) -> impl Iterator<Item = &DomainData<T>> {
        std::iter::once(&self.source_test).chain(&self.targets)
    }
}

pub fn prepare_samples<T: Scalar>(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    samples: &[DomainSample<T>],
) -> Result<Prepared<T>> {
    let of = |name: &str| samples.iter().filter(|s| s.domain == name).cloned().collect::<Vec<_>>();
    let source = manifest.source();
    let (train, test) = data::split_source(of(source), manifest.train_fraction, manifest.split_seed);
    if train.is_empty() {
        return Err(Error::Config(format!("source domain `{source}` has no training images")));
    }
    let targets = manifest
        .targets()
        .map(|name| {
            let all = of(name);
            let chosen = match cfg.data.target_split {
                TargetSplit::All => all,
                TargetSplit::Test => data::split_source(all, manifest.train_fraction, manifest.split_seed).1,
            };
            DomainData::new(name, DomainRole::Target, &chosen, cfg)
        })
        .collect();
    Ok(Prepared {
        source_train: DomainData::new(source, DomainRole::Source, &train, cfg),
        source_test: DomainData::new(source, DomainRole::Source, &test, cfg),
        targets,
    })
}

/// Load the dataset named by the config from disk and prepare it.
pub fn prepare<T: Scalar>(cfg: &PipelineConfig) -> Result<Prepared<T>> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "dataset manifest {} not found (run synth-data first or set data.manifest)",
            path.display()
        )));
    }
    let manifest = DatasetManifest::read(&path)?;
    let dataset = load_dataset::<T>(&manifest)?;
    prepare_samples(cfg, &dataset.manifest, &dataset.samples)
}

/// Prepare the synthetic benchmark without touching the disk.
pub fn prepare_in_memory<T: Scalar>(cfg: &PipelineConfig) -> Result<Prepared<T>> {
    cfg.validate()?;
    prepare_samples(cfg, &cfg.synthetic_manifest(), &synthesize::<T>(cfg)?)
}

/// AGM training options for a perturbation setting: `None` disables it.
pub fn agm_variant(cfg: &PipelineConfig, slots: Option<Vec<usize>>, noise: NoiseMode) -> (AgmConfig, AgmTraining) {
    let model = AgmConfig { sufm_positions: slots.unwrap_or_default(), ..cfg.agm.model.clone() };
    let opts = AgmTraining {
        sufm: SufmConfig { noise_mode: noise, ..cfg.sufm.clone() },
        optim: cfg.agm.optim.clone(),
        loss: cfg.loss.clone(),
        seed: cfg.seed,
    };
    (model, opts)
}

pub fn train_agm_stage<T: Scalar>(cfg: &PipelineConfig, prepared: &Prepared<T>) -> Result<(Agm<T>, TrainLog)> {
    let slots = cfg.agm.sufm.then(|| cfg.agm.model.sufm_positions.clone());
    let (model, opts) = agm_variant(cfg, slots, cfg.sufm.noise_mode);
    train_agm(&prepared.source_train.agm, &model, &opts)
}

pub fn finetune_stage<T: Scalar>(
    cfg: &PipelineConfig,
    prepared: &Prepared<T>,
    ipef: bool,
) -> Result<(Segmenter<T>, TrainLog)> {
    let mut model_cfg = cfg.segmenter.model.clone();
    model_cfg.ipef.enabled = ipef;
    let mut model = Segmenter::new(model_cfg, cfg.seed)?;
    let boxes = gt_boxes(&prepared.source_train.seg)?;
    let opts = FinetuneOptions {
        optim: cfg.segmenter.optim.clone(),
        loss: cfg.loss.clone(),
        augmentation: cfg.segmenter.augmentation.clone(),
        seed: cfg.seed,
    };
    let log = finetune_decoder(&mut model, &prepared.source_train.seg, &boxes, &opts)?;
    Ok((model, log))
}

/// Tight ground-truth boxes; an empty mask gets the full-image box.
pub fn gt_boxes<T: Scalar>(samples: &[DomainSample<T>]) -> Result<Vec<BoundingBoxPrompt>> {
    Ok(samples
        .iter()
        .map(|s| {
            let (h, w) = s.mask.dims();
            bbox_from_mask(&s.mask, 0).unwrap_or(BoundingBoxPrompt::full(h, w))
        })
        .collect())
}

/// Preliminary masks of the AGM at its own resolution.
pub fn agm_masks<T: Scalar>(cfg: &PipelineConfig, agm: &Agm<T>, domain: &DomainData<T>) -> Result<Vec<crate::SegmentationMask>> {
    agm.predict_masks(&domain.agm, cfg.eval.threshold)
}

/// Mean Dice of the preliminary AGM masks.
pub fn agm_dice<T: Scalar>(cfg: &PipelineConfig, agm: &Agm<T>, domain: &DomainData<T>) -> Result<f64> {
    let masks = agm_masks(cfg, agm, domain)?;
    mean_dice(masks.iter().zip(&domain.agm).map(|(m, s)| dice_score(m, &s.mask)))
}

/// Automatic prompts for a domain, in segmenter coordinates, with quality
/// against the ground truth. Empty predictions fall back to the full image.
pub fn auto_prompts<T: Scalar>(cfg: &PipelineConfig, agm: &Agm<T>, domain: &DomainData<T>) -> Result<PromptTable> {
    let masks = agm_masks(cfg, agm, domain)?;
    let from = cfg.agm.model.input_size;
    let to = cfg.segmenter.model.image_size;
    let mut table = PromptTable::default();
    for (mask, sample) in masks.iter().zip(&domain.seg) {
        let bbox = match generate_prompt(mask, cfg.prompts.connectivity, cfg.prompts.padding) {
            Some(b) => b.rescale(from, to),
            None => {
                table.fallbacks += 1;
                BoundingBoxPrompt::full(to.0, to.1)
            }
        };
        table.records.push(record(sample, bbox));
    }
    Ok(table)
}

pub fn gt_prompts<T: Scalar>(domain: &DomainData<T>) -> Result<PromptTable> {
    let boxes = gt_boxes(&domain.seg)?;
    Ok(PromptTable {
        records: domain.seg.iter().zip(boxes).map(|(s, b)| record(s, b)).collect(),
        fallbacks: domain.seg.iter().filter(|s| s.mask.is_empty()).count(),
    })
}

fn record<T: Scalar>(sample: &DomainSample<T>, bbox: BoundingBoxPrompt) -> PromptRecord {
    PromptRecord { image_id: sample.id.clone(), bbox, quality: prompt_quality(&bbox, &sample.mask).ok() }
}

/// Jitter every box; the draw for image `i` depends only on `(seed, i)`.
pub fn jitter_table<T: Scalar>(table: &PromptTable, spec: JitterSpec, seed: u64, domain: &DomainData<T>) -> PromptTable {
    let mut out = table.clone();
    for (i, (rec, sample)) in out.records.iter_mut().zip(&domain.seg).enumerate() {
        let (h, w) = sample.mask.dims();
        let shift = (spec.shift_fraction * h.max(w) as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        rec.bbox = jitter_prompt(&rec.bbox, spec.scale, shift, &mut rng, (h, w));
        rec.quality = prompt_quality(&rec.bbox, &sample.mask).ok();
    }
    out
}

/// Boxes of a prompt table in domain order, matched by image id.
pub fn boxes_for<T: Scalar>(table: &PromptTable, domain: &DomainData<T>) -> Result<Vec<BoundingBoxPrompt>> {
    domain
        .seg
        .iter()
        .map(|s| {
            table
                .get(&s.id)
                .map(|r| r.bbox)
                .ok_or_else(|| Error::InvalidInput(format!("no prompt for image `{}` of domain `{}`", s.id, domain.name)))
        })
        .collect()
}

/// Final masks and their Dice scores for a domain.
pub fn segment_domain<T: Scalar>(
    cfg: &PipelineConfig,
    seg: &Segmenter<T>,
    domain: &DomainData<T>,
    boxes: &[BoundingBoxPrompt],
) -> Result<(Vec<crate::SegmentationMask>, Vec<f64>)> {
    if domain.is_empty() {
        return Err(Error::InvalidInput(format!("domain `{}` has no images to evaluate", domain.name)));
    }
    let images: Vec<_> = domain.seg.iter().map(|s| &s.image).collect();
    let mut masks = Vec::with_capacity(images.len());
    for (chunk, bchunk) in images.chunks(16).zip(boxes.chunks(16)) {
        masks.extend(seg.segment_batch(chunk, bchunk, cfg.eval.threshold)?);
    }
    let dice = masks.iter().zip(&domain.seg).map(|(m, s)| dice_score(m, &s.mask)).collect::<Result<Vec<_>>>()?;
    Ok((masks, dice))
}

pub fn segmenter_dice<T: Scalar>(
    cfg: &PipelineConfig,
    seg: &Segmenter<T>,
    domain: &DomainData<T>,
    boxes: &[BoundingBoxPrompt],
) -> Result<f64> {
    let (_, dice) = segment_domain(cfg, seg, domain, boxes)?;
    mean_dice(dice.into_iter().map(Ok))
}

fn mean_dice(scores: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let v = scores.collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::InvalidInput("no images to evaluate".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// How boxes are obtained at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PromptSource {
    Auto,
    GroundTruth,
    Jittered(JitterSpec),
}

/// Boxes for one domain under a prompt policy.
pub fn prompts_for<T: Scalar>(
    cfg: &PipelineConfig,
    agm: Option<&Agm<T>>,
    domain: &DomainData<T>,
    source: PromptSource,
) -> Result<PromptTable> {
    match source {
        PromptSource::GroundTruth => gt_prompts(domain),
        PromptSource::Jittered(spec) => Ok(jitter_table(&gt_prompts(domain)?, spec, cfg.seed, domain)),
        PromptSource::Auto => {
            let agm = agm.ok_or_else(|| Error::Config("automatic prompts need a trained prompt generator".into()))?;
            auto_prompts(cfg, agm, domain)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainMetrics {
    pub domain: String,
    pub role: DomainRole,
    pub images: usize,
    pub agm_dice: Option<f64>,
    pub dice: f64,
    pub fallbacks: usize,
}

/// Per-domain Dice plus the target average.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<DomainMetrics>,
}

impl MetricsTable {
    pub fn target_average(&self) -> Option<f64> {
        let t: Vec<f64> = self.rows.iter().filter(|r| r.role == DomainRole::Target).map(|r| r.dice).collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    pub fn source(&self) -> Option<&DomainMetrics> {
        self.rows.iter().find(|r| r.role == DomainRole::Source)
    }

    /// Columns `domain,role,images,agm_dice,dice,fallbacks`; the last row
    /// averages the target domains.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(["domain", "role", "images", "agm_dice", "dice", "fallbacks"]).map_err(csv_error)?;
        let fmt = |v: f64| format!("{v:.6}");
        for r in &self.rows {
            let role = match r.role {
                DomainRole::Source => "source",
                DomainRole::Target => "target",
            };
            w.write_record([
                r.domain.clone(),
                role.into(),
                r.images.to_string(),
                r.agm_dice.map(fmt).unwrap_or_default(),
                fmt(r.dice),
                r.fallbacks.to_string(),
            ])
            .map_err(csv_error)?;
        }
        if let Some(avg) = self.target_average() {
            let targets: Vec<&DomainMetrics> = self.rows.iter().filter(|r| r.role == DomainRole::Target).collect();
            let agm = targets.iter().map(|r| r.agm_dice).collect::<Option<Vec<f64>>>();
            w.write_record([
                "average".to_string(),
                "target".into(),
                targets.iter().map(|r| r.images).sum::<usize>().to_string(),
                agm.map(|v| fmt(v.iter().sum::<f64>() / v.len() as f64)).unwrap_or_default(),
                fmt(avg),
                targets.iter().map(|r| r.fallbacks).sum::<usize>().to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluate the segmenter on every evaluation domain.
pub fn evaluate<T: Scalar>(
    cfg: &PipelineConfig,
    prepared: &Prepared<T>,
    agm: Option<&Agm<T>>,
    seg: &Segmenter<T>,
    source: PromptSource,
) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for domain in prepared.eval_domains() {
        let prompts = prompts_for(cfg, agm, domain, source)?;
        let boxes = boxes_for(&prompts, domain)?;
        table.rows.push(DomainMetrics {
            domain: domain.name.clone(),
            role: domain.role,
            images: domain.len(),
            agm_dice: agm.map(|a| agm_dice(cfg, a, domain)).transpose()?,
            dice: segmenter_dice(cfg, seg, domain, &boxes)?,
            fallbacks: prompts.fallbacks,
        });
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Module,
    Position,
    Distribution,
    PromptJitter,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "module" => Ok(Self::Module),
            "position" => Ok(Self::Position),
            "distribution" => Ok(Self::Distribution),
            "prompt_jitter" => Ok(Self::PromptJitter),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (module, position, distribution, prompt_jitter)"
            ))),
        }
    }
}

/// Rows of labelled Dice values under a shared header.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AblationTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(&self.header).map_err(csv_error)?;
        for (label, values) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(values.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Target Dice per domain plus their mean.
fn target_row<T: Scalar>(
    cfg: &PipelineConfig,
    prepared: &Prepared<T>,
    agm: Option<&Agm<T>>,
    seg: &Segmenter<T>,
    source: PromptSource,
) -> Result<Vec<f64>> {
    let mut v = Vec::new();
    for d in &prepared.targets {
        let prompts = prompts_for(cfg, agm, d, source)?;
        v.push(segmenter_dice(cfg, seg, d, &boxes_for(&prompts, d)?)?);
    }
    v.push(v.iter().sum::<f64>() / v.len().max(1) as f64);
    Ok(v)
}

fn mean_agm_target_dice<T: Scalar>(cfg: &PipelineConfig, prepared: &Prepared<T>, agm: &Agm<T>) -> Result<f64> {
    let v = prepared.targets.iter().map(|d| agm_dice(cfg, agm, d)).collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Run one ablation grid with shared seeds and data.
pub fn run_ablation<T: Scalar>(cfg: &PipelineConfig, prepared: &Prepared<T>, axis: AblationAxis) -> Result<AblationTable> {
    if prepared.targets.is_empty() {
        return Err(Error::Config("ablations need at least one target domain".into()));
    }
    let budget = cfg.budget_label();
    let slots = cfg.agm.model.sufm_positions.clone();
    let train = |slots: Option<Vec<usize>>, noise: NoiseMode| -> Result<Agm<T>> {
        let (model, opts) = agm_variant(cfg, slots, noise);
        Ok(train_agm(&prepared.source_train.agm, &model, &opts)?.0)
    };
    let mut domain_header = vec![format!("setting ({budget})")];
    domain_header.extend(prepared.targets.iter().map(|d| d.name.clone()));
    domain_header.push("average".into());
    match axis {
        AblationAxis::Module => {
            let agm_off = train(None, cfg.sufm.noise_mode)?;
            let agm_on = train(Some(slots), cfg.sufm.noise_mode)?;
            let seg_off = finetune_stage(cfg, prepared, false)?.0;
            let seg_on = finetune_stage(cfg, prepared, true)?.0;
            let mut rows = Vec::new();
            for (label, agm, seg) in [
                ("agm* + segmenter", &agm_off, &seg_off),
                ("sufm + agm* + segmenter", &agm_on, &seg_off),
                ("agm* + ipef + segmenter", &agm_off, &seg_on),
                ("sufm + agm* + ipef + segmenter", &agm_on, &seg_on),
            ] {
                rows.push((label.to_string(), target_row(cfg, prepared, Some(agm), seg, PromptSource::Auto)?));
            }
            Ok(AblationTable { header: domain_header, rows })
        }
        AblationAxis::Position | AblationAxis::Distribution => {
            let seg = finetune_stage(cfg, prepared, true)?.0;
            let mut header = vec![format!("prediction ({budget})")];
            let mut prelim = Vec::new();
            let mut fin = Vec::new();
            let variants: Vec<(String, Vec<usize>, NoiseMode)> = if axis == AblationAxis::Position {
                cfg.ablation
                    .positions
                    .iter()
                    .map(|p| Ok((p.clone(), slots_for_position(p)?, cfg.sufm.noise_mode)))
                    .collect::<Result<_>>()?
            } else {
                cfg.ablation.distributions.iter().map(|&m| (m.name().to_string(), slots.clone(), m)).collect()
            };
            for (label, slots, noise) in variants {
                let agm = train(Some(slots), noise)?;
                header.push(label);
                prelim.push(mean_agm_target_dice(cfg, prepared, &agm)?);
                fin.push(*target_row(cfg, prepared, Some(&agm), &seg, PromptSource::Auto)?.last().expect("average"));
            }
            Ok(AblationTable {
                header,
                rows: vec![("preliminary prediction".into(), prelim), ("final prediction".into(), fin)],
            })
        }
        AblationAxis::PromptJitter => {
            let agm = train(Some(slots), cfg.sufm.noise_mode)?;
            let j = cfg.ablation.jitter;
            let mut header = vec![format!("model ({budget})")];
            header.extend([
                "gt_boxes".to_string(),
                format!("jittered_boxes (scale {}, shift {})", j.scale, j.shift_fraction),
                "auto_boxes".to_string(),
            ]);
            let mut rows = Vec::new();
            for ipef in [false, true] {
                let seg = finetune_stage(cfg, prepared, ipef)?.0;
                let avg = |src| -> Result<f64> { Ok(*target_row(cfg, prepared, Some(&agm), &seg, src)?.last().expect("average")) };
                let label = if ipef { "segmenter + ipef" } else { "segmenter" };
                rows.push((
                    label.to_string(),
                    vec![avg(PromptSource::GroundTruth)?, avg(PromptSource::Jittered(j))?, avg(PromptSource::Auto)?],
                ));
            }
            Ok(AblationTable { header, rows })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn default_synthetic_layout() {
        let cfg = PipelineConfig::default();
        let m = cfg.synthetic_manifest();
        assert_eq!(m.source(), "source");
        assert_eq!(m.targets().count(), 2);
        let (tr, te) = data::split_source((0..cfg.data.synthetic.samples_per_domain).collect::<Vec<_>>(), m.train_fraction, 0);
        assert_eq!((tr.len(), te.len()), (64, 16));
    }

    #[test]
    fn unfrozen_encoders_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.segmenter.freeze_image_encoder = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn axis_names() {
        assert_eq!("prompt-jitter".parse::<AblationAxis>().unwrap(), AblationAxis::PromptJitter);
        assert!("colour".parse::<AblationAxis>().is_err());
    }
}
