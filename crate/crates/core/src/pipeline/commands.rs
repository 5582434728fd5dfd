//! File-level stages behind the command-line tool. Every stage reads and
//! writes artifacts under the configured output directory:
//!
//! ```text
//! agm.ckpt  agm_log.csv  prompts/<domain>.csv  segmenter.ckpt
//! finetune_log.csv  metrics.csv  overlays/<domain>/<id>.png  ablation_<axis>.csv
//! ```

use std::path::{Path, PathBuf};

use super::*;
use crate::checkpoint::ModelCheckpoint;
use crate::data::write_overlay_png;

pub const AGM_CHECKPOINT: &str = "agm.ckpt";
pub const AGM_LOG: &str = "agm_log.csv";
pub const SEGMENTER_CHECKPOINT: &str = "segmenter.ckpt";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const PROMPT_DIR: &str = "prompts";
pub const OVERLAY_DIR: &str = "overlays";

pub fn artifact(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

pub fn prompt_path(cfg: &PipelineConfig, domain: &str) -> PathBuf {
    cfg.output.dir.join(PROMPT_DIR).join(format!("{domain}.csv"))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{} not found ({hint})", path.display())))
    }
}

fn output_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    Ok(())
}

pub fn load_agm<T: Scalar>(path: &Path) -> Result<Agm<T>> {
    require(path, "run train-agm first")?;
    Agm::from_checkpoint(&ModelCheckpoint::load(path)?)
}

pub fn load_segmenter<T: Scalar>(path: &Path) -> Result<Segmenter<T>> {
    require(path, "run finetune first")?;
    Segmenter::from_checkpoint(&ModelCheckpoint::load(path)?)
}

/// Write the synthetic dataset; returns the manifest path.
pub fn cmd_synth_data(cfg: &PipelineConfig) -> Result<PathBuf> {
    if cfg.data.manifest.is_some() {
        return Err(Error::Config("data.manifest is set; synth-data only writes the synthetic dataset".into()));
    }
    write_synthetic(cfg)
}

#[derive(Clone, Debug)]
pub struct AgmReport {
    pub checkpoint: PathBuf,
    pub final_loss: Option<f64>,
    pub source_test_dice: Option<f64>,
}

/// Train the prompt generator on the source training split.
pub fn cmd_train_agm<T: Scalar>(cfg: &PipelineConfig) -> Result<AgmReport> {
    let prepared = prepare::<T>(cfg)?;
    let (agm, log) = train_agm_stage(cfg, &prepared)?;
    output_dir(cfg)?;
    let checkpoint = artifact(cfg, AGM_CHECKPOINT);
    agm.to_checkpoint(log.records.len(), cfg.seed).save(&checkpoint)?;
    log.write_csv(&artifact(cfg, AGM_LOG), "l_sup")?;
    let source_test_dice =
        (!prepared.source_test.is_empty()).then(|| agm_dice(cfg, &agm, &prepared.source_test)).transpose()?;
    Ok(AgmReport { checkpoint, final_loss: log.last_loss(), source_test_dice })
}

/// Base prompt policy of the config, then optional jitter.
fn prompt_table<T: Scalar>(cfg: &PipelineConfig, agm: Option<&Agm<T>>, domain: &DomainData<T>) -> Result<PromptTable> {
    let source = if cfg.prompts.use_gt_boxes { PromptSource::GroundTruth } else { PromptSource::Auto };
    let table = prompts_for(cfg, agm, domain, source)?;
    Ok(match cfg.prompts.jitter {
        Some(spec) => jitter_table(&table, spec, cfg.seed, domain),
        None => table,
    })
}

fn selected<'a, T: Scalar>(prepared: &'a Prepared<T>, domains: &[String]) -> Result<Vec<&'a DomainData<T>>> {
    let all: Vec<&DomainData<T>> = prepared.eval_domains().collect();
    if domains.is_empty() {
        return Ok(all);
    }
    domains
        .iter()
        .map(|name| {
            all.iter()
                .copied()
                .find(|d| &d.name == name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown domain `{name}`")))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PromptReport {
    pub domain: String,
    pub path: PathBuf,
    pub records: usize,
    pub fallbacks: usize,
    pub mean_quality: Option<f64>,
}

/// Write one prompt table per evaluation domain (the source test split and
/// every target, or only `domains`). Automatic prompts need `checkpoint`,
/// defaulting to the trained prompt generator in the output directory.
pub fn cmd_gen_prompts<T: Scalar>(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    domains: &[String],
) -> Result<Vec<PromptReport>> {
    let prepared = prepare::<T>(cfg)?;
    let agm = if cfg.prompts.use_gt_boxes {
        None
    } else {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| artifact(cfg, AGM_CHECKPOINT));
        Some(load_agm::<T>(&path)?)
    };
    std::fs::create_dir_all(cfg.output.dir.join(PROMPT_DIR))?;
    let mut reports = Vec::new();
    for domain in selected(&prepared, domains)? {
        if domain.is_empty() {
            continue;
        }
        let table = prompt_table(cfg, agm.as_ref(), domain)?;
        let path = prompt_path(cfg, &domain.name);
        table.write_csv(&path)?;
        let q: Vec<f64> = table.records.iter().filter_map(|r| r.quality).collect();
        reports.push(PromptReport {
            domain: domain.name.clone(),
            path,
            records: table.records.len(),
            fallbacks: table.fallbacks,
            mean_quality: (!q.is_empty()).then(|| q.iter().sum::<f64>() / q.len() as f64),
        });
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub checkpoint: PathBuf,
    pub final_loss: Option<f64>,
}

/// Fine-tune the segmenter decoder on the source training split with
/// ground-truth boxes, or with the boxes of a prompt table.
pub fn cmd_finetune<T: Scalar>(cfg: &PipelineConfig, prompts: Option<&Path>) -> Result<FinetuneReport> {
    let prepared = prepare::<T>(cfg)?;
    let train = &prepared.source_train;
    let boxes = match prompts {
        Some(path) => {
            require(path, "run gen-prompts first")?;
            boxes_for(&PromptTable::read_csv(path)?, train)?
        }
        None => gt_boxes(&train.seg)?,
    };
    let mut model = Segmenter::<T>::new(cfg.segmenter.model.clone(), cfg.seed)?;
    let opts = FinetuneOptions {
        optim: cfg.segmenter.optim.clone(),
        loss: cfg.loss.clone(),
        augmentation: cfg.segmenter.augmentation.clone(),
        seed: cfg.seed,
    };
    let log = finetune_decoder(&mut model, &train.seg, &boxes, &opts)?;
    output_dir(cfg)?;
    let checkpoint = artifact(cfg, SEGMENTER_CHECKPOINT);
    model.to_checkpoint(log.records.len(), cfg.seed).save(&checkpoint)?;
    log.write_csv(&artifact(cfg, FINETUNE_LOG), "l_seg")?;
    Ok(FinetuneReport { checkpoint, final_loss: log.last_loss() })
}

/// Segment every evaluation domain (or only `domains`) and write
/// `metrics.csv` plus overlays. Prompts come from the ground truth with
/// `use_gt_boxes`, otherwise from the prompt tables of `gen-prompts`.
pub fn cmd_eval<T: Scalar>(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    domains: &[String],
) -> Result<(PathBuf, MetricsTable)> {
    let prepared = prepare::<T>(cfg)?;
    let seg_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| artifact(cfg, SEGMENTER_CHECKPOINT));
    let seg = load_segmenter::<T>(&seg_path)?;
    let agm_path = artifact(cfg, AGM_CHECKPOINT);
    let agm = agm_path.exists().then(|| load_agm::<T>(&agm_path)).transpose()?;
    let mut table = MetricsTable::default();
    for domain in selected(&prepared, domains)? {
        if domain.is_empty() {
            return Err(Error::InvalidInput(format!("domain `{}` has no images to evaluate", domain.name)));
        }
        let prompts = if cfg.prompts.use_gt_boxes {
            prompt_table(cfg, None, domain)?
        } else {
            let path = prompt_path(cfg, &domain.name);
            require(&path, "run gen-prompts first or pass --use-gt-boxes")?;
            PromptTable::read_csv(&path)?
        };
        let boxes = boxes_for(&prompts, domain)?;
        let (masks, dice) = segment_domain(cfg, &seg, domain, &boxes)?;
        let n = cfg.eval.overlays_per_domain.min(domain.len());
        if n > 0 {
            let dir = cfg.output.dir.join(OVERLAY_DIR).join(&domain.name);
            std::fs::create_dir_all(&dir)?;
            for i in 0..n {
                let s = &domain.seg[i];
                write_overlay_png(&dir.join(format!("{}.png", s.id)), &s.image, &s.mask, &masks[i], Some(&boxes[i]))?;
            }
        }
        table.rows.push(DomainMetrics {
            domain: domain.name.clone(),
            role: domain.role,
            images: domain.len(),
            agm_dice: agm.as_ref().map(|a| agm_dice(cfg, a, domain)).transpose()?,
            dice: dice.iter().sum::<f64>() / dice.len() as f64,
            fallbacks: prompts.fallbacks,
        });
    }
    output_dir(cfg)?;
    let path = artifact(cfg, METRICS);
    table.write_csv(&path)?;
    Ok((path, table))
}

/// Run one ablation grid and write `ablation_<axis>.csv`.
pub fn cmd_ablate<T: Scalar>(cfg: &PipelineConfig, axis: AblationAxis) -> Result<(PathBuf, AblationTable)> {
    let prepared = prepare::<T>(cfg)?;
    let table = run_ablation(cfg, &prepared, axis)?;
    output_dir(cfg)?;
    let name = serde_json::to_value(axis)?.as_str().expect("axis name").to_string();
    let path = artifact(cfg, &format!("ablation_{name}.csv"));
    table.write_csv(&path)?;
    Ok((path, table))
}
