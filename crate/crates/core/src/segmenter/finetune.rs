use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MultiScaleEmbeddings, Segmenter};
use crate::data::DomainSample;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mask::SegmentationMask;
use crate::nn::{Adam, Graph, OptimConfig, ParamGroup};
use crate::prompt::{jitter_prompt, BoundingBoxPrompt};
use crate::scalar::Scalar;
use crate::training::{assemble, batch_dice, check_loss, BatchSampler, TrainLog, TrainRecord};

/// Random box perturbation applied to training prompts. With probability
/// `probability` a box is rescaled by a factor drawn from
/// `[1 - max_scale_delta, 1 + max_scale_delta]` and shifted by up to
/// `max_shift_fraction` of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptAugmentation {
    pub probability: f64,
    pub max_scale_delta: f64,
    pub max_shift_fraction: f64,
}

impl Default for PromptAugmentation {
    fn default() -> Self {
        Self { probability: 0.5, max_scale_delta: 0.2, max_shift_fraction: 0.05 }
    }
}

impl PromptAugmentation {
    pub fn none() -> Self {
        Self { probability: 0.0, max_scale_delta: 0.0, max_shift_fraction: 0.0 }
    }

    fn apply<R: Rng>(&self, b: &BoundingBoxPrompt, size: (usize, usize), rng: &mut R) -> BoundingBoxPrompt {
        if !rng.random_bool(self.probability) {
            return *b;
        }
        let d = self.max_scale_delta;
        let scale = if d > 0.0 { rng.random_range(1.0 - d..=1.0 + d) } else { 1.0 };
        let shift = (self.max_shift_fraction * size.0.max(size.1) as f64).round() as usize;
        jitter_prompt(b, scale, shift, rng, size)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || !(0.0..1.0).contains(&self.max_scale_delta) || self.max_shift_fraction < 0.0 {
            return Err(Error::Config(format!("invalid prompt augmentation {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneOptions {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub augmentation: PromptAugmentation,
    pub seed: u64,
}

/// Train the decoder on samples at the model resolution with one box per
/// sample. Both encoders are frozen; their outputs are computed once.
pub fn finetune_decoder<T: Scalar>(
    model: &mut Segmenter<T>,
    samples: &[DomainSample<T>],
    prompts: &[BoundingBoxPrompt],
    opts: &FinetuneOptions,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::Config("the fine-tuning set is empty".into()));
    }
    if samples.len() != prompts.len() {
        return Err(Error::InvalidInput(format!("{} samples but {} prompts", samples.len(), prompts.len())));
    }
    opts.augmentation.validate()?;
    model.store.set_group_trainable(ParamGroup::ImageEncoder, false);
    model.store.set_group_trainable(ParamGroup::PromptEncoder, false);
    let size = model.config.image_size;
    let mut cache: Vec<MultiScaleEmbeddings<T>> = Vec::with_capacity(samples.len());
    for start in (0..samples.len()).step_by(8) {
        let idx: Vec<usize> = (start..(start + 8).min(samples.len())).collect();
        let (x, _) = assemble(samples, &idx)?;
        let e = model.encode_image(&x)?;
        cache.extend((0..idx.len()).map(|i| e.item(i)));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    data_rng.set_stream(3);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    aug_rng.set_stream(4);
    let mut sampler = BatchSampler::new(samples.len(), opts.optim.batch_size, &mut data_rng);
    let mut adam = Adam::new(&model.store, &opts.optim);
    let mut log = TrainLog::default();
    let steps = opts.optim.total_steps(samples.len());
    for iteration in 0..steps {
        let idx = sampler.next_batch(&mut data_rng);
        let (_, y) = assemble(samples, &idx)?;
        let embeds = MultiScaleEmbeddings::concat(&idx.iter().map(|&i| &cache[i]).collect::<Vec<_>>())?;
        let batch_prompts = idx
            .iter()
            .map(|&i| model.encode_prompt(&opts.augmentation.apply(&prompts[i], size, &mut aug_rng), size))
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<&SegmentationMask> = idx.iter().map(|&i| &samples[i].mask).collect();
        let grads = {
            let mut g = Graph::new(&model.store);
            let logits = model.forward_graph(&mut g, &embeds, &batch_prompts)?;
            let loss = g.bce_dice_loss(logits, &y, &opts.loss);
            let value = g.last_loss().expect("loss recorded");
            check_loss(iteration, value.total)?;
            log.records.push(TrainRecord {
                iteration,
                loss: value.total,
                dice: batch_dice(g.value(logits), &masks, model.config.threshold),
            });
            g.backward(loss)
        };
        adam.step(&mut model.store, &grads);
        if iteration % 50 == 0 || iteration + 1 == steps {
            log::debug!("finetune iteration {iteration}: L_seg {:.4}", log.records.last().expect("pushed").loss);
        }
    }
    Ok(log)
}
