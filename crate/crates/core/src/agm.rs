//! Auto-prompted generation model: a U-Net style encoder-decoder trained on
//! the source domain, with feature-statistics perturbation insertable at
//! shallow or deep encoder slots.
//!
//! Insertion slots for `n` encoder blocks: slot 0 follows block 0, slot 1
//! follows the first max-pool, slot `k` for `2 <= k <= n` follows block
//! `k - 1`, and slot `n + 1` follows the bottleneck.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::DomainSample;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mask::SegmentationMask;
use crate::nn::{Adam, Conv2d, Graph, OptimConfig, ParamGroup, ParamStore, Var};
use crate::scalar::Scalar;
use crate::sufm::{self, SufmConfig};
use crate::tensor::Tensor;
use crate::training::{assemble, batch_dice, check_loss, mask_from_logits, BatchSampler, TrainLog, TrainRecord};

pub const CHECKPOINT_KIND: &str = "agm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgmConfig {
    pub encoder_channels: Vec<usize>,
    pub sufm_positions: Vec<usize>,
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub threshold: f64,
}

impl Default for AgmConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64, 128],
            sufm_positions: vec![0, 1],
            input_size: (64, 64),
            num_classes: 1,
            threshold: 0.5,
        }
    }
}

impl AgmConfig {
    pub fn num_slots(&self) -> usize {
        self.encoder_channels.len() + 2
    }

    pub fn downsampling(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be a non-empty list of positive widths".into()));
        }
        if self.num_classes != 1 {
            return Err(Error::Config(format!("only binary segmentation is supported, got {} classes", self.num_classes)));
        }
        if let Some(&bad) = self.sufm_positions.iter().find(|&&p| p >= self.num_slots()) {
            return Err(Error::Config(format!(
                "perturbation slot {bad} is out of range (0..{})",
                self.num_slots()
            )));
        }
        let (h, w) = self.input_size;
        let d = self.downsampling();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of {d}")));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Slots for an insertion-position label: `"0-1"` is the two shallowest
/// slots, any other label is a single slot index.
pub fn slots_for_position(label: &str) -> Result<Vec<usize>> {
    if label == "0-1" {
        return Ok(vec![0, 1]);
    }
    label
        .parse::<usize>()
        .map(|s| vec![s])
        .map_err(|_| Error::Config(format!("unknown insertion position `{label}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(store, ParamGroup::Agm, &format!("{name}.conv1"), cin, cout, 3, rng),
            b: Conv2d::new(store, ParamGroup::Agm, &format!("{name}.conv2"), cout, cout, 3, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.a.forward(g, x);
        let h = g.relu(h);
        let h = self.b.forward(g, h);
        g.relu(h)
    }
}

#[derive(Clone, Debug)]
pub struct Agm<T: Scalar> {
    pub config: AgmConfig,
    pub store: ParamStore<T>,
    encoder: Vec<Block>,
    bottleneck: Block,
    decoder: Vec<Block>,
    head: Conv2d,
}

/// Perturbation state for one training forward pass.
pub struct Perturbation<'a, R: Rng> {
    pub config: &'a SufmConfig,
    pub rng: &'a mut R,
}

impl<T: Scalar> Agm<T> {
    pub fn new(config: AgmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.encoder_channels;
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(Block::new(&mut store, &format!("enc{i}"), cin, c, &mut rng));
            cin = c;
        }
        let deepest = *ch.last().expect("validated");
        let bottleneck = Block::new(&mut store, "bottleneck", deepest, deepest, &mut rng);
        let mut decoder = Vec::new();
        let mut below = deepest;
        for (i, &c) in ch.iter().enumerate().rev() {
            decoder.push(Block::new(&mut store, &format!("dec{i}"), below + c, c, &mut rng));
            below = c;
        }
        let head = Conv2d::new(&mut store, ParamGroup::Agm, "head", ch[0], config.num_classes, 1, &mut rng);
        Ok(Self { config, store, encoder, bottleneck, decoder, head })
    }

    /// Record the network on `g`. Slots listed in the config are perturbed
    /// when `perturb` is given.
    pub fn forward_graph<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mut perturb: Option<Perturbation<'_, R>>,
    ) -> Result<Var> {
        let mut slot = |g: &mut Graph<'_, T>, v: Var, idx: usize| -> Result<Var> {
            match perturb.as_mut() {
                Some(p) if self.config.sufm_positions.contains(&idx) => apply_sufm(g, v, p),
                _ => Ok(v),
            }
        };
        let n = self.encoder.len();
        let mut skips = Vec::with_capacity(n);
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            h = block.forward(g, h);
            h = slot(g, h, if i == 0 { 0 } else { i + 1 })?;
            skips.push(h);
            h = g.max_pool2(h);
            if i == 0 {
                h = slot(g, h, 1)?;
            }
        }
        h = self.bottleneck.forward(g, h);
        h = slot(g, h, n + 1)?;
        for (block, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = g.upsample2(h);
            let cat = g.concat(&[up, skip]);
            h = block.forward(g, cat);
        }
        Ok(self.head.forward(g, h))
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        images.expect_rank(4)?;
        let (b, c, h, w) = images.dims4();
        let (eh, ew) = self.config.input_size;
        if b == 0 || c != 1 || (h, w) != (eh, ew) {
            return Err(Error::InvalidInput(format!(
                "expected images of shape (B, 1, {eh}, {ew}), got {:?}",
                images.shape()
            )));
        }
        if !images.all_finite() {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Logits `(B, 1, H, W)`. In train mode the configured slots are
    /// perturbed using `rng`; eval mode never touches it.
    pub fn forward<R: Rng>(&self, images: &Tensor<T>, mode: Mode, sufm: &SufmConfig, rng: &mut R) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(images.clone());
        let perturb = (mode == Mode::Train).then_some(Perturbation { config: sufm, rng });
        let out = self.forward_graph(&mut g, x, perturb)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode logits, processed in chunks to bound memory.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let (b, _, h, w) = images.dims4();
        let chunk = 8;
        let mut parts = Vec::new();
        for start in (0..b).step_by(chunk) {
            let end = (start + chunk).min(b);
            let part = Tensor::from_vec(&[end - start, 1, h, w], images.data()[start * h * w..end * h * w].to_vec())?;
            let mut g = Graph::new(&self.store);
            let x = g.constant(part);
            let out = self.forward_graph::<ChaCha8Rng>(&mut g, x, None)?;
            parts.push(g.value(out).clone());
        }
        Tensor::concat_batch(&parts)
    }

    /// Preliminary mask for one `(H, W)` image at the model resolution.
    pub fn predict_mask(&self, image: &Tensor<T>, threshold: f64) -> Result<SegmentationMask> {
        let (h, w) = self.config.input_size;
        let x = image.clone().reshape(&[1, 1, h, w])?;
        Ok(mask_from_logits(self.logits(&x)?.data(), h, w, threshold))
    }

    pub fn predict_masks(&self, samples: &[DomainSample<T>], threshold: f64) -> Result<Vec<SegmentationMask>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let idx: Vec<usize> = (0..samples.len()).collect();
        let (x, _) = assemble(samples, &idx)?;
        let logits = self.logits(&x)?;
        let (h, w) = self.config.input_size;
        Ok((0..samples.len()).map(|i| mask_from_logits(logits.item(i), h, w, threshold)).collect())
    }

    pub fn to_checkpoint(&self, iteration: usize, seed: u64) -> ModelCheckpoint<T> {
        ModelCheckpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serialises"),
            iteration,
            seed,
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint<T>) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: AgmConfig = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(config, ck.seed)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

fn apply_sufm<T: Scalar, R: Rng>(g: &mut Graph<'_, T>, v: Var, p: &mut Perturbation<'_, R>) -> Result<Var> {
    let f = g.value(v);
    match sufm::plan(f, p.config, p.rng, true)? {
        None => Ok(v),
        Some((stats, pert)) => {
            let value = sufm::perturb_features(f, &stats, &pert)?;
            Ok(g.restyle(v, value, stats.mean.data(), stats.std.data(), pert.gamma.into_data()))
        }
    }
}

/// Training options beyond the optimiser.
#[derive(Clone, Debug, Default)]
pub struct AgmTraining {
    pub sufm: SufmConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

/// Train on source samples already resized to the model resolution.
/// Returns the model and a per-iteration log of `L_sup` and batch Dice.
pub fn train_agm<T: Scalar>(
    samples: &[DomainSample<T>],
    config: &AgmConfig,
    opts: &AgmTraining,
) -> Result<(Agm<T>, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::Config("the source training set is empty".into()));
    }
    opts.sufm.validate()?;
    let mut model = Agm::new(config.clone(), opts.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    data_rng.set_stream(1);
    let mut sufm_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ opts.sufm.rng_seed);
    sufm_rng.set_stream(2);
    let mut sampler = BatchSampler::new(samples.len(), opts.optim.batch_size, &mut data_rng);
    let mut adam = Adam::new(&model.store, &opts.optim);
    let mut log = TrainLog::default();
    let steps = opts.optim.total_steps(samples.len());
    for iteration in 0..steps {
        let idx = sampler.next_batch(&mut data_rng);
        let (x, y) = assemble(samples, &idx)?;
        model.check_input(&x)?;
        let masks: Vec<&SegmentationMask> = idx.iter().map(|&i| &samples[i].mask).collect();
        let grads = {
            let mut g = Graph::new(&model.store);
            let xv = g.constant(x);
            let perturb = Some(Perturbation { config: &opts.sufm, rng: &mut sufm_rng });
            let logits = model.forward_graph(&mut g, xv, perturb)?;
            let loss = g.bce_dice_loss(logits, &y, &opts.loss);
            let value = g.last_loss().expect("loss recorded");
            check_loss(iteration, value.total)?;
            log.records.push(TrainRecord {
                iteration,
                loss: value.total,
                dice: batch_dice(g.value(logits), &masks, config.threshold),
            });
            g.backward(loss)
        };
        adam.step(&mut model.store, &grads);
        if iteration % 50 == 0 || iteration + 1 == steps {
            log::debug!("agm iteration {iteration}: L_sup {:.4}", log.records.last().expect("pushed").loss);
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AgmConfig {
        AgmConfig { encoder_channels: vec![4, 8], sufm_positions: vec![0, 1, 2, 3], input_size: (8, 8), ..Default::default() }
    }

    #[test]
    fn default_output_shape() {
        let m = Agm::<f32>::new(AgmConfig::default(), 0).unwrap();
        let x = Tensor::from_fn(&[2, 1, 64, 64], |i| (i as f32 * 0.01).sin());
        assert_eq!(m.logits(&x).unwrap().shape(), &[2, 1, 64, 64]);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let m = Agm::<f32>::new(tiny(), 0).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[1, 1, 16, 16])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_configs() {
        let bad_slot = AgmConfig { sufm_positions: vec![4], ..tiny() };
        assert!(bad_slot.validate().is_err());
        let bad_size = AgmConfig { input_size: (10, 8), ..tiny() };
        assert!(bad_size.validate().is_err());
    }

    #[test]
    fn eval_is_deterministic_and_ignores_rng() {
        let m = Agm::<f64>::new(tiny(), 1).unwrap();
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 7) % 5) as f64 / 5.0);
        let cfg = SufmConfig { apply_probability: 1.0, ..Default::default() };
        let a = m.forward(&x, Mode::Eval, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = m.forward(&x, Mode::Eval, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.logits(&x).unwrap());
    }

    #[test]
    fn train_mode_without_slots_or_probability_matches_eval() {
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 3) % 7) as f64 / 7.0);
        let on = SufmConfig { apply_probability: 1.0, ..Default::default() };
        let no_slots = Agm::<f64>::new(AgmConfig { sufm_positions: vec![], ..tiny() }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(no_slots.forward(&x, Mode::Train, &on, &mut rng).unwrap(), no_slots.logits(&x).unwrap());
        let m = Agm::<f64>::new(tiny(), 2).unwrap();
        let off = SufmConfig { apply_probability: 0.0, ..Default::default() };
        assert_eq!(m.forward(&x, Mode::Train, &off, &mut rng).unwrap(), m.logits(&x).unwrap());
        assert_ne!(m.forward(&x, Mode::Train, &on, &mut rng).unwrap(), m.logits(&x).unwrap());
    }

    #[test]
    fn position_labels() {
        assert_eq!(slots_for_position("0-1").unwrap(), vec![0, 1]);
        assert_eq!(slots_for_position("3").unwrap(), vec![3]);
        assert!(slots_for_position("x").is_err());
    }
}
