//! Promptable segmenter: a frozen multi-scale image encoder, a frozen box
//! prompt encoder, and a trainable mask decoder. The decoder either fuses
//! all three encoder taps with the broadcast prompt through gated residual
//! stages (image-prompt embedding fusion), or, when fusion is disabled, sees
//! only the coarsest tap through one plain residual block.

mod decoder;
mod encoder;
mod finetune;
mod prompt_encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::nn::{Conv2d, Graph, ParamGroup, ParamStore, Var};
use crate::prompt::BoundingBoxPrompt;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::mask_from_logits;

pub use decoder::{ResBlock, UpsampleMode, Upsampler};
pub use encoder::{ImageEncoder, MultiScaleEmbeddings};
pub use finetune::{finetune_decoder, FinetuneOptions, PromptAugmentation};
pub use prompt_encoder::{Broadcast, PromptEmbedding, PromptEncoder};

pub const CHECKPOINT_KIND: &str = "segmenter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpefConfig {
    /// `false` selects the single-scale baseline decoder.
    pub enabled: bool,
    pub se_reduction_ratio: usize,
    pub upsample_mode: UpsampleMode,
    pub fused_channels: [usize; 3],
    pub skip_connections: bool,
    /// Replace every excitation gate by ones (diagnostics).
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub se_bypass: bool,
}

impl Default for IpefConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            se_reduction_ratio: 4,
            upsample_mode: UpsampleMode::Bilinear,
            fused_channels: [256, 128, 64],
            skip_connections: true,
            se_bypass: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub image_size: (usize, usize),
    pub encoder_channels: Vec<usize>,
    pub tap_channels: [usize; 3],
    pub prompt_frequencies: usize,
    pub ipef: IpefConfig,
    pub threshold: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            encoder_channels: vec![16, 32, 64, 128],
            tap_channels: [256, 128, 64],
            prompt_frequencies: 8,
            ipef: IpefConfig::default(),
            threshold: 0.5,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_channels.len();
        if n < 3 || self.encoder_channels.contains(&0) {
            return Err(Error::Config("the image encoder needs at least three stages of positive width".into()));
        }
        let t = self.tap_channels;
        if !(t[0] > t[1] && t[1] > t[2] && t[2] > 0) {
            return Err(Error::Config(format!("tap widths {t:?} must be strictly decreasing and positive")));
        }
        let f = self.ipef.fused_channels;
        if f.contains(&0) {
            return Err(Error::Config("fused channel widths must be positive".into()));
        }
        let r = self.ipef.se_reduction_ratio;
        if self.ipef.enabled && (r == 0 || f.iter().any(|c| c % r != 0)) {
            return Err(Error::Config(format!("reduction ratio {r} must divide every fused width {f:?}")));
        }
        let d = 1 << n;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be a positive multiple of {d}")));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1), got {}", self.threshold)));
        }
        Ok(())
    }

    /// Spatial sizes of the three taps, coarse to fine.
    pub fn tap_sizes(&self) -> [(usize, usize); 3] {
        let n = self.encoder_channels.len();
        let (h, w) = self.image_size;
        [0, 1, 2].map(|k| (h >> (n - k), w >> (n - k)))
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Ipef { stages: [ResBlock; 3], ups: [Upsampler; 2] },
    Plain { block: ResBlock, ups: [Upsampler; 2] },
}

#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub config: SegmenterConfig,
    pub store: ParamStore<T>,
    encoder: ImageEncoder,
    prompt: PromptEncoder,
    fusion: Fusion,
    head: Conv2d,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::new(&mut store, &config.encoder_channels, config.tap_channels, &mut rng);
        let prompt = PromptEncoder::new(&mut store, config.prompt_frequencies, &mut rng);
        let extra = prompt.dim() + prompt.dense_dim();
        let ipef = &config.ipef;
        let f = ipef.fused_channels;
        let t = config.tap_channels;
        let mode = ipef.upsample_mode;
        let fusion = if ipef.enabled {
            let r = Some(ipef.se_reduction_ratio);
            let skip = |k: usize| if ipef.skip_connections { t[k] } else { 0 };
            let s0 = ResBlock::new(&mut store, "ipef.stage0", t[0] + extra, f[0], r, &mut rng);
            let u0 = Upsampler::new(&mut store, "ipef.up0", mode, f[0], f[1], &mut rng);
            let s1 = ResBlock::new(&mut store, "ipef.stage1", f[1] + skip(1) + extra, f[1], r, &mut rng);
            let u1 = Upsampler::new(&mut store, "ipef.up1", mode, f[1], f[2], &mut rng);
            let s2 = ResBlock::new(&mut store, "ipef.stage2", f[2] + skip(2) + extra, f[2], r, &mut rng);
            Fusion::Ipef { stages: [s0, s1, s2], ups: [u0, u1] }
        } else {
            let block = ResBlock::new(&mut store, "plain.block", t[0] + extra, f[0], None, &mut rng);
            let u0 = Upsampler::new(&mut store, "plain.up0", mode, f[0], f[1], &mut rng);
            let u1 = Upsampler::new(&mut store, "plain.up1", mode, f[1], f[2], &mut rng);
            Fusion::Plain { block, ups: [u0, u1] }
        };
        let head = Conv2d::new(&mut store, ParamGroup::Decoder, "head", f[2], 1, 1, &mut rng);
        Ok(Self { config, store, encoder, prompt, fusion, head })
    }

    /// Encode `(B, 1, H, W)` images at the configured resolution.
    pub fn encode_image(&self, images: &Tensor<T>) -> Result<MultiScaleEmbeddings<T>> {
        encoder::check_image(images, self.config.image_size)?;
        Ok(self.encoder.encode(&self.store, images))
    }

    pub fn encode_prompt(&self, b: &BoundingBoxPrompt, image_size: (usize, usize)) -> Result<PromptEmbedding<T>> {
        self.prompt.encode(&self.store, b, image_size)
    }

    fn check_embeddings(&self, embeds: &MultiScaleEmbeddings<T>, prompts: &[PromptEmbedding<T>]) -> Result<()> {
        let b = embeds.batch();
        for (k, (tap, size)) in embeds.taps.iter().zip(self.config.tap_sizes()).enumerate() {
            let expected = [b, self.config.tap_channels[k], size.0, size.1];
            if tap.shape() != expected {
                return Err(Error::Config(format!(
                    "tap {k} has shape {:?}, the decoder expects {expected:?}",
                    tap.shape()
                )));
            }
        }
        if prompts.len() != b || prompts.iter().any(|p| p.values.len() != self.prompt.dim()) {
            return Err(Error::InvalidInput(format!("expected {b} prompt embeddings of width {}", self.prompt.dim())));
        }
        Ok(())
    }

    /// Prompt vectors tiled over `h x w` plus the dense positional encoding,
    /// as one constant `(B, d, h, w)` block.
    fn prompt_planes(&self, prompts: &[PromptEmbedding<T>], h: usize, w: usize) -> Tensor<T> {
        let dense = self.prompt.dense(&self.store, h, w);
        let hw = h * w;
        let d = self.prompt.dim() + self.prompt.dense_dim();
        let mut data = Vec::with_capacity(prompts.len() * d * hw);
        for p in prompts {
            for &v in &p.values {
                data.extend(std::iter::repeat_n(v, hw));
            }
            data.extend_from_slice(dense.data());
        }
        Tensor::from_vec(&[prompts.len(), d, h, w], data).expect("prompt plane shape")
    }

    /// Record the fusion path on `g`; returns the finest fused map.
    pub fn fuse_graph(
        &self,
        g: &mut Graph<'_, T>,
        embeds: &MultiScaleEmbeddings<T>,
        prompts: &[PromptEmbedding<T>],
    ) -> Result<Var> {
        self.check_embeddings(embeds, prompts)?;
        let sizes = self.config.tap_sizes();
        let with_prompt = |g: &mut Graph<'_, T>, parts: &mut Vec<Var>, k: usize| {
            let planes = g.constant(self.prompt_planes(prompts, sizes[k].0, sizes[k].1));
            parts.push(planes);
            g.concat(parts)
        };
        let tap0 = g.constant(embeds.taps[0].clone());
        let out = match &self.fusion {
            Fusion::Ipef { stages, ups } => {
                let bypass = self.config.ipef.se_bypass;
                let x = with_prompt(g, &mut vec![tap0], 0);
                let mut y = stages[0].forward(g, x, bypass);
                for k in 1..3 {
                    let up = ups[k - 1].forward(g, y);
                    let mut parts = vec![up];
                    if self.config.ipef.skip_connections {
                        parts.push(g.constant(embeds.taps[k].clone()));
                    }
                    let x = with_prompt(g, &mut parts, k);
                    y = stages[k].forward(g, x, bypass);
                }
                y
            }
            Fusion::Plain { block, ups } => {
                let x = with_prompt(g, &mut vec![tap0], 0);
                let y = block.forward(g, x, false);
                let y = ups[0].forward(g, y);
                ups[1].forward(g, y)
            }
        };
        Ok(out)
    }

    /// Decoder head and resize to `target` on `g`.
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, fused: Var, target: (usize, usize)) -> Var {
        let logits = self.head.forward(g, fused);
        g.resize(logits, target.0, target.1)
    }

    /// Logits at the configured resolution, recorded on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        embeds: &MultiScaleEmbeddings<T>,
        prompts: &[PromptEmbedding<T>],
    ) -> Result<Var> {
        let fused = self.fuse_graph(g, embeds, prompts)?;
        Ok(self.decode_graph(g, fused, self.config.image_size))
    }

    /// Fused feature map for a batch of embeddings and prompts.
    pub fn ipef_fuse(&self, embeds: &MultiScaleEmbeddings<T>, prompts: &[PromptEmbedding<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let out = self.fuse_graph(&mut g, embeds, prompts)?;
        Ok(g.value(out).clone())
    }

    /// Logits `(B, 1, H, W)` from a fused map.
    pub fn decode_mask(&self, fused: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
        fused.expect_rank(4)?;
        let c = self.config.ipef.fused_channels[2];
        if fused.shape()[1] != c {
            return Err(Error::ShapeMismatch { expected: vec![fused.shape()[0], c], found: fused.shape().to_vec() });
        }
        let mut g = Graph::new(&self.store);
        let x = g.constant(fused.clone());
        let out = self.decode_graph(&mut g, x, target);
        Ok(g.value(out).clone())
    }

    /// Logits for precomputed embeddings, in chunks.
    pub fn logits(&self, embeds: &MultiScaleEmbeddings<T>, prompts: &[PromptEmbedding<T>]) -> Result<Tensor<T>> {
        self.check_embeddings(embeds, prompts)?;
        let mut parts = Vec::new();
        let b = embeds.batch();
        for start in (0..b).step_by(8) {
            let items: Vec<MultiScaleEmbeddings<T>> = (start..(start + 8).min(b)).map(|i| embeds.item(i)).collect();
            let chunk = MultiScaleEmbeddings::concat(&items.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new(&self.store);
            let out = self.forward_graph(&mut g, &chunk, &prompts[start..start + items.len()])?;
            parts.push(g.value(out).clone());
        }
        Tensor::concat_batch(&parts)
    }

    /// Masks for `(H, W)` images, one box each.
    pub fn segment_batch(
        &self,
        images: &[&Tensor<T>],
        boxes: &[BoundingBoxPrompt],
        threshold: f64,
    ) -> Result<Vec<SegmentationMask>> {
        if images.len() != boxes.len() {
            return Err(Error::InvalidInput(format!("{} images but {} boxes", images.len(), boxes.len())));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (h, w) = self.config.image_size;
        let stacked = Tensor::stack(images)?.reshape(&[images.len(), 1, h, w])?;
        let embeds = self.encode_image(&stacked)?;
        let prompts = boxes.iter().map(|b| self.encode_prompt(b, (h, w))).collect::<Result<Vec<_>>>()?;
        let logits = self.logits(&embeds, &prompts)?;
        Ok((0..images.len()).map(|i| mask_from_logits(logits.item(i), h, w, threshold)).collect())
    }

    pub fn segment(&self, image: &Tensor<T>, b: &BoundingBoxPrompt, threshold: f64) -> Result<SegmentationMask> {
        Ok(self.segment_batch(&[image], std::slice::from_ref(b), threshold)?.remove(0))
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
        let config: SegmenterConfig = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(config, ck.seed)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}
