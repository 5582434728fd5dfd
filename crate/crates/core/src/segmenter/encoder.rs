use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{kernels, Conv2d, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Three encoder taps ordered coarse to fine, each `(B, C_k, H_k, W_k)`,
/// with strictly decreasing widths and doubling spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleEmbeddings<T: Scalar> {
    pub taps: [Tensor<T>; 3],
}

impl<T: Scalar> MultiScaleEmbeddings<T> {
    pub fn batch(&self) -> usize {
        self.taps[0].shape()[0]
    }

    /// Single-item view `i` of a batched embedding.
    pub fn item(&self, i: usize) -> Self {
        Self {
            taps: self.taps.clone().map(|t| {
                let (_, c, h, w) = t.dims4();
                Tensor::from_vec(&[1, c, h, w], t.item(i).to_vec()).expect("item shape")
            }),
        }
    }

    pub fn concat(items: &[&Self]) -> Result<Self> {
        let tap = |k: usize| Tensor::concat_batch(&items.iter().map(|e| e.taps[k].clone()).collect::<Vec<_>>());
        Ok(Self { taps: [tap(0)?, tap(1)?, tap(2)?] })
    }
}

/// Convolutional stand-in for a pre-trained backbone: `conv3 -> ReLU ->
/// max-pool` stages followed by 1x1 projection heads on the last three
/// stages. Randomly initialised from a seed and never trained.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: Vec<Conv2d>,
    taps: [Conv2d; 3],
}

impl ImageEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: &[usize],
        tap_channels: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let group = ParamGroup::ImageEncoder;
        let mut cin = 1;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, group, &format!("encoder.stage{i}"), cin, c, 3, rng);
                cin = c;
                conv
            })
            .collect();
        let n = channels.len();
        let taps = [0, 1, 2].map(|k| {
            let src = channels[n - 1 - k];
            Conv2d::new(store, group, &format!("encoder.tap{k}"), src, tap_channels[k], 1, rng)
        });
        Self { stages, taps }
    }

    /// Encode `(B, 1, H, W)` images.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> MultiScaleEmbeddings<T> {
        let n = self.stages.len();
        let mut outs = Vec::with_capacity(n);
        let mut h = images.clone();
        for conv in &self.stages {
            let y = kernels::conv2d(&h, store.get(conv.weight), Some(store.get(conv.bias)));
            let y = y.map(|v| v.max(T::zero()));
            h = kernels::max_pool2(&y).0;
            outs.push(h.clone());
        }
        let project = |k: usize| {
            let conv = &self.taps[k];
            kernels::conv2d(&outs[n - 1 - k], store.get(conv.weight), Some(store.get(conv.bias)))
        };
        MultiScaleEmbeddings { taps: [project(0), project(1), project(2)] }
    }
}

pub(crate) fn check_image<T: Scalar>(images: &Tensor<T>, size: (usize, usize)) -> Result<()> {
    images.expect_rank(4)?;
    let (b, c, h, w) = images.dims4();
    if b == 0 || c != 1 || (h, w) != size {
        return Err(Error::InvalidInput(format!(
            "expected images of shape (B, 1, {}, {}), got {:?}",
            size.0,
            size.1,
            images.shape()
        )));
    }
    if !images.all_finite() {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    Ok(())
}
