use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::prompt::BoundingBoxPrompt;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a prompt vector meets spatial feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Repeat the vector at every spatial position.
    Tile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding<T> {
    pub values: Vec<T>,
    pub broadcast: Broadcast,
}

/// Random Fourier positional encoding of box corners, plus a per-corner type
/// embedding. Corners use pixel-edge coordinates mapped to `[-1, 1]`, so the
/// full-image box always encodes the corners `(-1, -1)` and `(1, 1)`.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub frequencies: ParamId,
    pub corner_embed: ParamId,
    pub num_frequencies: usize,
}

impl PromptEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, num_frequencies: usize, rng: &mut ChaCha8Rng) -> Self {
        let group = ParamGroup::PromptEncoder;
        let mut normal = |scale: f64| T::of(scale * rng.sample::<f64, _>(StandardNormal));
        let freq = Tensor::from_fn(&[2, num_frequencies], |_| normal(1.0));
        let dim = point_dim(num_frequencies);
        let corner = Tensor::from_fn(&[2, dim], |_| normal(0.1));
        Self {
            frequencies: store.add("prompt.frequencies", group, freq),
            corner_embed: store.add("prompt.corner_embed", group, corner),
            num_frequencies,
        }
    }

    pub fn dim(&self) -> usize {
        2 * point_dim(self.num_frequencies)
    }

    pub fn dense_dim(&self) -> usize {
        point_dim(self.num_frequencies)
    }

    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        b: &BoundingBoxPrompt,
        image_size: (usize, usize),
    ) -> Result<PromptEmbedding<T>> {
        b.validate(image_size.0, image_size.1)?;
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        let corners = [
            (b.col_min as f64 / w, b.row_min as f64 / h),
            ((b.col_max + 1) as f64 / w, (b.row_max + 1) as f64 / h),
        ];
        let embed = store.get(self.corner_embed);
        let dim = self.dense_dim();
        let mut values = Vec::with_capacity(2 * dim);
        for (j, &(x, y)) in corners.iter().enumerate() {
            let feat = point_features(store.get(self.frequencies), 2.0 * x - 1.0, 2.0 * y - 1.0);
            values.extend(feat.into_iter().zip(&embed.data()[j * dim..(j + 1) * dim]).map(|(f, &e)| T::of(f) + e));
        }
        Ok(PromptEmbedding { values, broadcast: Broadcast::Tile })
    }

    /// Positional encoding of every pixel centre of an `h x w` grid,
    /// `(dense_dim, h, w)`.
    pub fn dense<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> Tensor<T> {
        let dim = self.dense_dim();
        let mut out = Tensor::zeros(&[dim, h, w]);
        for r in 0..h {
            for c in 0..w {
                let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
                let y = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
                for (k, v) in point_features(store.get(self.frequencies), x, y).into_iter().enumerate() {
                    out.data_mut()[(k * h + r) * w + c] = T::of(v);
                }
            }
        }
        out
    }
}

fn point_dim(num_frequencies: usize) -> usize {
    2 + 2 * num_frequencies
}

/// `[x, y, sin(2 pi B^T p), cos(2 pi B^T p)]` for `p = (x, y)` in `[-1, 1]^2`.
fn point_features<T: Scalar>(freq: &Tensor<T>, x: f64, y: f64) -> Vec<f64> {
    let f = freq.shape()[1];
    let phase: Vec<f64> =
        (0..f).map(|k| 2.0 * PI * (x * freq.data()[k].f64() + y * freq.data()[f + k].f64())).collect();
    let mut out = vec![x, y];
    out.extend(phase.iter().map(|p| p.sin()));
    out.extend(phase.iter().map(|p| p.cos()));
    out
}
