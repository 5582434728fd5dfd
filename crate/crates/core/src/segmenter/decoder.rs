use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ConvTranspose2x2, Graph, GroupNorm, ParamGroup, ParamStore, Var};
use crate::scalar::Scalar;

const GROUP: ParamGroup = ParamGroup::Decoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Bilinear x2 then a 3x3 convolution.
    Bilinear,
    /// 2x2 stride-2 transposed convolution.
    Transposed,
}

/// Squeeze-and-excitation gate: global pool, 1x1 bottleneck, ReLU, 1x1,
/// sigmoid.
#[derive(Clone, Debug)]
struct Excitation {
    reduce: Conv2d,
    expand: Conv2d,
}

/// `conv3 -> GN -> ReLU -> conv3 -> GN`, optionally channel-gated, plus a
/// shortcut (1x1 convolution when the width changes), then ReLU.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    excitation: Option<Excitation>,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    /// `reduction` of `None` builds a plain residual block.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        reduction: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let excitation = reduction.map(|r| {
            let hidden = (cout / r).max(1);
            Excitation {
                reduce: Conv2d::new(store, GROUP, &format!("{name}.se_reduce"), cout, hidden, 1, rng),
                expand: Conv2d::new(store, GROUP, &format!("{name}.se_expand"), hidden, cout, 1, rng),
            }
        });
        Self {
            conv1: Conv2d::new(store, GROUP, &format!("{name}.conv1"), cin, cout, 3, rng),
            norm1: GroupNorm::new(store, GROUP, &format!("{name}.norm1"), cout),
            conv2: Conv2d::new(store, GROUP, &format!("{name}.conv2"), cout, cout, 3, rng),
            norm2: GroupNorm::new(store, GROUP, &format!("{name}.norm2"), cout),
            excitation,
            shortcut: (cin != cout).then(|| Conv2d::new(store, GROUP, &format!("{name}.shortcut"), cin, cout, 1, rng)),
        }
    }

    /// With `bypass_gate` the excitation is skipped, i.e. the gate is all ones.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, bypass_gate: bool) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.norm1.forward(g, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let mut h = self.norm2.forward(g, h);
        if let (Some(se), false) = (&self.excitation, bypass_gate) {
            let s = g.global_avg_pool(h);
            let s = se.reduce.forward(g, s);
            let s = g.relu(s);
            let s = se.expand.forward(g, s);
            let s = g.sigmoid(s);
            h = g.channel_scale(h, s);
        }
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        let out = g.add(h, skip);
        g.relu(out)
    }
}

#[derive(Clone, Debug)]
pub enum Upsampler {
    Bilinear(Conv2d),
    Transposed(ConvTranspose2x2),
}

impl Upsampler {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        mode: UpsampleMode,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match mode {
            UpsampleMode::Bilinear => Upsampler::Bilinear(Conv2d::new(store, GROUP, name, cin, cout, 3, rng)),
            UpsampleMode::Transposed => Upsampler::Transposed(ConvTranspose2x2::new(store, GROUP, name, cin, cout, rng)),
        }
    }

    /// Double the spatial size, then ReLU.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = match self {
            Upsampler::Bilinear(conv) => {
                let up = g.upsample2(x);
                conv.forward(g, up)
            }
            Upsampler::Transposed(convt) => convt.forward(g, x),
        };
        g.relu(y)
    }
}
