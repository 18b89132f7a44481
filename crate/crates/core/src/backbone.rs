//! Trainable networks outside the matching module: the depth U-Net, the
//! three-stage feature encoder, the SR decoder and the relativistic critic.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, ConvT2d, ParamStore, Profile, ResBlock};
use crate::resample::{Kernel, ResizePlan};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub res_blocks_per_stage: usize,
}

impl EncoderConfig {
    pub const STAGES: usize = 3;

    pub fn teacher() -> Self {
        Self {
            base_channels: 64,
            res_blocks_per_stage: 4,
        }
    }

    pub fn student() -> Self {
        Self {
            res_blocks_per_stage: 2,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("encoder base_channels must be positive".into()));
        }
        if !(1..=8).contains(&self.res_blocks_per_stage) {
            return Err(Error::Config(format!(
                "res_blocks_per_stage {} outside 1..=8",
                self.res_blocks_per_stage
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthNetConfig {
    pub unet_depth: usize,
    pub base_channels: usize,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self {
            unet_depth: 4,
            base_channels: 32,
        }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unet_depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth net needs unet_depth >= 1 and base_channels >= 1".into()));
        }
        Ok(())
    }
}

/// Three levels of one image's features, named by their scale relative to
/// the coarsest: `f1` is the input grid / 4, `f4` the input grid.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub f1: Var,
    pub f2: Var,
    pub f4: Var,
}

impl Pyramid {
    /// Finest first, i.e. stage output order.
    pub fn stages(&self) -> [Var; 3] {
        [self.f4, self.f2, self.f1]
    }

    pub fn level(&self, s: usize) -> Var {
        match s {
            1 => self.f1,
            2 => self.f2,
            4 => self.f4,
            _ => panic!("no pyramid level {s}"),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    head: Conv2d,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, (cin, c): (usize, usize), stride: usize, n: usize, rng: &mut impl Rng) -> Self {
        Self {
            head: Conv2d::new(store, &format!("{name}.head"), (cin, c), 3, stride, rng),
            blocks: (0..n).map(|i| ResBlock::new(store, &format!("{name}.res{i}"), c, rng)).collect(),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.head.forward(g, p, x)?;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        Ok(h)
    }

    fn profile(&self, prof: &mut Profile, hw: (usize, usize)) -> (usize, usize) {
        let mut hw = self.head.profile(prof, hw);
        for b in &self.blocks {
            hw = b.profile(prof, hw);
        }
        hw
    }
}

/// Conv + residual blocks per stage; stages 2 and 3 halve the grid.
/// The depth encoder is the same network with a 1-channel input.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub channels: usize,
    stages: [Stage; 3],
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_channels: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (c, n) = (cfg.base_channels, cfg.res_blocks_per_stage);
        Self {
            in_channels,
            channels: c,
            stages: [
                Stage::new(store, &format!("{name}.stage1"), (in_channels, c), 1, n, rng),
                Stage::new(store, &format!("{name}.stage2"), (c, c), 2, n, rng),
                Stage::new(store, &format!("{name}.stage3"), (c, c), 2, n, rng),
            ],
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Pyramid> {
        let (c, h, w) = g.value(x).chw()?;
        if c != self.in_channels {
            return Err(shape_err!("encoder expects {} channels, got {c}", self.in_channels));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!("encoder input {h}x{w} is not divisible by 4"));
        }
        let f4 = self.stages[0].forward(g, p, x)?;
        let f2 = self.stages[1].forward(g, p, f4)?;
        let f1 = self.stages[2].forward(g, p, f2)?;
        Ok(Pyramid { f1, f2, f4 })
    }

    pub fn profile(&self, prof: &mut Profile, hw: (usize, usize)) {
        let mut hw = hw;
        for s in &self.stages {
            hw = s.profile(prof, hw);
        }
    }
}

/// Encoder/decoder with skip connections and a softplus head, so depth is
/// strictly positive.
#[derive(Clone, Debug)]
pub struct DepthNet {
    stem: Conv2d,
    down: Vec<(Conv2d, Conv2d)>,
    up: Vec<(ConvT2d, Conv2d)>,
    head: Conv2d,
    depth: usize,
}

/// Keeps predictions away from zero even where softplus underflows.
pub const MIN_DEPTH: f64 = 1e-3;

impl DepthNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &DepthNetConfig, rng: &mut impl Rng) -> Self {
        let b = cfg.base_channels;
        let width = |l: usize| b << l;
        let stem = Conv2d::new(store, &format!("{name}.stem"), (3, b), 3, 1, rng);
        let down = (1..=cfg.unet_depth)
            .map(|l| {
                (
                    Conv2d::new(store, &format!("{name}.down{l}.a"), (width(l - 1), width(l)), 3, 2, rng),
                    Conv2d::new(store, &format!("{name}.down{l}.b"), (width(l), width(l)), 3, 1, rng),
                )
            })
            .collect();
        let up = (1..=cfg.unet_depth)
            .rev()
            .map(|l| {
                (
                    ConvT2d::new(store, &format!("{name}.up{l}.deconv"), (width(l), width(l - 1)), 2, rng),
                    Conv2d::new(store, &format!("{name}.up{l}.conv"), (2 * width(l - 1), width(l - 1)), 3, 1, rng),
                )
            })
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), (b, 1), 3, 1, rng);
        Self {
            stem,
            down,
            up,
            head,
            depth: cfg.unet_depth,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let (c, h, w) = g.value(img).chw()?;
        let m = 1 << self.depth;
        if c != 3 || h % m != 0 || w % m != 0 {
            return Err(shape_err!("depth net needs a 3-channel input divisible by {m}, got {c}x{h}x{w}"));
        }
        let x = self.stem.forward(g, p, img)?;
        let mut x = g.relu(x);
        let mut skips = Vec::with_capacity(self.depth);
        for (a, b) in &self.down {
            skips.push(x);
            let h = a.forward(g, p, x)?;
            let h = g.relu(h);
            let h = b.forward(g, p, h)?;
            x = g.relu(h);
        }
        for (deconv, conv) in &self.up {
            let h = deconv.forward(g, p, x)?;
            let h = g.relu(h);
            let skip = skips.pop().expect("one skip per level");
            let h = g.concat(&[h, skip])?;
            let h = conv.forward(g, p, h)?;
            x = g.relu(h);
        }
        let d = self.head.forward(g, p, x)?;
        let d = g.unary(d, Unary::Softplus);
        Ok(g.add_scalar(d, T::of(MIN_DEPTH)))
    }

    pub fn profile(&self, prof: &mut Profile, hw: (usize, usize)) {
        let mut hw = self.stem.profile(prof, hw);
        for (a, b) in &self.down {
            hw = a.profile(prof, hw);
            hw = b.profile(prof, hw);
        }
        for (deconv, conv) in &self.up {
            hw = deconv.profile(prof, hw);
            hw = conv.profile(prof, hw);
        }
        self.head.profile(prof, hw);
    }
}

/// Runs the shared depth network on the LR image and the downsampled
/// reference.
pub fn depth_extract<T: Scalar>(net: &DepthNet, g: &mut Graph<T>, p: &Bound, lr: Var, ref_down: Var) -> Result<(Var, Var)> {
    if g.shape(lr) != g.shape(ref_down) {
        return Err(shape_err!(
            "depth inputs differ: {:?} vs {:?}",
            g.shape(lr),
            g.shape(ref_down)
        ));
    }
    Ok((net.forward(g, p, lr)?, net.forward(g, p, ref_down)?))
}

#[derive(Clone, Debug)]
struct DecoderStage {
    merge: Conv2d,
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

/// Three stages from the LR grid to 4×: each concatenates the matched
/// reference level, refines with residual blocks, then upsamples by
/// sub-pixel shuffle (the last stage maps to RGB instead). A bicubic ×4 of
/// the LR input is added at the end.
#[derive(Clone, Debug)]
pub struct Decoder {
    channels: usize,
    stages: [DecoderStage; 3],
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (c, n) = (cfg.base_channels, cfg.res_blocks_per_stage);
        let stage = |store: &mut ParamStore<T>, rng: &mut _, i: usize, out: usize, gain: f64| DecoderStage {
            merge: Conv2d::new(store, &format!("{name}.stage{i}.merge"), (2 * c, c), 3, 1, rng),
            blocks: (0..n).map(|j| ResBlock::new(store, &format!("{name}.stage{i}.res{j}"), c, rng)).collect(),
            out: Conv2d::with_gain(store, &format!("{name}.stage{i}.out"), (c, out), 3, 1, gain, rng),
        };
        // The RGB head starts small so the output starts near the bicubic skip.
        Self {
            channels: c,
            stages: [
                stage(store, rng, 1, 4 * c, 1.0),
                stage(store, rng, 2, 4 * c, 1.0),
                stage(store, rng, 3, 3, 0.01),
            ],
        }
    }

    /// `matched` holds the aligned reference features at 1×, 2× and 4× of
    /// `fused_lr`'s grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, fused_lr: Var, matched: [Var; 3], lr_img: Var) -> Result<Var> {
        let (c, h, w) = g.value(fused_lr).chw()?;
        if c != self.channels {
            return Err(shape_err!("decoder expects {} channels, got {c}", self.channels));
        }
        for (i, &m) in matched.iter().enumerate() {
            let s = 1 << i;
            if g.shape(m) != [c, s * h, s * w] {
                return Err(shape_err!("matched level x{s} is {:?}, expected {:?}", g.shape(m), [c, s * h, s * w]));
            }
        }
        let (ic, ih, iw) = g.value(lr_img).chw()?;
        if (ic, ih, iw) != (3, h, w) {
            return Err(shape_err!("LR image {ic}x{ih}x{iw} does not sit on the {h}x{w} grid"));
        }
        let mut x = fused_lr;
        for (i, st) in self.stages.iter().enumerate() {
            let h = g.concat(&[x, matched[i]])?;
            let mut h = st.merge.forward(g, p, h)?;
            for b in &st.blocks {
                h = b.forward(g, p, h)?;
            }
            let h = st.out.forward(g, p, h)?;
            x = if i < 2 { g.pixel_shuffle(h, 2)? } else { h };
        }
        let plan = Rc::new(ResizePlan::new((h, w), (4 * h, 4 * w), Kernel::Bicubic, false));
        let up = g.resize(lr_img, plan)?;
        g.add(x, up)
    }

    pub fn profile(&self, prof: &mut Profile, (h, w): (usize, usize)) {
        let mut hw = (h, w);
        for (i, st) in self.stages.iter().enumerate() {
            hw = st.merge.profile(prof, hw);
            for b in &st.blocks {
                hw = b.profile(prof, hw);
            }
            hw = st.out.profile(prof, hw);
            if i < 2 {
                hw = (hw.0 * 2, hw.1 * 2);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub base_channels: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { base_channels: 32 }
    }
}

/// Five-layer strided conv critic with a scalar head; the relativistic
/// score is `sigmoid(C(a) - C(b))`.
#[derive(Clone, Debug)]
pub struct Critic {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Critic {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &CriticConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.base_channels;
        let plan = [(3, d, 1), (d, d, 2), (d, 2 * d, 2), (2 * d, 2 * d, 2), (2 * d, 4 * d, 2)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| Conv2d::new(store, &format!("{name}.conv{i}"), (cin, cout), 3, s, rng))
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), (4 * d, 1), 1, 1, rng);
        Self { convs, head }
    }

    /// Zeroes the head so every score is exactly 0.5.
    pub fn zero_head<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [Some(self.head.w), self.head.b].into_iter().flatten() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Scalar critic value `C(x)`.
    pub fn score<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h)?;
            h = g.unary(h, Unary::LeakyRelu(0.2));
        }
        let h = g.global_avg_pool(h)?;
        let h = self.head.forward(g, p, h)?;
        Ok(g.sum(h))
    }

    /// Logit of `D(a, b)`, i.e. `C(a) - C(b)`.
    pub fn relativistic_logit<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(shape_err!("critic inputs differ: {:?} vs {:?}", g.shape(a), g.shape(b)));
        }
        let ca = self.score(g, p, a)?;
        let cb = self.score(g, p, b)?;
        g.sub(ca, cb)
    }

    pub fn profile(&self, prof: &mut Profile, hw: (usize, usize)) {
        let mut hw = hw;
        for c in &self.convs {
            hw = c.profile(prof, hw);
        }
        self.head.profile(prof, (1, 1));
    }
}

/// `D(a, b) = sigmoid(C(a) - C(b))` as a plain number.
pub fn discriminate<T: Scalar>(critic: &Critic, store: &ParamStore<T>, a: &crate::Tensor<T>, b: &crate::Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let logit = critic.relativistic_logit(&mut g, &p, a, b)?;
    Ok(crate::autograd::sigmoid(g.scalar_value(logit)))
}
