//! The full super-resolution network: depth U-Net, shared encoder, depth
//! matching module and decoder, plus the separately-stored critic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{depth_extract, Critic, CriticConfig, Decoder, DepthNet, DepthNetConfig, Encoder, EncoderConfig, Pyramid};
use crate::dmm::{BlockRecord, Dmm, DmmInputs, DmmOutput, MatchConfig};
use crate::error::{shape_err, Result};
use crate::nn::{Bound, ParamStore, Profile};
use crate::scalar::Scalar;
use crate::synthgen::{SampleRecord, SCALE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub depth_net: DepthNetConfig,
    pub matching: MatchConfig,
    pub critic: CriticConfig,
}

impl ModelConfig {
    pub fn teacher() -> Self {
        Self {
            encoder: EncoderConfig::teacher(),
            depth_net: DepthNetConfig::default(),
            matching: MatchConfig::default(),
            critic: CriticConfig::default(),
        }
    }

    pub fn student() -> Self {
        Self {
            encoder: EncoderConfig::student(),
            ..Self::teacher()
        }
    }

    /// Small variant for 64x64 HR data on a CPU budget.
    pub fn toy_teacher() -> Self {
        Self {
            encoder: EncoderConfig {
                base_channels: 16,
                res_blocks_per_stage: 4,
            },
            depth_net: DepthNetConfig {
                unet_depth: 2,
                base_channels: 8,
            },
            matching: MatchConfig::default(),
            critic: CriticConfig { base_channels: 16 },
        }
    }

    pub fn toy_student() -> Self {
        let mut cfg = Self::toy_teacher();
        cfg.encoder.res_blocks_per_stage = 2;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.depth_net.validate()?;
        self.matching.validate()
    }

    /// Checks that an LR grid fits every network.
    pub fn check_lr_grid(&self, (h, w): (usize, usize)) -> Result<()> {
        self.matching.check_grid(h, w)?;
        let m = 1 << self.depth_net.unet_depth;
        if h % 4 != 0 || w % 4 != 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err!("LR grid {h}x{w} must be divisible by 4 and by {m}"));
        }
        Ok(())
    }
}

/// Where the matching module gets its depth maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSource {
    /// The depth network's prediction, detached: the depth network learns
    /// only from the depth loss.
    Predicted,
    GroundTruth,
}

/// One sample placed on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub lr: Var,
    pub ref_down: Var,
    pub reference: Var,
    pub hr: Var,
    pub depth_lr: Var,
    pub depth_ref_down: Var,
}

impl SampleVars {
    pub fn new<T: Scalar>(g: &mut Graph<T>, s: &SampleRecord) -> Self {
        let mut c = |t: &Tensor<f32>| g.constant(t.cast());
        Self {
            lr: c(&s.lr),
            ref_down: c(&s.ref_down),
            reference: c(&s.reference),
            hr: c(&s.hr),
            depth_lr: c(&s.depth_lr),
            depth_ref_down: c(&s.depth_ref_down),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub sr: Var,
    /// Depth network outputs, when it ran.
    pub depth: Option<(Var, Var)>,
    pub enc_lr: Pyramid,
    pub dmm: DmmOutput,
}

#[derive(Clone, Debug)]
pub struct Dsrnet {
    pub cfg: ModelConfig,
    pub depth_net: DepthNet,
    pub encoder: Encoder,
    pub dmm: Dmm,
    pub decoder: Decoder,
}

impl Dsrnet {
    /// Builds the network, registering its parameters in `store`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            depth_net: DepthNet::new(store, "depth_net", &cfg.depth_net, &mut rng),
            encoder: Encoder::new(store, "encoder", 3, &cfg.encoder, &mut rng),
            dmm: Dmm::new(store, "dmm", &cfg.encoder, &cfg.matching, &mut rng),
            decoder: Decoder::new(store, "decoder", &cfg.encoder, &mut rng),
            cfg: cfg.clone(),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: &SampleVars,
        depth: DepthSource,
        frozen: Option<&[BlockRecord]>,
    ) -> Result<ForwardOut> {
        let (_, h, w) = g.value(x.lr).chw()?;
        self.cfg.check_lr_grid((h, w))?;
        if g.value(x.reference).chw()? != (3, SCALE * h, SCALE * w) {
            return Err(shape_err!(
                "reference {:?} is not {SCALE}x the LR grid {h}x{w}",
                g.shape(x.reference)
            ));
        }
        let (pred, d_lr, d_rd) = match depth {
            DepthSource::Predicted => {
                let (a, b) = depth_extract(&self.depth_net, g, p, x.lr, x.ref_down)?;
                let (da, db) = (g.detach(a), g.detach(b));
                (Some((a, b)), da, db)
            }
            DepthSource::GroundTruth => (None, x.depth_lr, x.depth_ref_down),
        };
        let enc_lr = self.encoder.forward(g, p, x.lr)?;
        let enc_rd = self.encoder.forward(g, p, x.ref_down)?;
        let enc_ref = self.encoder.forward(g, p, x.reference)?;
        let inputs = DmmInputs {
            lr: enc_lr,
            ref_down: enc_rd,
            reference: enc_ref,
            depth_lr: d_lr,
            depth_ref_down: d_rd,
        };
        let dmm = self.dmm.forward(g, p, &inputs, frozen)?;
        let sr = self.decoder.forward(g, p, dmm.fused_lr, dmm.matched, x.lr)?;
        Ok(ForwardOut {
            sr,
            depth: pred,
            enc_lr,
            dmm,
        })
    }

    /// Inference-time layer walk for an LR grid of `hw`: the depth network
    /// on both LR views, the encoder on all three images, matching and
    /// decoding.
    pub fn profile(&self, hw: (usize, usize)) -> Profile {
        let mut prof = Profile::default();
        for _ in 0..2 {
            self.depth_net.profile(&mut prof, hw);
        }
        for s in [1, 1, SCALE] {
            self.encoder.profile(&mut prof, (hw.0 * s, hw.1 * s));
        }
        self.dmm.profile(&mut prof, hw);
        self.decoder.profile(&mut prof, hw);
        prof
    }

    /// Parameter names belonging to the depth network.
    pub fn is_depth_param(name: &str) -> bool {
        name.starts_with("depth_net.")
    }
}

/// Critic with its own parameter store.
pub fn build_critic<T: Scalar>(store: &mut ParamStore<T>, cfg: &CriticConfig, seed: u64) -> Critic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc817);
    Critic::new(store, "critic", cfg, &mut rng)
}

/// Runs the network on one sample without recording gradients and returns
/// the SR image clipped to `[0, 1]`.
pub fn infer<T: Scalar>(net: &Dsrnet, store: &ParamStore<T>, s: &SampleRecord, depth: DepthSource) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = SampleVars::new(&mut g, s);
    let out = net.forward(&mut g, &p, &x, depth, None)?;
    Ok(g.value(out.sr).clamp(T::zero(), T::one()))
}
