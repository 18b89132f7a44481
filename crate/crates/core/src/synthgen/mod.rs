//! Synthetic pipe-inspection data: paired LR / reference frames with exact
//! depth, and a checksummed on-disk dataset format.

mod dataset;
mod scene;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{dataset_read, dataset_write, read_manifest, sha256_hex, write_png, Manifest, ManifestEntry};
pub use scene::{quantize, ray_cylinder, render_frame, CameraPose, Decal, DecalKind, SceneParams};

use crate::error::{Error, Result};
use crate::resample::bicubic_resample;
use crate::tensor::Tensor;

/// HR frames are exactly this many times the LR frames along each axis.
pub const SCALE: usize = 4;

/// One training example. Images are `[3, h, w]` in `[0, 1]`, depths
/// `[1, h, w]` in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub hr: Tensor<f32>,
    pub reference: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub ref_down: Tensor<f32>,
    pub depth_lr: Tensor<f32>,
    pub depth_ref_down: Tensor<f32>,
    pub params: SceneParams,
}

impl SampleRecord {
    pub fn hr_hw(&self) -> (usize, usize) {
        (self.hr.shape()[1], self.hr.shape()[2])
    }

    pub fn lr_hw(&self) -> (usize, usize) {
        (self.lr.shape()[1], self.lr.shape()[2])
    }
}

/// Bicubic ×1/4 of an 8-bit image, requantized to 8 bits.
pub fn downsample(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let out = bicubic_resample(&img.cast::<f64>(), Ratio::new(1, SCALE as u32), true)?;
    Ok(Tensor::new(out.shape(), out.data().iter().map(|&v| quantize(v)).collect())?)
}

/// Renders the HR frame at the scene pose and the reference one
/// `camera_step` meters further down the pipe, then derives the LR views and
/// LR-resolution depth for both.
pub fn synthesize_sample(
    sample_id: &str,
    params: &SceneParams,
    camera_step: f64,
    (hr_h, hr_w): (usize, usize),
) -> Result<SampleRecord> {
    if hr_h % SCALE != 0 || hr_w % SCALE != 0 {
        return Err(Error::InvalidScale(format!("HR {hr_h}x{hr_w} is not divisible by {SCALE}")));
    }
    let (lr_h, lr_w) = (hr_h / SCALE, hr_w / SCALE);
    let ref_params = SceneParams {
        camera: params.camera.advanced(camera_step),
        ..params.clone()
    };
    let (hr, _) = render_frame(params, hr_w, hr_h)?;
    let reference = if camera_step == 0.0 {
        hr.clone()
    } else {
        render_frame(&ref_params, hr_w, hr_h)?.0
    };
    let (_, depth_lr) = render_frame(params, lr_w, lr_h)?;
    let (_, depth_ref_down) = render_frame(&ref_params, lr_w, lr_h)?;
    Ok(SampleRecord {
        sample_id: sample_id.to_string(),
        lr: downsample(&hr)?,
        ref_down: downsample(&reference)?,
        hr,
        reference,
        depth_lr,
        depth_ref_down,
        params: params.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub hr_h: usize,
    pub hr_w: usize,
    pub camera_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            seed: 0,
            hr_h: 448,
            hr_w: 320,
            camera_step: 0.15,
        }
    }
}

/// Scene `index` of the stream seeded by `seed`.
impl SynthConfig {
    /// 200 samples at 64x64 HR (16x16 LR).
    pub fn toy() -> Self {
        Self {
            hr_h: 64,
            hr_w: 64,
            ..Self::default()
        }
    }
}

pub fn random_scene(seed: u64, index: u64) -> SceneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(scene::mix_seed(seed, index));
    let pipe_radius = rng.gen_range(0.2..0.6);
    let r = pipe_radius * rng.gen_range(0.0..0.35);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let camera = CameraPose {
        position: [r * phi.cos(), r * phi.sin(), rng.gen_range(0.0..20.0)],
        yaw: rng.gen_range(-0.15..0.15),
        pitch: rng.gen_range(-0.15..0.15),
    };
    let kinds = [DecalKind::Crack, DecalKind::Stain, DecalKind::Deposit, DecalKind::Root];
    let ahead = camera.position[2];
    let decals = (0..rng.gen_range(0..5))
        .map(|_| Decal {
            kind: kinds[rng.gen_range(0..kinds.len())],
            axial: ahead + rng.gen_range(0.2..3.0),
            angle: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            extent: rng.gen_range(0.2..1.0),
            length: rng.gen_range(0.1..0.6),
        })
        .collect();
    SceneParams {
        pipe_radius,
        camera,
        hfov: rng.gen_range(1.2..1.6),
        texture_seed: rng.gen(),
        decals,
        far_clip: rng.gen_range(4.0..8.0),
        joint_spacing: rng.gen_range(0.8..1.5),
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Sample `index` of the dataset described by `cfg`; independent of every
/// other index, so generation order does not matter.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<SampleRecord> {
    let params = random_scene(cfg.seed, index as u64);
    synthesize_sample(&sample_id(index), &params, cfg.camera_step, (cfg.hr_h, cfg.hr_w))
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    (0..cfg.n).map(|i| generate_sample(cfg, i)).collect()
}
