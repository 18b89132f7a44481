//! Teacher objective: depth, pixel, perceptual and relativistic adversarial
//! terms. Every L1/L2 term is mean-reduced over elements.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::backbone::Critic;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::scalar::Scalar;

/// Log arguments are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]`.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub dep: f64,
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
    pub g: f64,
    pub d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dep: 1.0,
            rec: 1.0,
            per: 1e-2,
            adv: 5e-3,
            g: 1.0,
            d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dep, self.rec, self.per, self.adv, self.g, self.d];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `mean|a - b|`.
pub fn mean_abs<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "L1 operands differ")?;
    let d = g.sub(a, b)?;
    let d = g.unary(d, Unary::Abs);
    Ok(g.mean(d))
}

/// `sqrt(mean (a - b)^2)`.
pub fn rms_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "L2 operands differ")?;
    let d = g.sub(a, b)?;
    Ok(g.rms(d))
}

pub fn depth_loss<T: Scalar>(g: &mut Graph<T>, d_lr: Var, d_ref_down: Var, gt_lr: Var, gt_ref_down: Var) -> Result<Var> {
    let a = mean_abs(g, d_lr, gt_lr)?;
    let b = mean_abs(g, d_ref_down, gt_ref_down)?;
    g.add(a, b)
}

pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, sr: Var, hr: Var) -> Result<Var> {
    mean_abs(g, sr, hr)
}

/// Frozen feature map used by the perceptual term.
pub trait FeatureExtractor<T: Scalar> {
    fn name(&self) -> &str;
    fn extract(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Passes pixels through unchanged, so the perceptual term becomes the RMS
/// pixel distance.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn extract(&self, _g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Small frozen conv stack tapped after its last ReLU. Weights come from
/// `$DSRLAB_CACHE/perceptual.bin` (little-endian f32 in registration order)
/// when present, otherwise from a fixed seed.
#[derive(Clone, Debug)]
pub struct ConvExtractor<T> {
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
    source: String,
}

/// File looked up under `DSRLAB_CACHE`.
pub const EXTRACTOR_FILE: &str = "perceptual.bin";

impl<T: Scalar> ConvExtractor<T> {
    const SEED: u64 = 0x7065_7263;

    pub fn seeded() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let mut store = ParamStore::new();
        let plan = [(3, 16, 1), (16, 16, 2), (16, 32, 1)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| Conv2d::new(&mut store, &format!("fx.conv{i}"), (cin, cout), 3, s, &mut rng))
            .collect();
        Self {
            store,
            convs,
            source: "seeded".into(),
        }
    }

    /// Loads cached weights from `dir` if the file exists, else falls back
    /// to [`seeded`](Self::seeded).
    pub fn from_cache_dir(dir: Option<&Path>) -> Result<Self> {
        let mut fx = Self::seeded();
        let Some(path) = dir.map(|d| d.join(EXTRACTOR_FILE)).filter(|p| p.is_file()) else {
            return Ok(fx);
        };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 4 * fx.store.count() {
            return Err(Error::Config(format!(
                "{} holds {} bytes, extractor needs {}",
                path.display(),
                bytes.len(),
                4 * fx.store.count()
            )));
        }
        let mut vals = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for id in fx.store.ids().collect::<Vec<_>>() {
            for v in fx.store.get_mut(id).data_mut() {
                *v = T::of(vals.next().expect("length checked") as f64);
            }
        }
        fx.source = path.display().to_string();
        Ok(fx)
    }

    pub fn from_env() -> Result<Self> {
        let dir = std::env::var_os("DSRLAB_CACHE").map(PathBuf::from);
        Self::from_cache_dir(dir.as_deref())
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvExtractor<T> {
    fn name(&self) -> &str {
        "conv3"
    }

    fn extract(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let p: Bound = self.store.bind(g, false);
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, &p, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, sr: Var, hr: Var, fx: &dyn FeatureExtractor<T>) -> Result<Var> {
    same_shape(g, sr, hr, "perceptual operands differ")?;
    let a = fx.extract(g, sr)?;
    let b = fx.extract(g, hr)?;
    rms_distance(g, a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    pub l_g: Var,
    pub l_d: Var,
    pub l_adv: Var,
}

fn clamped_neg_log<T: Scalar>(g: &mut Graph<T>, p: Var) -> Var {
    let p = g.unary(p, Unary::Clamp(LOG_CLAMP, 1.0 - LOG_CLAMP));
    let l = g.unary(p, Unary::Log);
    g.unary(l, Unary::Neg)
}

/// Generator and discriminator terms from the two relativistic scores
/// `d_hs = D(hr, sr)` and `d_sh = D(sr, hr)`.
pub fn adversarial_from_scores<T: Scalar>(g: &mut Graph<T>, d_hs: Var, d_sh: Var, w: &LossWeights) -> Result<AdversarialLosses> {
    let one_minus = |g: &mut Graph<T>, v: Var| {
        let n = g.scale(v, -T::one());
        g.add_scalar(n, T::one())
    };
    let not_hs = one_minus(g, d_hs);
    let not_sh = one_minus(g, d_sh);
    let a = clamped_neg_log(g, not_hs);
    let b = clamped_neg_log(g, d_sh);
    let l_g = g.add(a, b)?;
    let a = clamped_neg_log(g, d_hs);
    let b = clamped_neg_log(g, not_sh);
    let l_d = g.add(a, b)?;
    let wg = g.scale(l_g, T::of(w.g));
    let wd = g.scale(l_d, T::of(w.d));
    let l_adv = g.add(wg, wd)?;
    Ok(AdversarialLosses { l_g, l_d, l_adv })
}

/// Relativistic losses with the critic run on `hr` and `sr`.
pub fn adversarial_losses<T: Scalar>(
    g: &mut Graph<T>,
    critic: &Critic,
    p: &Bound,
    hr: Var,
    sr: Var,
    w: &LossWeights,
) -> Result<AdversarialLosses> {
    same_shape(g, hr, sr, "adversarial operands differ")?;
    let c_hr = critic.score(g, p, hr)?;
    let c_sr = critic.score(g, p, sr)?;
    let l_hs = g.sub(c_hr, c_sr)?;
    let l_sh = g.sub(c_sr, c_hr)?;
    let d_hs = g.unary(l_hs, Unary::Sigmoid);
    let d_sh = g.unary(l_sh, Unary::Sigmoid);
    adversarial_from_scores(g, d_hs, d_sh, w)
}

/// Plain-number loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dep: f64,
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
}

/// `λ_dep L_dep + λ_rec L_rec + λ_per L_per + λ_adv L_adv`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("dep", c.dep), ("rec", c.rec), ("per", c.per), ("adv", c.adv)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
    }
    Ok(w.dep * c.dep + w.rec * c.rec + w.per * c.per + w.adv * c.adv)
}

/// `Σ λ_i · term_i` on the tape, skipping zero-weight terms.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, T::of(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(crate::Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scores(d_hs: f64, d_sh: f64) -> (f64, f64, f64) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(d_hs));
        let b = g.constant(Tensor::scalar(d_sh));
        let l = adversarial_from_scores(&mut g, a, b, &LossWeights::default()).unwrap();
        (g.scalar_value(l.l_g), g.scalar_value(l.l_d), g.scalar_value(l.l_adv))
    }

    #[test]
    fn half_scores_give_two_ln_two() {
        let (lg, ld, _) = scores(0.5, 0.5);
        assert!((lg - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let (_, ld, _) = scores(1.0 - 1e-7, 1e-7);
        assert!(ld <= 3e-7 && ld >= 0.0, "{ld}");
        let (lg, ld, _) = scores(1.0, 0.0);
        assert!(lg.is_finite() && ld.is_finite());
    }

    #[test]
    fn zero_weights_zero_adversarial() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.3));
        let b = g.constant(Tensor::scalar(0.6));
        let w = LossWeights {
            g: 0.0,
            d: 0.0,
            ..Default::default()
        };
        let l = adversarial_from_scores(&mut g, a, b, &w).unwrap();
        assert_eq!(g.scalar_value(l.l_adv), 0.0);
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let c = LossComponents {
            dep: 0.2,
            rec: 0.1,
            per: 0.3,
            adv: 1.0,
        };
        let w = LossWeights {
            dep: 1.0,
            rec: 1.0,
            per: 0.0,
            adv: 0.0,
            ..Default::default()
        };
        assert!((total_loss(&c, &w).unwrap() - 0.3).abs() < 1e-15);
        let zero = LossWeights {
            dep: 0.0,
            rec: 0.0,
            per: 0.0,
            adv: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
        let bad = LossComponents { rec: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFiniteLoss(n)) if n == "rec"));
    }

    #[test]
    fn hand_values_for_pixel_terms() {
        let mut g = Graph::<f64>::new();
        let hr = g.constant(Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin().abs() * 0.6));
        let sr = g.constant(g.value(hr).map(|v| v + 0.25));
        let l = reconstruction_loss(&mut g, sr, hr).unwrap();
        assert!((g.scalar_value(l) - 0.25).abs() < 1e-12);
        let gt = g.constant(Tensor::full(&[1, 4, 4], 2.0));
        let d = g.constant(Tensor::full(&[1, 4, 4], 2.1));
        let l = depth_loss(&mut g, d, d, gt, gt).unwrap();
        assert!((g.scalar_value(l) - 0.2).abs() < 1e-12);
    }
}
