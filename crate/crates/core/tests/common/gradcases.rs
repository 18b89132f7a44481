//! Double-precision gradient checks for the network blocks and every loss.

use std::rc::Rc;

use super::grads::check_all;
use super::rand_tensor;
use dsrlab::autograd::patch::PatchGeom;
use dsrlab::autograd::{Graph, Var};
use dsrlab::backbone::{Critic, CriticConfig, Decoder, EncoderConfig, Pyramid};
use dsrlab::distill::{attention_distill_loss, output_distill_loss, Adm, FeatureRole, FeatureSet};
use dsrlab::dmm::{fuse, Dmm, DmmInputs, FusionSet, MatchConfig};
use dsrlab::losses::{
    adversarial_from_scores, adversarial_losses, depth_loss, perceptual_loss, reconstruction_loss, ConvExtractor,
    IdentityExtractor, LossWeights,
};
use dsrlab::nn::ParamStore;
use dsrlab::resample::{Kernel, ResizePlan};
use dsrlab::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error per checked quantity.
#[derive(Default)]
pub struct Cases(pub Vec<(&'static str, f64)>);

impl Cases {
    fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &'static str, err: f64) {
        self.0.push((name, err));
    }
}

/// Every case in the suite.
pub fn all() -> Cases {
    let mut out = Cases::new();
    for f in [
        fuse_gradients,
        decoder_gradients,
        pixel_loss_gradients,
        adversarial_gradients,
        attention_distill_gradients,
        drimm_gather_gradients_with_frozen_indices,
        dmm_forward_gradients_with_frozen_matches,
    ] {
        out.0.extend(f().0);
    }
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(0.5..3.0))
}

fn unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(0.05..0.95))
}

/// `Σ_i sum(v_i · probe_i)` with fixed random probes.
fn probe_sum(g: &mut Graph<f64>, vs: &[Var]) -> dsrlab::Result<Var> {
    let mut r = rng(1234);
    let mut acc: Option<Var> = None;
    for &v in vs {
        let p = g.constant(rand_tensor(&mut r, g.shape(v)));
        let m = g.mul(v, p)?;
        let t = g.sum(m);
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.expect("at least one term"))
}

/// Random values everywhere, biases included: zero biases put ReLU inputs
/// exactly on the kink, where finite differences are meaningless.
fn randomize(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor64::from_fn(&shape, |_| r.gen_range(-0.5..0.5));
    }
}

pub fn fuse_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let set = FusionSet::new(&mut store, "f", (4, 2), 2, &mut r);
    randomize(&mut store, &mut r);
    let d = rand_tensor(&mut r, &[2, 3, 4]);
    let f = rand_tensor(&mut r, &[2, 3, 4]);
    out.push("fuse", check_all(&store, &[d, f], |g, p, v| fuse(&set, g, p, v[0], v[1])));
    out
}

pub fn decoder_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(2);
    let mut store = ParamStore::<f64>::new();
    let cfg = EncoderConfig {
        base_channels: 2,
        res_blocks_per_stage: 1,
    };
    let dec = Decoder::new(&mut store, "dec", &cfg, &mut r);
    let xs = vec![
        rand_tensor(&mut r, &[2, 2, 2]),
        rand_tensor(&mut r, &[2, 2, 2]),
        rand_tensor(&mut r, &[2, 4, 4]),
        rand_tensor(&mut r, &[2, 8, 8]),
        unit(&mut r, &[3, 2, 2]),
    ];
    out.push(
        "decoder",
        check_all(&store, &xs, |g, p, v| dec.forward(g, p, v[0], [v[1], v[2], v[3]], v[4])),
    );
    out
}

pub fn pixel_loss_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(3);
    let store = ParamStore::<f64>::new();
    let dep: Vec<Tensor64> = (0..4).map(|_| positive(&mut r, &[1, 4, 5])).collect();
    out.push("L_dep", check_all(&store, &dep, |g, _, v| depth_loss(g, v[0], v[1], v[2], v[3])));
    let img = vec![unit(&mut r, &[3, 6, 6]), unit(&mut r, &[3, 6, 6])];
    out.push("L_rec", check_all(&store, &img, |g, _, v| reconstruction_loss(g, v[0], v[1])));
    out.push("L_kd", check_all(&store, &img, |g, _, v| output_distill_loss(g, v[0], v[1])));
    out.push(
        "L_per identity",
        check_all(&store, &img, |g, _, v| perceptual_loss(g, v[0], v[1], &IdentityExtractor)),
    );
    let fx = ConvExtractor::<f64>::seeded();
    let img8 = vec![unit(&mut r, &[3, 8, 8]), unit(&mut r, &[3, 8, 8])];
    out.push("L_per conv", check_all(&store, &img8, |g, _, v| perceptual_loss(g, v[0], v[1], &fx)));
    out
}

pub fn adversarial_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(4);
    let w = LossWeights::default();
    let empty = ParamStore::<f64>::new();
    let scores = vec![unit(&mut r, &[]), unit(&mut r, &[])];
    for pick in 0..2 {
        let err = check_all(&empty, &scores, |g, _, v| {
            let l = adversarial_from_scores(g, v[0], v[1], &w)?;
            Ok([l.l_g, l.l_d][pick])
        });
        out.push("L_G/L_D from scores", err);
    }
    let mut store = ParamStore::<f64>::new();
    let critic = Critic::new(&mut store, "critic", &CriticConfig { base_channels: 2 }, &mut r);
    let imgs = vec![unit(&mut r, &[3, 8, 8]), unit(&mut r, &[3, 8, 8])];
    for pick in 0..2 {
        let err = check_all(&store, &imgs, |g, p, v| {
            let l = adversarial_losses(g, &critic, p, v[0], v[1], &w)?;
            Ok([l.l_g, l.l_d][pick])
        });
        out.push("L_G/L_D through the critic", err);
    }
    out
}

pub fn attention_distill_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let t_ch = [3, 2, 2];
    let s_ch = [2, 2];
    let adm_e = Adm::new(&mut store, "adm.e", &t_ch, &s_ch, 3, &mut r);
    let adm_d = Adm::new(&mut store, "adm.d", &t_ch, &s_ch, 3, &mut r);
    // Nonzero position embeddings so their gradients are exercised too.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(".pos_") {
            *store.get_mut(id) = rand_tensor(&mut r, &[3, 1, 1]);
        }
    }
    let hw = [(8, 8), (4, 4), (2, 2)];
    let mut xs = Vec::new();
    for _ in 0..2 {
        xs.extend(t_ch.iter().zip(&hw).map(|(&c, &(h, w))| rand_tensor(&mut r, &[c, h, w])));
        xs.extend(s_ch.iter().zip(&hw[1..]).map(|(&c, &(h, w))| rand_tensor(&mut r, &[c, h, w])));
    }
    let set = |role, maps: &[Var]| FeatureSet { role, maps: maps.to_vec() };
    let err = check_all(&store, &xs, |g, p, v| {
        let (te, se) = (set(FeatureRole::TeacherEncoder, &v[0..3]), set(FeatureRole::StudentEncoder, &v[3..5]));
        let (td, sd) = (set(FeatureRole::TeacherDepth, &v[5..8]), set(FeatureRole::StudentDepth, &v[8..10]));
        Ok(attention_distill_loss(g, p, (&adm_e, &adm_d), (&te, &se), (&td, &sd))?.total)
    });
    out.push("L_ad", err);
    out
}

/// Crop, score, gather, weight and fold with fixed indices, on an LR grid
/// of 2×2 split into two blocks.
pub fn drimm_gather_gradients_with_frozen_indices() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(6);
    let geom = PatchGeom::new(3, 1).unwrap();
    let (c, h, w, bw) = (2, 2, 2, 1);
    let idx: Vec<Rc<Vec<usize>>> = (0..2).map(|_| Rc::new((0..2).map(|_| r.gen_range(0..2)).collect())).collect();
    let xs = vec![
        rand_tensor(&mut r, &[c, h, w]),
        rand_tensor(&mut r, &[c, h, w]),
        rand_tensor(&mut r, &[c, h, w]),
        rand_tensor(&mut r, &[c, 2 * h, 2 * w]),
        rand_tensor(&mut r, &[c, 4 * h, 4 * w]),
    ];
    let store = ParamStore::<f64>::new();
    let err = check_all(&store, &xs, |g, _, v| {
        let mut levels = Vec::new();
        for (i, s) in [1usize, 2, 4].into_iter().enumerate() {
            let mut placed = Vec::new();
            for k in 0..2 {
                let b_lr = g.crop(v[0], 0, k, h, bw)?;
                // Both blocks matched against the other column.
                let b_rd = g.crop(v[1], 0, 1 - k, h, bw)?;
                let score = g.patch_cosine(b_lr, b_rd, idx[k].clone(), geom, 1e-12)?;
                let src = g.crop(v[2 + i], 0, s * (1 - k), s * h, s * bw)?;
                let gathered = g.gather_fold(src, idx[k].clone(), (s * h, s * bw), geom.scaled(s))?;
                let plan = Rc::new(ResizePlan::new((h, bw), (s * h, s * bw), Kernel::Bicubic, false));
                let up = g.resize(score, plan)?;
                let wb = g.mul_plane(gathered, up)?;
                placed.push((wb, 0, s * k));
            }
            levels.push(g.place_blocks(&placed, s * h, s * w)?);
        }
        probe_sum(g, &levels)
    });
    out.push("DRIMM gather", err);
    out
}

/// Whole matching module replaying the index maps of a first pass.
pub fn dmm_forward_gradients_with_frozen_matches() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    let enc = EncoderConfig {
        base_channels: 2,
        res_blocks_per_stage: 1,
    };
    let cfg = MatchConfig {
        block_h: 2,
        block_w: 2,
        ..MatchConfig::default()
    };
    let dmm = Dmm::new(&mut store, "dmm", &enc, &cfg, &mut r);
    randomize(&mut store, &mut r);
    let (h, w) = (4, 4);
    let pyr = |r: &mut ChaCha8Rng, base: usize| [base / 4, base / 2, base].map(|s| rand_tensor(r, &[2, s, s]));
    let mut xs = Vec::new();
    xs.extend(pyr(&mut r, h));
    xs.extend(pyr(&mut r, h));
    xs.extend(pyr(&mut r, 4 * h));
    xs.push(positive(&mut r, &[1, h, w]));
    xs.push(positive(&mut r, &[1, h, w]));
    let inputs = |v: &[Var]| DmmInputs {
        lr: Pyramid { f1: v[0], f2: v[1], f4: v[2] },
        ref_down: Pyramid { f1: v[3], f2: v[4], f4: v[5] },
        reference: Pyramid { f1: v[6], f2: v[7], f4: v[8] },
        depth_lr: v[9],
        depth_ref_down: v[10],
    };
    let frozen = {
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g, false);
        let v: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        dmm.forward(&mut g, &p, &inputs(&v), None).unwrap().blocks
    };
    let err = check_all(&store, &xs, |g, p, v| {
        let out = dmm.forward(g, p, &inputs(v), Some(&frozen))?;
        let mut parts = out.matched.to_vec();
        parts.push(out.fused_lr);
        probe_sum(g, &parts)
    });
    out.push("DMM", err);
    out
}
