//! Attention-weighted feature distillation and output distillation.
//!
//! For every teacher feature `m` the attention module scores every student
//! feature `n` from their pooled descriptors; the distillation loss is the
//! attention-weighted sum of distances between channel-pooled maps.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::losses::{mean_abs, rms_distance, weighted_sum};
use crate::nn::{Bound, Conv2d, ParamId, ParamStore, Profile};
use crate::resample::{Kernel, ResizePlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keeps the channel-norm gradient finite at all-zero pixels.
pub const POOL_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureRole {
    TeacherEncoder,
    StudentEncoder,
    TeacherDepth,
    StudentDepth,
}

/// Ordered feature maps of one network branch.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub role: FeatureRole,
    pub maps: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillWeights {
    pub rec: f64,
    pub kd: f64,
    pub ad: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            kd: 0.5,
            ad: 0.1,
        }
    }
}

/// Query, key and pairing transforms plus position embeddings for one
/// branch (`M` teacher features, `N` student features, embedding width `c`).
#[derive(Clone, Debug)]
pub struct Adm {
    pub width: usize,
    queries: Vec<Conv2d>,
    keys: Vec<Conv2d>,
    pairing: Vec<Conv2d>,
    pos_teacher: Vec<ParamId>,
    pos_student: Vec<ParamId>,
}

impl Adm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        teacher_channels: &[usize],
        student_channels: &[usize],
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let queries = teacher_channels
            .iter()
            .enumerate()
            .map(|(m, &c)| Conv2d::linear(store, &format!("{name}.query{m}"), (c, width), rng))
            .collect();
        let keys = student_channels
            .iter()
            .enumerate()
            .map(|(n, &c)| Conv2d::linear(store, &format!("{name}.key{n}"), (c, width), rng))
            .collect();
        let pairing = (0..student_channels.len())
            .map(|n| Conv2d::linear(store, &format!("{name}.pair{n}"), (width, width), rng))
            .collect();
        let pos = |store: &mut ParamStore<T>, tag: &str, n: usize| -> Vec<ParamId> {
            (0..n)
                .map(|i| store.add(format!("{name}.pos_{tag}{i}"), Tensor::zeros(&[width, 1, 1])))
                .collect()
        };
        let pos_teacher = pos(store, "t", teacher_channels.len());
        let pos_student = pos(store, "s", student_channels.len());
        Self {
            width,
            queries,
            keys,
            pairing,
            pos_teacher,
            pos_student,
        }
    }

    pub fn m(&self) -> usize {
        self.queries.len()
    }

    pub fn n(&self) -> usize {
        self.keys.len()
    }

    /// One `[N]` probability row per teacher feature.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, teacher: &[Var], student: &[Var]) -> Result<Vec<Var>> {
        if teacher.len() != self.m() || student.len() != self.n() {
            return Err(shape_err!(
                "attention module built for {}x{} features, got {}x{}",
                self.m(),
                self.n(),
                teacher.len(),
                student.len()
            ));
        }
        let mut q = Vec::with_capacity(self.m());
        for (f, w) in teacher.iter().zip(&self.queries) {
            let pooled = g.global_avg_pool(*f)?;
            let h = w.forward(g, p, pooled)?;
            q.push(g.relu(h));
        }
        let mut wk = Vec::with_capacity(self.n());
        for ((f, w), pair) in student.iter().zip(&self.keys).zip(&self.pairing) {
            let pooled = g.global_avg_pool(*f)?;
            let h = w.forward(g, p, pooled)?;
            let k = g.relu(h);
            wk.push(pair.forward(g, p, k)?);
        }
        let inv = T::of(1.0 / (self.width as f64).sqrt());
        let mut rows = Vec::with_capacity(self.m());
        for (m, &qm) in q.iter().enumerate() {
            let mut logits = Vec::with_capacity(self.n());
            for (n, &kn) in wk.iter().enumerate() {
                let qk = g.mul(qm, kn)?;
                let qk = g.sum(qk);
                let pp = g.mul(p.var(self.pos_teacher[m]), p.var(self.pos_student[n]))?;
                let pp = g.sum(pp);
                let l = g.add(qk, pp)?;
                logits.push(g.scale(l, inv));
            }
            let row = g.stack(&logits)?;
            rows.push(g.softmax(row));
        }
        Ok(rows)
    }

    pub fn profile(&self, prof: &mut Profile) {
        for c in self.queries.iter().chain(&self.keys).chain(&self.pairing) {
            c.profile(prof, (1, 1));
        }
    }
}

/// `softmax(raw / sqrt(c))` for one row of unscaled logits.
pub fn scaled_softmax(raw: &[f64], c: usize) -> Vec<f64> {
    let s: Vec<f64> = raw.iter().map(|v| v / (c as f64).sqrt()).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-pixel channel L2 norm divided by the channel count.
pub fn channel_pool<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    g.channel_norm_pool(f, T::of(POOL_EPS))
}

/// Channel-pools a student feature, then resizes it bilinearly to `hw`.
pub fn resize_student<T: Scalar>(g: &mut Graph<T>, f_s: Var, hw: (usize, usize)) -> Result<Var> {
    let pooled = channel_pool(g, f_s)?;
    resize_map(g, pooled, hw)
}

fn resize_map<T: Scalar>(g: &mut Graph<T>, m: Var, (h, w): (usize, usize)) -> Result<Var> {
    let (_, mh, mw) = g.value(m).chw()?;
    if (mh, mw) == (h, w) {
        return Ok(m);
    }
    g.resize(m, Rc::new(ResizePlan::new((mh, mw), (h, w), Kernel::Bilinear, false)))
}

/// `Σ_m Σ_n α_{m,n} · rms(pool(f^T_m) - resize(pool(f^S_n)))` for one branch.
pub fn branch_distill_loss<T: Scalar>(g: &mut Graph<T>, alpha: &[Var], teacher: &[Var], student: &[Var]) -> Result<Var> {
    if alpha.len() != teacher.len() {
        return Err(shape_err!("{} attention rows for {} teacher features", alpha.len(), teacher.len()));
    }
    let pooled_s: Vec<Var> = student.iter().map(|&f| channel_pool(g, f)).collect::<Result<_>>()?;
    let mut terms = Vec::new();
    for (&row, &ft) in alpha.iter().zip(teacher) {
        if g.shape(row) != [student.len()] {
            return Err(shape_err!("attention row {:?} for {} student features", g.shape(row), student.len()));
        }
        let pt = channel_pool(g, ft)?;
        let (_, h, w) = g.value(pt).chw()?;
        for (n, &ps) in pooled_s.iter().enumerate() {
            let ps = resize_map(g, ps, (h, w))?;
            let d = rms_distance(g, pt, ps)?;
            let a = g.index(row, n)?;
            terms.push(g.mul(a, d)?);
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Encoder and depth-branch terms and their mean `½(L^e + L^d)`.
#[derive(Clone, Debug)]
pub struct AttentionLoss {
    pub encoder: Var,
    pub depth: Var,
    pub total: Var,
    /// Attention rows of the encoder and depth branches.
    pub alpha: (Vec<Var>, Vec<Var>),
}

pub fn attention_distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    adm: (&Adm, &Adm),
    enc: (&FeatureSet, &FeatureSet),
    dep: (&FeatureSet, &FeatureSet),
) -> Result<AttentionLoss> {
    let branch = |g: &mut Graph<T>, adm: &Adm, t: &FeatureSet, s: &FeatureSet| -> Result<(Var, Vec<Var>)> {
        if t.maps.is_empty() || s.maps.is_empty() {
            return Err(shape_err!("empty feature set"));
        }
        let alpha = adm.attention(g, p, &t.maps, &s.maps)?;
        Ok((branch_distill_loss(g, &alpha, &t.maps, &s.maps)?, alpha))
    };
    let (encoder, alpha_e) = branch(g, adm.0, enc.0, enc.1)?;
    let (depth, alpha_d) = branch(g, adm.1, dep.0, dep.1)?;
    let sum = g.add(encoder, depth)?;
    let total = g.scale(sum, T::of(0.5));
    Ok(AttentionLoss {
        encoder,
        depth,
        total,
        alpha: (alpha_e, alpha_d),
    })
}

/// `mean|sr_s - sr_t|`.
pub fn output_distill_loss<T: Scalar>(g: &mut Graph<T>, sr_student: Var, sr_teacher: Var) -> Result<Var> {
    mean_abs(g, sr_student, sr_teacher)
}

pub fn student_objective(l_rec: f64, l_kd: f64, l_ad: f64, w: &DistillWeights) -> Result<f64> {
    for (name, v) in [("rec", l_rec), ("kd", l_kd), ("ad", l_ad)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
    }
    Ok(w.rec * l_rec + w.kd * l_kd + w.ad * l_ad)
}

/// Tape version of [`student_objective`].
pub fn student_objective_var<T: Scalar>(g: &mut Graph<T>, l_rec: Var, l_kd: Option<Var>, l_ad: Option<Var>, w: &DistillWeights) -> Result<Var> {
    let mut terms = vec![(w.rec, l_rec)];
    terms.extend(l_kd.map(|v| (w.kd, v)));
    terms.extend(l_ad.map(|v| (w.ad, v)));
    weighted_sum(g, &terms)
}

/// Row entropies of an attention matrix, for logging.
pub fn row_entropies<T: Scalar>(g: &Graph<T>, rows: &[Var]) -> Vec<f64> {
    rows.iter()
        .map(|&r| {
            g.value(r)
                .data()
                .iter()
                .map(|v| v.as_f64())
                .filter(|&v| v > 0.0)
                .map(|v| -v * v.ln())
                .sum()
        })
        .collect()
}
