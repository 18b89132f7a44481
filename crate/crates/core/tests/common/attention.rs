//! Random attention-distillation instances.

use dsrlab::autograd::{Graph, Var};
use dsrlab::distill::{attention_distill_loss, Adm, FeatureRole, FeatureSet};
use dsrlab::nn::ParamStore;
use dsrlab::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rand_tensor;

pub struct AdInstance {
    pub g: Graph<f64>,
    pub alpha: Vec<Var>,
    pub encoder: Var,
    pub depth: Var,
    pub total: Var,
}

pub fn ad_instance(seed: u64) -> AdInstance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let m = r.gen_range(1..=4);
    let n = r.gen_range(1..=3);
    let width = r.gen_range(1..=8);
    let t_ch: Vec<usize> = (0..m).map(|_| r.gen_range(1..=6)).collect();
    let s_ch: Vec<usize> = (0..n).map(|_| r.gen_range(1..=6)).collect();
    let mut store = ParamStore::<f64>::new();
    let adm_e = Adm::new(&mut store, "e", &t_ch, &s_ch, width, &mut r);
    let adm_d = Adm::new(&mut store, "d", &t_ch, &s_ch, width, &mut r);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor64::from_fn(&shape, |_| r.gen_range(-3.0..3.0));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let maps = |g: &mut Graph<f64>, chans: &[usize], r: &mut ChaCha8Rng| -> Vec<Var> {
        chans
            .iter()
            .map(|&c| {
                let s = 1 << r.gen_range(0..=3);
                g.constant(rand_tensor(r, &[c, s, s]))
            })
            .collect()
    };
    let te = FeatureSet { role: FeatureRole::TeacherEncoder, maps: maps(&mut g, &t_ch, &mut r) };
    let se = FeatureSet { role: FeatureRole::StudentEncoder, maps: maps(&mut g, &s_ch, &mut r) };
    let td = FeatureSet { role: FeatureRole::TeacherDepth, maps: maps(&mut g, &t_ch, &mut r) };
    let sd = FeatureSet { role: FeatureRole::StudentDepth, maps: maps(&mut g, &s_ch, &mut r) };
    let l = attention_distill_loss(&mut g, &p, (&adm_e, &adm_d), (&te, &se), (&td, &sd)).unwrap();
    let mut alpha = l.alpha.0.clone();
    alpha.extend(l.alpha.1.iter().copied());
    AdInstance {
        g,
        alpha,
        encoder: l.encoder,
        depth: l.depth,
        total: l.total,
    }
}
