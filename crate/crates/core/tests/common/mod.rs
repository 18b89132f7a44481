//! Oracles shared by the focused integration tests and the acceptance run.
#![allow(dead_code)]

pub mod attention;
pub mod closed;
pub mod gradcases;
pub mod grads;

use dsrlab::autograd::patch::PatchGeom;
use dsrlab::dmm::{coarse_block_select, fine_match, gather_weight_fold, BlockLocation, BlockTriple, FineMatch, MatchConfig};
use dsrlab::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Plain loop cosine with the same eps guard.
pub fn brute_cosine(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    (dot / (norm(p).max(eps) * norm(q).max(eps))).clamp(-1.0, 1.0)
}

/// Patch of `size` whose top-left is `(y0, x0)`, out-of-range pixels
/// clamped to the border.
fn clamped_patch(x: &Tensor64, size: usize, y0: isize, x0: isize) -> Vec<f64> {
    let (c, h, w) = x.chw().unwrap();
    let mut v = Vec::new();
    for ch in 0..c {
        for dy in 0..size as isize {
            for dx in 0..size as isize {
                let y = (y0 + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x0 + dx).clamp(0, w as isize - 1) as usize;
                v.push(x.at(ch, y, xx));
            }
        }
    }
    v
}

/// First index of the maximum, scanning every candidate.
fn brute_argmax(q: &[f64], cands: &[Vec<f64>], eps: f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in cands.iter().enumerate() {
        let s = brute_cosine(q, c, eps);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

pub fn brute_fine(b_lr: &Tensor64, b_rd: &Tensor64, cfg: &MatchConfig) -> (Vec<usize>, Vec<f64>) {
    let (_, h, w) = b_lr.chw().unwrap();
    let (p, s) = (cfg.patch, cfg.stride);
    let pad = ((p - s) / 2) as isize;
    let gh = (h + 2 * pad as usize - p) / s + 1;
    let gw = (w + 2 * pad as usize - p) / s + 1;
    let unfold = |x: &Tensor64| -> Vec<Vec<f64>> {
        (0..gh * gw)
            .map(|i| clamped_patch(x, p, ((i / gw) * s) as isize - pad, ((i % gw) * s) as isize - pad))
            .collect()
    };
    let cands = unfold(b_rd);
    unfold(b_lr).iter().map(|q| brute_argmax(q, &cands, cfg.eps)).unzip()
}

/// Block origins found by exhaustive center-patch search.
pub fn brute_coarse(f_lr: &Tensor64, f_rd: &Tensor64, cfg: &MatchConfig) -> Vec<(usize, usize)> {
    let (_, h, w) = f_lr.chw().unwrap();
    let (dy, dx, cs) = (cfg.block_h, cfg.block_w, cfg.coarse_search_stride);
    let r = (cfg.patch / 2) as isize;
    let mut centers = Vec::new();
    for y in (0..h).step_by(cs) {
        for x in (0..w).step_by(cs) {
            centers.push((y, x));
        }
    }
    let cands: Vec<Vec<f64>> = centers
        .iter()
        .map(|&(y, x)| clamped_patch(f_rd, cfg.patch, y as isize - r, x as isize - r))
        .collect();
    let mut out = Vec::new();
    for by in 0..h / dy {
        for bx in 0..w / dx {
            let (cy, cx) = (by * dy + dy / 2, bx * dx + dx / 2);
            let q = clamped_patch(f_lr, cfg.patch, cy as isize - r, cx as isize - r);
            let (j, _) = brute_argmax(&q, &cands, cfg.eps);
            let (y, x) = centers[j];
            out.push((y.saturating_sub(dy / 2).min(h - dy), x.saturating_sub(dx / 2).min(w - dx)));
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct MatchingReport {
    pub instances: usize,
    pub coarse_mismatches: usize,
    pub fine_mismatches: usize,
    pub max_score_rel: f64,
}

impl MatchingReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.coarse_mismatches == 0 && self.fine_mismatches == 0 && self.max_score_rel <= tol
    }
}

/// Random configuration whose blocks tile a grid of at most 16×16.
fn random_instance(rng: &mut ChaCha8Rng) -> (MatchConfig, usize, usize, usize) {
    let bh = rng.gen_range(2..=8);
    let bw = rng.gen_range(2..=8);
    let h = bh * rng.gen_range(1..=16 / bh);
    let w = bw * rng.gen_range(1..=16 / bw);
    let c = rng.gen_range(1..=8);
    let patch = [1, 3, 5][rng.gen_range(0..3)];
    let stride = if patch > 1 && rng.gen_bool(0.3) && bh % patch == 0 && bw % patch == 0 { patch } else { 1 };
    let cfg = MatchConfig {
        patch,
        block_h: bh,
        block_w: bw,
        stride,
        eps: 1e-12,
        coarse_search_stride: rng.gen_range(1..=2),
    };
    (cfg, c, h, w)
}

/// Compares the matcher with the brute-force oracles on `n` random
/// instances.
pub fn matching_oracle(n: usize, seed: u64) -> MatchingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = MatchingReport::default();
    while rep.instances < n {
        let (cfg, c, h, w) = random_instance(&mut rng);
        if cfg.check_grid(h, w).is_err() {
            continue;
        }
        let f_lr = rand_tensor(&mut rng, &[c, h, w]);
        // Half the instances hide shifted copies of the LR features in the
        // reference so the matcher has true correspondences to find.
        let f_rd = if rng.gen_bool(0.5) {
            let (sy, sx) = (rng.gen_range(0..h), rng.gen_range(0..w));
            Tensor64::from_fn(&[c, h, w], |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                f_lr.at(ch, (y + sy) % h, (x + sx) % w) + 0.05 * (rng.gen::<f64>() - 0.5)
            })
        } else {
            rand_tensor(&mut rng, &[c, h, w])
        };
        let refs = [1, 2, 4].map(|s| rand_tensor(&mut rng, &[c, s * h, s * w]));
        let triples = coarse_block_select(&f_lr, &f_rd, [&refs[0], &refs[1], &refs[2]], &cfg).unwrap();
        let oracle = brute_coarse(&f_lr, &f_rd, &cfg);
        for (t, &o) in triples.iter().zip(&oracle) {
            if t.location.ref_origin != o {
                rep.coarse_mismatches += 1;
            }
            let (ry, rx) = t.location.ref_origin;
            for (i, s) in [1, 2, 4].into_iter().enumerate() {
                let expect = refs[i].crop(s * ry, s * rx, s * cfg.block_h, s * cfg.block_w).unwrap();
                if t.reference[i] != expect {
                    rep.coarse_mismatches += 1;
                }
            }
            let m = fine_match(&t.lr, &t.ref_down, &cfg).unwrap();
            let (idx, score) = brute_fine(&t.lr, &t.ref_down, &cfg);
            if m.index != idx {
                rep.fine_mismatches += 1;
            }
            for (a, b) in m.score.iter().zip(&score) {
                rep.max_score_rel = rep.max_score_rel.max((a - b).abs() / b.abs().max(1e-12));
            }
        }
        rep.instances += 1;
    }
    rep
}

fn single_block(x: &[Tensor64; 3], c: usize, h: usize, w: usize) -> BlockTriple<f64> {
    BlockTriple {
        location: BlockLocation {
            k: 0,
            lr_origin: (0, 0),
            ref_origin: (0, 0),
            coarse_index: 0,
        },
        lr: Tensor64::zeros(&[c, h, w]),
        ref_down: Tensor64::zeros(&[c, h, w]),
        reference: x.clone(),
    }
}

/// Identity indices and unit scores over non-overlapping patches; returns
/// whether every level came back bit-identical.
pub fn fold_identity_exact(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for &(patch, h, w) in &[(1, 4, 6), (3, 6, 9), (5, 10, 5)] {
        let cfg = MatchConfig {
            patch,
            block_h: h,
            block_w: w,
            stride: patch,
            ..MatchConfig::default()
        };
        let c = 3;
        let refs = [1, 2, 4].map(|s| rand_tensor(&mut rng, &[c, s * h, s * w]));
        let (gh, gw) = (h / patch, w / patch);
        let m = FineMatch {
            grid: (gh, gw),
            index: (0..gh * gw).collect(),
            score: vec![1.0; gh * gw],
        };
        let out = gather_weight_fold(&[single_block(&refs, c, h, w)], &[m], (h, w), &cfg).unwrap();
        ok &= out == refs;
    }
    ok
}

/// Scatter/accumulate fold: every slot adds its source patch to a sum and
/// a count, then the sum is divided.
pub fn scatter_fold(src: &Tensor64, idx: &[usize], geom: PatchGeom, (gh, gw): (usize, usize)) -> Tensor64 {
    let (c, h, w) = src.chw().unwrap();
    let mut sum = Tensor64::zeros(&[c, h, w]);
    let mut cnt = vec![0.0; h * w];
    let pad = geom.pad as isize;
    for slot in 0..gh * gw {
        let (ty, tx) = ((slot / gw * geom.stride) as isize - pad, (slot % gw * geom.stride) as isize - pad);
        let j = idx[slot];
        let (sy, sx) = ((j / gw * geom.stride) as isize - pad, (j % gw * geom.stride) as isize - pad);
        for dy in 0..geom.size as isize {
            for dx in 0..geom.size as isize {
                let (y, x) = (ty + dy, tx + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let syy = (sy + dy).clamp(0, h as isize - 1) as usize;
                let sxx = (sx + dx).clamp(0, w as isize - 1) as usize;
                cnt[y as usize * w + x as usize] += 1.0;
                for ch in 0..c {
                    let v = sum.at(ch, y as usize, x as usize) + src.at(ch, syy, sxx);
                    sum.set(ch, y as usize, x as usize, v);
                }
            }
        }
    }
    Tensor64::from_fn(&[c, h, w], |i| sum.data()[i] / cnt[i % (h * w)])
}

/// Largest deviation between the overlapping fold (random indices, unit
/// scores) and the scatter oracle, over all three scales.
pub fn fold_overlap_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (h, w, c) = (rng.gen_range(3..=8), rng.gen_range(3..=8), rng.gen_range(1..=4));
        let patch = [3, 5][rng.gen_range(0..2)];
        let cfg = MatchConfig {
            patch,
            block_h: h,
            block_w: w,
            stride: 1,
            ..MatchConfig::default()
        };
        let refs = [1, 2, 4].map(|s| rand_tensor(&mut rng, &[c, s * h, s * w]));
        let idx: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..h * w)).collect();
        let m = FineMatch {
            grid: (h, w),
            index: idx.clone(),
            score: vec![1.0; h * w],
        };
        let out = gather_weight_fold(&[single_block(&refs, c, h, w)], &[m], (h, w), &cfg).unwrap();
        for (i, s) in [1, 2, 4].into_iter().enumerate() {
            let geom = PatchGeom::new(patch, 1).unwrap().scaled(s);
            let want = scatter_fold(&refs[i], &idx, geom, (h, w));
            let d = out[i].data().iter().zip(want.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(d);
        }
    }
    worst
}
