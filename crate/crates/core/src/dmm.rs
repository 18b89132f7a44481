//! Depth matching: depth encoder, depth/image feature fusion and the
//! block-wise reference matcher.
//!
//! Matching runs on the LR grid. Each `dy×dx` block of the fused LR
//! features is first located in the fused downsampled-reference features by
//! its center patch, then matched patch-by-patch inside the located block.
//! Indices are chosen on plain values (they carry no gradient); the scores
//! and the gathered reference features stay on the tape.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::patch::{cosine, patch_vector, PatchGeom};
use crate::autograd::{Graph, Var};
use crate::backbone::{Encoder, EncoderConfig, Pyramid};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, ConvT2d, ParamStore, Profile};
use crate::resample::{Kernel, ResizePlan};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Reference gathering scales.
pub const SCALES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub patch: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub stride: usize,
    pub eps: f64,
    pub coarse_search_stride: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            patch: 3,
            block_h: 8,
            block_w: 8,
            stride: 1,
            eps: 1e-12,
            coarse_search_stride: 1,
        }
    }
}

impl MatchConfig {
    pub fn geom(&self) -> Result<PatchGeom> {
        if self.patch % 2 == 0 {
            return Err(shape_err!("patch size {} must be odd", self.patch));
        }
        PatchGeom::new(self.patch, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geom()?;
        geom.grid(self.block_h, self.block_w)?;
        if !(self.eps > 0.0) || self.coarse_search_stride == 0 {
            return Err(Error::Config("match eps and coarse_search_stride must be positive".into()));
        }
        Ok(())
    }

    /// Errors unless the blocks tile an `h×w` grid.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if h % self.block_h != 0 || w % self.block_w != 0 {
            return Err(shape_err!(
                "{}x{} blocks do not tile the {h}x{w} matching grid",
                self.block_h,
                self.block_w
            ));
        }
        Ok((h / self.block_h, w / self.block_w))
    }
}

/// Eps-guarded cosine of two equal-length vectors.
pub fn normalized_cosine<T: Scalar>(p: &[T], q: &[T], eps: T) -> Result<T> {
    if p.len() != q.len() {
        return Err(shape_err!("cosine of vectors of length {} and {}", p.len(), q.len()));
    }
    Ok(cosine(p, q, eps))
}

/// Row-normalized copies of `vecs` stacked as an `n×d` matrix.
fn normalized_rows<T: Scalar>(vecs: &[Vec<T>], eps: T) -> Vec<T> {
    let mut out = Vec::with_capacity(vecs.iter().map(Vec::len).sum());
    for v in vecs {
        let n = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt().max(eps);
        out.extend(v.iter().map(|&x| x / n));
    }
    out
}

/// For each query, the best-scoring candidate (lowest index on ties) and
/// its cosine.
pub fn match_patches<T: Scalar>(queries: &[Vec<T>], candidates: &[Vec<T>], eps: T) -> Result<(Vec<usize>, Vec<T>)> {
    let d = queries.first().map_or(0, Vec::len);
    if candidates.is_empty() || queries.iter().chain(candidates).any(|v| v.len() != d) {
        return Err(shape_err!("patch sets must be nonempty and of equal length"));
    }
    let (i, j) = (queries.len(), candidates.len());
    let qm = normalized_rows(queries, eps);
    let cm = normalized_rows(candidates, eps);
    let mut scores = vec![T::zero(); i * j];
    matmul(i, d, j, &qm, false, &cm, true, &mut scores, false);
    let mut idx = Vec::with_capacity(i);
    let mut best = Vec::with_capacity(i);
    for (q, row) in queries.iter().zip(scores.chunks_exact(j)) {
        let mut arg = 0;
        for (n, &s) in row.iter().enumerate() {
            if s > row[arg] {
                arg = n;
            }
        }
        idx.push(arg);
        best.push(cosine(q, &candidates[arg], eps));
    }
    Ok((idx, best))
}

fn unfold<T: Scalar>(x: &Tensor<T>, geom: &PatchGeom) -> Result<(Vec<Vec<T>>, (usize, usize))> {
    let (c, h, w) = x.chw()?;
    let (gh, gw) = geom.grid(h, w)?;
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut v = Vec::new();
            patch_vector(x.data(), c, h, w, geom, gy, gx, &mut v);
            out.push(v);
        }
    }
    Ok((out, (gh, gw)))
}

/// Edge-clamped `size×size` patch centered on `(cy, cx)`.
fn centered_patch<T: Scalar>(x: &Tensor<T>, size: usize, cy: usize, cx: usize) -> Vec<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let r = (size / 2) as isize;
    let mut v = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for dy in -r..=r {
            let y = (cy as isize + dy).clamp(0, h as isize - 1) as usize;
            for dx in -r..=r {
                let xx = (cx as isize + dx).clamp(0, w as isize - 1) as usize;
                v.push(x.at(ch, y, xx));
            }
        }
    }
    v
}

/// Where block `k` of the LR grid was found in the reference grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLocation {
    pub k: usize,
    /// Top-left of the LR block.
    pub lr_origin: (usize, usize),
    /// Top-left of the selected reference block (same grid).
    pub ref_origin: (usize, usize),
    /// Linear index of the best center on the coarse search grid.
    pub coarse_index: usize,
}

/// Locates every block of `f_lr` in `f_ref_down` by its center patch.
pub fn coarse_locate<T: Scalar>(f_lr: &Tensor<T>, f_ref_down: &Tensor<T>, cfg: &MatchConfig) -> Result<Vec<BlockLocation>> {
    let (c, h, w) = f_lr.chw()?;
    if f_ref_down.chw()? != (c, h, w) {
        return Err(shape_err!("coarse matching needs equal grids, got {:?} and {:?}", f_lr.shape(), f_ref_down.shape()));
    }
    let (kh, kw) = cfg.check_grid(h, w)?;
    let (dy, dx, cs) = (cfg.block_h, cfg.block_w, cfg.coarse_search_stride);
    let ys: Vec<usize> = (0..h).step_by(cs).collect();
    let xs: Vec<usize> = (0..w).step_by(cs).collect();
    let candidates: Vec<Vec<T>> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .map(|(y, x)| centered_patch(f_ref_down, cfg.patch, y, x))
        .collect();
    let queries: Vec<Vec<T>> = (0..kh * kw)
        .map(|k| centered_patch(f_lr, cfg.patch, (k / kw) * dy + dy / 2, (k % kw) * dx + dx / 2))
        .collect();
    let (idx, _) = match_patches(&queries, &candidates, T::of(cfg.eps))?;
    Ok(idx
        .into_iter()
        .enumerate()
        .map(|(k, j)| {
            let (cy, cx) = (ys[j / xs.len()], xs[j % xs.len()]);
            BlockLocation {
                k,
                lr_origin: ((k / kw) * dy, (k % kw) * dx),
                ref_origin: (cy.saturating_sub(dy / 2).min(h - dy), cx.saturating_sub(dx / 2).min(w - dx)),
                coarse_index: j,
            }
        })
        .collect())
}

/// LR block, located reference block, and the co-located reference crops
/// at each gathering scale.
#[derive(Clone, Debug)]
pub struct BlockTriple<T> {
    pub location: BlockLocation,
    pub lr: Tensor<T>,
    pub ref_down: Tensor<T>,
    pub reference: [Tensor<T>; 3],
}

/// `reference` holds the reference features at 1×, 2× and 4× of the
/// matching grid.
pub fn coarse_block_select<T: Scalar>(
    f_lr: &Tensor<T>,
    f_ref_down: &Tensor<T>,
    reference: [&Tensor<T>; 3],
    cfg: &MatchConfig,
) -> Result<Vec<BlockTriple<T>>> {
    let (_, h, w) = f_lr.chw()?;
    check_reference_levels(reference.map(|t| t.shape()), h, w)?;
    let (dy, dx) = (cfg.block_h, cfg.block_w);
    coarse_locate(f_lr, f_ref_down, cfg)?
        .into_iter()
        .map(|loc| {
            let (ly, lx) = loc.lr_origin;
            let (ry, rx) = loc.ref_origin;
            let crops = [0, 1, 2].map(|i| {
                let s = SCALES[i];
                reference[i].crop(s * ry, s * rx, s * dy, s * dx)
            });
            let [a, b, c] = crops;
            Ok(BlockTriple {
                lr: f_lr.crop(ly, lx, dy, dx)?,
                ref_down: f_ref_down.crop(ry, rx, dy, dx)?,
                reference: [a?, b?, c?],
                location: loc,
            })
        })
        .collect()
}

fn check_reference_levels(shapes: [&[usize]; 3], h: usize, w: usize) -> Result<()> {
    for (i, sh) in shapes.iter().enumerate() {
        let s = SCALES[i];
        if sh.len() != 3 || sh[1] != s * h || sh[2] != s * w {
            return Err(shape_err!("reference level x{s} is {sh:?}, expected {}x{}", s * h, s * w));
        }
    }
    Ok(())
}

/// Per-block index map `N` and score map `R` on the block's patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineMatch<T> {
    pub grid: (usize, usize),
    pub index: Vec<usize>,
    pub score: Vec<T>,
}

pub fn fine_match<T: Scalar>(b_lr: &Tensor<T>, b_ref_down: &Tensor<T>, cfg: &MatchConfig) -> Result<FineMatch<T>> {
    if b_lr.chw()? != b_ref_down.chw()? {
        return Err(shape_err!("fine matching needs equal blocks, got {:?} and {:?}", b_lr.shape(), b_ref_down.shape()));
    }
    let geom = cfg.geom()?;
    let (queries, grid) = unfold(b_lr, &geom)?;
    let (candidates, _) = unfold(b_ref_down, &geom)?;
    let (index, score) = match_patches(&queries, &candidates, T::of(cfg.eps))?;
    Ok(FineMatch { grid, index, score })
}

/// Gathers, weights and folds one block at scale `s`.
fn weighted_fold_block<T: Scalar>(
    g: &mut Graph<T>,
    ref_block: Var,
    idx: &Rc<Vec<usize>>,
    r: Var,
    s: usize,
    geom: PatchGeom,
) -> Result<Var> {
    let (_, bh, bw) = g.value(ref_block).chw()?;
    let gathered = g.gather_fold(ref_block, idx.clone(), (bh, bw), geom.scaled(s))?;
    let (_, gh, gw) = g.value(r).chw()?;
    let plan = Rc::new(ResizePlan::new((gh, gw), (bh, bw), Kernel::Bicubic, false));
    let r_up = g.resize(r, plan)?;
    g.mul_plane(gathered, r_up)
}

/// Folds matched reference blocks into full maps at 1×, 2× and 4× of the
/// `h×w` grid. `blocks[k]` holds the three reference crops of block `k`,
/// `scores[k]` its `[1, gh, gw]` score map.
fn fold_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    locations: &[BlockLocation],
    blocks: &[[Var; 3]],
    indices: &[Rc<Vec<usize>>],
    scores: &[Var],
    (h, w): (usize, usize),
    cfg: &MatchConfig,
) -> Result<[Var; 3]> {
    let geom = cfg.geom()?;
    let mut out = Vec::with_capacity(3);
    for (i, &s) in SCALES.iter().enumerate() {
        let mut placed = Vec::with_capacity(locations.len());
        for (k, loc) in locations.iter().enumerate() {
            let wb = weighted_fold_block(g, blocks[k][i], &indices[k], scores[k], s, geom)?;
            placed.push((wb, s * loc.lr_origin.0, s * loc.lr_origin.1));
        }
        out.push(g.place_blocks(&placed, s * h, s * w)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Value-level gather, weight and fold: the matched reference pyramid for
/// the given blocks and matches (scores taken as given).
pub fn gather_weight_fold<T: Scalar>(
    triples: &[BlockTriple<T>],
    matches: &[FineMatch<T>],
    grid: (usize, usize),
    cfg: &MatchConfig,
) -> Result<[Tensor<T>; 3]> {
    if triples.len() != matches.len() {
        return Err(Error::CorruptMatch(format!("{} blocks but {} matches", triples.len(), matches.len())));
    }
    let mut g = Graph::new();
    let mut blocks = Vec::new();
    let mut indices = Vec::new();
    let mut scores = Vec::new();
    for (t, m) in triples.iter().zip(matches) {
        blocks.push(t.reference.clone().map(|r| g.constant(r)));
        indices.push(Rc::new(m.index.clone()));
        scores.push(g.constant(Tensor::new(&[1, m.grid.0, m.grid.1], m.score.clone())?));
    }
    let locs: Vec<BlockLocation> = triples.iter().map(|t| t.location.clone()).collect();
    let out = fold_pyramid(&mut g, &locs, &blocks, &indices, &scores, grid, cfg)?;
    Ok(out.map(|v| g.value(v).clone()))
}

/// Depth encoder pass; the input must be a single-channel map.
pub fn depth_encode<T: Scalar>(enc: &Encoder, g: &mut Graph<T>, p: &Bound, d: Var) -> Result<Pyramid> {
    let c = g.value(d).chw()?.0;
    if c != 1 {
        return Err(shape_err!("depth encoder expects 1 channel, got {c}"));
    }
    enc.forward(g, p, d)
}

/// `concat → conv3×3 → ReLU → deconv3×3 → ReLU`.
#[derive(Clone, Debug)]
pub struct FusionSet {
    pub conv: Conv2d,
    pub deconv: ConvT2d,
}

impl FusionSet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, (cin, c): (usize, usize), stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), (cin, c), 3, 1, rng),
            deconv: ConvT2d::new(store, &format!("{name}.deconv"), (c, c), stride, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, parts: &[Var]) -> Result<Var> {
        let hw = &g.shape(parts[0])[1..];
        if parts.iter().any(|&v| &g.shape(v)[1..] != hw) {
            let shapes: Vec<_> = parts.iter().map(|&v| g.shape(v).to_vec()).collect();
            return Err(shape_err!("fusion inputs on different grids: {shapes:?}"));
        }
        let x = g.concat(parts)?;
        let x = self.conv.forward(g, p, x)?;
        let x = g.relu(x);
        let x = self.deconv.forward(g, p, x)?;
        Ok(g.relu(x))
    }

    pub fn profile(&self, prof: &mut Profile, hw: (usize, usize)) -> (usize, usize) {
        let hw = self.conv.profile(prof, hw);
        self.deconv.profile(prof, hw)
    }
}

/// Fuses `d_feat` into `f_feat` with one fusion set.
pub fn fuse<T: Scalar>(set: &FusionSet, g: &mut Graph<T>, p: &Bound, d_feat: Var, f_feat: Var) -> Result<Var> {
    set.forward(g, p, &[f_feat, d_feat])
}

/// Matching inputs, all on one tape.
#[derive(Clone, Copy, Debug)]
pub struct DmmInputs {
    pub lr: Pyramid,
    pub ref_down: Pyramid,
    pub reference: Pyramid,
    pub depth_lr: Var,
    pub depth_ref_down: Var,
}

/// Match diagnostics for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub location: BlockLocation,
    pub grid: (usize, usize),
    pub index: Vec<usize>,
    pub score: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DmmOutput {
    pub fused_lr: Var,
    pub fused_ref_down: Var,
    /// Aligned reference features at 1×, 2×, 4× of the LR grid.
    pub matched: [Var; 3],
    pub depth_lr: Pyramid,
    pub depth_ref_down: Pyramid,
    pub blocks: Vec<BlockRecord>,
}

/// Depth encoder, 1×1 channel adjustment and the three-set fusion cascade.
/// The last set keeps the grid (stride-1 deconv) so the fused maps land on
/// the LR grid.
#[derive(Clone, Debug)]
pub struct Dmm {
    pub depth_encoder: Encoder,
    adjust: [Conv2d; 3],
    fusion: [FusionSet; 3],
    pub cfg: MatchConfig,
}

impl Dmm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, enc: &EncoderConfig, cfg: &MatchConfig, rng: &mut impl Rng) -> Self {
        let c = enc.base_channels;
        let depth_encoder = Encoder::new(store, &format!("{name}.depth_encoder"), 1, enc, rng);
        let adjust = [1, 2, 4].map(|s| Conv2d::new(store, &format!("{name}.adjust{s}"), (c, c), 1, 1, rng));
        let fusion = [
            FusionSet::new(store, &format!("{name}.fuse1"), (2 * c, c), 2, rng),
            FusionSet::new(store, &format!("{name}.fuse2"), (3 * c, c), 2, rng),
            FusionSet::new(store, &format!("{name}.fuse3"), (3 * c, c), 1, rng),
        ];
        Self {
            depth_encoder,
            adjust,
            fusion,
            cfg: cfg.clone(),
        }
    }

    /// Fused features of one image from its pyramid and depth pyramid.
    pub fn fuse_cascade<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f: &Pyramid, d: &Pyramid) -> Result<Var> {
        let a1 = self.adjust[0].forward(g, p, f.f1)?;
        let x = fuse(&self.fusion[0], g, p, d.f1, a1)?;
        let a2 = self.adjust[1].forward(g, p, f.f2)?;
        let x = self.fusion[1].forward(g, p, &[a2, d.f2, x])?;
        let a4 = self.adjust[2].forward(g, p, f.f4)?;
        self.fusion[2].forward(g, p, &[a4, d.f4, x])
    }

    /// Full module. With `frozen` (one index map per block, as returned in
    /// a previous [`DmmOutput`]) the block locations and patch indices are
    /// reused instead of searched.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: &DmmInputs, frozen: Option<&[BlockRecord]>) -> Result<DmmOutput> {
        let depth_lr = depth_encode(&self.depth_encoder, g, p, x.depth_lr)?;
        let depth_ref_down = depth_encode(&self.depth_encoder, g, p, x.depth_ref_down)?;
        let fused_lr = self.fuse_cascade(g, p, &x.lr, &depth_lr)?;
        let fused_ref_down = self.fuse_cascade(g, p, &x.ref_down, &depth_ref_down)?;
        let (_, h, w) = g.value(fused_lr).chw()?;
        check_reference_levels([1, 2, 4].map(|s| g.shape(x.reference.level(s))), h, w)?;
        let locations = match frozen {
            Some(f) => f.iter().map(|b| b.location.clone()).collect(),
            None => coarse_locate(g.value(fused_lr), g.value(fused_ref_down), &self.cfg)?,
        };
        let (dy, dx) = (self.cfg.block_h, self.cfg.block_w);
        let geom = self.cfg.geom()?;
        let eps = T::of(self.cfg.eps);
        let mut blocks = Vec::with_capacity(locations.len());
        let mut indices = Vec::with_capacity(locations.len());
        let mut scores = Vec::with_capacity(locations.len());
        let mut records = Vec::with_capacity(locations.len());
        for (k, loc) in locations.iter().enumerate() {
            let b_lr = g.crop(fused_lr, loc.lr_origin.0, loc.lr_origin.1, dy, dx)?;
            let b_rd = g.crop(fused_ref_down, loc.ref_origin.0, loc.ref_origin.1, dy, dx)?;
            let (index, grid) = match frozen {
                Some(f) => (f[k].index.clone(), f[k].grid),
                None => {
                    let m = fine_match(g.value(b_lr), g.value(b_rd), &self.cfg)?;
                    (m.index, m.grid)
                }
            };
            let index = Rc::new(index);
            let r = g.patch_cosine(b_lr, b_rd, index.clone(), geom, eps)?;
            let (ry, rx) = loc.ref_origin;
            let mut crops = [b_lr; 3];
            for (i, &s) in SCALES.iter().enumerate() {
                crops[i] = g.crop(x.reference.level(s), s * ry, s * rx, s * dy, s * dx)?;
            }
            records.push(BlockRecord {
                location: loc.clone(),
                grid,
                index: index.to_vec(),
                score: g.value(r).data().iter().map(|v| v.as_f64()).collect(),
            });
            blocks.push(crops);
            indices.push(index);
            scores.push(r);
        }
        let matched = fold_pyramid(g, &locations, &blocks, &indices, &scores, (h, w), &self.cfg)?;
        Ok(DmmOutput {
            fused_lr,
            fused_ref_down,
            matched,
            depth_lr,
            depth_ref_down,
            blocks: records,
        })
    }

    /// Static layer walk for an LR grid of `hw` (both depth maps and both
    /// fusion passes included).
    pub fn profile(&self, prof: &mut Profile, (h, w): (usize, usize)) {
        for _ in 0..2 {
            self.depth_encoder.profile(prof, (h, w));
            let levels = [(h / 4, w / 4), (h / 2, w / 2), (h, w)];
            for (a, &hw) in self.adjust.iter().zip(&levels) {
                a.profile(prof, hw);
            }
            for (f, &hw) in self.fusion.iter().zip(&levels) {
                f.profile(prof, hw);
            }
        }
    }
}

/// Writes one `match_k{K}.json` per block into `dir`.
pub fn dump_matches(blocks: &[BlockRecord], dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for b in blocks {
        let path = dir.join(format!("match_k{}.json", b.location.k));
        std::fs::write(&path, serde_json::to_vec_pretty(b)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hand_values() {
        let r = normalized_cosine(&[1.0f64, 0.0], &[1.0, 1.0], 1e-12).unwrap();
        assert!((r - 0.70711).abs() < 1e-5);
        assert_eq!(normalized_cosine(&[0.0f64, 0.0], &[2.0, -1.0], 1e-12).unwrap(), 0.0);
        assert!(matches!(normalized_cosine(&[1.0f64], &[1.0, 2.0], 1e-12), Err(Error::Shape(_))));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let q = vec![vec![1.0f64, 0.0]];
        let c = vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        let (idx, score) = match_patches(&q, &c, 1e-12).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(score, vec![1.0]);
    }

    #[test]
    fn grid_must_tile() {
        let cfg = MatchConfig::default();
        assert!(cfg.check_grid(16, 24).is_ok());
        assert!(matches!(cfg.check_grid(12, 16), Err(Error::Shape(_))));
    }
}
