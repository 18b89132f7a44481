//! Patch unfold/gather/fold kernels used by the reference matching stage.
//!
//! Patches are sampled with edge clamping: a patch that hangs over the
//! border of its block repeats the border pixels.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Patch layout over one block: patch `(gy, gx)` starts at
/// `(gy*stride - pad, gx*stride - pad)` and spans `size×size` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    /// Patch grid for odd `size` at the given stride; stride 1 pads so that
    /// every pixel is a patch center, stride == size tiles without overlap.
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 || stride > size || (size - stride) % 2 != 0 {
            return Err(shape_err!("invalid patch geometry size={size} stride={stride}"));
        }
        Ok(Self {
            size,
            stride,
            pad: (size - stride) / 2,
        })
    }

    pub fn scaled(&self, s: usize) -> Self {
        Self {
            size: self.size * s,
            stride: self.stride * s,
            pad: self.pad * s,
        }
    }

    /// Number of patches along an axis of length `len`.
    pub fn grid_len(&self, len: usize) -> Result<usize> {
        let span = len + 2 * self.pad;
        if span < self.size || (span - self.size) % self.stride != 0 {
            return Err(shape_err!(
                "block length {len} incompatible with patch {} stride {}",
                self.size,
                self.stride
            ));
        }
        Ok((span - self.size) / self.stride + 1)
    }

    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.grid_len(h)?, self.grid_len(w)?))
    }

    #[inline]
    pub fn origin(&self, g: usize) -> isize {
        (g * self.stride) as isize - self.pad as isize
    }
}

#[inline]
fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Flattened (channel-major) patch `(gy, gx)` of a `[c, h, w]` block.
pub fn patch_vector<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, geom: &PatchGeom, gy: usize, gx: usize, out: &mut Vec<T>) {
    out.clear();
    let (oy, ox) = (geom.origin(gy), geom.origin(gx));
    for ch in 0..c {
        for dy in 0..geom.size {
            let y = clampi(oy + dy as isize, h);
            let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            for dx in 0..geom.size {
                out.push(row[clampi(ox + dx as isize, w)]);
            }
        }
    }
}

/// Scatter-adds a gradient for [`patch_vector`] back into the block.
pub fn patch_scatter<T: Scalar>(g: &mut [T], c: usize, h: usize, w: usize, geom: &PatchGeom, gy: usize, gx: usize, v: &[T], scale: T) {
    let (oy, ox) = (geom.origin(gy), geom.origin(gx));
    let mut it = v.iter();
    for ch in 0..c {
        for dy in 0..geom.size {
            let y = clampi(oy + dy as isize, h);
            for dx in 0..geom.size {
                let x = clampi(ox + dx as isize, w);
                g[(ch * h + y) * w + x] += *it.next().expect("patch length") * scale;
            }
        }
    }
}

/// Spatial layout shared by gather/fold and its adjoint.
#[derive(Clone, Debug)]
pub struct FoldLayout {
    pub channels: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    pub geom: PatchGeom,
    pub src_grid: (usize, usize),
    pub dst_grid: (usize, usize),
}

impl FoldLayout {
    pub fn new(channels: usize, src: (usize, usize), dst: (usize, usize), geom: PatchGeom) -> Result<Self> {
        Ok(Self {
            channels,
            src_h: src.0,
            src_w: src.1,
            dst_h: dst.0,
            dst_w: dst.1,
            geom,
            src_grid: geom.grid(src.0, src.1)?,
            dst_grid: geom.grid(dst.0, dst.1)?,
        })
    }

    pub fn check_indices(&self, idx: &[usize]) -> Result<()> {
        let (gh, gw) = self.dst_grid;
        let j = self.src_grid.0 * self.src_grid.1;
        if idx.len() != gh * gw {
            return Err(crate::error::Error::CorruptMatch(format!(
                "index map has {} entries, expected {}",
                idx.len(),
                gh * gw
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= j) {
            return Err(crate::error::Error::CorruptMatch(format!(
                "index {bad} outside [0, {})",
                j
            )));
        }
        Ok(())
    }

    /// Per-pixel number of patches covering each destination pixel.
    pub fn counts<T: Scalar>(&self) -> Vec<T> {
        let mut cnt = vec![T::zero(); self.dst_h * self.dst_w];
        let (gh, gw) = self.dst_grid;
        for gy in 0..gh {
            for gx in 0..gw {
                self.for_each_pixel(gy, gx, 0, |_, d| cnt[d] += T::one());
            }
        }
        cnt
    }

    /// Visits the destination pixels covered by slot `(gy, gx)` paired with
    /// their source pixel in patch `j`; offsets are within one channel plane.
    #[inline]
    fn for_each_pixel(&self, gy: usize, gx: usize, j: usize, mut f: impl FnMut(usize, usize)) {
        let g = &self.geom;
        let (jy, jx) = (j / self.src_grid.1, j % self.src_grid.1);
        let (oy, ox) = (g.origin(gy), g.origin(gx));
        let (sy0, sx0) = (g.origin(jy), g.origin(jx));
        for dy in 0..g.size {
            let ty = oy + dy as isize;
            if ty < 0 || ty >= self.dst_h as isize {
                continue;
            }
            let sy = clampi(sy0 + dy as isize, self.src_h);
            for dx in 0..g.size {
                let tx = ox + dx as isize;
                if tx < 0 || tx >= self.dst_w as isize {
                    continue;
                }
                let sx = clampi(sx0 + dx as isize, self.src_w);
                f(sy * self.src_w + sx, ty as usize * self.dst_w + tx as usize);
            }
        }
    }

    /// Places patch `idx[i]` of `src` at slot `i` and averages overlaps.
    pub fn gather_fold<T: Scalar>(&self, src: &[T], idx: &[usize], counts: &[T]) -> Vec<T> {
        let plane_s = self.src_h * self.src_w;
        let plane_d = self.dst_h * self.dst_w;
        let mut out = vec![T::zero(); self.channels * plane_d];
        let (gh, gw) = self.dst_grid;
        for gy in 0..gh {
            for gx in 0..gw {
                let j = idx[gy * gw + gx];
                self.for_each_pixel(gy, gx, j, |s, d| {
                    for c in 0..self.channels {
                        out[c * plane_d + d] += src[c * plane_s + s];
                    }
                });
            }
        }
        for c in 0..self.channels {
            for (v, &n) in out[c * plane_d..(c + 1) * plane_d].iter_mut().zip(counts) {
                if n > T::zero() {
                    *v /= n;
                }
            }
        }
        out
    }

    pub fn gather_fold_adjoint<T: Scalar>(&self, dout: &[T], idx: &[usize], counts: &[T]) -> Vec<T> {
        let plane_s = self.src_h * self.src_w;
        let plane_d = self.dst_h * self.dst_w;
        let mut dsrc = vec![T::zero(); self.channels * plane_s];
        let (gh, gw) = self.dst_grid;
        for gy in 0..gh {
            for gx in 0..gw {
                let j = idx[gy * gw + gx];
                self.for_each_pixel(gy, gx, j, |s, d| {
                    let n = counts[d];
                    for c in 0..self.channels {
                        dsrc[c * plane_s + s] += dout[c * plane_d + d] / n;
                    }
                });
            }
        }
        dsrc
    }
}

/// `p / max(|p|, eps)`, returning the norm used.
pub fn normalize<T: Scalar>(v: &mut [T], eps: T) -> T {
    let n = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt().max(eps);
    v.iter_mut().for_each(|x| *x /= n);
    n
}

/// Eps-guarded cosine similarity clamped to `[-1, 1]`; zero vectors score 0.
pub fn cosine<T: Scalar>(p: &[T], q: &[T], eps: T) -> T {
    let np = p.iter().fold(T::zero(), |a, &x| a + x * x).sqrt().max(eps);
    let nq = q.iter().fold(T::zero(), |a, &x| a + x * x).sqrt().max(eps);
    let dot = p.iter().zip(q).fold(T::zero(), |a, (&x, &y)| a + x * y);
    (dot / (np * nq)).max(-T::one()).min(T::one())
}

/// Gradient of [`cosine`] w.r.t. `p` (swap arguments for `q`).
pub fn cosine_grad<T: Scalar>(p: &[T], q: &[T], eps: T, out: &mut Vec<T>) {
    let np_raw = p.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    let np = np_raw.max(eps);
    let nq = q.iter().fold(T::zero(), |a, &x| a + x * x).sqrt().max(eps);
    let dot = p.iter().zip(q).fold(T::zero(), |a, (&x, &y)| a + x * y);
    let r = dot / (np * nq);
    out.clear();
    if r > T::one() || r < -T::one() {
        out.resize(p.len(), T::zero());
        return;
    }
    let guarded = np_raw <= eps;
    for (&x, &y) in p.iter().zip(q) {
        let mut g = y / (np * nq);
        if !guarded {
            g -= r * x / (np * np);
        }
        out.push(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_grids() {
        let g = PatchGeom::new(3, 1).unwrap();
        assert_eq!(g.pad, 1);
        assert_eq!(g.grid(8, 8).unwrap(), (8, 8));
        let t = PatchGeom::new(3, 3).unwrap();
        assert_eq!(t.grid(9, 6).unwrap(), (3, 2));
        assert!(t.grid(8, 8).is_err());
        assert!(PatchGeom::new(3, 2).is_err());
        assert_eq!(g.scaled(2), PatchGeom { size: 6, stride: 2, pad: 2 });
        assert_eq!(g.scaled(2).grid(16, 16).unwrap(), (8, 8));
    }

    #[test]
    fn stride_one_identity_fold_covers_everything() {
        let geom = PatchGeom::new(3, 1).unwrap();
        let lay = FoldLayout::new(2, (4, 5), (4, 5), geom).unwrap();
        let counts: Vec<f64> = lay.counts();
        assert!(counts.iter().all(|&c| c > 0.0));
        assert_eq!(counts[0], 4.0);
        assert_eq!(counts[6], 9.0);
        let src: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let idx: Vec<usize> = (0..20).collect();
        let out = lay.gather_fold(&src, &idx, &counts);
        for (a, b) in out.iter().zip(&src) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0], 1e-12) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[3.0, 1.0], 1e-12), 0.0);
        let p = [0.3, -1.2, 2.0];
        assert!((cosine(&p, &p, 1e-12) - 1.0f64).abs() < 1e-15);
    }
}
