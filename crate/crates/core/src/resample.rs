//! Separable interpolation kernels: bicubic (a = -0.5) and bilinear.
//!
//! A [`ResizePlan`] is a pair of sparse 1-D weight tables, so the same plan
//! serves the forward resize and, transposed, its gradient.

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BICUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Bicubic,
    Bilinear,
}

impl Kernel {
    fn support(self) -> f64 {
        match self {
            Kernel::Bicubic => 2.0,
            Kernel::Bilinear => 1.0,
        }
    }

    pub fn weight(self, x: f64) -> f64 {
        let t = x.abs();
        match self {
            Kernel::Bicubic => {
                let a = BICUBIC_A;
                if t <= 1.0 {
                    ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
                } else if t < 2.0 {
                    ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
                } else {
                    0.0
                }
            }
            Kernel::Bilinear => (1.0 - t).max(0.0),
        }
    }
}

/// One output sample: `(source index, weight)` taps.
type Taps<T> = Vec<(usize, T)>;

fn axis_taps<T: Scalar>(n_in: usize, n_out: usize, kernel: Kernel, antialias: bool) -> Vec<Taps<T>> {
    let scale = n_out as f64 / n_in as f64;
    // Widen the kernel when shrinking so every input sample contributes.
    let stretch = if antialias && scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = kernel.support() * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let w = kernel.weight((i as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                total += w;
                let src = i.clamp(0, n_in as i64 - 1) as usize;
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += w,
                    None => taps.push((src, w)),
                }
            }
            let mut taps: Taps<T> = taps.into_iter().map(|(s, w)| (s, T::of(w / total))).collect();
            make_partition_of_unity(&mut taps);
            taps
        })
        .collect()
}

/// Adjusts the last weight so the left-to-right float sum is exactly one;
/// constant inputs then come out bit-identical.
fn make_partition_of_unity<T: Scalar>(taps: &mut Taps<T>) {
    let Some(last) = taps.len().checked_sub(1) else { return };
    let head = taps[..last].iter().fold(T::zero(), |a, t| a + t.1);
    let mut w = T::one() - head;
    for _ in 0..8 {
        let s = head + w;
        if s == T::one() {
            break;
        }
        w = w + (T::one() - s);
    }
    taps[last].1 = w;
}

/// Precomputed separable resize from `(h_in, w_in)` to `(h_out, w_out)`.
#[derive(Clone, Debug)]
pub struct ResizePlan<T> {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    rows: Vec<Taps<T>>,
    cols: Vec<Taps<T>>,
    identity: bool,
}

impl<T: Scalar> ResizePlan<T> {
    pub fn new(
        (h_in, w_in): (usize, usize),
        (h_out, w_out): (usize, usize),
        kernel: Kernel,
        antialias: bool,
    ) -> Self {
        let identity = h_in == h_out && w_in == w_out;
        Self {
            h_in,
            w_in,
            h_out,
            w_out,
            rows: axis_taps(h_in, h_out, kernel, antialias),
            cols: axis_taps(w_in, w_out, kernel, antialias),
            identity,
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        if (h, w) != (self.h_in, self.w_in) {
            return Err(Error::Shape(format!(
                "resize plan expects {}x{}, got {h}x{w}",
                self.h_in, self.w_in
            )));
        }
        if self.identity {
            return Ok(x.clone());
        }
        let src = x.data();
        let mut tmp = vec![T::zero(); c * h * self.w_out];
        for ch in 0..c {
            for y in 0..h {
                let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = &mut tmp[(ch * h + y) * self.w_out..(ch * h + y + 1) * self.w_out];
                for (d, taps) in dst.iter_mut().zip(&self.cols) {
                    *d = taps.iter().fold(T::zero(), |acc, &(s, wt)| acc + row[s] * wt);
                }
            }
        }
        let mut out = vec![T::zero(); c * self.h_out * self.w_out];
        for ch in 0..c {
            for (oy, taps) in self.rows.iter().enumerate() {
                let dst = &mut out[(ch * self.h_out + oy) * self.w_out..(ch * self.h_out + oy + 1) * self.w_out];
                for &(sy, wt) in taps {
                    let srow = &tmp[(ch * h + sy) * self.w_out..(ch * h + sy + 1) * self.w_out];
                    for (d, &s) in dst.iter_mut().zip(srow) {
                        *d += s * wt;
                    }
                }
            }
        }
        Tensor::new(&[c, self.h_out, self.w_out], out)
    }

    /// Adjoint of [`apply`](Self::apply): maps an output-space gradient back
    /// to the input grid.
    pub fn apply_transpose(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = g.chw()?;
        if (h, w) != (self.h_out, self.w_out) {
            return Err(Error::Shape(format!(
                "resize adjoint expects {}x{}, got {h}x{w}",
                self.h_out, self.w_out
            )));
        }
        if self.identity {
            return Ok(g.clone());
        }
        let gd = g.data();
        let mut tmp = vec![T::zero(); c * self.h_in * self.w_out];
        for ch in 0..c {
            for (oy, taps) in self.rows.iter().enumerate() {
                let grow = &gd[(ch * h + oy) * w..(ch * h + oy + 1) * w];
                for &(sy, wt) in taps {
                    let drow = &mut tmp[(ch * self.h_in + sy) * w..(ch * self.h_in + sy + 1) * w];
                    for (d, &s) in drow.iter_mut().zip(grow) {
                        *d += s * wt;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); c * self.h_in * self.w_in];
        for ch in 0..c {
            for y in 0..self.h_in {
                let trow = &tmp[(ch * self.h_in + y) * w..(ch * self.h_in + y + 1) * w];
                let drow = &mut out[(ch * self.h_in + y) * self.w_in..(ch * self.h_in + y + 1) * self.w_in];
                for (ox, taps) in self.cols.iter().enumerate() {
                    for &(sx, wt) in taps {
                        drow[sx] += trow[ox] * wt;
                    }
                }
            }
        }
        Tensor::new(&[c, self.h_in, self.w_in], out)
    }
}

/// Target dims for `scale` applied to `(h, w)`; both must come out integral.
pub fn scaled_dims(h: usize, w: usize, scale: Ratio<u32>) -> Result<(usize, usize)> {
    let (num, den) = (*scale.numer() as usize, *scale.denom() as usize);
    if num == 0 {
        return Err(Error::InvalidScale("scale must be positive".into()));
    }
    if (h * num) % den != 0 || (w * num) % den != 0 {
        return Err(Error::InvalidScale(format!(
            "{h}x{w} scaled by {num}/{den} is not integral"
        )));
    }
    Ok((h * num / den, w * num / den))
}

/// Bicubic resampling; images are clipped to `[0, 1]` when `clip` is set
/// (score maps use the unclipped form).
pub fn bicubic_resample<T: Scalar>(img: &Tensor<T>, scale: Ratio<u32>, clip: bool) -> Result<Tensor<T>> {
    let (_, h, w) = img.chw()?;
    let dims = scaled_dims(h, w, scale)?;
    if dims == (h, w) {
        return Ok(img.clone());
    }
    let out = ResizePlan::new((h, w), dims, Kernel::Bicubic, true).apply(img)?;
    Ok(if clip { out.clamp(T::zero(), T::one()) } else { out })
}

/// Bilinear resize to an explicit size (half-pixel centers, no antialiasing).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, h_out: usize, w_out: usize) -> Result<Tensor<T>> {
    let (_, h, w) = x.chw()?;
    ResizePlan::new((h, w), (h_out, w_out), Kernel::Bilinear, false).apply(x)
}
