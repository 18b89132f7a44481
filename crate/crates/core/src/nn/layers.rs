use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::profile::{LayerKind, LayerStat, Profile};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Square-kernel convolution with "same"-style padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_gain(store, name, (cin, cout), k, stride, 1.0, rng)
    }

    pub fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_he(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, gain, rng);
        let b = Some(store.add(format!("{name}.bias"), crate::Tensor::zeros(&[cout])));
        Self {
            name: name.to_string(),
            w,
            b,
            cin,
            cout,
            k,
            stride,
        }
    }

    /// Bias-free 1×1 map, a linear transform on `[cin, 1, 1]` vectors.
    pub fn linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, (cin, cout): (usize, usize), rng: &mut impl Rng) -> Self {
        let w = store.add_he(format!("{name}.weight"), &[cout, cin, 1, 1], cin, 1.0, rng);
        Self {
            name: name.to_string(),
            w,
            b: None,
            cin,
            cout,
            k: 1,
            stride: 1,
        }
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.pad())
    }

    pub fn out_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }

    pub fn params(&self) -> u64 {
        (self.cout * self.cin * self.k * self.k + if self.b.is_some() { self.cout } else { 0 }) as u64
    }

    pub fn profile(&self, prof: &mut Profile, hw: (usize, usize)) -> (usize, usize) {
        let out = self.out_hw(hw);
        let kind = if self.k == 1 && hw == (1, 1) { LayerKind::Linear } else { LayerKind::Conv2d };
        prof.push(LayerStat {
            name: self.name.clone(),
            kind,
            params: self.params(),
            macs: (self.cout * self.cin * self.k * self.k * out.0 * out.1) as u64,
            in_hw: hw,
            out_hw: out,
        });
        out
    }
}

/// 3×3 transposed convolution; stride 2 doubles the grid, stride 1 keeps it.
#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvT2d {
    pub const K: usize = 3;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, (cin, cout): (usize, usize), stride: usize, rng: &mut impl Rng) -> Self {
        assert!(stride == 1 || stride == 2, "deconv stride must be 1 or 2");
        // Each output pixel receives about cin * k^2 / stride^2 taps.
        let fan_in = (cin * Self::K * Self::K / (stride * stride)).max(1);
        let w = store.add_he(format!("{name}.weight"), &[cin, cout, Self::K, Self::K], fan_in, 1.0, rng);
        let b = store.add(format!("{name}.bias"), crate::Tensor::zeros(&[cout]));
        Self {
            name: name.to_string(),
            w,
            b,
            cin,
            cout,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let out_pad = self.stride - 1;
        g.conv_t2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, 1, out_pad)
    }

    pub fn params(&self) -> u64 {
        (self.cin * self.cout * Self::K * Self::K + self.cout) as u64
    }

    pub fn profile(&self, prof: &mut Profile, (h, w): (usize, usize)) -> (usize, usize) {
        let out = (h * self.stride, w * self.stride);
        prof.push(LayerStat {
            name: self.name.clone(),
            kind: LayerKind::ConvTranspose2d,
            params: self.params(),
            macs: (self.cin * self.cout * Self::K * Self::K * h * w) as u64,
            in_hw: (h, w),
            out_hw: out,
        });
        out
    }
}

/// `x + conv(relu(conv(x)))`, no normalization.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), (c, c), 3, 1, rng),
            // Small residual branch at init keeps deep stacks near identity.
            c2: Conv2d::with_gain(store, &format!("{name}.conv2"), (c, c), 3, 1, 0.1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.c2.forward(g, p, h)?;
        g.add(x, h)
    }

    pub fn params(&self) -> u64 {
        self.c1.params() + self.c2.params()
    }

    pub fn profile(&self, prof: &mut Profile, hw: (usize, usize)) -> (usize, usize) {
        let hw = self.c1.profile(prof, hw);
        self.c2.profile(prof, hw)
    }
}
