//! Cylindrical pipe scenes and a small ray caster.
//!
//! World frame: the pipe axis is +z, the cross-section is the xy plane.
//! Camera frame: x right, y down, z forward; yaw turns about the camera's
//! y axis, pitch about its x axis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// `(x, y)` offset from the axis and `z` along it, meters.
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraPose {
    pub fn on_axis(z: f64) -> Self {
        Self {
            position: [0.0, 0.0, z],
            yaw: 0.0,
            pitch: 0.0,
        }
    }

    pub fn advanced(&self, dz: f64) -> Self {
        let mut p = *self;
        p.position[2] += dz;
        p
    }

    fn radial(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }

    /// Camera-frame direction rotated into the world frame.
    fn to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        // pitch about x, then yaw about y
        let y1 = cp * d[1] - sp * d[2];
        let z1 = sp * d[1] + cp * d[2];
        [cy * d[0] + sy * z1, y1, -sy * d[0] + cy * z1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecalKind {
    Crack,
    Stain,
    Deposit,
    Root,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decal {
    pub kind: DecalKind,
    /// Axial center, meters.
    pub axial: f64,
    /// Angular center, radians.
    pub angle: f64,
    /// Angular half-width, radians.
    pub extent: f64,
    /// Axial half-length, meters.
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub pipe_radius: f64,
    pub camera: CameraPose,
    /// Horizontal field of view, radians.
    pub hfov: f64,
    pub texture_seed: u64,
    pub decals: Vec<Decal>,
    pub far_clip: f64,
    pub joint_spacing: f64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if !(self.pipe_radius.is_finite() && self.pipe_radius > 0.0) {
            return bad(format!("pipe radius {} must be positive", self.pipe_radius));
        }
        if !(self.far_clip > self.pipe_radius) {
            return bad(format!("far clip {} must exceed the radius {}", self.far_clip, self.pipe_radius));
        }
        if !(self.camera.radial() < self.pipe_radius) {
            return bad(format!(
                "camera at radial distance {} is not inside a pipe of radius {}",
                self.camera.radial(),
                self.pipe_radius
            ));
        }
        if !(self.hfov > 0.0 && self.hfov < PI) {
            return bad(format!("field of view {} out of (0, pi)", self.hfov));
        }
        if !(self.joint_spacing > 0.0) {
            return bad("joint spacing must be positive".into());
        }
        Ok(())
    }
}

/// Parameter `t` of the first hit of `o + t d` (t > 0) with the pipe wall,
/// or `None` for rays parallel to the axis.
pub fn ray_cylinder(radius: f64, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let a = d[0] * d[0] + d[1] * d[1];
    if a < 1e-18 {
        return None;
    }
    let b = 2.0 * (o[0] * d[0] + o[1] * d[1]);
    let c = o[0] * o[0] + o[1] * o[1] - radius * radius;
    // c < 0 inside the pipe, so exactly one root is positive.
    let disc = (b * b - 4.0 * a * c).max(0.0);
    Some((-b + disc.sqrt()) / (2.0 * a))
}

struct Camera<'a> {
    pose: &'a CameraPose,
    focal: f64,
    cx: f64,
    cy: f64,
}

impl<'a> Camera<'a> {
    fn new(params: &'a SceneParams, width: usize, height: usize) -> Self {
        Self {
            pose: &params.camera,
            focal: width as f64 / 2.0 / (params.hfov / 2.0).tan(),
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// World direction with unit camera-z component, so the hit parameter
    /// is the z-depth.
    fn ray(&self, px: f64, py: f64) -> [f64; 3] {
        self.pose.to_world([(px - self.cx) / self.focal, (py - self.cy) / self.focal, 1.0])
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Value noise on the unrolled pipe wall, periodic in the angle.
struct Texture {
    seed: u64,
}

impl Texture {
    fn lattice(&self, octave: u32, i: i64, j: i64) -> f64 {
        let h = splitmix(self.seed ^ splitmix((octave as u64) << 48 ^ (i as u64) << 24 ^ j as u64));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn value(&self, octave: u32, u: f64, v: f64, period: i64) -> f64 {
        let (iu, iv) = (u.floor(), v.floor());
        let (fu, fv) = (u - iu, v - iv);
        let (su, sv) = (fu * fu * (3.0 - 2.0 * fu), fv * fv * (3.0 - 2.0 * fv));
        let (i0, j0) = (iu as i64, iv as i64);
        let wrap = |i: i64| i.rem_euclid(period);
        let l = |di: i64, dj: i64| self.lattice(octave, wrap(i0 + di), j0 + dj);
        let a = l(0, 0) + (l(1, 0) - l(0, 0)) * su;
        let b = l(0, 1) + (l(1, 1) - l(0, 1)) * su;
        a + (b - a) * sv
    }

    /// Fractal noise in [0, 1] at angle `theta` and axial position `z`.
    fn fbm(&self, theta: f64, z: f64, radius: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        // Base cell ~ 8 cm of wall.
        let mut period = ((2.0 * PI * radius / 0.08).round() as i64).max(4);
        for octave in 0..4 {
            let u = theta / (2.0 * PI) * period as f64;
            let v = z * period as f64 / (2.0 * PI * radius);
            total += amp * self.value(octave, u, v, period);
            norm += amp;
            amp *= 0.5;
            period *= 2;
        }
        total / norm
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn albedo(params: &SceneParams, tex: &Texture, tint: [f64; 3], theta: f64, z: f64) -> [f64; 3] {
    let n = tex.fbm(theta, z, params.pipe_radius);
    let mut c = tint.map(|t| t * (0.55 + 0.7 * n));
    // Pipe joints: a dark gap flanked by a lighter collar.
    let dz = (z / params.joint_spacing - (z / params.joint_spacing).round()).abs() * params.joint_spacing;
    if dz < 0.012 {
        c = c.map(|v| v * 0.3);
    } else if dz < 0.04 {
        c = c.map(|v| (v * 1.15).min(1.0));
    }
    for (k, d) in params.decals.iter().enumerate() {
        let du = wrap_angle(theta - d.angle) / d.extent;
        let dv = (z - d.axial) / d.length;
        let r2 = du * du + dv * dv;
        if r2 >= 1.0 {
            continue;
        }
        let phase = (tex.seed % 1000) as f64 * 0.01 + k as f64;
        match d.kind {
            DecalKind::Crack => {
                let line = dv - 0.35 * (du * 7.0 + phase).sin() - 0.1 * (du * 23.0 + phase).sin();
                if line.abs() < 0.06 {
                    c = c.map(|v| v * 0.15);
                }
            }
            DecalKind::Stain => {
                let a = (1.0 - r2) * 0.8 * (0.5 + n);
                let stain = [0.30, 0.20, 0.09];
                c = [0, 1, 2].map(|i| c[i] + (stain[i] - c[i]) * a.min(1.0));
            }
            DecalKind::Deposit => {
                let a = ((1.0 - r2) * 1.5).min(1.0) * (0.4 + 0.6 * n);
                let dep = [0.80, 0.74, 0.52];
                c = [0, 1, 2].map(|i| c[i] + (dep[i] - c[i]) * a);
            }
            DecalKind::Root => {
                let fiber = (du * 3.0 + 0.5 * (dv * 9.0 + phase).sin()).fract().abs();
                if fiber < 0.12 {
                    c = [0.42, 0.30, 0.16];
                }
            }
        }
    }
    c
}

fn wall_tint(seed: u64) -> [f64; 3] {
    let h = splitmix(seed ^ 0xa5a5);
    let f = |s: u32| ((h >> s) & 0xff) as f64 / 255.0;
    // concrete-to-clay palette
    [0.50 + 0.20 * f(0), 0.45 + 0.15 * f(8), 0.35 + 0.15 * f(16)]
}

/// Surface radiance seen along `d` from `o`, lit by a lamp at the camera.
fn shade(params: &SceneParams, tex: &Texture, tint: [f64; 3], o: [f64; 3], d: [f64; 3]) -> [f64; 3] {
    let Some(t) = ray_cylinder(params.pipe_radius, o, d) else {
        return [0.0; 3];
    };
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let dist = t * len;
    let normal = [-p[0] / params.pipe_radius, -p[1] / params.pipe_radius];
    let lambert = (-(normal[0] * d[0] + normal[1] * d[1]) / len).max(0.0);
    let falloff = 1.0 / (1.0 + (dist / 0.9).powi(2));
    let light = 0.04 + 1.6 * lambert.sqrt() * falloff;
    let theta = p[1].atan2(p[0]);
    albedo(params, tex, tint, theta, p[2]).map(|a| (a * light).clamp(0.0, 1.0))
}

/// Renders an RGB frame (2×2 supersampled) and the z-depth at each pixel
/// center, clamped to the far clip. Outputs are `[3, h, w]` and `[1, h, w]`.
pub fn render_frame(params: &SceneParams, width: usize, height: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    params.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidScene(format!("empty frame {width}x{height}")));
    }
    let cam = Camera::new(params, width, height);
    let o = params.camera.position;
    let tex = Texture { seed: params.texture_seed };
    let tint = wall_tint(params.texture_seed);
    let plane = width * height;
    let mut img = vec![0f32; 3 * plane];
    let mut depth = vec![0f32; plane];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let z = ray_cylinder(params.pipe_radius, o, cam.ray(px, py)).unwrap_or(f64::INFINITY);
            depth[y * width + x] = clip_depth(z, params.far_clip);
            let mut acc = [0.0; 3];
            for (sx, sy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let c = shade(params, &tex, tint, o, cam.ray(px + sx, py + sy));
                for i in 0..3 {
                    acc[i] += c[i] / 4.0;
                }
            }
            for (c, v) in acc.iter().enumerate() {
                img[c * plane + y * width + x] = quantize(*v);
            }
        }
    }
    Ok((Tensor::new(&[3, height, width], img)?, Tensor::new(&[1, height, width], depth)?))
}

/// `min(z, far)` in f32, never rounding past `far`.
fn clip_depth(z: f64, far: f64) -> f32 {
    let d = z.min(far) as f32;
    if d as f64 > far {
        f32::from_bits(d.to_bits() - 1)
    } else {
        d
    }
}

/// Rounds to the nearest 8-bit level so PNG storage is lossless.
pub fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}
