//! Interpolation kernels, backward image warping and DVF upsampling.
//!
//! All kernels are expressed as four weights over the taps
//! `floor(p) - 1 ..= floor(p) + 2` for a fractional offset `t = p - floor(p)`.
//! Tap indices outside the grid are clamped to the nearest edge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::avgpool2;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Nearest,
    Bilinear,
    CatmullRom,
    BSpline3,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::Nearest,
        KernelKind::Bilinear,
        KernelKind::CatmullRom,
        KernelKind::BSpline3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Nearest => "nearest",
            KernelKind::Bilinear => "bilinear",
            KernelKind::CatmullRom => "catmull_rom",
            KernelKind::BSpline3 => "bspline3",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            KernelKind::Nearest => 0,
            KernelKind::Bilinear => 1,
            KernelKind::CatmullRom => 2,
            KernelKind::BSpline3 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn weights(self, t: f64) -> [f64; 4] {
        match self {
            KernelKind::Nearest => {
                if t < 0.5 {
                    [0.0, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 1.0, 0.0]
                }
            }
            KernelKind::Bilinear => [0.0, 1.0 - t, t, 0.0],
            KernelKind::CatmullRom => cr_weights(t),
            KernelKind::BSpline3 => bspline3_weights(t),
        }
    }

    /// Derivatives of [`KernelKind::weights`] with respect to `t`.
    pub fn weight_derivatives(self, t: f64) -> [f64; 4] {
        match self {
            KernelKind::Nearest => [0.0; 4],
            KernelKind::Bilinear => [0.0, -1.0, 1.0, 0.0],
            KernelKind::CatmullRom => cr_weight_derivatives(t),
            KernelKind::BSpline3 => {
                let s = 1.0 - t;
                [
                    -0.5 * s * s,
                    (9.0 * t * t - 12.0 * t) / 6.0,
                    (-9.0 * t * t + 6.0 * t + 3.0) / 6.0,
                    0.5 * t * t,
                ]
            }
        }
    }

    /// Range of the four taps that can carry non-zero weight.
    fn active_taps(self) -> std::ops::Range<usize> {
        match self {
            KernelKind::Nearest | KernelKind::Bilinear => 1..3,
            KernelKind::CatmullRom | KernelKind::BSpline3 => 0..4,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(KernelKind::Nearest),
            "bilinear" => Ok(KernelKind::Bilinear),
            "catmull_rom" | "catmull-rom" => Ok(KernelKind::CatmullRom),
            "bspline3" | "bspline" => Ok(KernelKind::BSpline3),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Catmull-Rom basis weights for taps `-1, 0, 1, 2` at fraction `t`.
pub fn cr_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

pub fn cr_weight_derivatives(t: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ]
}

/// Uniform cubic B-spline weights (direct smoothing kernel, no prefilter).
pub fn bspline3_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Clamped tap indices and weights along one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    idx: [usize; 4],
    w: [f64; 4],
    dw: [f64; 4],
}

impl Axis {
    fn new(kind: KernelKind, p: f64, len: usize) -> Self {
        let f = p.floor();
        let t = p - f;
        // saturating: coordinates may be huge or infinite after divergence
        let base = (f as i64).saturating_sub(1);
        let last = len as i64 - 1;
        let mut idx = [0usize; 4];
        for (i, slot) in idx.iter_mut().enumerate() {
            *slot = base.saturating_add(i as i64).clamp(0, last) as usize;
        }
        Axis {
            idx,
            w: kind.weights(t),
            dw: kind.weight_derivatives(t),
        }
    }
}

/// Value and partial derivatives `(value, d/dy, d/dx)` of an interpolated
/// sample.
pub fn sample_with_grad(
    kind: KernelKind,
    field: &Tensor,
    channel: usize,
    y: f64,
    x: f64,
) -> (f64, f64, f64) {
    let (h, w) = (field.height(), field.width());
    let plane = field.channel(channel);
    let ay = Axis::new(kind, y, h);
    let ax = Axis::new(kind, x, w);
    let taps = kind.active_taps();
    let (mut v, mut dy, mut dx) = (0.0, 0.0, 0.0);
    for i in taps.clone() {
        let row = &plane[ay.idx[i] * w..(ay.idx[i] + 1) * w];
        let (mut r, mut rd) = (0.0, 0.0);
        for j in taps.clone() {
            let s = row[ax.idx[j]];
            r += ax.w[j] * s;
            rd += ax.dw[j] * s;
        }
        v += ay.w[i] * r;
        dy += ay.dw[i] * r;
        dx += ay.w[i] * rd;
    }
    (v, dy, dx)
}

pub fn sample(kind: KernelKind, field: &Tensor, channel: usize, y: f64, x: f64) -> f64 {
    sample_with_grad(kind, field, channel, y, x).0
}

/// Adds `g` times each tap weight into `grad_plane` (the adjoint of
/// [`sample`] with respect to the field values).
pub fn scatter_sample(
    kind: KernelKind,
    grad_plane: &mut [f64],
    height: usize,
    width: usize,
    y: f64,
    x: f64,
    g: f64,
) {
    let ay = Axis::new(kind, y, height);
    let ax = Axis::new(kind, x, width);
    let taps = kind.active_taps();
    for i in taps.clone() {
        let gy = g * ay.w[i];
        if gy == 0.0 {
            continue;
        }
        let row = ay.idx[i] * width;
        for j in taps.clone() {
            grad_plane[row + ax.idx[j]] += gy * ax.w[j];
        }
    }
}

pub fn sample_cr_bicubic(field: &Tensor, channel: usize, y: f64, x: f64) -> f64 {
    sample(KernelKind::CatmullRom, field, channel, y, x)
}

pub fn sample_bspline3(field: &Tensor, channel: usize, y: f64, x: f64) -> f64 {
    sample(KernelKind::BSpline3, field, channel, y, x)
}

/// A displacement field: channel 0 holds `uy`, channel 1 holds `ux`, both in
/// pixels of the field's own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dvf(Tensor);

impl Dvf {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.channels() != 2 {
            return Err(Error::Shape(format!(
                "a DVF needs 2 channels, got {}",
                t.channels()
            )));
        }
        Ok(Dvf(t))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Dvf(Tensor::zeros(Shape {
            channels: 2,
            height,
            width,
        }))
    }

    pub fn constant(height: usize, width: usize, uy: f64, ux: f64) -> Self {
        let mut d = Self::zeros(height, width);
        d.0.channel_mut(0).iter_mut().for_each(|v| *v = uy);
        d.0.channel_mut(1).iter_mut().for_each(|v| *v = ux);
        d
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn uy(&self) -> &[f64] {
        self.0.channel(0)
    }

    pub fn ux(&self) -> &[f64] {
        self.0.channel(1)
    }

    /// Largest per-pixel displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.uy()
            .iter()
            .zip(self.ux())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.uy().len() as f64;
        self.uy()
            .iter()
            .zip(self.ux())
            .map(|(a, b)| a.hypot(*b))
            .sum::<f64>()
            / n
    }
}

fn check_warp_shapes(image: &Tensor, u: &Dvf) -> Result<()> {
    if image.height() != u.height() || image.width() != u.width() {
        return Err(Error::Shape(format!(
            "image {} cannot be warped by a {}x{} DVF",
            image.shape(),
            u.height(),
            u.width()
        )));
    }
    Ok(())
}

/// Backward warping: `out(y, x) = image(y + uy(y, x), x + ux(y, x))`.
pub fn warp_image(image: &Tensor, u: &Dvf, kind: KernelKind) -> Result<Tensor> {
    check_warp_shapes(image, u)?;
    let (h, w) = (image.height(), image.width());
    let mut out = Tensor::zeros(image.shape());
    for c in 0..image.channels() {
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let py = y as f64 + u.uy()[i];
                let px = x as f64 + u.ux()[i];
                dst[i] = sample(kind, image, c, py, px);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp_image`] with respect to the image and the DVF.
pub fn warp_image_backward(
    image: &Tensor,
    u: &Dvf,
    kind: KernelKind,
    grad_out: &Tensor,
) -> Result<(Tensor, Dvf)> {
    check_warp_shapes(image, u)?;
    image.ensure_same_shape(grad_out, "warp gradient")?;
    let (h, w) = (image.height(), image.width());
    let mut g_img = Tensor::zeros(image.shape());
    let mut g_u = Dvf::zeros(h, w);
    for c in 0..image.channels() {
        let go = grad_out.channel(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let g = go[i];
                if g == 0.0 {
                    continue;
                }
                let py = y as f64 + u.uy()[i];
                let px = x as f64 + u.ux()[i];
                let (_, dy, dx) = sample_with_grad(kind, image, c, py, px);
                g_u.0.channel_mut(0)[i] += g * dy;
                g_u.0.channel_mut(1)[i] += g * dx;
                scatter_sample(kind, g_img.channel_mut(c), h, w, py, px, g);
            }
        }
    }
    Ok((g_img, g_u))
}

/// 1D resampling operator from `len` samples to `2 * len` under the
/// align-centres convention `src = (dst + 0.5) / 2 - 0.5`.
fn upsample_axis(kind: KernelKind, len: usize) -> Vec<Axis> {
    (0..2 * len)
        .map(|o| Axis::new(kind, (o as f64 + 0.5) / 2.0 - 0.5, len))
        .collect()
}

/// Resamples every channel to twice the spatial size without rescaling the
/// values.
pub fn upsample2(t: &Tensor, kind: KernelKind) -> Tensor {
    let (h, w) = (t.height(), t.width());
    let (oh, ow) = (2 * h, 2 * w);
    let ry = upsample_axis(kind, h);
    let rx = upsample_axis(kind, w);
    let taps = kind.active_taps();
    let mut out = Tensor::zeros(Shape {
        channels: t.channels(),
        height: oh,
        width: ow,
    });
    let mut rows = vec![0.0; h * ow];
    for c in 0..t.channels() {
        let src = t.channel(c);
        // horizontal pass
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (x, a) in rx.iter().enumerate() {
                rows[y * ow + x] = taps.clone().map(|j| a.w[j] * s[a.idx[j]]).sum();
            }
        }
        let dst = out.channel_mut(c);
        for (y, a) in ry.iter().enumerate() {
            let d = &mut dst[y * ow..(y + 1) * ow];
            for i in taps.clone() {
                let wy = a.w[i];
                if wy == 0.0 {
                    continue;
                }
                let r = &rows[a.idx[i] * ow..(a.idx[i] + 1) * ow];
                for (dv, rv) in d.iter_mut().zip(r) {
                    *dv += wy * rv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`].
pub fn upsample2_backward(grad_out: &Tensor, kind: KernelKind) -> Tensor {
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let (h, w) = (oh / 2, ow / 2);
    let ry = upsample_axis(kind, h);
    let rx = upsample_axis(kind, w);
    let taps = kind.active_taps();
    let mut g = Tensor::zeros(Shape {
        channels: grad_out.channels(),
        height: h,
        width: w,
    });
    let mut rows = vec![0.0; h * ow];
    for c in 0..grad_out.channels() {
        rows.iter_mut().for_each(|v| *v = 0.0);
        let src = grad_out.channel(c);
        for (y, a) in ry.iter().enumerate() {
            let s = &src[y * ow..(y + 1) * ow];
            for i in taps.clone() {
                let wy = a.w[i];
                if wy == 0.0 {
                    continue;
                }
                let r = &mut rows[a.idx[i] * ow..(a.idx[i] + 1) * ow];
                for (rv, sv) in r.iter_mut().zip(s) {
                    *rv += wy * sv;
                }
            }
        }
        let dst = g.channel_mut(c);
        for y in 0..h {
            let r = &rows[y * ow..(y + 1) * ow];
            let d = &mut dst[y * w..(y + 1) * w];
            for (x, a) in rx.iter().enumerate() {
                for j in taps.clone() {
                    d[a.idx[j]] += a.w[j] * r[x];
                }
            }
        }
    }
    g
}

/// Doubles the spatial size of a DVF and its magnitudes (pixels at the new
/// resolution are half as large).
pub fn upsample_dvf(u: &Dvf, kind: KernelKind) -> Dvf {
    let mut t = upsample2(u.tensor(), kind);
    t.scale(2.0);
    Dvf(t)
}

pub fn upsample_dvf_backward(grad_out: &Dvf, kind: KernelKind) -> Dvf {
    let mut g = upsample2_backward(grad_out.tensor(), kind);
    g.scale(2.0);
    Dvf(g)
}

/// RMSE between `field` and its 2x2-mean downsample re-upsampled with `kind`.
pub fn resample_error(field: &Tensor, kind: KernelKind) -> Result<f64> {
    let coarse = avgpool2(field)?;
    let back = upsample2(&coarse, kind);
    let n = field.len() as f64;
    let sse: f64 = back
        .values()
        .iter()
        .zip(field.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sse / n).sqrt())
}

/// Smooth low-frequency test field used by the interpolation benchmark.
pub fn standard_smooth_field(size: usize) -> Tensor {
    use std::f64::consts::PI;
    let s = size as f64;
    Tensor::from_fn(size, size, |y, x| {
        let (y, x) = (y as f64 / s, x as f64 / s);
        (2.0 * PI * (y + 0.1)).sin() * (2.0 * PI * 1.5 * x).cos()
            + 0.5 * (2.0 * PI * (x + 2.0 * y) + 0.3).sin()
    })
}
