//! Deformable 3x3 convolution.
//!
//! An offset branch (a plain convolution with `2 * k * k` output channels)
//! predicts a `(dy, dx)` displacement for every kernel tap at every pixel.
//! Offset channel `2 * j` holds `dy` and `2 * j + 1` holds `dx` for tap
//! `j = ky * k + kx`. Taps are fetched bilinearly with clamp-to-edge and then
//! weighted exactly like a standard convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{apply_columns, columns_backward, conv2d, conv2d_grads, ConvGrads, ConvParams};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformConvParams {
    pub main: ConvParams,
    pub offset: ConvParams,
}

impl DeformConvParams {
    /// Main kernel with fan-in uniform init, zero offset branch.
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            main: ConvParams::fan_in_uniform(in_channels, out_channels, kernel, rng)?,
            offset: ConvParams::zeros(in_channels, 2 * kernel * kernel, kernel)?,
        })
    }

    pub fn from_main(main: ConvParams) -> Result<Self> {
        let k = main.kernel();
        let offset = ConvParams::zeros(main.in_channels(), 2 * k * k, k)?;
        Ok(Self { main, offset })
    }

    pub fn zero_grad(&mut self) {
        self.main.zero_grad();
        self.offset.zero_grad();
    }
}

/// Bilinear stencil with clamped corner indices.
#[derive(Debug, Clone, Copy)]
struct Bilinear {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    ty: f64,
    tx: f64,
}

impl Bilinear {
    #[inline]
    fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (fy, fx) = (y.floor(), x.floor());
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        Bilinear {
            y0: clamp(fy as i64, h),
            y1: clamp(fy as i64 + 1, h),
            x0: clamp(fx as i64, w),
            x1: clamp(fx as i64 + 1, w),
            ty: y - fy,
            tx: x - fx,
        }
    }

    /// `(value, d/dy, d/dx)`.
    #[inline]
    fn eval(&self, plane: &[f64], w: usize) -> (f64, f64, f64) {
        let v00 = plane[self.y0 * w + self.x0];
        let v01 = plane[self.y0 * w + self.x1];
        let v10 = plane[self.y1 * w + self.x0];
        let v11 = plane[self.y1 * w + self.x1];
        let top = v00 + self.tx * (v01 - v00);
        let bot = v10 + self.tx * (v11 - v10);
        let v = top + self.ty * (bot - top);
        let dy = bot - top;
        let dx = (1.0 - self.ty) * (v01 - v00) + self.ty * (v11 - v10);
        (v, dy, dx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        let (ty, tx) = (self.ty, self.tx);
        plane[self.y0 * w + self.x0] += g * (1.0 - ty) * (1.0 - tx);
        plane[self.y0 * w + self.x1] += g * (1.0 - ty) * tx;
        plane[self.y1 * w + self.x0] += g * ty * (1.0 - tx);
        plane[self.y1 * w + self.x1] += g * ty * tx;
    }
}

/// Four-tap bilinear sample with clamp-to-edge.
pub fn sample_bilinear(field: &Tensor, channel: usize, y: f64, x: f64) -> f64 {
    sample_bilinear_with_grad(field, channel, y, x).0
}

/// Bilinear sample and its derivatives `(value, d/dy, d/dx)`. At integer
/// positions the derivative is the one-sided (forward) difference.
pub fn sample_bilinear_with_grad(field: &Tensor, channel: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let (h, w) = (field.height(), field.width());
    Bilinear::new(y, x, h, w).eval(field.channel(channel), w)
}

/// Adds `g` times the four bilinear weights into `grad_plane`.
pub fn scatter_bilinear(grad_plane: &mut [f64], height: usize, width: usize, y: f64, x: f64, g: f64) {
    Bilinear::new(y, x, height, width).scatter(grad_plane, width, g);
}

fn check_offsets(input: &Tensor, offsets: &Tensor, kernel: usize) -> Result<()> {
    let want = input.shape().with_channels(2 * kernel * kernel);
    if offsets.shape() != want {
        return Err(Error::Shape(format!(
            "offsets are {}, expected {want}",
            offsets.shape()
        )));
    }
    Ok(())
}

fn sample_position(p: usize, j: usize, kernel: usize, w: usize, offsets: &Tensor) -> (f64, f64) {
    let pad = (kernel / 2) as f64;
    let (y, x) = (p / w, p % w);
    let (ky, kx) = (j / kernel, j % kernel);
    let dy = offsets.channel(2 * j)[p];
    let dx = offsets.channel(2 * j + 1)[p];
    (
        y as f64 + ky as f64 - pad + dy,
        x as f64 + kx as f64 - pad + dx,
    )
}

/// Deformed column matrix `(C*k*k) x (H*W)`.
fn deformed_columns(input: &Tensor, offsets: &Tensor, kernel: usize) -> Vec<f64> {
    let (c_in, h, w) = (input.channels(), input.height(), input.width());
    let hw = h * w;
    let kk = kernel * kernel;
    let mut cols = vec![0.0; c_in * kk * hw];
    for j in 0..kk {
        for p in 0..hw {
            let (sy, sx) = sample_position(p, j, kernel, w, offsets);
            let b = Bilinear::new(sy, sx, h, w);
            for c in 0..c_in {
                cols[(c * kk + j) * hw + p] = b.eval(input.channel(c), w).0;
            }
        }
    }
    cols
}

/// Deformable convolution driven by an explicit offset tensor.
pub fn deform_conv2d_with_offsets(input: &Tensor, offsets: &Tensor, main: &ConvParams) -> Result<Tensor> {
    if input.channels() != main.in_channels() {
        return Err(Error::Shape(format!(
            "deformable convolution expects {} input channels, got {}",
            main.in_channels(),
            input.channels()
        )));
    }
    check_offsets(input, offsets, main.kernel())?;
    let cols = deformed_columns(input, offsets, main.kernel());
    Ok(apply_columns(&cols, main, input.height(), input.width()))
}

/// Gradients of [`deform_conv2d_with_offsets`]: `(d input, d offsets, main
/// parameter grads)`.
pub fn deform_conv2d_with_offsets_grads(
    input: &Tensor,
    offsets: &Tensor,
    main: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, ConvGrads)> {
    check_offsets(input, offsets, main.kernel())?;
    let expected = input.shape().with_channels(main.out_channels());
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "deformable conv output gradient is {}, expected {expected}",
            grad_out.shape()
        )));
    }
    let kernel = main.kernel();
    let cols = deformed_columns(input, offsets, kernel);
    let (grads, dcols) = columns_backward(&cols, main, grad_out);
    let (c_in, h, w) = (input.channels(), input.height(), input.width());
    let hw = h * w;
    let kk = kernel * kernel;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_off = Tensor::zeros(offsets.shape());
    for j in 0..kk {
        for p in 0..hw {
            let (sy, sx) = sample_position(p, j, kernel, w, offsets);
            let b = Bilinear::new(sy, sx, h, w);
            let (mut gy, mut gx) = (0.0, 0.0);
            for c in 0..c_in {
                let g = dcols[(c * kk + j) * hw + p];
                if g == 0.0 {
                    continue;
                }
                let (_, dy, dx) = b.eval(input.channel(c), w);
                gy += g * dy;
                gx += g * dx;
                b.scatter(d_input.channel_mut(c), w, g);
            }
            d_off.channel_mut(2 * j)[p] += gy;
            d_off.channel_mut(2 * j + 1)[p] += gx;
        }
    }
    Ok((d_input, d_off, grads))
}

pub fn deform_conv2d(input: &Tensor, p: &DeformConvParams) -> Result<Tensor> {
    let offsets = conv2d(input, &p.offset)?;
    deform_conv2d_with_offsets(input, &offsets, &p.main)
}

/// Parameter gradients of a full deformable convolution.
#[derive(Debug, Clone)]
pub struct DeformGrads {
    pub main: ConvGrads,
    pub offset: ConvGrads,
}

impl DeformGrads {
    pub fn add(&mut self, other: &DeformGrads) {
        self.main.add(&other.main);
        self.offset.add(&other.offset);
    }

    pub fn apply_to(&self, p: &mut DeformConvParams) {
        self.main.apply_to(&mut p.main);
        self.offset.apply_to(&mut p.offset);
    }
}

pub fn deform_conv2d_grads(input: &Tensor, p: &DeformConvParams, grad_out: &Tensor) -> Result<(Tensor, DeformGrads)> {
    let offsets = conv2d(input, &p.offset)?;
    let (mut d_input, d_off, main) = deform_conv2d_with_offsets_grads(input, &offsets, &p.main, grad_out)?;
    let (d_input_off, offset) = conv2d_grads(input, &p.offset, &d_off)?;
    d_input.add_assign(&d_input_off);
    Ok((d_input, DeformGrads { main, offset }))
}

/// Backward pass: accumulates into `p`'s grad buffers and returns the input
/// gradient.
pub fn deform_conv2d_backward(input: &Tensor, p: &mut DeformConvParams, grad_out: &Tensor) -> Result<Tensor> {
    let (gi, grads) = deform_conv2d_grads(input, p, grad_out)?;
    grads.apply_to(p);
    Ok(gi)
}

/// Offsets shape for an input of `shape` and kernel `k`.
pub fn offsets_shape(shape: Shape, kernel: usize) -> Shape {
    shape.with_channels(2 * kernel * kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let v = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, v).unwrap()
    }

    fn centre_identity(channels: usize) -> DeformConvParams {
        DeformConvParams::from_main(ConvParams::identity(channels, 3).unwrap()).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let f = Tensor::from_vec(Shape::new(1, 2, 2).unwrap(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(sample_bilinear(&f, 0, 0.5, 0.5), 1.5);
        assert_eq!(sample_bilinear(&f, 0, 1.0, 0.0), 2.0);
        assert_eq!(sample_bilinear(&f, 0, -10.0, 30.0), 1.0);
        assert_eq!(sample_bilinear(&f, 0, 30.0, 30.0), 3.0);
    }

    #[test]
    fn bilinear_reproduces_affine_images() {
        let f = Tensor::from_fn(7, 9, |y, x| 0.75 * x as f64 - 2.5 * y as f64 + 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (y, x) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..8.0));
            let want = 0.75 * x - 2.5 * y + 4.0;
            assert!((sample_bilinear(&f, 0, y, x) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offsets_match_linear_conv_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DeformConvParams::new(3, 4, 3, &mut rng).unwrap();
        let x = random_tensor(Shape::new(3, 9, 8).unwrap(), &mut rng);
        let a = deform_conv2d(&x, &p).unwrap();
        let b = conv2d(&x, &p.main).unwrap();
        for c in 0..4 {
            for y in 1..8 {
                for xx in 1..7 {
                    assert!((a.at(c, y, xx) - b.at(c, y, xx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn integer_centre_offset_shifts() {
        let mut p = centre_identity(1);
        p.offset.bias.values_mut()[2 * 4 + 1] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(Shape::new(1, 6, 6).unwrap(), &mut rng);
        let out = deform_conv2d(&x, &p).unwrap();
        for y in 0..6 {
            for xx in 0..5 {
                assert_eq!(out.at(0, y, xx), x.at(0, y, xx + 1));
            }
        }
    }

    #[test]
    fn fractional_centre_offset_on_ramp() {
        let mut p = centre_identity(1);
        p.offset.bias.values_mut()[2 * 4 + 1] = 0.5;
        let x = Tensor::from_fn(6, 6, |_, x| x as f64);
        let out = deform_conv2d(&x, &p).unwrap();
        for y in 0..6 {
            for xx in 0..5 {
                assert!((out.at(0, y, xx) - (xx as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn offset_shape_validated() {
        let p = ConvParams::identity(1, 3).unwrap();
        let x = Tensor::zeros(Shape::new(1, 4, 4).unwrap());
        let bad = Tensor::zeros(Shape::new(9, 4, 4).unwrap());
        assert!(deform_conv2d_with_offsets(&x, &bad, &p).is_err());
        let wrong_in = Tensor::zeros(Shape::new(2, 4, 4).unwrap());
        assert!(deform_conv2d(&wrong_in, &centre_identity(1)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = DeformConvParams::new(2, 2, 3, &mut rng).unwrap();
        // small non-zero offset branch so taps land away from integer positions
        for v in p.offset.weight.values_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in p.offset.bias.values_mut() {
            *v = rng.gen_range(0.2..0.8);
        }
        let x = random_tensor(Shape::new(2, 5, 5).unwrap(), &mut rng);
        let probe = random_tensor(Shape::new(2, 5, 5).unwrap(), &mut rng);
        let scalar = |t: &Tensor| -> f64 { t.values().iter().zip(probe.values()).map(|(a, b)| a * b).sum() };
        let (gi, grads) = deform_conv2d_grads(&x, &p, &probe).unwrap();

        let num = central_difference(
            |v| scalar(&deform_conv2d(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &p).unwrap()),
            x.values(),
            1e-5,
        );
        assert!(relative_error(gi.values(), &num) < 1e-5);

        let num = central_difference(
            |v| {
                let mut q = p.clone();
                q.main.weight.values_mut().copy_from_slice(v);
                scalar(&deform_conv2d(&x, &q).unwrap())
            },
            p.main.weight.values(),
            1e-5,
        );
        assert!(relative_error(&grads.main.weight, &num) < 1e-5);

        let num = central_difference(
            |v| {
                let mut q = p.clone();
                q.offset.weight.values_mut().copy_from_slice(v);
                scalar(&deform_conv2d(&x, &q).unwrap())
            },
            p.offset.weight.values(),
            1e-5,
        );
        assert!(relative_error(&grads.offset.weight, &num) < 1e-5);

        let num = central_difference(
            |v| {
                let mut q = p.clone();
                q.offset.bias.values_mut().copy_from_slice(v);
                scalar(&deform_conv2d(&x, &q).unwrap())
            },
            p.offset.bias.values(),
            1e-5,
        );
        assert!(relative_error(&grads.offset.bias, &num) < 1e-5);
    }

    #[test]
    fn offset_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let main = ConvParams::fan_in_uniform(1, 2, 3, &mut rng).unwrap();
        let x = random_tensor(Shape::new(1, 4, 4).unwrap(), &mut rng);
        let mut off = random_tensor(offsets_shape(x.shape(), 3), &mut rng);
        off.values_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
        let probe = random_tensor(Shape::new(2, 4, 4).unwrap(), &mut rng);
        let (_, d_off, _) = deform_conv2d_with_offsets_grads(&x, &off, &main, &probe).unwrap();
        let num = central_difference(
            |v| {
                let o = Tensor::from_vec(off.shape(), v.to_vec()).unwrap();
                deform_conv2d_with_offsets(&x, &o, &main)
                    .unwrap()
                    .values()
                    .iter()
                    .zip(probe.values())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            off.values(),
            1e-5,
        );
        assert!(relative_error(d_off.values(), &num) < 1e-5);
    }
}
