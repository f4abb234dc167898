//! Dense multi-channel 2D grids.
//!
//! Values are stored channel-major and row-major within a channel, so the
//! element `(c, y, x)` lives at `(c * height + y) * width + x`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "all extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A channel-major 2D grid of `f64` with an optional gradient buffer of the
/// same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn make(shape: Shape, fill: f64) -> Self {
        Self {
            shape,
            values: vec![fill; shape.len()],
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::make(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {shape}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    /// Builds a single-channel tensor from a closure over `(y, x)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let shape = Shape {
            channels: 1,
            height,
            width,
        };
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self {
            shape,
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.values[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        &mut self.values[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let w = self.shape.width;
        let h = self.shape.height;
        self.values[(c * h + y) * w + x] = v;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length mismatch");
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Population mean and standard deviation of one channel.
    pub fn mean_std(&self, channel: usize) -> (f64, f64) {
        mean_std(self.channel(channel))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stacks single- or multi-channel tensors of equal spatial size along
    /// the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::Shape(format!(
                    "cannot concatenate {} with {}",
                    first.shape(),
                    p.shape()
                )));
            }
            channels += p.channels();
        }
        let mut values = Vec::with_capacity(channels * h * w);
        for p in parts {
            values.extend_from_slice(p.values());
        }
        Tensor::from_vec(Shape::new(channels, h, w)?, values)
    }

    /// Copies a contiguous range of channels into a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor {
        let p = self.shape.plane();
        Tensor {
            shape: self.shape.with_channels(count),
            values: self.values[start * p..(start + count) * p].to_vec(),
            grad: None,
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Population mean and standard deviation (variance divided by N).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    // Shifting by the first sample makes constant inputs exact.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(c: usize, h: usize, w: usize) -> Shape {
        Shape::new(c, h, w).unwrap()
    }

    #[test]
    fn make_fills() {
        assert_eq!(Tensor::make(shape(1, 2, 2), 0.0).values(), &[0.0; 4]);
        assert_eq!(Tensor::make(shape(2, 1, 1), 1.5).values(), &[1.5, 1.5]);
        let t = Tensor::make(shape(1, 1, 3), -1.0);
        assert_eq!(t.values(), &[-1.0, -1.0, -1.0]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Shape::new(0, 2, 2).is_err());
        assert!(Shape::new(1, 0, 2).is_err());
    }

    #[test]
    fn mean_std_examples() {
        let t = Tensor::from_vec(shape(1, 1, 2), vec![1.0, 5.0]).unwrap();
        assert_eq!(t.mean_std(0), (3.0, 2.0));
        let t = Tensor::make(shape(1, 3, 3), 7.0);
        assert_eq!(t.mean_std(0), (7.0, 0.0));
        let t = Tensor::from_vec(shape(1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (m, s) = t.mean_std(0);
        assert_eq!(m, 1.5);
        assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mean_std_picks_channel() {
        let t = Tensor::from_vec(shape(2, 1, 2), vec![1.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(t.mean_std(0), (1.0, 0.0));
        assert_eq!(t.mean_std(1), (3.0, 1.0));
    }

    #[test]
    fn grad_is_lazy_and_accumulates() {
        let mut t = Tensor::zeros(shape(1, 1, 2));
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::make(shape(1, 2, 2), 1.0);
        let b = Tensor::make(shape(1, 2, 2), 2.0);
        let c = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(c.channels(), 2);
        assert_eq!(c.slice_channels(1, 1), b);
        assert!(Tensor::concat(&[&a, &Tensor::zeros(shape(1, 3, 2))]).is_err());
    }

    proptest! {
        #[test]
        fn constant_fill_has_zero_std(c in -1e3f64..1e3, h in 1usize..6, w in 1usize..6) {
            let t = Tensor::make(shape(1, h, w), c);
            let (m, s) = t.mean_std(0);
            prop_assert_eq!(m, c);
            prop_assert_eq!(s, 0.0);
        }

        #[test]
        fn mean_std_permutation_invariant(mut v in proptest::collection::vec(-10.0f64..10.0, 1..40), seed in any::<u64>()) {
            let (m0, s0) = mean_std(&v);
            // deterministic shuffle
            let n = v.len();
            let mut state = seed | 1;
            for i in (1..n).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                v.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let (m1, s1) = mean_std(&v);
            prop_assert!((m0 - m1).abs() < 1e-12);
            prop_assert!((s0 - s1).abs() < 1e-12);
        }
    }
}
