//! Seeded synthetic registration pairs with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{sample, warp_image, Dvf, KernelKind};
use crate::tensor::{Shape, Tensor};

/// Spacing in pixels of the random control grid behind textures.
pub const TEXTURE_GRID: usize = 4;

/// Cap on fixed-point iterations used to invert a displacement field.
const INVERSE_ITERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    /// Largest displacement magnitude in pixels.
    pub amplitude: f64,
    /// Spacing in pixels of the random control grid.
    pub control_grid: usize,
    pub seed: u64,
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            amplitude: 5.0,
            control_grid: 16,
            seed: 7,
            count: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("size {} too small", self.size)));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Config(format!("amplitude {} must be finite and non-negative", self.amplitude)));
        }
        if self.control_grid < 4 {
            return Err(Error::Config(format!("control grid {} must be at least 4", self.control_grid)));
        }
        Ok(())
    }
}

/// Random values on a grid with the given spacing, Catmull-Rom interpolated to
/// `size x size`. Grid node `k` sits at pixel `k * spacing`.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, spacing: usize, channels: usize) -> Tensor {
    let nodes = size.div_ceil(spacing) + 1;
    let grid_shape = Shape::new(channels, nodes, nodes).expect("non-empty grid");
    let grid = Tensor::from_vec(grid_shape, (0..grid_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("length matches");
    let mut out = Tensor::zeros(Shape::new(channels, size, size).expect("non-empty image"));
    let s = spacing as f64;
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let v = sample(KernelKind::CatmullRom, &grid, c, y as f64 / s, x as f64 / s);
                out.set(c, y, x, v);
            }
        }
    }
    out
}

fn gen_smooth_dvf_with(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Dvf {
    let mut u = Dvf::new(smooth_noise(rng, cfg.size, cfg.control_grid, 2)).expect("two channels");
    let m = u.max_magnitude();
    let s = if m > 0.0 { cfg.amplitude / m } else { 0.0 };
    u.tensor_mut().scale(s);
    u
}

/// Smooth random field with `max |u| == amplitude`.
pub fn gen_smooth_dvf(cfg: &SynthConfig) -> Result<Dvf> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(gen_smooth_dvf_with(&mut rng, cfg))
}

fn gen_texture_with(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let mut t = smooth_noise(rng, size, TEXTURE_GRID, 1);
    for v in t.values_mut() {
        *v = 0.5 + 0.5 * v.clamp(-1.0, 1.0);
    }
    t
}

/// Band-limited noise in `[0, 1]`.
pub fn gen_texture(size: usize, seed: u64) -> Result<Tensor> {
    if size < 2 {
        return Err(Error::Config(format!("size {size} too small")));
    }
    Ok(gen_texture_with(&mut ChaCha8Rng::seed_from_u64(seed), size))
}

/// `(source, target)` with `target = texture` and `source` the texture
/// warped by `u_gt`.
pub fn make_pair(texture: &Tensor, u_gt: &Dvf) -> Result<(Tensor, Tensor)> {
    let source = warp_image(texture, u_gt, KernelKind::CatmullRom)?;
    Ok((source, texture.clone()))
}

/// Field `v` with `v(x) = -u(x + v(x))`, found by fixed-point iteration.
///
/// Warping `warp_image(texture, u)` by `v` gives back the texture, so `v` is
/// the field a registration of the pair is expected to recover.
pub fn invert_dvf(u: &Dvf) -> Dvf {
    let (h, w) = (u.height(), u.width());
    let mut v = u.clone();
    v.tensor_mut().scale(-1.0);
    for _ in 0..INVERSE_ITERS {
        let mut next = Dvf::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let py = y as f64 + v.tensor().at(0, y, x);
                let px = x as f64 + v.tensor().at(1, y, x);
                for c in 0..2 {
                    let s = sample(KernelKind::CatmullRom, u.tensor(), c, py, px);
                    next.tensor_mut().set(c, y, x, -s);
                }
            }
        }
        let change = next
            .tensor()
            .values()
            .iter()
            .zip(v.tensor().values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if change < 1e-13 {
            break;
        }
    }
    v
}

/// One synthetic example.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub source: Tensor,
    pub target: Tensor,
    /// Field registering `source` onto `target`.
    pub dvf: Dvf,
}

/// Pair `index` of the dataset described by `cfg`. Each index draws from its
/// own random stream, so pairs are independent of `count`.
pub fn gen_pair(cfg: &SynthConfig, index: usize) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let texture = gen_texture_with(&mut rng, cfg.size);
    let u = gen_smooth_dvf_with(&mut rng, cfg);
    let (source, target) = make_pair(&texture, &u)?;
    Ok(SynthPair {
        source,
        target,
        dvf: invert_dvf(&u),
    })
}

pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    use rayon::prelude::*;
    (0..cfg.count).into_par_iter().map(|i| gen_pair(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ncc_ssd;

    fn cfg(amplitude: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            size: 32,
            amplitude,
            control_grid: 8,
            seed,
            count: 1,
        }
    }

    #[test]
    fn zero_amplitude_is_zero_field() {
        let u = gen_smooth_dvf(&cfg(0.0, 3)).unwrap();
        assert!(u.tensor().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn amplitude_is_exact() {
        let u = gen_smooth_dvf(&cfg(5.0, 3)).unwrap();
        let m = u
            .uy()
            .iter()
            .zip(u.ux())
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max);
        assert!((m - 5.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(gen_smooth_dvf(&cfg(5.0, 9)).unwrap(), gen_smooth_dvf(&cfg(5.0, 9)).unwrap());
        assert_ne!(gen_smooth_dvf(&cfg(5.0, 9)).unwrap(), gen_smooth_dvf(&cfg(5.0, 10)).unwrap());
        assert_eq!(gen_pair(&cfg(3.0, 1), 2).unwrap(), gen_pair(&cfg(3.0, 1), 2).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { control_grid: 3, ..cfg(1.0, 0) }.validate().is_err());
        assert!(cfg(-1.0, 0).validate().is_err());
    }

    #[test]
    fn texture_is_in_unit_range_and_varies() {
        let t = gen_texture(32, 4).unwrap();
        assert!(t.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(t.mean_std(0).1 > 0.05);
    }

    #[test]
    fn zero_field_pair_is_identical() {
        let t = gen_texture(16, 1).unwrap();
        let (s, g) = make_pair(&t, &Dvf::zeros(16, 16)).unwrap();
        assert_eq!(s, g);
    }

    #[test]
    fn unit_shift_pair() {
        let t = gen_texture(16, 1).unwrap();
        let (s, _) = make_pair(&t, &Dvf::constant(16, 16, 0.0, 1.0)).unwrap();
        for y in 0..16 {
            for x in 0..15 {
                assert!((s.at(0, y, x) - t.at(0, y, x + 1)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn random_pair_is_misaligned() {
        let p = gen_pair(&cfg(4.0, 2), 0).unwrap();
        assert!(ncc_ssd(&p.source, &p.target, 1e-3).unwrap() > 0.0);
    }

    #[test]
    fn inverse_field_restores_target() {
        let p = gen_pair(&cfg(3.0, 5), 0).unwrap();
        let back = warp_image(&p.source, &p.dvf, KernelKind::CatmullRom).unwrap();
        // compare away from the clamped border
        let mut worst: f64 = 0.0;
        for y in 6..26 {
            for x in 6..26 {
                worst = worst.max((back.at(0, y, x) - p.target.at(0, y, x)).abs());
            }
        }
        let before = ncc_ssd(&p.source, &p.target, 1e-3).unwrap();
        let after = ncc_ssd(&back, &p.target, 1e-3).unwrap();
        assert!(worst < 0.05, "worst {worst}");
        assert!(after < 0.1 * before, "{after} vs {before}");
    }

    #[test]
    fn inverse_satisfies_fixed_point() {
        let u = gen_smooth_dvf(&cfg(3.0, 8)).unwrap();
        let v = invert_dvf(&u);
        for y in 0..32 {
            for x in 0..32 {
                let py = y as f64 + v.tensor().at(0, y, x);
                let px = x as f64 + v.tensor().at(1, y, x);
                for c in 0..2 {
                    let r = v.tensor().at(c, y, x) + sample(KernelKind::CatmullRom, u.tensor(), c, py, px);
                    assert!(r.abs() < 1e-9, "residual {r}");
                }
            }
        }
    }
}
