//! Unsupervised objective: an SSD over normalized absolute deviations (whose
//! minimum coincides with maximal normalized cross-correlation), a clamped
//! L2 penalty on the finest residual field, and the multi-level sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CwsOutput;
use crate::sampling::Dvf;
use crate::tensor::{mean_std, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub eps: f64,
    pub lambda: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    /// Treat the per-image mean and standard deviation as constants when
    /// differentiating the data term.
    pub detach_stats: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            lambda: 1e-3,
            clamp_lo: 0.0,
            clamp_hi: 0.25,
            detach_stats: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.clamp_lo <= self.clamp_hi) {
            return Err(Error::Config(format!(
                "clamp interval [{}, {}] is empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub reg: f64,
    /// Data terms of the coarser levels, coarsest first.
    pub level_terms: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(data: f64, reg: f64, level_terms: Vec<f64>) -> Self {
        let total = data + reg + level_terms.iter().sum::<f64>();
        Self {
            data,
            reg,
            level_terms,
            total,
        }
    }

    /// Elementwise mean of several breakdowns with the same level count.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let levels = parts.first().map_or(0, |p| p.level_terms.len());
        let data = parts.iter().map(|p| p.data).sum::<f64>() / n;
        let reg = parts.iter().map(|p| p.reg).sum::<f64>() / n;
        let level_terms = (0..levels)
            .map(|k| parts.iter().map(|p| p.level_terms[k]).sum::<f64>() / n)
            .collect();
        LossBreakdown::new(data, reg, level_terms)
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<String> {
        if !self.data.is_finite() {
            return Some("data".into());
        }
        if !self.reg.is_finite() {
            return Some("reg".into());
        }
        if let Some(k) = self.level_terms.iter().position(|v| !v.is_finite()) {
            return Some(format!("level_terms[{k}]"));
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Normalized {
    mean: f64,
    scale: f64,
    values: Vec<f64>,
}

fn normalize(t: &[f64], eps: f64) -> Normalized {
    let (mean, std) = mean_std(t);
    let scale = (std * std + eps * eps).sqrt();
    let values = if scale > 0.0 {
        t.iter().map(|v| (v - mean).abs() / scale).collect()
    } else {
        vec![0.0; t.len()]
    };
    Normalized {
        mean,
        scale,
        values,
    }
}

pub fn ncc_ssd(a: &Tensor, b: &Tensor, eps: f64) -> Result<f64> {
    a.ensure_same_shape(b, "ncc_ssd")?;
    let na = normalize(a.values(), eps);
    let nb = normalize(b.values(), eps);
    let n = a.len() as f64;
    Ok(na
        .values
        .iter()
        .zip(&nb.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / (2.0 * n))
}

/// Gradient of the data term with respect to one image given `g_i = dD/dn_i`.
fn normalized_backward(t: &[f64], norm: &Normalized, g: &[f64], detach: bool) -> Vec<f64> {
    if norm.scale == 0.0 {
        return vec![0.0; t.len()];
    }
    let s = norm.scale;
    let n = t.len() as f64;
    let mut out: Vec<f64> = t
        .iter()
        .zip(g)
        .map(|(v, gi)| gi * sign(v - norm.mean) / s)
        .collect();
    if !detach {
        let sum_gs: f64 = t.iter().zip(g).map(|(v, gi)| gi * sign(v - norm.mean)).sum();
        let sum_gabs: f64 = t.iter().zip(g).map(|(v, gi)| gi * (v - norm.mean).abs()).sum();
        for (o, v) in out.iter_mut().zip(t) {
            *o -= sum_gs / (n * s) + (v - norm.mean) * sum_gabs / (n * s * s * s);
        }
    }
    out
}

/// Data term and its gradients with respect to both images.
pub fn ncc_ssd_grad(a: &Tensor, b: &Tensor, eps: f64, detach_stats: bool) -> Result<(f64, Tensor, Tensor)> {
    a.ensure_same_shape(b, "ncc_ssd")?;
    let na = normalize(a.values(), eps);
    let nb = normalize(b.values(), eps);
    let n = a.len() as f64;
    let diff: Vec<f64> = na.values.iter().zip(&nb.values).map(|(x, y)| x - y).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * n);
    let ga: Vec<f64> = diff.iter().map(|d| d / n).collect();
    let gb: Vec<f64> = ga.iter().map(|d| -d).collect();
    let da = normalized_backward(a.values(), &na, &ga, detach_stats);
    let db = normalized_backward(b.values(), &nb, &gb, detach_stats);
    Ok((
        value,
        Tensor::from_vec(a.shape(), da)?,
        Tensor::from_vec(b.shape(), db)?,
    ))
}

fn residual_mean_square(residual: &Dvf) -> f64 {
    let n = residual.uy().len() as f64;
    residual
        .uy()
        .iter()
        .zip(residual.ux())
        .map(|(a, b)| a * a + b * b)
        .sum::<f64>()
        / n
}

/// `lambda * clamp(mean(|r|^2), lo, hi)`.
pub fn reg_term(residual: &Dvf, cfg: &LossConfig) -> f64 {
    cfg.lambda * residual_mean_square(residual).clamp(cfg.clamp_lo, cfg.clamp_hi)
}

/// Regularizer and its gradient; the gradient vanishes wherever the clamp is
/// not strictly inactive.
pub fn reg_term_grad(residual: &Dvf, cfg: &LossConfig) -> (f64, Dvf) {
    let m = residual_mean_square(residual);
    let value = cfg.lambda * m.clamp(cfg.clamp_lo, cfg.clamp_hi);
    let mut g = Dvf::zeros(residual.height(), residual.width());
    if m > cfg.clamp_lo && m < cfg.clamp_hi {
        let n = residual.uy().len() as f64;
        let k = 2.0 * cfg.lambda / n;
        for (gv, rv) in g.tensor_mut().values_mut().iter_mut().zip(residual.tensor().values()) {
            *gv = k * rv;
        }
    }
    (value, g)
}

/// Gradients of the total loss with respect to the differentiable parts of a
/// [`CwsOutput`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub warped_final: Tensor,
    /// Same order as `CwsOutput::level_warps`.
    pub level_warps: Vec<Tensor>,
    pub residual_0: Dvf,
}

impl OutputGrads {
    pub fn scale(&mut self, s: f64) {
        self.warped_final.scale(s);
        self.level_warps.iter_mut().for_each(|t| t.scale(s));
        self.residual_0.tensor_mut().scale(s);
    }
}

fn check_targets(out: &CwsOutput, targets: &[Tensor]) -> Result<()> {
    for lw in &out.level_warps {
        if lw.level >= targets.len() {
            return Err(Error::Shape(format!(
                "no target for level {} ({} levels supplied)",
                lw.level,
                targets.len()
            )));
        }
    }
    if targets.is_empty() {
        return Err(Error::Shape("empty target pyramid".into()));
    }
    Ok(())
}

pub fn total_loss(out: &CwsOutput, targets: &[Tensor], cfg: &LossConfig) -> Result<LossBreakdown> {
    check_targets(out, targets)?;
    let data = ncc_ssd(&out.warped_final, &targets[0], cfg.eps)?;
    let level_terms = out
        .level_warps
        .iter()
        .map(|lw| ncc_ssd(&lw.warped, &targets[lw.level], cfg.eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::new(data, reg_term(&out.residual_0, cfg), level_terms))
}

pub fn total_loss_grad(out: &CwsOutput, targets: &[Tensor], cfg: &LossConfig) -> Result<(LossBreakdown, OutputGrads)> {
    check_targets(out, targets)?;
    let (data, g_final, _) = ncc_ssd_grad(&out.warped_final, &targets[0], cfg.eps, cfg.detach_stats)?;
    let mut level_terms = Vec::with_capacity(out.level_warps.len());
    let mut g_levels = Vec::with_capacity(out.level_warps.len());
    for lw in &out.level_warps {
        let (d, g, _) = ncc_ssd_grad(&lw.warped, &targets[lw.level], cfg.eps, cfg.detach_stats)?;
        level_terms.push(d);
        g_levels.push(g);
    }
    let (reg, g_res) = reg_term_grad(&out.residual_0, cfg);
    Ok((
        LossBreakdown::new(data, reg, level_terms),
        OutputGrads {
            warped_final: g_final,
            level_warps: g_levels,
            residual_0: g_res,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(Shape::new(1, h, w).unwrap(), v).unwrap()
    }

    fn standardized(t: &Tensor) -> Tensor {
        let (m, s) = t.mean_std(0);
        let mut out = t.clone();
        out.values_mut().iter_mut().for_each(|v| *v = (*v - m) / s);
        out
    }

    #[test]
    fn identical_images_score_zero() {
        let a = random_image(8, 8, 1);
        assert_eq!(ncc_ssd(&a, &a, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn constant_images_score_zero() {
        let sh = Shape::new(1, 4, 4).unwrap();
        assert_eq!(ncc_ssd(&Tensor::make(sh, 2.0), &Tensor::make(sh, -5.0), 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn positive_affine_invariance() {
        let a = standardized(&random_image(16, 16, 2));
        let mut b = a.clone();
        b.values_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 7.0);
        assert!(ncc_ssd(&a, &b, 0.0).unwrap() < 1e-24);
        assert!(ncc_ssd(&a, &b, 1e-3).unwrap() < 1e-4);
    }

    #[test]
    fn shape_mismatch() {
        let a = random_image(4, 4, 3);
        let b = random_image(4, 5, 3);
        assert!(matches!(ncc_ssd(&a, &b, 1e-3), Err(Error::Shape(_))));
    }

    #[test]
    fn reg_examples() {
        let cfg = LossConfig::default();
        assert_eq!(reg_term(&Dvf::zeros(4, 4), &cfg), 0.0);
        assert_eq!(reg_term(&Dvf::constant(4, 4, 1.0, 0.0), &cfg), 2.5e-4);
        let r = Dvf::constant(4, 4, 0.3, 0.4);
        assert!((reg_term(&r, &cfg) - 2.5e-4).abs() < 1e-18);
        let (_, g) = reg_term_grad(&Dvf::constant(4, 4, 1.0, 0.0), &cfg);
        assert!(g.tensor().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reg_gradient_inside_interval() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let r = Dvf::new(Tensor::from_vec(Shape::new(2, 5, 5).unwrap(), v).unwrap()).unwrap();
        let (_, g) = reg_term_grad(&r, &cfg);
        let num = central_difference(
            |v| {
                let d = Dvf::new(Tensor::from_vec(r.tensor().shape(), v.to_vec()).unwrap()).unwrap();
                reg_term(&d, &cfg)
            },
            r.tensor().values(),
            1e-5,
        );
        assert!(relative_error(g.tensor().values(), &num) < 1e-6);
    }

    fn grad_check(detach: bool) -> (f64, f64) {
        let a = random_image(6, 6, 5);
        let b = random_image(6, 6, 6);
        let (_, ga, gb) = ncc_ssd_grad(&a, &b, 1e-3, detach).unwrap();
        let na = central_difference(
            |v| ncc_ssd(&Tensor::from_vec(a.shape(), v.to_vec()).unwrap(), &b, 1e-3).unwrap(),
            a.values(),
            1e-5,
        );
        let nb = central_difference(
            |v| ncc_ssd(&a, &Tensor::from_vec(b.shape(), v.to_vec()).unwrap(), 1e-3).unwrap(),
            b.values(),
            1e-5,
        );
        (relative_error(ga.values(), &na), relative_error(gb.values(), &nb))
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (ea, eb) = grad_check(false);
        assert!(ea < 1e-5 && eb < 1e-5, "{ea} {eb}");
    }

    #[test]
    fn detached_gradient_differs_from_full() {
        let (ea, _) = grad_check(true);
        assert!(ea > 1e-3);
    }

    #[test]
    fn breakdown_sums() {
        let b = LossBreakdown::new(0.5, 1e-4, vec![0.25, 0.125]);
        assert!((b.total - (0.5 + 1e-4 + 0.375)).abs() < 1e-12);
        assert_eq!(b.non_finite_term(), None);
        let bad = LossBreakdown::new(0.5, f64::NAN, vec![]);
        assert_eq!(bad.non_finite_term().as_deref(), Some("reg"));
    }

    #[test]
    fn invalid_config() {
        let cfg = LossConfig {
            eps: 0.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = LossConfig {
            clamp_lo: 1.0,
            clamp_hi: 0.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let a = random_image(5, 7, seed_a);
            let b = random_image(5, 7, seed_b + 1000);
            let ab = ncc_ssd(&a, &b, 1e-3).unwrap();
            let ba = ncc_ssd(&b, &a, 1e-3).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0 && ab <= 2.0 + 1e-3);
            let exact = ncc_ssd(&a, &b, 0.0).unwrap();
            prop_assert!(exact <= 2.0);
        }

        #[test]
        fn affine_with_any_sign(s in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], t in -10.0f64..10.0, seed in 0u64..500) {
            let a = random_image(6, 6, seed);
            let mut b = a.clone();
            b.values_mut().iter_mut().for_each(|v| *v = s * *v + t);
            prop_assert!(ncc_ssd(&a, &b, 0.0).unwrap() < 1e-20);
        }

        #[test]
        fn reg_within_bounds(scale in 0.0f64..3.0, seed in 0u64..500) {
            let cfg = LossConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..2 * 16).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let r = Dvf::new(Tensor::from_vec(Shape::new(2, 4, 4).unwrap(), v).unwrap()).unwrap();
            let value = reg_term(&r, &cfg);
            prop_assert!(value >= 0.0 && value <= cfg.lambda * 0.25);
        }
    }
}
