//! Finite-difference verification of analytic gradients.

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients.
///
/// Each entry is divided by `max(|a|, |n|, floor)` where the floor is 1% of
/// the largest magnitude in either vector, so entries that are numerically
/// zero compared with the rest of the gradient do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences together with a per-coordinate kink flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Probed {
    pub numeric: Vec<f64>,
    /// Coordinates whose one-sided differences disagree, i.e. where `f` has a
    /// slope discontinuity within `h` of `x`.
    pub kinks: Vec<bool>,
}

impl Probed {
    pub fn kink_count(&self) -> usize {
        self.kinks.iter().filter(|k| **k).count()
    }
}

/// Relative disagreement between one-sided differences that marks a kink.
pub const KINK_RATIO: f64 = 1e-3;

/// Like [`central_difference`], but also flags coordinates where the forward
/// and backward differences differ by more than [`KINK_RATIO`] of their size
/// (floored at 1% of the largest central difference).
pub fn probe_with_kinks(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Probed {
    let f0 = f(x);
    let mut probe = x.to_vec();
    let sides: Vec<(f64, f64)> = (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            ((up - f0) / h, (f0 - down) / h)
        })
        .collect();
    let numeric: Vec<f64> = sides.iter().map(|(a, b)| 0.5 * (a + b)).collect();
    let floor = 1e-2 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let kinks = sides
        .iter()
        .map(|&(fwd, bwd)| (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(floor))
        .collect();
    Probed { numeric, kinks }
}

/// [`relative_error`] restricted to coordinates not flagged in `skip`.
pub fn relative_error_masked(analytic: &[f64], numeric: &[f64], skip: &[bool]) -> f64 {
    let keep = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(skip).filter(|(_, s)| !**s).map(|(x, _)| *x).collect()
    };
    relative_error(&keep(analytic), &keep(numeric))
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_gradient(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let numeric = central_difference(f, x, h);
    relative_error(analytic, &numeric)
}
