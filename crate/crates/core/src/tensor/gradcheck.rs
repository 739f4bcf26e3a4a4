//! Central finite-difference checks for hand-written backward passes.

/// Step used for central differences in 64-bit mode.
pub const FD_STEP: f64 = 1e-4;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Step for whole-network checks: deep ReLU stacks put enough units near
/// their kink that a 1e-4 step crosses some of them.
pub const NETWORK_FD_STEP: f64 = 1e-6;
/// Entries whose magnitudes are both below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let max_rel_error = analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
    GradCheck { name: name.into(), entries: analytic.len(), max_rel_error }
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn check(name: impl Into<String>, f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> GradCheck {
    check_with_step(name, f, x, analytic, FD_STEP)
}

pub fn check_with_step(
    name: impl Into<String>,
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheck {
    let numeric = numeric_gradient(f, x, step);
    compare(name, analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = [1.0, -2.0, 0.5];
        let f = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let analytic: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!(check("cubic", f, &x, &analytic).passed());
        let wrong: Vec<f64> = analytic.iter().map(|a| a * 1.01).collect();
        assert!(!check("cubic", f, &x, &wrong).passed());
    }
}
