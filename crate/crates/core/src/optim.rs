//! First-order optimizers over flat parameter vectors and a central
//! finite-difference gradient checker.
//!
//! Optimizers minimize. Callers maximizing an objective pass the negated
//! gradient.

use crate::{Error, Result};

/// A flat parameter vector together with the named block shapes it packs.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Vec<(String, Vec<usize>)>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let size: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if size != values.len() {
            return Err(Error::Shape(format!("layout describes {size} values, got {}", values.len())));
        }
        Ok(Self { values, layout })
    }

    /// A single unnamed block.
    pub fn from_vec(values: Vec<f64>) -> Self {
        let len = values.len();
        Self { values, layout: vec![("x".into(), vec![len])] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values and shape of block `k`.
    pub fn block(&self, k: usize) -> (&[f64], &[usize]) {
        let start: usize = self.layout[..k].iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let shape = &self.layout[k].1;
        let len: usize = shape.iter().product();
        (&self.values[start..start + len], shape)
    }
}

fn check_len(p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(Error::Shape(format!("gradient has length {g}, parameters {p}")));
    }
    Ok(())
}

/// `params − lr · grad`.
pub fn sgd_step(params: &FlatParams, grad: &[f64], lr: f64) -> Result<FlatParams> {
    check_len(params.len(), grad.len())?;
    let mut out = params.clone();
    for (x, g) in out.values.iter_mut().zip(grad) {
        *x -= lr * g;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// Moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, config }
    }

    /// Folds `grad` into the moments and returns the bias-corrected step
    /// `lr · m̂ / (√v̂ + ε)`, to be subtracted from the parameters.
    pub fn step_direction(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        check_len(self.m.len(), grad.len())?;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut step = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            step.push(learning_rate * m_hat / (v_hat.sqrt() + epsilon));
        }
        Ok(step)
    }
}

/// One Adam update with bias correction.
pub fn adam_step(params: &FlatParams, grad: &[f64], state: &AdamState) -> Result<(FlatParams, AdamState)> {
    check_len(params.len(), grad.len())?;
    let mut state = state.clone();
    let step = state.step_direction(grad)?;
    let mut out = params.clone();
    for (x, s) in out.values.iter_mut().zip(step) {
        *x -= s;
    }
    Ok((out, state))
}

/// Maximum number of step halvings tried by [`guarded_adam_step`].
pub const MAX_HALVINGS: usize = 20;

/// An Adam step that never increases the objective.
///
/// The Adam direction is tried at full length and then halved up to
/// [`MAX_HALVINGS`] times; the first trial whose objective does not exceed
/// `f_x` is accepted. Trials whose evaluation fails count as rejections. If
/// every trial is rejected `x` is left unchanged. Returns the objective at
/// the accepted point.
pub fn guarded_adam_step<F>(x: &mut [f64], f_x: f64, grad: &[f64], state: &mut AdamState, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_len(x.len(), grad.len())?;
    let step = state.step_direction(grad)?;
    let mut trial = vec![0.0; x.len()];
    let mut scale = 1.0;
    for _ in 0..=MAX_HALVINGS {
        for ((t, xi), s) in trial.iter_mut().zip(x.iter()).zip(&step) {
            *t = xi - scale * s;
        }
        if let Ok(value) = f(&trial) {
            if value.is_finite() && value <= f_x {
                x.copy_from_slice(&trial);
                return Ok(value);
            }
        }
        scale *= 0.5;
    }
    Ok(f_x)
}

/// Outcome of [`check_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |fd_i − g_i| / max(1, |g_i|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares `grad_f(x)` against central differences
/// `(f(x + h e_i) − f(x − h e_i)) / 2h` coordinate by coordinate.
pub fn check_gradient<F, G>(f: F, grad_f: G, x: &[f64], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad_f(x);
    check_len(x.len(), analytic.len())?;
    let mut probe = x.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("objective during gradient check"));
        }
        let fd = (plus - minus) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, passed: max_rel_error < tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sgd_cases() {
        let p = FlatParams::from_vec(vec![1.0, 2.0]);
        assert_eq!(sgd_step(&p, &[1.0, 0.0], 0.5).unwrap().values(), &[0.5, 2.0]);
        assert_eq!(sgd_step(&p, &[3.0, -7.0], 0.0).unwrap(), p);
        assert!(sgd_step(&p, &[1.0], 0.1).is_err());
    }

    #[test]
    fn sgd_contracts_on_quadratic() {
        let mut x = FlatParams::from_vec(vec![1.0]);
        for _ in 0..50 {
            let g = 2.0 * x.values()[0];
            x = sgd_step(&x, &[g], 0.4).unwrap();
        }
        // factor 0.2 per step
        assert!(x.values()[0].abs() < 1e-3);
        assert_abs_diff_eq!(x.values()[0], 0.2f64.powi(50), epsilon = 1e-40);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let p = FlatParams::from_vec(vec![0.0, 0.0, 0.0]);
        let s = AdamState::new(3, AdamConfig::with_lr(0.1));
        let (q, s) = adam_step(&p, &[1e-3, -250.0, 7.0], &s).unwrap();
        assert_eq!(s.t, 1);
        assert_abs_diff_eq!(q.values()[0], -0.1, epsilon = 1e-5);
        assert_abs_diff_eq!(q.values()[1], 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(q.values()[2], -0.1, epsilon = 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = FlatParams::from_vec(vec![1.5, -2.0]);
        let mut s = AdamState::new(2, AdamConfig::default());
        for _ in 0..100 {
            (p, s) = adam_step(&p, &[0.0, 0.0], &s).unwrap();
        }
        assert_eq!(p.values(), &[1.5, -2.0]);
        assert!(adam_step(&p, &[0.0], &s).is_err());
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
        vec![-2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]), 200.0 * (x[1] - x[0] * x[0])]
    }

    #[test]
    fn adam_solves_rosenbrock() {
        let mut p = FlatParams::from_vec(vec![-1.2, 1.0]);
        let mut s = AdamState::new(2, AdamConfig::with_lr(0.01));
        for _ in 0..20_000 {
            let g = rosenbrock_grad(p.values());
            (p, s) = adam_step(&p, &g, &s).unwrap();
        }
        let f = rosenbrock(p.values());
        assert!(f < 1e-3, "f = {f}");
        assert!((f - ROSENBROCK_PINNED).abs() < 1e-3 * ROSENBROCK_PINNED, "f = {f:e}");
    }

    /// Objective value reached by the run above, pinned as a regression
    /// value.
    const ROSENBROCK_PINNED: f64 = 1.1555457372597073e-11;

    #[test]
    fn gradient_checker_cases() {
        let r = check_gradient(|_| 3.0, |x| vec![0.0; x.len()], &[0.3, -1.0], 1e-5, 1e-12).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);

        let x = [0.7, -1.3, 2.5, 0.0];
        let r =
            check_gradient(|x| x.iter().map(|v| v * v).sum(), |x| x.iter().map(|v| 2.0 * v).collect(), &x, 1e-5, 1e-9)
                .unwrap();
        assert!(r.passed, "{r:?}");

        let bad = check_gradient(|x| x[0] * x[0], |_| vec![0.0], &[1.0], 1e-5, 1e-6).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_index, 0);

        assert!(check_gradient(|x| (x[0] - 1e-6).ln(), |_| vec![0.0], &[0.0], 1e-5, 1e-6).is_err());
    }

    #[test]
    fn rosenbrock_gradient_passes_checker() {
        let r = check_gradient(rosenbrock, rosenbrock_grad, &[-1.2, 1.0], 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn adam_opposes_gradient_sign(g in prop_oneof![-1e3..-1e-6f64, 1e-6..1e3f64], steps in 1usize..20) {
            let mut p = FlatParams::from_vec(vec![0.0]);
            let mut s = AdamState::new(1, AdamConfig::default());
            for _ in 0..steps {
                let before = p.values()[0];
                (p, s) = adam_step(&p, &[g], &s).unwrap();
                let moved = p.values()[0] - before;
                prop_assert!(moved * g < 0.0);
            }
        }

        #[test]
        fn optimizers_are_deterministic(v in proptest::collection::vec(-5.0..5.0f64, 1..6)) {
            let p = FlatParams::from_vec(v.clone());
            let s = AdamState::new(v.len(), AdamConfig::default());
            prop_assert_eq!(adam_step(&p, &v, &s).unwrap(), adam_step(&p, &v, &s).unwrap());
            prop_assert_eq!(sgd_step(&p, &v, 0.1).unwrap(), sgd_step(&p, &v, 0.1).unwrap());
        }
    }
}
