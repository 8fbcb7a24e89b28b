use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Adaptive steps below this size abort the integration.
pub const MIN_STEP: f64 = 1e-12;
/// Total step budget of one integration call.
pub const MAX_STEPS: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Classic fourth-order Runge-Kutta; the step is shrunk so each output
    /// interval holds a whole number of steps.
    Rk4 { dt: f64 },
    /// Dormand-Prince 5(4) with mixed absolute/relative error control.
    Rk45 { atol: f64, rtol: f64 },
}

impl Method {
    pub const DATA: Method = Method::Rk45 { atol: 1e-9, rtol: 1e-9 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// `n` evenly spaced points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![start],
        _ => (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Integrates `f(t, s)` from `times[0]` and returns the states at every entry
/// of `times`, which must be non-decreasing.
pub fn integrate<F>(mut f: F, s0: &[f64], times: &[f64], method: Method) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("output times must be non-decreasing".into()));
    }
    let mut states = Vec::with_capacity(times.len());
    let Some(&t0) = times.first() else {
        return Ok(Trajectory { times: Vec::new(), states });
    };
    let mut s = s0.to_vec();
    states.push(s.clone());
    let mut steps = 0usize;
    match method {
        Method::Rk4 { dt } => {
            if !(dt > 0.0) {
                return Err(Error::Config("rk4 step must be positive".into()));
            }
            let mut t = t0;
            for &target in &times[1..] {
                let span = target - t;
                let n = libm::ceil(span / dt - 1e-9).max(0.0) as usize;
                let h = if n > 0 { span / n as f64 } else { 0.0 };
                for i in 0..n {
                    s = rk4_step(&mut f, t + i as f64 * h, &s, h)?;
                    steps += 1;
                    if steps > MAX_STEPS {
                        return Err(Error::TooManySteps { steps: MAX_STEPS, t });
                    }
                }
                t = target;
                check_finite(&s, t)?;
                states.push(s.clone());
            }
        }
        Method::Rk45 { atol, rtol } => {
            if !(atol > 0.0 && rtol > 0.0) {
                return Err(Error::Config("rk45 tolerances must be positive".into()));
            }
            let mut stepper = DormandPrince { atol, rtol, h: 0.0, k1: None };
            let mut t = t0;
            for &target in &times[1..] {
                while t < target {
                    let (t_new, s_new, taken) = stepper.advance(&mut f, t, &s, target)?;
                    steps += taken;
                    if steps > MAX_STEPS {
                        return Err(Error::TooManySteps { steps: MAX_STEPS, t });
                    }
                    t = t_new;
                    s = s_new;
                }
                check_finite(&s, t)?;
                states.push(s.clone());
            }
        }
    }
    Ok(Trajectory { times: times.to_vec(), states })
}

fn check_finite(s: &[f64], t: f64) -> Result<()> {
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(alloc::format!("state at t = {t}")))
    }
}

fn axpy(s: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    s.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn rk4_step<F>(f: &mut F, t: f64, s: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(t, s)?;
    let k2 = f(t + 0.5 * h, &axpy(s, 0.5 * h, &k1))?;
    let k3 = f(t + 0.5 * h, &axpy(s, 0.5 * h, &k2))?;
    let k4 = f(t + h, &axpy(s, h, &k3))?;
    Ok((0..s.len()).map(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct DormandPrince {
    atol: f64,
    rtol: f64,
    h: f64,
    /// Derivative at the current point, reused after an accepted step.
    k1: Option<Vec<f64>>,
}

impl DormandPrince {
    /// Takes one accepted step towards `target` (never past it).
    fn advance<F>(&mut self, f: &mut F, t: f64, s: &[f64], target: f64) -> Result<(f64, Vec<f64>, usize)>
    where
        F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    {
        let n = s.len();
        let k1 = match self.k1.take() {
            Some(k) => k,
            None => f(t, s)?,
        };
        if self.h == 0.0 {
            self.h = self.initial_step(s, &k1, target - t);
        }
        let mut attempts = 0usize;
        loop {
            attempts += 1;
            let remaining = target - t;
            let last = self.h >= remaining;
            let h = if last { remaining } else { self.h };
            if h < MIN_STEP && !last {
                return Err(Error::StepUnderflow { t });
            }
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
            k.push(k1.clone());
            for stage in 1..7 {
                let mut y = s.to_vec();
                for (j, kj) in k.iter().enumerate() {
                    let a = A[stage][j];
                    if a != 0.0 {
                        for i in 0..n {
                            y[i] += h * a * kj[i];
                        }
                    }
                }
                if stage == 6 {
                    // the last stage is evaluated at the fifth-order solution
                    k.push(f(t + h, &y)?);
                    let mut err = 0.0;
                    for i in 0..n {
                        let e: f64 = h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
                        let scale = self.atol + self.rtol * s[i].abs().max(y[i].abs());
                        err += (e / scale) * (e / scale);
                    }
                    let err = libm::sqrt(err / n.max(1) as f64);
                    if err.is_finite() && err <= 1.0 {
                        let grow = if err == 0.0 { 5.0 } else { (0.9 * libm::pow(err, -0.2)).clamp(0.2, 5.0) };
                        if !last || h >= self.h {
                            self.h = h * grow;
                        }
                        self.k1 = k.pop();
                        return Ok((if last { target } else { t + h }, y, attempts));
                    }
                    let shrink = if err.is_finite() { (0.9 * libm::pow(err, -0.2)).clamp(0.1, 0.9) } else { 0.1 };
                    self.h = h * shrink;
                    if self.h < MIN_STEP {
                        return Err(Error::StepUnderflow { t });
                    }
                    break;
                }
                k.push(f(t + C[stage] * h, &y)?);
            }
            if attempts > MAX_STEPS {
                return Err(Error::TooManySteps { steps: attempts, t });
            }
        }
    }

    fn initial_step(&self, s: &[f64], k1: &[f64], span: f64) -> f64 {
        let scale = |i: usize| self.atol + self.rtol * s[i].abs();
        let rms = |v: &dyn Fn(usize) -> f64| libm::sqrt((0..s.len()).map(|i| v(i) * v(i)).sum::<f64>() / s.len().max(1) as f64);
        let d0 = rms(&|i| s[i] / scale(i));
        let d1 = rms(&|i| k1[i] / scale(i));
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min(span.abs()).max(MIN_STEP * 10.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn oscillator(_t: f64, s: &[f64]) -> Result<Vec<f64>> {
        Ok(alloc::vec![s[1], -s[0]])
    }

    #[test]
    fn rk4_returns_after_one_period() {
        let traj = integrate(oscillator, &[1.0, 0.0], &[0.0, 2.0 * PI], Method::Rk4 { dt: 1e-3 }).unwrap();
        let end = &traj.states[1];
        assert!((end[0] - 1.0).abs() < 1e-6 && end[1].abs() < 1e-6, "{end:?}");
    }

    #[test]
    fn rk45_matches_analytic_solution() {
        let times = linspace(0.0, 10.0, 101);
        let traj = integrate(oscillator, &[1.0, 0.0], &times, Method::DATA).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s[0] - t.cos()).abs() < 1e-7, "t={t}");
            assert!((s[1] + t.sin()).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn zero_field_is_constant() {
        let times = linspace(0.0, 5.0, 11);
        for method in [Method::Rk4 { dt: 0.1 }, Method::DATA] {
            let traj = integrate(|_, s| Ok(alloc::vec![0.0; s.len()]), &[0.3, -2.0], &times, method).unwrap();
            assert!(traj.states.iter().all(|s| s == &[0.3, -2.0]));
        }
    }

    #[test]
    fn singular_field_underflows() {
        // s' = 1 / (1 - t) blows up at t = 1
        let err = integrate(|t, _| Ok(alloc::vec![1.0 / (1.0 - t)]), &[0.0], &[0.0, 2.0], Method::DATA);
        assert!(err.is_err());
    }

    #[test]
    fn linspace_endpoints() {
        let v = linspace(0.0, 10.0, 5);
        assert_eq!(v, alloc::vec![0.0, 2.5, 5.0, 7.5, 10.0]);
        assert_eq!(linspace(1.0, 2.0, 1), alloc::vec![1.0]);
    }
}
