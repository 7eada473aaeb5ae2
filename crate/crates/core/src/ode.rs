//! Dormand–Prince 5(4) embedded Runge–Kutta integrator with adaptive steps.
//!
//! The integrator only ever steps exactly onto requested output times; callers
//! restart it (via [`Dopri5::restart`]) whenever the right-hand side changes
//! discontinuously, e.g. at an input step.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Any state component beyond this magnitude is treated as a blow-up.
pub const BLOWUP_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on a single step; `f64::INFINITY` leaves it free.
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_step: f64::INFINITY, max_steps: 1_000_000 }
    }
}

impl OdeOptions {
    pub fn with_rtol(rtol: f64) -> Self {
        Self { rtol, atol: rtol * 1e-2, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Dopri5<const N: usize> {
    opts: OdeOptions,
    h: Option<f64>,
    fsal: Option<(f64, [f64; N])>,
    steps: usize,
}

#[inline]
fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (c, k) in terms {
            s += c * k[i];
        }
        *o += h * s;
    }
    out
}

impl<const N: usize> Dopri5<N> {
    pub fn new(opts: OdeOptions) -> Self {
        Self { opts, h: None, fsal: None, steps: 0 }
    }

    /// Forget step-size history and the cached derivative.
    pub fn restart(&mut self) {
        self.h = None;
        self.fsal = None;
    }

    /// Accepted plus rejected steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn norm(&self, err: &[f64; N], y0: &[f64; N], y1: &[f64; N]) -> f64 {
        let mut s = 0.0;
        for i in 0..N {
            let sc = self.opts.atol + self.opts.rtol * y0[i].abs().max(y1[i].abs());
            s += (err[i] / sc).powi(2);
        }
        (s / N as f64).sqrt()
    }

    fn initial_step<F>(&self, f: &mut F, t: f64, y: &[f64; N], k1: &[f64; N], span: f64) -> f64
    where
        F: FnMut(f64, &[f64; N]) -> [f64; N],
    {
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..N {
            let sc = self.opts.atol + self.opts.rtol * y[i].abs();
            d0 += (y[i] / sc).powi(2);
            d1 += (k1[i] / sc).powi(2);
        }
        d0 = (d0 / N as f64).sqrt();
        d1 = (d1 / N as f64).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1 = axpy(y, h0, &[(1.0, k1)]);
        let k2 = f(t + h0, &y1);
        let mut d2 = 0.0;
        for i in 0..N {
            let sc = self.opts.atol + self.opts.rtol * y[i].abs();
            d2 += ((k2[i] - k1[i]) / sc).powi(2);
        }
        d2 = (d2 / N as f64).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h0).min(h1).min(span).min(self.opts.max_step)
    }

    /// Advance from `(t0, y0)` to exactly `t1`.
    pub fn integrate<F>(&mut self, f: &mut F, t0: f64, y0: [f64; N], t1: f64) -> Result<[f64; N]>
    where
        F: FnMut(f64, &[f64; N]) -> [f64; N],
    {
        if !(t1 > t0) {
            if t1 == t0 {
                return Ok(y0);
            }
            return Err(Error::InvalidArgument(format!("integration end {t1} precedes start {t0}")));
        }
        let mut t = t0;
        let mut y = y0;
        let mut k1 = match self.fsal {
            Some((tc, k)) if tc == t0 => k,
            _ => f(t, &y),
        };
        let mut h = match self.h {
            Some(h) => h,
            None => self.initial_step(f, t, &y, &k1, t1 - t0),
        };
        loop {
            if self.steps >= self.opts.max_steps {
                return Err(Error::Integration { time: t, reason: "step budget exhausted".into() });
            }
            let remaining = t1 - t;
            let clipped = h >= remaining;
            let hs = if clipped { remaining } else { h.min(self.opts.max_step) };
            if hs <= 1e-13 * t.abs().max(1.0) && !clipped {
                return Err(Error::Integration { time: t, reason: format!("step size underflow (h = {hs:e})") });
            }
            self.steps += 1;

            let k2 = f(t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]));
            let k3 = f(t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
            let k4 = f(t + C4 * hs, &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
            let k5 = f(t + C5 * hs, &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
            let k6 = f(t + hs, &axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
            let y_new = axpy(&y, hs, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
            let k7 = f(t + hs, &y_new);
            let mut err = [0.0; N];
            for i in 0..N {
                err[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            }
            let en = self.norm(&err, &y, &y_new);
            if !en.is_finite() {
                if hs <= 1e-13 * t.abs().max(1.0) {
                    return Err(Error::Integration { time: t, reason: "non-finite state".into() });
                }
                h = hs * 0.1;
                continue;
            }
            let factor = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            if en <= 1.0 {
                if y_new.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
                    return Err(Error::Integration { time: t + hs, reason: "state blow-up".into() });
                }
                t = if clipped { t1 } else { t + hs };
                y = y_new;
                k1 = k7;
                let next = hs * factor;
                h = if clipped { next.max(h) } else { next };
                h = h.min(self.opts.max_step);
                if clipped {
                    self.h = Some(h);
                    self.fsal = Some((t, k1));
                    return Ok(y);
                }
            } else {
                if hs <= 1e-13 * t.abs().max(1.0) {
                    return Err(Error::Integration { time: t, reason: format!("step size underflow (h = {hs:e})") });
                }
                h = hs * factor.min(1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let mut solver = Dopri5::<1>::new(OdeOptions { rtol: 1e-8, atol: 1e-10, ..Default::default() });
        let y = solver.integrate(&mut |_, y| [-y[0]], 0.0, [1.0], 1.0).unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn harmonic_oscillator_over_many_output_points() {
        let mut solver = Dopri5::<2>::new(OdeOptions { rtol: 1e-10, atol: 1e-12, ..Default::default() });
        let mut f = |_: f64, y: &[f64; 2]| [y[1], -y[0]];
        let mut y = [1.0, 0.0];
        let mut t = 0.0;
        for k in 1..=100 {
            let t1 = k as f64 * 0.1;
            y = solver.integrate(&mut f, t, y, t1).unwrap();
            t = t1;
        }
        assert!((y[0] - 10f64.cos()).abs() < 1e-8);
        assert!((y[1] + 10f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn blow_up_is_reported_with_time() {
        let mut solver = Dopri5::<1>::new(OdeOptions::default());
        // y' = y^2 with y(0) = 1 escapes at t = 1
        let err = solver.integrate(&mut |_, y| [y[0] * y[0]], 0.0, [1.0], 2.0).unwrap_err();
        match err {
            Error::Integration { time, .. } => assert!(time < 1.0 + 1e-6 && time > 0.9),
            other => panic!("unexpected {other:?}"),
        }
    }
}
