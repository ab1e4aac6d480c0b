//! Adaptive composite Simpson quadrature.
//!
//! Used by the linear-SDE law oracle, which has to be several orders of
//! magnitude more accurate than any Monte Carlo estimate it is compared with.

use crate::error::{Error, Result};

/// Initial number of panels before adaptive refinement starts.
const INITIAL_PANELS: usize = 16;
const MAX_DEPTH: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub abs_tol: f64,
    /// Hard cap on integrand evaluations.
    pub max_nodes: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            max_nodes: 1 << 20,
        }
    }
}

impl Quadrature {
    pub fn with_tolerance(abs_tol: f64) -> Self {
        Self {
            abs_tol,
            ..Self::default()
        }
    }

    /// Integrates an infallible integrand over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> Result<f64> {
        self.try_integrate(|x| Ok(f(x)), a, b)
    }

    /// Integrates `f` over `[a, b]`; any non-finite integrand value is
    /// reported as a coefficient blow-up at that abscissa.
    pub fn try_integrate<F>(&self, mut f: F, a: f64, b: f64) -> Result<f64>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        if a == b {
            return Ok(0.0);
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "quadrature bounds must be finite, got [{a}, {b}]"
            )));
        }
        let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };

        let evals = std::cell::Cell::new(0usize);
        let mut eval = |x: f64| -> Result<f64> {
            evals.set(evals.get() + 1);
            let v = f(x)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::CoefficientBlowUp(x))
            }
        };

        struct Panel {
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        }

        let width = (hi - lo) / INITIAL_PANELS as f64;
        let panel_tol = self.abs_tol / INITIAL_PANELS as f64;
        let mut stack = Vec::with_capacity(64);
        let mut f_left = eval(lo)?;
        for i in 0..INITIAL_PANELS {
            let pa = lo + width * i as f64;
            let pb = if i + 1 == INITIAL_PANELS {
                hi
            } else {
                lo + width * (i + 1) as f64
            };
            let fm = eval(0.5 * (pa + pb))?;
            let fb = eval(pb)?;
            let whole = (pb - pa) / 6.0 * (f_left + 4.0 * fm + fb);
            stack.push(Panel {
                a: pa,
                b: pb,
                fa: f_left,
                fm,
                fb,
                whole,
                tol: panel_tol,
                depth: 0,
            });
            f_left = fb;
        }

        let mut total = 0.0;
        // Kahan-compensated sum over accepted panels.
        let mut comp = 0.0;
        while let Some(p) = stack.pop() {
            if evals.get() > self.max_nodes {
                return Err(Error::QuadratureBudget(self.max_nodes));
            }
            let m = 0.5 * (p.a + p.b);
            let lm = 0.5 * (p.a + m);
            let rm = 0.5 * (m + p.b);
            let flm = eval(lm)?;
            let frm = eval(rm)?;
            let left = (m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
            let right = (p.b - m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
            let diff = left + right - p.whole;
            if diff.abs() <= 15.0 * p.tol || p.depth >= MAX_DEPTH {
                let contribution = left + right + diff / 15.0;
                let y = contribution - comp;
                let t = total + y;
                comp = (t - total) - y;
                total = t;
            } else {
                let tol = 0.5 * p.tol;
                let depth = p.depth + 1;
                stack.push(Panel {
                    a: p.a,
                    b: m,
                    fa: p.fa,
                    fm: flm,
                    fb: p.fm,
                    whole: left,
                    tol,
                    depth,
                });
                stack.push(Panel {
                    a: m,
                    b: p.b,
                    fa: p.fm,
                    fm: frm,
                    fb: p.fb,
                    whole: right,
                    tol,
                    depth,
                });
            }
        }
        Ok(sign * total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_up_to_cubic_are_exact() {
        let q = Quadrature::default();
        let v = q.integrate(|x| 3.0 * x * x * x - x + 2.0, -1.0, 2.0).unwrap();
        // 3/4 x^4 - x^2/2 + 2x on [-1, 2]
        let exact = (0.75 * 16.0 - 2.0 + 4.0) - (0.75 - 0.5 - 2.0);
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn smooth_transcendental_meets_tolerance() {
        let q = Quadrature::default();
        let v = q.integrate(|x| (-x * x).exp(), 0.0, 3.0).unwrap();
        // erf(3) * sqrt(pi) / 2
        let exact = 0.886_207_348_259_521_1;
        assert!((v - exact).abs() < 1e-10, "{v} vs {exact}");
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let q = Quadrature::default();
        let a = q.integrate(|x| x.sin(), 0.0, 1.0).unwrap();
        let b = q.integrate(|x| x.sin(), 1.0, 0.0).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let q = Quadrature::default();
        let err = q.integrate(|x| 1.0 / (x - 0.5), 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::CoefficientBlowUp(_)));
    }

    #[test]
    fn node_budget_is_enforced() {
        let q = Quadrature {
            abs_tol: 1e-15,
            max_nodes: 200,
        };
        let err = q.integrate(|x| (50.0 * x).sin().abs(), 0.0, 10.0).unwrap_err();
        assert_eq!(err, Error::QuadratureBudget(200));
    }
}
