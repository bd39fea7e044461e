//! Derivative-free Nelder-Mead minimisation.
//!
//! Uses the dimension-adaptive coefficients of Gao and Han, which keep the
//! simplex from collapsing prematurely in six or more dimensions. Non-finite
//! objective values are treated as `+inf`, so infeasible regions can simply
//! return NaN.

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when `f_max - f_min <= f_tol_abs + f_tol_rel * |f_min|` ...
    pub f_tol_abs: f64,
    pub f_tol_rel: f64,
    /// ... and every vertex lies within `x_tol` (max-norm) of the best.
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_evals: 2000,
            f_tol_abs: 1e-12,
            f_tol_rel: 1e-12,
            x_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn with_max_evals(mut self, n: usize) -> Self {
        self.max_evals = n;
        self
    }

    /// Minimise `f` from `x0`, with the initial simplex spanned by `step`
    /// along each coordinate axis.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], step: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        assert_eq!(step.len(), n, "step and start point differ in dimension");
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        if n == 0 {
            let fx = eval(x0, &mut evals);
            return Minimum {
                x: Vec::new(),
                f: fx,
                evals,
                converged: true,
            };
        }

        let nf = n as f64;
        let (alpha, beta, gamma, delta) = if n >= 2 {
            (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
        } else {
            (1.0, 2.0, 0.5, 0.5)
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += if step[i] != 0.0 { step[i] } else { 1e-3 };
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();
        let mut order: Vec<usize> = (0..=n).collect();
        let mut converged = false;

        loop {
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let best = order[0];
            let worst = order[n];
            let second = order[n - 1];

            let spread = values[worst] - values[best];
            let f_ok = spread.is_finite()
                && spread <= self.f_tol_abs + self.f_tol_rel * values[best].abs();
            let x_ok = simplex.iter().all(|v| {
                v.iter()
                    .zip(&simplex[best])
                    .all(|(a, b)| (a - b).abs() <= self.x_tol)
            });
            if f_ok && x_ok {
                converged = true;
                break;
            }
            if evals >= self.max_evals {
                break;
            }

            let mut centroid = vec![0.0; n];
            for &i in &order[..n] {
                for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                    *c += v / nf;
                }
            }
            let along = |t: f64, from: &[f64]| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(from)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let xr = along(alpha, &simplex[worst]);
            let fr = eval(&xr, &mut evals);
            if fr < values[best] {
                let xe = along(alpha * beta, &simplex[worst]);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[worst] = xe;
                    values[worst] = fe;
                } else {
                    simplex[worst] = xr;
                    values[worst] = fr;
                }
                continue;
            }
            if fr < values[second] {
                simplex[worst] = xr;
                values[worst] = fr;
                continue;
            }
            let (xc, fc, accept) = if fr < values[worst] {
                let xc = along(alpha * gamma, &simplex[worst]);
                let fc = eval(&xc, &mut evals);
                let ok = fc <= fr;
                (xc, fc, ok)
            } else {
                let xc = along(-gamma, &simplex[worst]);
                let fc = eval(&xc, &mut evals);
                let ok = fc < values[worst];
                (xc, fc, ok)
            };
            if accept {
                simplex[worst] = xc;
                values[worst] = fc;
                continue;
            }
            let anchor = simplex[best].clone();
            for &i in &order[1..] {
                for (v, a) in simplex[i].iter_mut().zip(&anchor) {
                    *v = a + delta * (*v - a);
                }
                values[i] = eval(&simplex[i], &mut evals);
            }
        }

        let best = (0..=n)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap();
        Minimum {
            x: simplex[best].clone(),
            f: values[best],
            evals,
            converged,
        }
    }
}
