//! Derivative-free Nelder-Mead minimizer with dimension-adaptive coefficients
//! and simplex restarts.

/// Outcome of a minimization run.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct NelderMead {
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Evaluation budget per simplex run.
    pub max_evaluations: usize,
    /// Relative spread of simplex values that ends a run.
    pub value_tol: f64,
    /// Fresh simplices built around the incumbent after the first run.
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            max_evaluations: 2000,
            value_tol: 1e-13,
            restarts: 40,
        }
    }
}

impl NelderMead {
    /// Minimizes `f` from `x0`. Restarts stop early once a run no longer
    /// improves the incumbent.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> Minimum {
        let mut best = Minimum {
            value: f(x0),
            x: x0.to_vec(),
            evaluations: 1,
        };
        if x0.is_empty() {
            return best;
        }
        let mut step = self.initial_step;
        let mut stale = 0;
        for _ in 0..=self.restarts {
            let run = self.run(&mut f, &best.x, step);
            best.evaluations += run.evaluations;
            let improved = run.value < best.value * (1.0 - 1e-14);
            if run.value < best.value {
                best.value = run.value;
                best.x = run.x;
            }
            if improved {
                stale = 0;
            } else {
                stale += 1;
                if stale >= 3 {
                    break;
                }
            }
            step = (step * 0.5).max(1e-4);
        }
        best
    }

    fn run<F: FnMut(&[f64]) -> f64>(&self, f: &mut F, x0: &[f64], step: f64) -> Minimum {
        let n = x0.len();
        let nf = n as f64;
        let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        let mut evaluations = n + 1;

        let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + t * (x - y)).collect()
        };

        while evaluations < self.max_evaluations {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[n] - values[0];
            if spread <= self.value_tol * values[0].abs().max(f64::MIN_POSITIVE) {
                break;
            }

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / nf;
                }
            }

            let reflected = combine(&centroid, &simplex[n], alpha);
            let fr = f(&reflected);
            evaluations += 1;

            if fr < values[0] {
                let expanded = combine(&centroid, &simplex[n], gamma);
                let fe = f(&expanded);
                evaluations += 1;
                if fe < fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
            } else {
                let contracted = if fr < values[n] {
                    combine(&centroid, &simplex[n], alpha * rho)
                } else {
                    combine(&centroid, &simplex[n], -rho)
                };
                let fc = f(&contracted);
                evaluations += 1;
                if fc < fr.min(values[n]) {
                    simplex[n] = contracted;
                    values[n] = fc;
                } else {
                    for i in 1..=n {
                        let shrunk: Vec<f64> = simplex[0]
                            .iter()
                            .zip(&simplex[i])
                            .map(|(b, x)| b + sigma * (x - b))
                            .collect();
                        values[i] = f(&shrunk);
                        simplex[i] = shrunk;
                    }
                    evaluations += n;
                }
            }
        }

        let (idx, &value) = values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty simplex");
        Minimum {
            x: simplex[idx].clone(),
            value,
            evaluations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead::default();
        let min = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
        );
        assert!((min.x[0] - 1.0).abs() < 1e-5, "{:?}", min);
        assert!((min.x[1] - 1.0).abs() < 1e-5, "{:?}", min);
    }

    #[test]
    fn nonsmooth_max() {
        let nm = NelderMead::default();
        let min = nm.minimize(|x| (x[0] - 1.0).abs().max((x[1] + 2.0).abs()), &[0.0, 0.0]);
        assert!(min.value < 1e-8, "{:?}", min);
    }
}
