//! Derivative-free Nelder–Mead minimization.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadConfig {
    pub max_evals: usize,
    /// Stop when the simplex's value spread falls below this.
    pub f_tol: f64,
    /// Stop when every vertex lies within this of the best vertex.
    pub x_tol: f64,
    /// Edge length of the initial simplex.
    pub step: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        NelderMeadConfig { max_evals: 2000, f_tol: 1e-12, x_tol: 1e-9, step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Minimizes `f` from `x0` with dimension-adaptive coefficients
/// (Gao and Han). Non-finite values are treated as `+∞`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], cfg: &NelderMeadConfig) -> Minimum {
    let n = x0.len();
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
        let value = eval(x0, &mut evals);
        return Minimum { x: Vec::new(), value, evals };
    }
    let nf = n as f64;
    let (alpha, gamma) = (1.0, 1.0 + 2.0 / nf);
    let (rho, sigma) = (0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);

    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += cfg.step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if evals >= cfg.max_evals || (spread.abs() <= cfg.f_tol && size <= cfg.x_tol) || size <= cfg.x_tol * 1e-3 {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / nf;
            }
        }
        let along = |coef: f64, out: &mut Vec<f64>, worst: &[f64], c: &[f64]| {
            for ((o, &ci), &wi) in out.iter_mut().zip(c).zip(worst) {
                *o = ci + coef * (ci - wi);
            }
        };

        along(alpha, &mut trial, &simplex[n], &centroid);
        let fr = eval(&trial, &mut evals);
        if fr < values[0] {
            let reflected = trial.clone();
            along(gamma, &mut trial, &simplex[n], &centroid);
            let fe = eval(&trial, &mut evals);
            if fe < fr {
                simplex[n] = trial.clone();
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = trial.clone();
            values[n] = fr;
            continue;
        }
        let (coef, bound) = if fr < values[n] { (alpha * rho, fr) } else { (-rho, values[n]) };
        along(coef, &mut trial, &simplex[n], &centroid);
        let fc = eval(&trial, &mut evals);
        if fc < bound {
            simplex[n] = trial.clone();
            values[n] = fc;
            continue;
        }
        for i in 1..=n {
            for j in 0..n {
                simplex[i][j] = simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j]);
            }
            values[i] = eval(&simplex[i], &mut evals);
        }
    }
    Minimum { x: simplex.swap_remove(0), value: values[0], evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let cfg = NelderMeadConfig { max_evals: 5000, ..Default::default() };
        let m = nelder_mead(f, &[-1.2, 1.0], &cfg);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m);
    }

    #[test]
    fn minimizes_shifted_quadratic_in_ten_dimensions() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (v - i as f64 * 0.1).powi(2)).sum::<f64>();
        let cfg = NelderMeadConfig { max_evals: 20_000, ..Default::default() };
        let m = nelder_mead(f, &[0.0; 10], &cfg);
        assert!(m.value < 1e-8, "{m:?}");
        assert!(m.evals <= 20_000 + 11);
    }

    #[test]
    fn nan_is_avoided_and_budget_respected() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.3).powi(2) };
        let m = nelder_mead(f, &[1.0], &NelderMeadConfig::default());
        assert!((m.x[0] - 0.3).abs() < 1e-6);
        let m = nelder_mead(|x: &[f64]| x[0], &[0.0], &NelderMeadConfig { max_evals: 30, ..Default::default() });
        assert!(m.evals <= 32);
    }
}
