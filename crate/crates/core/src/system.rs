//! Consistent least-squares systems `A·x_* = y` and the objective
//! `F(x) = ‖Ax − y‖² / (2m)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::matrix::{check_finite, dot, norm_sq, DenseMatrix};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: DenseMatrix,
    pub y: Vec<f64>,
    pub x_star: Option<Vec<f64>>,
}

impl LinearSystem {
    pub fn new(a: DenseMatrix, y: Vec<f64>, x_star: Option<Vec<f64>>) -> Result<Self> {
        check_len("y length vs rows", a.rows(), y.len())?;
        check_finite(&y)?;
        if let Some(xs) = &x_star {
            check_len("x_star length vs cols", a.cols(), xs.len())?;
            check_finite(xs)?;
        }
        Ok(Self { a, y, x_star })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.a.cols()
    }

    pub fn x_star(&self) -> Result<&[f64]> {
        self.x_star.as_deref().ok_or(Error::MissingGroundTruth)
    }

    /// `‖A·x_* − y‖² ≤ 1e-18·(1 + ‖y‖²)`; false when no `x_star` is attached.
    pub fn is_consistent(&self) -> bool {
        let Some(xs) = &self.x_star else {
            return false;
        };
        let resid: f64 = (0..self.rows())
            .map(|i| {
                let r = dot(self.a.row(i), xs) - self.y[i];
                r * r
            })
            .sum();
        resid <= 1e-18 * (1.0 + norm_sq(&self.y))
    }
}

/// Draws `A` and `x_*` with i.i.d. standard normal entries and sets
/// `y = A·x_*`. Entries of `A` are drawn row by row, then `x_*`.
pub fn generate_gaussian_system(m: usize, n: usize, seed: u64) -> Result<LinearSystem> {
    if m == 0 {
        return Err(Error::invalid("m", "row count must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("n", "column count must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
    let x_star: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let a = DenseMatrix::new(m, n, data)?;
    let y = a.matvec(&x_star)?;
    LinearSystem::new(a, y, Some(x_star))
}

pub fn objective(sys: &LinearSystem, x: &[f64]) -> Result<f64> {
    check_len("x length vs cols", sys.cols(), x.len())?;
    let sum: f64 = (0..sys.rows())
        .map(|i| {
            let r = dot(sys.a.row(i), x) - sys.y[i];
            r * r
        })
        .sum();
    Ok(sum / (2.0 * sys.rows() as f64))
}

/// `∇F(x) = Aᵀ(Ax − y)/m`
pub fn full_gradient(sys: &LinearSystem, x: &[f64]) -> Result<Vec<f64>> {
    check_len("x length vs cols", sys.cols(), x.len())?;
    let m = sys.rows() as f64;
    let mut g = vec![0.0; sys.cols()];
    for i in 0..sys.rows() {
        let row = sys.a.row(i);
        let r = dot(row, x) - sys.y[i];
        for (gc, &a) in g.iter_mut().zip(row) {
            *gc += a * r;
        }
    }
    g.iter_mut().for_each(|v| *v /= m);
    Ok(g)
}

/// `‖x − x_*‖²`
pub fn error_sq(x: &[f64], x_star: &[f64]) -> Result<f64> {
    check_len("error_sq operands", x_star.len(), x.len())?;
    Ok(x.iter()
        .zip(x_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn scalar_system_is_consistent() {
        let sys = generate_gaussian_system(1, 1, 0).unwrap();
        let xs = sys.x_star().unwrap();
        assert_eq!(sys.y[0], sys.a.get(0, 0) * xs[0]);
        assert!(sys.is_consistent());
    }

    #[test]
    fn generation_rejects_empty_shapes() {
        assert!(generate_gaussian_system(0, 3, 1).is_err());
        assert!(generate_gaussian_system(3, 0, 1).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_gaussian_system(40, 6, 11).unwrap();
        let b = generate_gaussian_system(40, 6, 11).unwrap();
        let c = generate_gaussian_system(40, 6, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bits = |s: &LinearSystem| s.a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn generated_entries_are_standard_normal() {
        let sys = generate_gaussian_system(5000, 10, 3).unwrap();
        let vals = sys.a.as_slice();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn large_tall_system_generates() {
        let sys = generate_gaussian_system(10_000, 25, 7).unwrap();
        assert_eq!((sys.rows(), sys.cols()), (10_000, 25));
        assert!(sys.is_consistent());
    }

    #[test]
    fn objective_small_cases() {
        let sys = LinearSystem::new(DenseMatrix::identity(1), vec![2.0], None).unwrap();
        assert_eq!(objective(&sys, &[0.0]).unwrap(), 2.0);
        let g = generate_gaussian_system(30, 4, 1).unwrap();
        assert!(objective(&g, g.x_star().unwrap()).unwrap() < 1e-28);
        assert!(objective(&g, &[0.0; 3]).is_err());
    }

    #[test]
    fn objective_matches_elementwise_loop() {
        let sys = generate_gaussian_system(6, 3, 21).unwrap();
        let x = [0.3, -1.2, 2.5];
        let mut acc = 0.0;
        for i in 0..6 {
            let mut ax = 0.0;
            for j in 0..3 {
                ax += sys.a.as_slice()[i * 3 + j] * x[j];
            }
            acc += (ax - sys.y[i]) * (ax - sys.y[i]);
        }
        let expected = acc / 12.0;
        assert!((objective(&sys, &x).unwrap() - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn gradient_small_cases() {
        let sys = LinearSystem::new(DenseMatrix::identity(2), vec![1.0, 1.0], None).unwrap();
        assert_eq!(full_gradient(&sys, &[0.0, 0.0]).unwrap(), vec![-0.5, -0.5]);
        let g = generate_gaussian_system(20, 4, 2).unwrap();
        let grad = full_gradient(&g, g.x_star().unwrap()).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let sys = generate_gaussian_system(8, 4, 5).unwrap();
        let mut rng = rng_from_seed(99);
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let g = full_gradient(&sys, &x).unwrap();
            let h = 1e-6;
            for c in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (objective(&sys, &xp).unwrap() - objective(&sys, &xm).unwrap()) / (2.0 * h);
                assert!((fd - g[c]).abs() < 1e-5, "coord {c}: fd {fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn error_sq_cases() {
        assert_eq!(error_sq(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(error_sq(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(error_sq(&[1.0], &[1.0, 2.0]).is_err());
        let a = [0.5f64, -1.25, 3.0, 7.5];
        let b = [1.5, 0.75, -2.0, 7.0];
        let mut acc = 0.0;
        for k in 0..4 {
            acc += (a[k] - b[k]) * (a[k] - b[k]);
        }
        assert_eq!(error_sq(&a, &b).unwrap(), acc);
    }
}
