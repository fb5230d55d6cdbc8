//! Heterogeneity diagnostics: scatter matrices and two-class Fisher LDA.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, solve_spd, Matrix};

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let first = rows.first().ok_or_else(|| Error::Domain(format!("{what}: empty set")))?;
    let dim = first.len();
    if let Some(i) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::Shape(format!(
            "{what}: row {i} has dim {}, expected {dim}",
            rows[i].len()
        )));
    }
    Ok(dim)
}

pub fn mean(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = check_rows(rows, "mean")?;
    let mut mu = vec![0.0; dim];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    Ok(mu)
}

/// Σ (f − μ)(f − μ)ᵀ.
pub fn scatter_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    let mu = mean(rows)?;
    let d = mu.len();
    let mut s = Matrix::zeros(d, d);
    let mut c = vec![0.0; d];
    for r in rows {
        for ((ci, x), m) in c.iter_mut().zip(r).zip(&mu) {
            *ci = x - m;
        }
        for i in 0..d {
            let ci = c[i];
            for j in i..d {
                s[(i, j)] += ci * c[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            s[(i, j)] = s[(j, i)];
        }
    }
    Ok(s)
}

pub fn scatter_trace(rows: &[Vec<f64>]) -> Result<f64> {
    let mu = mean(rows)?;
    Ok(rows
        .iter()
        .map(|r| r.iter().zip(&mu).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub w: Vec<f64>,
    /// Fisher ratio of `w`, measured against the unridged within-class scatter.
    pub j: f64,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub ridge: f64,
    /// Class means coincide; `w` is then e₁ and `j` is zero.
    pub degenerate: bool,
}

impl LdaModel {
    pub fn project(&self, x: &[f64]) -> f64 {
        dot(&self.w, x)
    }

    /// Probability of class 1: a sigmoid centred on the midpoint of the
    /// projected class means, oriented towards μ1.
    pub fn score(&self, x: &[f64]) -> f64 {
        let (p0, p1) = (self.project(&self.mu0), self.project(&self.mu1));
        let sign = if p1 >= p0 { 1.0 } else { -1.0 };
        sigmoid(sign * (self.project(x) - 0.5 * (p0 + p1)))
    }

    /// Accuracy of the 0.5-threshold decision over both classes.
    pub fn accuracy(&self, x0: &[Vec<f64>], x1: &[Vec<f64>]) -> f64 {
        let correct = x0.iter().filter(|x| self.score(x) < 0.5).count()
            + x1.iter().filter(|x| self.score(x) >= 0.5).count();
        correct as f64 / (x0.len() + x1.len()).max(1) as f64
    }
}

pub fn lda_fit(x0: &[Vec<f64>], x1: &[Vec<f64>]) -> Result<LdaModel> {
    if x0.len() < 2 || x1.len() < 2 {
        return Err(Error::Domain(format!(
            "lda needs at least 2 vectors per class, got {} and {}",
            x0.len(),
            x1.len()
        )));
    }
    let d0 = check_rows(x0, "lda class 0")?;
    let d1 = check_rows(x1, "lda class 1")?;
    if d0 != d1 {
        return Err(Error::Shape(format!("lda classes have dims {d0} and {d1}")));
    }
    let (mu0, mu1) = (mean(x0)?, mean(x1)?);
    let diff: Vec<f64> = mu0.iter().zip(&mu1).map(|(a, b)| a - b).collect();
    let mut sw = scatter_matrix(x0)?;
    sw.add_assign(&scatter_matrix(x1)?);

    let scale = norm(&mu0).max(norm(&mu1)).max(f64::MIN_POSITIVE);
    if norm(&diff) <= 1e-14 * scale {
        let mut w = vec![0.0; d0];
        w[0] = 1.0;
        return Ok(LdaModel {
            w,
            j: 0.0,
            mu0,
            mu1,
            ridge: 0.0,
            degenerate: true,
        });
    }

    let mut ridge = 1e-6 * sw.trace() / d0 as f64;
    if ridge <= 0.0 {
        // Zero within-class spread: any positive ridge gives the mean-difference direction.
        ridge = 1.0;
    }
    let mut reg = sw.clone();
    for i in 0..d0 {
        reg[(i, i)] += ridge;
    }
    let w = solve_spd(&reg, &diff)?;
    let j = ratio(&w, &diff, &sw);
    Ok(LdaModel {
        w,
        j,
        mu0,
        mu1,
        ridge,
        degenerate: false,
    })
}

fn ratio(w: &[f64], diff: &[f64], sw: &Matrix) -> f64 {
    let between = dot(w, diff).powi(2);
    let within = sw.quad_form(w);
    if within > 0.0 {
        between / within
    } else if between > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// J(w) = wᵀS_b w / wᵀS_w w.
pub fn fisher_ratio(w: &[f64], x0: &[Vec<f64>], x1: &[Vec<f64>]) -> Result<f64> {
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::Domain("fisher ratio of the zero direction".into()));
    }
    let d = check_rows(x0, "fisher class 0")?;
    if check_rows(x1, "fisher class 1")? != d || w.len() != d {
        return Err(Error::Shape(format!("fisher ratio: direction dim {} vs data dim {d}", w.len())));
    }
    let (mu0, mu1) = (mean(x0)?, mean(x1)?);
    let diff: Vec<f64> = mu0.iter().zip(&mu1).map(|(a, b)| a - b).collect();
    let mut sw = scatter_matrix(x0)?;
    sw.add_assign(&scatter_matrix(x1)?);
    Ok(ratio(w, &diff, &sw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::jacobi_eigen;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(n: usize, d: usize, shift: &[f64], scale: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        shift[j] + scale[j] * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_vector_scatter_is_zero() {
        let s = scatter_matrix(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(s, Matrix::zeros(2, 2));
        assert_eq!(scatter_trace(&[vec![3.0, -1.0]]).unwrap(), 0.0);
    }

    #[test]
    fn two_point_scatter() {
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let s = scatter_matrix(&rows).unwrap();
        assert_eq!(s, Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap());
        assert_eq!(scatter_trace(&rows).unwrap(), 2.0);
    }

    #[test]
    fn empty_set_is_domain_error() {
        assert!(matches!(scatter_matrix(&[]), Err(Error::Domain(_))));
        assert!(matches!(scatter_trace(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn scatter_matches_two_pass_covariance() {
        let rows = gaussian_rows(50, 8, &[1.0; 8], &[0.5, 1.0, 2.0, 0.1, 1.0, 3.0, 1.0, 1.0], 11);
        let s = scatter_matrix(&rows).unwrap().scaled(1.0 / 49.0);
        // textbook two-pass, column by column
        for i in 0..8 {
            for j in 0..8 {
                let mi = rows.iter().map(|r| r[i]).sum::<f64>() / 50.0;
                let mj = rows.iter().map(|r| r[j]).sum::<f64>() / 50.0;
                let c = rows.iter().map(|r| (r[i] - mi) * (r[j] - mj)).sum::<f64>() / 49.0;
                assert!((s[(i, j)] - c).abs() < 1e-9);
            }
        }
        let per_dim: f64 = (0..8)
            .map(|d| {
                let m = rows.iter().map(|r| r[d]).sum::<f64>() / 50.0;
                rows.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>()
            })
            .sum();
        assert!((scatter_trace(&rows).unwrap() - per_dim).abs() < 1e-9);
    }

    #[test]
    fn scatter_symmetric_and_psd() {
        let rows = gaussian_rows(12, 20, &[0.0; 20], &[1.0; 20], 2);
        let s = scatter_matrix(&rows).unwrap();
        assert!(s.max_asymmetry() <= 1e-9);
        let eig = jacobi_eigen(&s).unwrap();
        assert!(*eig.values.last().unwrap() >= -1e-7 * s.trace());
    }

    #[test]
    fn one_dimensional_hand_ratio() {
        let eps = 0.25;
        let x0 = vec![vec![-1.0], vec![-1.0 + eps]];
        let x1 = vec![vec![1.0], vec![1.0 + eps]];
        let m = lda_fit(&x0, &x1).unwrap();
        // S_b = 4, S_w = 2·(ε/2)² ·2 = ε²
        let expected = 4.0 / (eps * eps);
        assert!((m.j - expected).abs() <= 1e-9 * expected, "{} vs {expected}", m.j);
        assert!(!m.degenerate);
    }

    #[test]
    fn identical_sets_are_degenerate() {
        let x = gaussian_rows(10, 3, &[0.0; 3], &[1.0; 3], 4);
        let m = lda_fit(&x, &x).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.j, 0.0);
        assert_eq!(m.w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn too_few_vectors() {
        assert!(lda_fit(&[vec![0.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn closed_form_beats_random_directions() {
        let x0 = gaussian_rows(200, 2, &[0.0, 0.0], &[1.0, 0.3], 5);
        let x1 = gaussian_rows(200, 2, &[1.5, 0.7], &[1.0, 0.3], 6);
        let m = lda_fit(&x0, &x1).unwrap();
        let mut r = rng::seeded(7);
        for _ in 0..1000 {
            let t: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let j = fisher_ratio(&[t.cos(), t.sin()], &x0, &x1).unwrap();
            assert!(m.j >= j * (1.0 - 1e-9), "{} < {j}", m.j);
        }
        assert!(m.accuracy(&x0, &x1) > 0.8);
    }

    #[test]
    fn fisher_ratio_basics() {
        let x0 = gaussian_rows(30, 2, &[0.0, 0.0], &[1.0, 1.0], 8);
        let x1: Vec<Vec<f64>> = x0.iter().map(|r| vec![r[0] + 3.0, r[1]]).collect();
        // mean difference is exactly along e₁
        assert!(fisher_ratio(&[0.0, 1.0], &x0, &x1).unwrap() < 1e-20);
        let w = [0.3, -1.2];
        let a = fisher_ratio(&w, &x0, &x1).unwrap();
        let b = fisher_ratio(&[0.6, -2.4], &x0, &x1).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);
        assert!(matches!(fisher_ratio(&[0.0, 0.0], &x0, &x1), Err(Error::Domain(_))));
        let m = lda_fit(&x0, &x1).unwrap();
        let own = fisher_ratio(&m.w, &x0, &x1).unwrap();
        assert!((own - m.j).abs() <= 1e-9 * m.j);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lda_invariant_under_input_scaling(seed in 0u64..10_000, c in 0.01f64..100.0) {
            let x0 = gaussian_rows(20, 4, &[0.0; 4], &[1.0, 0.5, 2.0, 1.0], seed);
            let x1 = gaussian_rows(20, 4, &[1.0, 0.0, -1.0, 0.5], &[1.0, 0.5, 2.0, 1.0], seed + 1);
            let scale = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                x.iter().map(|r| r.iter().map(|v| v * c).collect()).collect()
            };
            let a = lda_fit(&x0, &x1).unwrap();
            let b = lda_fit(&scale(&x0), &scale(&x1)).unwrap();
            let (na, nb) = (norm(&a.w), norm(&b.w));
            for (u, v) in a.w.iter().zip(&b.w) {
                prop_assert!((u / na - v / nb).abs() < 1e-6);
            }
            prop_assert!((a.j - b.j).abs() <= 1e-9 * a.j.max(1.0));
        }

        #[test]
        fn fisher_scale_invariant(seed in 0u64..10_000, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let x0 = gaussian_rows(15, 3, &[0.0; 3], &[1.0; 3], seed);
            let x1 = gaussian_rows(15, 3, &[1.0; 3], &[1.0; 3], seed + 7);
            let w = [0.4, -0.2, 1.1];
            let cw: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = fisher_ratio(&w, &x0, &x1).unwrap();
            let b = fisher_ratio(&cw, &x0, &x1).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12));
        }
    }
}
