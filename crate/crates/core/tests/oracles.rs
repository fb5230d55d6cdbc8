//! Closed-form routines against nalgebra reference computations.

use gapl::hetero::{fisher_ratio, lda_fit, scatter_matrix};
use gapl::linalg::{jacobi_eigen, Matrix};
use gapl::rng;
use gapl::stage1::pca_components;
use gapl::synth::{analytic_total_variance, mixture_covariance};
use gapl::verify::random_ensemble;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn rows_na(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn gaussian_rows(n: usize, scales: &[f64], shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            scales
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    s * z + shift * (j as f64 + 1.0)
                })
                .collect()
        })
        .collect()
}

/// Population covariance of the flattened mixture, built from nalgebra
/// matrices component by component.
fn na_flat_cov(ens: &gapl::synth::GeneratorEnsemble) -> DMatrix<f64> {
    let d = ens.generators[0].dim();
    let mut second = DMatrix::zeros(d, d);
    let mut mean = DVector::zeros(d);
    for (g, w) in ens.generators.iter().zip(&ens.weights) {
        for c in &g.components {
            let mu = DVector::from_column_slice(&c.mean);
            let cw = w * c.weight;
            second += (to_na(&c.cov) + &mu * mu.transpose()) * cw;
            mean += mu * cw;
        }
    }
    second - &mean * mean.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_variance_matches_flattened_covariance(seed in any::<u64>()) {
        let ens = random_ensemble(&mut rng::seeded(seed));
        let tv = analytic_total_variance(&ens).unwrap();
        let oracle = na_flat_cov(&ens);
        let scale = oracle.trace().abs().max(1e-12);
        prop_assert!((tv.total.trace() - oracle.trace()).abs() / scale < 1e-9);
        prop_assert!((to_na(&tv.total) - &oracle).amax() / scale < 1e-9);
        // the decomposition's pieces are themselves traces of PSD matrices
        prop_assert!(tv.fit_expected.trace() >= -1e-12);
        prop_assert!(tv.fit_modes.trace() >= -1e-12);
        prop_assert!(tv.cross_generator.trace() >= -1e-12);
    }

    #[test]
    fn flattened_mixture_covariance_matches(seed in any::<u64>()) {
        let ens = random_ensemble(&mut rng::seeded(seed));
        let oracle = na_flat_cov(&ens);
        let flat = mixture_covariance(&ens.flatten());
        prop_assert!((to_na(&flat) - &oracle).amax() / oracle.trace().abs().max(1e-12) < 1e-9);
    }

    #[test]
    fn jacobi_matches_nalgebra_spectrum(seed in any::<u64>(), d in 1usize..7) {
        let mut r = rng::seeded(seed);
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut r));
        let s = &a + a.transpose();
        let ours = jacobi_eigen(&Matrix::from_rows(
            &(0..d).map(|i| (0..d).map(|j| s[(i, j)]).collect()).collect::<Vec<_>>(),
        ).unwrap()).unwrap();
        let mut theirs: Vec<f64> = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut mine = ours.values.clone();
        mine.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (x, y) in mine.iter().zip(&theirs) {
            prop_assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()));
        }
        for (v, l) in ours.vectors.iter().zip(&ours.values) {
            let v = DVector::from_column_slice(v);
            prop_assert!((&s * &v - &v * *l).amax() < 1e-8 * (1.0 + l.abs()));
        }
    }
}

#[test]
fn pca_matches_nalgebra_on_separated_spectra() {
    for seed in 0..50 {
        let rows = gaussian_rows(200, &[4.0, 2.0, 1.0, 0.5, 0.25], 0.3, seed);
        let x = rows_na(&rows);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
        let eig = SymmetricEigen::new(centered.transpose() * &centered);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let pca = pca_components(&rows, 3).unwrap();
        for (c, &k) in pca.components.iter().zip(&order) {
            let v = eig.eigenvectors.column(k);
            let s = if v.dot(&DVector::from_column_slice(c)) < 0.0 { -1.0 } else { 1.0 };
            let err = c.iter().zip(v.iter()).map(|(a, b)| (a - s * b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "seed {seed}: component error {err}");
        }
    }
}

#[test]
fn lda_direction_matches_nalgebra_solve() {
    for seed in 0..50 {
        let x0 = gaussian_rows(80, &[1.0, 0.7, 1.3, 0.5], 0.0, 2 * seed);
        let x1 = gaussian_rows(90, &[1.0, 0.7, 1.3, 0.5], 0.4, 2 * seed + 1);
        let sw = to_na(&scatter_matrix(&x0).unwrap()) + to_na(&scatter_matrix(&x1).unwrap());
        let m0 = rows_na(&x0).row_mean().transpose();
        let m1 = rows_na(&x1).row_mean().transpose();
        let w_ref = sw.lu().solve(&(m1 - m0)).unwrap();
        let w = DVector::from_column_slice(&lda_fit(&x0, &x1).unwrap().w);
        // direction only; the sign follows the canonical convention
        let cos = w.dot(&w_ref).abs() / (w.norm() * w_ref.norm());
        assert!((cos - 1.0).abs() < 1e-6, "seed {seed}: cos {cos}");
        let best = fisher_ratio(w.as_slice(), &x0, &x1).unwrap();
        let axis = fisher_ratio(&[1.0, 0.0, 0.0, 0.0], &x0, &x1).unwrap();
        assert!(best >= axis);
    }
}
