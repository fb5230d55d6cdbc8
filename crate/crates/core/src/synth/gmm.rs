use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::EmbeddingSet;
use crate::linalg::{cholesky_psd, Matrix};
use crate::rng;

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

/// Weighted mixture of Gaussians, optionally tagged with the generator that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub components: Vec<GaussianComponent>,
    pub generator_id: Option<u32>,
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Spec(format!("{what}: no entries")));
    }
    if let Some(bad) = w.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Spec(format!("{what}: invalid weight {bad}")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Spec(format!("{what}: weights sum to {s}, not 1")));
    }
    Ok(())
}

impl GmmSpec {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Checks weights, dimensions, symmetry and semidefiniteness; returns the
    /// Cholesky factor of every covariance.
    pub fn validate(&self) -> Result<Vec<Matrix>> {
        let w: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        check_weights(&w, "mixture")?;
        let d = self.dim();
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if c.mean.len() != d || c.cov.rows() != d || c.cov.cols() != d {
                    return Err(Error::Spec(format!("component {k}: dimensions disagree with {d}")));
                }
                cholesky_psd(&c.cov).map_err(|e| Error::Spec(format!("component {k} covariance: {e}")))
            })
            .collect()
    }
}

/// Weighted set of generator mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEnsemble {
    pub generators: Vec<GmmSpec>,
    pub weights: Vec<f64>,
}

impl GeneratorEnsemble {
    pub fn validate(&self) -> Result<()> {
        if self.generators.is_empty() {
            return Err(Error::Spec("empty generator ensemble".into()));
        }
        if self.weights.len() != self.generators.len() {
            return Err(Error::Spec(format!(
                "{} weights for {} generators",
                self.weights.len(),
                self.generators.len()
            )));
        }
        check_weights(&self.weights, "ensemble")?;
        let d = self.generators[0].dim();
        for (i, g) in self.generators.iter().enumerate() {
            g.validate()?;
            if g.dim() != d {
                return Err(Error::Spec(format!("generator {i} has dim {}, expected {d}", g.dim())));
            }
        }
        Ok(())
    }

    /// Single mixture with component weights `w_i·π_ij`.
    pub fn flatten(&self) -> GmmSpec {
        let components = self
            .generators
            .iter()
            .zip(&self.weights)
            .flat_map(|(g, &w)| {
                g.components.iter().map(move |c| GaussianComponent {
                    weight: w * c.weight,
                    mean: c.mean.clone(),
                    cov: c.cov.clone(),
                })
            })
            .collect();
        GmmSpec {
            components,
            generator_id: None,
        }
    }
}

fn pick(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn draw(mean: &[f64], chol: &Matrix, rng: &mut impl Rng) -> Vec<f32> {
    let d = mean.len();
    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    (0..d)
        .map(|i| (mean[i] + (0..=i).map(|k| chol[(i, k)] * z[k]).sum::<f64>()) as f32)
        .collect()
}

/// `n` i.i.d. draws: component by weight, then `μ + L z`.
pub fn sample_gmm(spec: &GmmSpec, n: usize, seed: u64) -> Result<EmbeddingSet> {
    let chols = spec.validate()?;
    let mut rng = rng::seeded(seed);
    let label = u8::from(spec.generator_id.is_some());
    let gid = spec.generator_id.unwrap_or(0);
    let mut set = EmbeddingSet::new(spec.dim());
    for _ in 0..n {
        let k = pick(spec.components.iter().map(|c| c.weight), rng.random());
        let v = draw(&spec.components[k].mean, &chols[k], &mut rng);
        set.push(v, label, gid, format!("gmm{k}"))?;
    }
    Ok(set)
}

/// Draws from the two-level mixture: generator by `w`, then mode by `π`.
/// Generator ids default to the 1-based generator index.
pub fn sample_ensemble(ens: &GeneratorEnsemble, n: usize, seed: u64) -> Result<EmbeddingSet> {
    ens.validate()?;
    let chols: Vec<Vec<Matrix>> = ens
        .generators
        .iter()
        .map(GmmSpec::validate)
        .collect::<Result<_>>()?;
    let mut rng = rng::seeded(seed);
    let mut set = EmbeddingSet::new(ens.generators[0].dim());
    for _ in 0..n {
        let g = pick(ens.weights.iter().copied(), rng.random());
        let spec = &ens.generators[g];
        let k = pick(spec.components.iter().map(|c| c.weight), rng.random());
        let v = draw(&spec.components[k].mean, &chols[g][k], &mut rng);
        set.push(v, 1, spec.generator_id.unwrap_or(g as u32 + 1), format!("gen{g}/mode{k}"))?;
    }
    Ok(set)
}

pub fn mixture_mean(spec: &GmmSpec) -> Vec<f64> {
    let mut m = vec![0.0; spec.dim()];
    for c in &spec.components {
        for (a, b) in m.iter_mut().zip(&c.mean) {
            *a += c.weight * b;
        }
    }
    m
}

/// Covariance of a mixture through second moments:
/// `Σ_k π_k (Σ_k + μ_k μ_kᵀ) − m mᵀ`.
pub fn mixture_covariance(spec: &GmmSpec) -> Matrix {
    let d = spec.dim();
    let mut second = Matrix::zeros(d, d);
    for c in &spec.components {
        second.add_scaled(&c.cov, c.weight);
        second.add_scaled(&Matrix::outer(&c.mean, &c.mean), c.weight);
    }
    let m = mixture_mean(spec);
    second.add_scaled(&Matrix::outer(&m, &m), -1.0);
    second
}

/// Law-of-total-variance split of a generator ensemble's covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalVariance {
    /// `Σ_i w_i Σ_j π_ij Σ_ij`: expected within-mode covariance.
    pub fit_expected: Matrix,
    /// `Σ_i w_i Σ_j π_ij (μ_ij − μ_i)(μ_ij − μ_i)ᵀ`: spread of mode means
    /// around their generator's mean.
    pub fit_modes: Matrix,
    /// `Σ_i w_i (μ_i − μ̄)(μ_i − μ̄)ᵀ`: spread of generator means.
    pub cross_generator: Matrix,
    /// Sum of the three terms.
    pub total: Matrix,
}

pub fn analytic_total_variance(ens: &GeneratorEnsemble) -> Result<TotalVariance> {
    ens.validate()?;
    let d = ens.generators[0].dim();
    let gen_means: Vec<Vec<f64>> = ens.generators.iter().map(mixture_mean).collect();
    let mut global = vec![0.0; d];
    for (m, &w) in gen_means.iter().zip(&ens.weights) {
        for (g, x) in global.iter_mut().zip(m) {
            *g += w * x;
        }
    }
    let mut fit_expected = Matrix::zeros(d, d);
    let mut fit_modes = Matrix::zeros(d, d);
    let mut cross_generator = Matrix::zeros(d, d);
    for ((g, &w), mu_i) in ens.generators.iter().zip(&ens.weights).zip(&gen_means) {
        for c in &g.components {
            fit_expected.add_scaled(&c.cov, w * c.weight);
            let dev: Vec<f64> = c.mean.iter().zip(mu_i).map(|(a, b)| a - b).collect();
            fit_modes.add_scaled(&Matrix::outer(&dev, &dev), w * c.weight);
        }
        let dev: Vec<f64> = mu_i.iter().zip(&global).map(|(a, b)| a - b).collect();
        cross_generator.add_scaled(&Matrix::outer(&dev, &dev), w);
    }
    let mut total = fit_expected.clone();
    total.add_assign(&fit_modes);
    total.add_assign(&cross_generator);
    Ok(TotalVariance {
        fit_expected,
        fit_modes,
        cross_generator,
        total,
    })
}
