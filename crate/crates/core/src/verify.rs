//! Self-contained invariant suite: finite-difference gradient checks,
//! independent oracles for the closed-form pieces and structural properties
//! of the model. Every check is a pure function of the seed.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutKey, Tape, Var};
use crate::encoder::{EncoderConfig, LoraConfig, Mode, Projection, ToyEncoder};
use crate::error::Result;
use crate::eval::{accuracy, average_precision};
use crate::gradcheck::{check_gradients, GradCheck};
use crate::hetero::lda_fit;
use crate::imaging::Image;
use crate::linalg::{dot, Matrix};
use crate::params::ParamId;
use crate::rng::{self, Rng as StreamRng};
use crate::stage1::{pca_components, MlpHead, PrototypeMatrix};
use crate::stage2::{variance_bound_check, GaplConfig, GaplModel};
use crate::synth::{analytic_total_variance, sample_ensemble, GaussianComponent, GeneratorEnsemble, GmmSpec};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA: u32 = 1;

pub const GRAD_REL_TOL: f64 = 1e-3;
pub const TOTAL_VARIANCE_TOL: f64 = 1e-9;
pub const MONTE_CARLO_TOL: f64 = 0.05;
pub const PCA_TOL: f64 = 1e-6;
pub const SIMPLEX_TOL: f64 = 1e-6;
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or ratio, for bound checks).
    pub value: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    /// Passes when `value < tolerance`.
    fn below(name: impl Into<String>, value: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            name: name.into(),
            passed: value < tolerance,
            value,
            tolerance,
            cases,
        }
    }

    /// Passes when `value <= tolerance`.
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            passed: value <= tolerance,
            ..Self::below(name, value, tolerance, cases)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: u32,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{}  {:<width$}  value {:.3e}  tol {:.1e}  cases {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance,
                c.cases,
            ));
        }
        out
    }
}

pub fn run_suite(seed: u64) -> Result<VerifyReport> {
    let mut checks = gradient_checks(seed)?;
    checks.push(total_variance_check(seed, 20)?);
    checks.push(monte_carlo_check(seed, 50_000)?);
    checks.push(pca_oracle_check(seed, 50)?);
    checks.push(lda_oracle_check(seed, 50, 1000)?);
    checks.extend(variance_bound_checks(seed, 10_000)?);
    checks.push(attention_simplex_check(seed)?);
    checks.push(metric_oracle_check(seed, 200)?);
    checks.extend(lora_checks(seed)?);
    Ok(VerifyReport {
        schema: REPORT_SCHEMA,
        seed,
        checks,
    })
}

fn randn(shape: &[usize], r: &mut StreamRng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Reduces any output to a scalar through fixed, non-uniform weights so that
/// invariances of the op (e.g. softmax rows summing to one) do not hide
/// gradient errors.
fn readout(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len();
    let w = Tensor::new(&shape, (0..n).map(|i| (i as f64 * 1.37 + 0.5).sin()).collect())?;
    let w = tape.constant(w);
    let y = tape.mul(out, w)?;
    Ok(tape.sum(y))
}

fn grad_case<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F) -> Result<Check>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheck {
        step: 1e-5,
        rel_tol: GRAD_REL_TOL,
        ..GradCheck::default()
    };
    let report = check_gradients(&inputs, cfg, |tape, v| {
        let out = build(tape, v)?;
        readout(tape, out)
    })?;
    Ok(Check::below(
        format!("grad/{name}"),
        report.max_rel_error,
        GRAD_REL_TOL,
        report.coords_checked,
    ))
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
    }
}

fn ramp(size: usize, phase: f64) -> Image {
    let data = (0..3 * size * size).map(|i| ((i as f64 * 0.37 + phase).sin() * 0.5 + 0.5) as f32).collect();
    Image::new(3, size, size, data).expect("ramp image")
}

/// Tiny GAPL model with LoRA adapters moved off zero so every trainable
/// tensor receives signal.
fn tiny_gapl(seed: u64) -> Result<GaplModel<f32>> {
    let cfg = tiny_encoder();
    let enc = ToyEncoder::new(cfg.clone(), seed)?;
    let head = MlpHead::new(cfg.dim, 6, seed ^ 1)?;
    let protos = PrototypeMatrix::random(4, 6, seed ^ 2)?;
    let gcfg = GaplConfig {
        lora: Some(LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        }),
        ..GaplConfig::default()
    };
    let mut m = GaplModel::new(enc, &head, Some(protos), gcfg, seed ^ 3)?;
    for l in 0..cfg.depth {
        for t in [Projection::Q, Projection::K, Projection::V] {
            let (_, b) = m.encoder().lora_params(l, t).expect("adapter");
            for (i, x) in m.encoder_mut().store_mut().value_mut(b).data_mut().iter_mut().enumerate() {
                *x = 0.03 * ((i % 7) as f32 - 3.0);
            }
        }
    }
    Ok(m)
}

/// One finite-difference check per differentiable op, then the full GAPL
/// forward graph (LoRA encoder, projection, prototype mapping, classifier,
/// loss) with respect to every trainable tensor.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng::stream(seed, 0x6AD);
    let mut out = Vec::new();
    out.push(grad_case("matmul", vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)], |t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(grad_case("transpose", vec![randn(&[3, 4], &mut r)], |t, v| t.transpose(v[0]))?);
    out.push(grad_case("add", vec![randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], |t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(grad_case("sub", vec![randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], |t, v| {
        t.sub(v[0], v[1])
    })?);
    out.push(grad_case("mul", vec![randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], |t, v| {
        t.mul(v[0], v[1])
    })?);
    out.push(grad_case("add_row", vec![randn(&[3, 4], &mut r), randn(&[4], &mut r)], |t, v| {
        t.add_row(v[0], v[1])
    })?);
    out.push(grad_case("scale", vec![randn(&[2, 3], &mut r)], |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(grad_case("gelu", vec![randn(&[3, 5], &mut r)], |t, v| Ok(t.gelu(v[0])))?);
    out.push(grad_case("softmax_rows", vec![randn(&[3, 5], &mut r)], |t, v| t.softmax_rows(v[0]))?);
    out.push(grad_case(
        "layer_norm",
        vec![randn(&[3, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r)],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    )?);
    out.push(grad_case("l2_normalize_rows", vec![randn(&[3, 4], &mut r)], |t, v| {
        t.l2_normalize_rows(v[0])
    })?);
    out.push(grad_case("dropout", vec![randn(&[4, 6], &mut r)], |t, v| {
        t.dropout(v[0], 0.3, DropoutKey { seed, layer: 1, step: 2 })
    })?);
    out.push(grad_case("select_rows", vec![randn(&[4, 3], &mut r)], |t, v| {
        t.select_rows(v[0], &[2, 0, 2])
    })?);
    out.push(grad_case(
        "tokens",
        vec![randn(&[2 * 3, 4], &mut r), randn(&[4], &mut r), randn(&[4, 4], &mut r)],
        |t, v| t.tokens(v[0], v[1], v[2], 2),
    )?);
    out.push(grad_case(
        "attention",
        vec![randn(&[2 * 3, 4], &mut r), randn(&[2 * 3, 4], &mut r), randn(&[2 * 3, 4], &mut r)],
        |t, v| t.attention(v[0], v[1], v[2], 2, 3, 2),
    )?);
    out.push(grad_case("bce_with_logits", vec![randn(&[4, 1], &mut r)], |t, v| {
        t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0])
    })?);
    out.push(grad_case("mean", vec![randn(&[2, 3], &mut r)], |t, v| Ok(t.mean(v[0])))?);
    out.push(grad_case("sum", vec![randn(&[2, 3], &mut r)], |t, v| Ok(t.sum(v[0])))?);
    out.push(gapl_gradient_check(seed)?);
    Ok(out)
}

fn gapl_gradient_check(seed: u64) -> Result<Check> {
    let m: GaplModel<f64> = tiny_gapl(seed)?.cast();
    let imgs = [ramp(8, 0.0), ramp(8, 1.7), ramp(8, 4.1)];
    let refs: Vec<&Image> = imgs.iter().collect();
    let patches = m.encoder().patchify(&refs)?;
    let enc_ids: Vec<ParamId> = m.encoder().store().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let head_ids: Vec<ParamId> = m.head().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut inputs: Vec<Tensor<f64>> = enc_ids.iter().map(|&id| m.encoder().store().value(id).clone()).collect();
    inputs.extend(head_ids.iter().map(|&id| m.head().value(id).clone()));
    let cfg = GradCheck {
        step: 1e-5,
        rel_tol: GRAD_REL_TOL,
        max_coords: Some(12),
        ..GradCheck::default()
    };
    let report = check_gradients(&inputs, cfg, |tape, vars| {
        let (ev, hv) = vars.split_at(enc_ids.len());
        let eo: Vec<(ParamId, Var)> = enc_ids.iter().copied().zip(ev.iter().copied()).collect();
        let ho: Vec<(ParamId, Var)> = head_ids.iter().copied().zip(hv.iter().copied()).collect();
        let eb = m.encoder().store().bind_with(tape, &eo);
        let hb = m.head().bind_with(tape, &ho);
        let p = tape.constant(patches.clone());
        let o = m.forward(tape, &eb, &hb, p, refs.len(), Mode::Eval)?;
        tape.bce_with_logits(o.logits, &[1.0, 0.0, 1.0])
    })?;
    Ok(Check::below(
        "grad/gapl-forward",
        report.max_rel_error,
        GRAD_REL_TOL,
        report.coords_checked,
    ))
}

fn random_psd(d: usize, r: &mut StreamRng) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| StandardNormal.sample(&mut *r)).collect()).collect();
    let a = Matrix::from_rows(&rows).expect("square");
    a.matmul(&a.transpose()).expect("square").scaled(1.0 / d as f64)
}

fn random_simplex(n: usize, r: &mut StreamRng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut *r)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Random ensemble with `dim ≤ 8`, `G ≤ 5` generators and `K ≤ 4` modes each.
pub fn random_ensemble(r: &mut StreamRng) -> GeneratorEnsemble {
    let d = r.random_range(1..=8);
    let g = r.random_range(1..=5);
    let generators = (0..g)
        .map(|i| {
            let k = r.random_range(1..=4);
            let pi = random_simplex(k, r);
            GmmSpec {
                components: pi
                    .into_iter()
                    .map(|weight| GaussianComponent {
                        weight,
                        mean: (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut *r); 3.0 * z }).collect(),
                        cov: random_psd(d, r),
                    })
                    .collect(),
                generator_id: Some(i as u32 + 1),
            }
        })
        .collect();
    GeneratorEnsemble {
        generators,
        weights: random_simplex(g, r),
    }
}

/// Covariance of the flattened single mixture, `Σ_m c_m (Σ_m + μ_m μ_mᵀ) − μ̄μ̄ᵀ`.
fn flattened_covariance(ens: &GeneratorEnsemble) -> Matrix {
    let d = ens.generators[0].dim();
    let mut second = Matrix::zeros(d, d);
    let mut mean = vec![0.0; d];
    for (g, &w) in ens.generators.iter().zip(&ens.weights) {
        for c in &g.components {
            let cw = w * c.weight;
            second.add_scaled(&c.cov, cw);
            second.add_scaled(&Matrix::outer(&c.mean, &c.mean), cw);
            for (m, x) in mean.iter_mut().zip(&c.mean) {
                *m += cw * x;
            }
        }
    }
    second.add_scaled(&Matrix::outer(&mean, &mean), -1.0);
    second
}

/// The three analytic terms sum to the flattened-mixture covariance.
pub fn total_variance_check(seed: u64, ensembles: usize) -> Result<Check> {
    let mut r = rng::stream(seed, 0x707);
    let mut worst: f64 = 0.0;
    for _ in 0..ensembles {
        let ens = random_ensemble(&mut r);
        let tv = analytic_total_variance(&ens)?;
        let oracle = flattened_covariance(&ens);
        let scale = oracle.trace().abs().max(1e-300);
        worst = worst.max((tv.total.trace() - oracle.trace()).abs() / scale);
        worst = worst.max(tv.total.max_abs_diff(&oracle) / scale);
    }
    Ok(Check::below("total-variance/analytic", worst, TOTAL_VARIANCE_TOL, ensembles))
}

/// Sample covariance of `n` draws against the analytic total, on a fixed
/// 8-dimensional ensemble.
pub fn monte_carlo_check(seed: u64, n: usize) -> Result<Check> {
    let mut r = rng::stream(7, 0xC0FE);
    let mut ens = random_ensemble(&mut r);
    while ens.generators[0].dim() != 8 {
        ens = random_ensemble(&mut r);
    }
    let analytic = analytic_total_variance(&ens)?.total.trace();
    let set = sample_ensemble(&ens, n, seed)?;
    let rows = set.rows_f64();
    let sample = crate::hetero::scatter_trace(&rows)? / (rows.len() as f64 - 1.0);
    Ok(Check::below(
        "total-variance/monte-carlo",
        (sample - analytic).abs() / analytic,
        MONTE_CARLO_TOL,
        n,
    ))
}

/// Leading eigenvectors of a symmetric PSD matrix by power iteration with
/// deflation.
fn power_eigenvectors(a: &Matrix, k: usize) -> Vec<Vec<f64>> {
    let n = a.rows();
    let mut m = a.clone();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i + j) as f64 * 0.618).fract()).collect();
        let mut lambda = 0.0;
        for _ in 0..100_000 {
            let w = m.matvec(&v);
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 {
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            lambda = norm;
            if delta < 1e-15 {
                break;
            }
        }
        m.add_scaled(&Matrix::outer(&v, &v), -lambda);
        out.push(v);
    }
    out
}

fn sign_aligned_diff(a: &[f64], b: &[f64]) -> f64 {
    let s = if dot(a, b) < 0.0 { -1.0 } else { 1.0 };
    a.iter().zip(b).map(|(x, y)| (x - s * y).abs()).fold(0.0, f64::max)
}

/// Rows drawn with a geometrically decaying spectrum so the leading
/// eigenvectors are well separated.
fn spread_rows(n: usize, d: usize, r: &mut StreamRng) -> Vec<Vec<f64>> {
    let q = random_psd(d, r);
    let basis = crate::linalg::jacobi_eigen(&q).expect("symmetric").vectors;
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d)
                .map(|i| { let z: f64 = StandardNormal.sample(&mut *r); 3.0 * 0.55f64.powi(i as i32) * z })
                .collect();
            (0..d).map(|c| (0..d).map(|i| z[i] * basis[i][c]).sum::<f64>() + 1.5).collect()
        })
        .collect()
}

/// PCA components against power iteration on an independently computed
/// sample scatter.
pub fn pca_oracle_check(seed: u64, instances: usize) -> Result<Check> {
    let mut r = rng::stream(seed, 0x9CA);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = r.random_range(2..=6);
        let k = r.random_range(1..=d.min(3));
        let rows = spread_rows(r.random_range(40..=120), d, &mut r);
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|x| x[c]).sum::<f64>() / n).collect();
        let mut scatter = Matrix::zeros(d, d);
        for x in &rows {
            let dev: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            scatter.add_assign(&Matrix::outer(&dev, &dev));
        }
        let oracle = power_eigenvectors(&scatter, k);
        let pca = pca_components(&rows, k)?;
        for (a, b) in pca.components.iter().zip(&oracle) {
            worst = worst.max(sign_aligned_diff(a, b));
        }
    }
    Ok(Check::below("oracle/pca-components", worst, PCA_TOL, instances))
}

fn fisher(w: &[f64], x0: &[Vec<f64>], x1: &[Vec<f64>]) -> f64 {
    let proj = |xs: &[Vec<f64>]| -> Vec<f64> { xs.iter().map(|x| dot(w, x)).collect() };
    let (p0, p1) = (proj(x0), proj(x1));
    let m = |p: &[f64]| p.iter().sum::<f64>() / p.len() as f64;
    let (m0, m1) = (m(&p0), m(&p1));
    let within: f64 = p0.iter().map(|p| (p - m0).powi(2)).sum::<f64>() + p1.iter().map(|p| (p - m1).powi(2)).sum::<f64>();
    (m1 - m0).powi(2) / within
}

/// The closed-form LDA direction is not beaten by any of `directions`
/// random unit directions; reports the largest `J(u) / J(w)`.
pub fn lda_oracle_check(seed: u64, instances: usize, directions: usize) -> Result<Check> {
    let mut r = rng::stream(seed, 0x1DA);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = r.random_range(2..=6);
        let shift: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut x0 = spread_rows(r.random_range(30..=80), d, &mut r);
        let x1: Vec<Vec<f64>> = spread_rows(r.random_range(30..=80), d, &mut r)
            .into_iter()
            .map(|x| x.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        x0.iter_mut().for_each(|x| x[0] += 0.1);
        let w = lda_fit(&x0, &x1)?.w;
        let best = fisher(&w, &x0, &x1);
        for _ in 0..directions {
            let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            worst = worst.max(fisher(&u, &x0, &x1) / best);
        }
    }
    Ok(Check::at_most("oracle/lda-dominance", worst, 1.0 + 1e-9, instances))
}

/// Simplex-weighted combinations of random value prototypes stay under the
/// quarter-diameter bound; two prototypes with equal mass attain it.
pub fn variance_bound_checks(seed: u64, sweeps: usize) -> Result<Vec<Check>> {
    let mut r = rng::stream(seed, 0xB0D);
    let mut worst: f64 = 0.0;
    for _ in 0..sweeps {
        let (n, d, b) = (r.random_range(2..=6), r.random_range(1..=4), r.random_range(2..=8));
        let values: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let mapped: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let a = random_simplex(n, &mut r);
                (0..d).map(|c| a.iter().zip(&values).map(|(w, v)| w * v[c]).sum()).collect()
            })
            .collect();
        worst = worst.max(variance_bound_check(&mapped, &values)?.ratio);
    }
    let (a, b) = (vec![0.5, -1.25, 2.0], vec![-0.75, 0.5, 1.0]);
    let eq = variance_bound_check(&[a.clone(), b.clone()], &[a, b])?;
    Ok(vec![
        Check::at_most("variance-bound/random-sweeps", worst, 1.0, sweeps),
        Check::below("variance-bound/two-point-equality", (eq.ratio - 1.0).abs(), 1e-12, 1),
    ])
}

/// Prototype-mapping weights are distributions.
pub fn attention_simplex_check(seed: u64) -> Result<Check> {
    let m = tiny_gapl(seed)?;
    let imgs: Vec<Image> = (0..6).map(|i| ramp(8, i as f64 * 0.9)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut tape = Tape::new();
    let eb = m.encoder().store().bind_frozen(&mut tape);
    let hb = m.head().bind_frozen(&mut tape);
    let p = tape.constant(m.encoder().patchify(&refs)?);
    let o = m.forward(&mut tape, &eb, &hb, p, refs.len(), Mode::Eval)?;
    let att = tape.value(o.attention.expect("prototype mapping on"));
    let (rows, n) = att.dims2();
    let mut worst: f64 = 0.0;
    for row in att.data().chunks(n) {
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        worst = worst.max((s - 1.0).abs());
        if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            worst = f64::INFINITY;
        }
    }
    Ok(Check::at_most("attention/simplex-rows", worst, SIMPLEX_TOL, rows))
}

fn brute_accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s >= 0.5) == (**l == 1)).count();
    hits as f64 / scores.len() as f64
}

/// Precision at each positive's own score (all items scoring at least as
/// high count as retrieved), averaged over positives.
fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut pos = 0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        pos += 1;
        let (mut tp, mut all) = (0, 0);
        for (j, &sj) in scores.iter().enumerate() {
            if sj >= si {
                all += 1;
                tp += (labels[j] == 1) as usize;
            }
        }
        sum += tp as f64 / all as f64;
    }
    sum / pos as f64
}

/// Accuracy at 0.5 and AP against quadratic references on random score sets
/// with ties.
pub fn metric_oracle_check(seed: u64, sets: usize) -> Result<Check> {
    let mut r = rng::stream(seed, 0xA9);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let n = r.random_range(2..=64);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 10.0).floor() / 10.0).collect();
        worst = worst.max((accuracy(&scores, &labels, 0.5)? - brute_accuracy(&scores, &labels)).abs());
        worst = worst.max((average_precision(&scores, &labels)? - brute_ap(&scores, &labels)).abs());
    }
    Ok(Check::below("oracle/accuracy-and-ap", worst, METRIC_TOL, sets))
}

/// Fresh adapters leave the encoder output bitwise unchanged, base weights
/// get no gradient, and the trainable count is `targets · depth · 2·r·D`.
pub fn lora_checks(seed: u64) -> Result<Vec<Check>> {
    let cfg = tiny_encoder();
    let base: ToyEncoder<f32> = ToyEncoder::new(cfg.clone(), seed)?;
    let lcfg = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };
    let mut wrapped = base.clone();
    wrapped.lora_wrap(lcfg.clone(), seed ^ 5)?;
    let imgs = [ramp(8, 0.2), ramp(8, 2.2)];
    let refs: Vec<&Image> = imgs.iter().collect();
    let (e0, e1) = (base.encode(&refs)?, wrapped.encode(&refs)?);
    let identity = e0.data().iter().zip(e1.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();

    let mut tape = Tape::new();
    let bind = wrapped.store().bind(&mut tape);
    let p = tape.constant(wrapped.patchify(&refs)?);
    let o = wrapped.forward(&mut tape, &bind, p, refs.len(), Mode::Train { seed, step: 0 })?;
    let root = tape.mean(o.cls);
    let y = tape.mul(root, root)?;
    let mut g = tape.backward(y)?;
    let grads = bind.collect(&mut g);
    let mut base_nonzero = 0usize;
    for ((id, _), grad) in wrapped.store().iter().zip(&grads) {
        if !wrapped.is_lora_param(id) {
            if let Some(t) = grad {
                base_nonzero += t.data().iter().filter(|v| **v != 0.0).count();
            }
        }
    }
    let expected = lcfg.targets.len() * cfg.depth * 2 * lcfg.rank * cfg.dim;
    let count_err = (wrapped.trainable_count() as f64 - expected as f64).abs();
    Ok(vec![
        Check::at_most("lora/identity-at-init", identity as f64, 0.0, e0.len()),
        Check::at_most("lora/base-gradients-zero", base_nonzero as f64, 0.0, grads.len()),
        Check::at_most("lora/trainable-count", count_err, 0.0, 1),
    ])
}
