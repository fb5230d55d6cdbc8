//! Metrics, pixel-level robustness sweeps and the prototype attention table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, jpeg_like_compress, Image};
use crate::stage2::{eval_view, predict, variance_bound_check, GaplModel, VarianceBound};
use crate::synth::SynthImage;

pub const REPORT_SCHEMA: u32 = 1;

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Domain("metric over an empty set".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Domain("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Fraction of items where `score ≥ threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_pair(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == (**l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Σ (R_k − R_{k−1})·P_k over a descending-score sweep; tied scores form
/// one step, with precision taken after the whole tie group.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 || total_pos == labels.len() {
        return Err(Error::Domain("average precision needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut ap, mut tp, mut seen) = (0.0, 0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_pos = 0;
        while i < order.len() && scores[order[i]] == s {
            group_pos += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        if group_pos > 0 {
            tp += group_pos;
            ap += group_pos as f64 / total_pos as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Severity is the quality factor.
    Jpeg,
    /// Severity is σ in pixels.
    Blur,
}

impl Perturbation {
    /// Severity 0 leaves the image untouched.
    pub fn apply(self, img: &Image, severity: f64) -> Result<Image> {
        if severity == 0.0 {
            return Ok(img.clone());
        }
        match self {
            Perturbation::Jpeg => {
                if severity.fract() != 0.0 || !(1.0..=100.0).contains(&severity) {
                    return Err(Error::Domain(format!("jpeg quality {severity} not an integer in 1..=100")));
                }
                jpeg_like_compress(img, severity as u32)
            }
            Perturbation::Blur => gaussian_blur(img, severity),
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Perturbation::Jpeg => vec![0.0, 95.0, 80.0, 65.0, 50.0],
            Perturbation::Blur => vec![0.0, 0.5, 1.0, 2.0, 3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub transform: Perturbation,
    pub severity: f64,
    pub accuracy: f64,
}

/// Accuracy under each `(transform, severity)`; images are perturbed at
/// full size, then center-cropped for the model.
pub fn robustness_suite(
    model: &GaplModel<f32>,
    corpus: &[SynthImage],
    grid: &[(Perturbation, Vec<f64>)],
) -> Result<Vec<RobustnessRow>> {
    let labels: Vec<u8> = corpus.iter().map(|s| s.label).collect();
    let mut rows = Vec::new();
    for (t, severities) in grid {
        for &sev in severities {
            let imgs = corpus
                .iter()
                .map(|s| t.apply(&s.image, sev))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = imgs.iter().collect();
            let scores = predict(model, &refs)?;
            rows.push(RobustnessRow {
                transform: *t,
                severity: sev,
                accuracy: accuracy(&scores, &labels, 0.5)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// Mean weight per prototype over true-real images (NaN if none).
    pub mean_real: Vec<f64>,
    pub mean_fake: Vec<f64>,
    /// Per prototype, the images that attend to it most, strongest first.
    pub top_images: Vec<Vec<usize>>,
}

/// Aggregates per-image attention rows (`[n][N]`) by true label.
pub fn attention_table(rows: &[Vec<f64>], labels: &[u8], top_j: usize) -> Result<AttentionReport> {
    if rows.is_empty() {
        return Err(Error::Domain("attention report over an empty corpus".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} attention rows vs {} labels", rows.len(), labels.len())));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged attention rows".into()));
    }
    let mean_of = |label: u8| -> Vec<f64> {
        let picked: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, &l)| l == label).map(|(r, _)| r).collect();
        (0..n)
            .map(|j| picked.iter().map(|r| r[j]).sum::<f64>() / picked.len() as f64)
            .collect()
    };
    let top_images = (0..n)
        .map(|j| {
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.sort_by(|&a, &b| rows[b][j].total_cmp(&rows[a][j]));
            idx.truncate(top_j);
            idx
        })
        .collect();
    Ok(AttentionReport {
        mean_real: mean_of(0),
        mean_fake: mean_of(1),
        top_images,
    })
}

pub fn attention_report(model: &GaplModel<f32>, corpus: &[SynthImage], top_j: usize) -> Result<AttentionReport> {
    if corpus.is_empty() {
        return Err(Error::Domain("attention report over an empty corpus".into()));
    }
    if !model.config().prototype_mapping {
        return Err(Error::Contract("model has no prototype mapping".into()));
    }
    let size = model.encoder().config().image_size;
    let views: Vec<Image> = corpus.iter().map(|s| eval_view(&s.image, size)).collect();
    let refs: Vec<&Image> = views.iter().collect();
    let inf = model.infer(&refs)?;
    let labels: Vec<u8> = corpus.iter().map(|s| s.label).collect();
    attention_table(&inf.attention, &labels, top_j)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub subsets: Vec<SubsetMetrics>,
    pub macro_accuracy: f64,
    pub macro_ap: f64,
    pub robustness: Vec<RobustnessRow>,
    pub attention: Option<AttentionReport>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_robustness_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for r in &self.robustness {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One subset per generator (its fakes plus every real image), macro-averaged.
pub fn evaluate_subsets(scores: &[f64], corpus: &[SynthImage]) -> Result<Vec<SubsetMetrics>> {
    let mut gens: Vec<u32> = corpus.iter().filter(|s| s.label == 1).map(|s| s.generator_id).collect();
    gens.sort_unstable();
    gens.dedup();
    let mut out = Vec::new();
    for g in gens {
        let (s, l): (Vec<f64>, Vec<u8>) = scores
            .iter()
            .zip(corpus)
            .filter(|(_, c)| c.label == 0 || c.generator_id == g)
            .map(|(s, c)| (*s, c.label))
            .unzip();
        out.push(SubsetMetrics {
            name: format!("gen{g}"),
            n: s.len(),
            accuracy: accuracy(&s, &l, 0.5)?,
            average_precision: average_precision(&s, &l)?,
        });
    }
    Ok(out)
}

/// Variance bound of the mapped features on consecutive batches of
/// `batch` images; empty without prototype mapping.
pub fn variance_bound_batches(model: &GaplModel<f32>, corpus: &[SynthImage], batch: usize) -> Result<Vec<VarianceBound>> {
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let Some(values) = model.value_prototypes() else {
        return Ok(Vec::new());
    };
    let size = model.encoder().config().image_size;
    let mut out = Vec::new();
    for chunk in corpus.chunks(batch) {
        let views: Vec<Image> = chunk.iter().map(|s| eval_view(&s.image, size)).collect();
        let refs: Vec<&Image> = views.iter().collect();
        out.push(variance_bound_check(&model.infer(&refs)?.mapped, &values)?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &GaplModel<f32>,
    corpus: &[SynthImage],
    grid: &[(Perturbation, Vec<f64>)],
    top_j: Option<usize>,
) -> Result<EvalReport> {
    let refs: Vec<&Image> = corpus.iter().map(|s| &s.image).collect();
    let scores = predict(model, &refs)?;
    let subsets = evaluate_subsets(&scores, corpus)?;
    let k = subsets.len().max(1) as f64;
    let attention = match top_j {
        Some(j) if model.config().prototype_mapping => Some(attention_report(model, corpus, j)?),
        _ => None,
    };
    Ok(EvalReport {
        schema: REPORT_SCHEMA,
        macro_accuracy: subsets.iter().map(|s| s.accuracy).sum::<f64>() / k,
        macro_ap: subsets.iter().map(|s| s.average_precision).sum::<f64>() / k,
        subsets,
        robustness: robustness_suite(model, corpus, grid)?,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_accuracy(scores: &[f64], labels: &[u8]) -> f64 {
        let mut hit = 0;
        for i in 0..scores.len() {
            let pred = if scores[i] >= 0.5 { 1 } else { 0 };
            if pred == labels[i] {
                hit += 1;
            }
        }
        hit as f64 / scores.len() as f64
    }

    /// Precision at each positive's own score, averaged over positives.
    fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
        let mut sum = 0.0;
        for &i in &pos {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let tp = above.iter().filter(|&&j| labels[j] == 1).count();
            sum += tp as f64 / above.len() as f64;
        }
        sum / pos.len() as f64
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0.9, 0.1, 0.7], &[1, 0, 1], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[1.0, 0.0, 1.0, 0.0], &[1, 1, 0, 0], 0.5).unwrap(), 0.5);
        // ties at the threshold count as positive
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
        let s = [0.2, 0.5, 0.51, 0.49, 0.9, 0.0, 0.7];
        let l = [0, 1, 0, 1, 1, 0, 0];
        // correct: 0.2→0 ✓, 0.5→1 ✓, 0.51→1 ✗, 0.49→0 ✗, 0.9→1 ✓, 0.0→0 ✓, 0.7→1 ✗
        assert!((accuracy(&s, &l, 0.5).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!(matches!(accuracy(&[], &[], 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &[1, 1, 1, 0, 0, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[0.1, 0.9], &[1, 1]), Err(Error::Domain(_))));
        // one tie group holding everything: precision is the base rate
        assert!((average_precision(&[0.5; 4], &[1, 0, 0, 0]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_ten_item_case() {
        let mut r = rng::seeded(10);
        let s: Vec<f64> = (0..10).map(|_| (r.random_range(0..5) as f64) / 4.0).collect();
        let mut l: Vec<u8> = (0..10).map(|_| r.random_range(0..2)).collect();
        l[0] = 1;
        l[1] = 0;
        assert!((average_precision(&s, &l).unwrap() - brute_ap(&s, &l)).abs() < 1e-9);
    }

    #[test]
    fn perturbations() {
        let img = Image::new(3, 8, 8, (0..192).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        assert_eq!(Perturbation::Blur.apply(&img, 0.0).unwrap(), img);
        assert_eq!(Perturbation::Jpeg.apply(&img, 0.0).unwrap(), img);
        assert_eq!(
            Perturbation::Blur.apply(&img, 1.0).unwrap(),
            Perturbation::Blur.apply(&img, 1.0).unwrap()
        );
        assert!(Perturbation::Jpeg.apply(&img, 101.0).is_err());
        assert!(Perturbation::Blur.apply(&img, -1.0).is_err());
        assert_eq!(Perturbation::Jpeg.default_grid().len(), 5);
    }

    #[test]
    fn attention_table_basics() {
        let rows = vec![vec![1.0]; 3];
        let t = attention_table(&rows, &[0, 1, 1], 2).unwrap();
        assert_eq!((t.mean_real.clone(), t.mean_fake.clone()), (vec![1.0], vec![1.0]));
        assert_eq!(t.top_images, vec![vec![0, 1]]);
        let rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]];
        let t = attention_table(&rows, &[0, 1, 0], 1).unwrap();
        assert!((t.mean_real.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.mean_fake.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.top_images, vec![vec![0], vec![2], vec![1]]);
        assert!(matches!(attention_table(&[], &[], 1), Err(Error::Domain(_))));
    }

    fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=64).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![0.0f64..1.0, (0u8..5).prop_map(|k| k as f64 / 4.0)], n),
                proptest::collection::vec(0u8..2, n),
            )
                .prop_map(|(s, mut l)| {
                    l[0] = 1;
                    l[1] = 0;
                    (s, l)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn metrics_match_brute_force((s, l) in scored_set()) {
            prop_assert!((accuracy(&s, &l, 0.5).unwrap() - brute_accuracy(&s, &l)).abs() < 1e-9);
            prop_assert!((average_precision(&s, &l).unwrap() - brute_ap(&s, &l)).abs() < 1e-9);
        }

        #[test]
        fn ap_invariant_under_monotone_maps((s, l) in scored_set(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let t: Vec<f64> = s.iter().map(|x| (a * x + b).exp() + x.powi(3)).collect();
            prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_unit_interval((s, l) in scored_set()) {
            let ap = average_precision(&s, &l).unwrap();
            let acc = accuracy(&s, &l, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&acc));
        }
    }
}
