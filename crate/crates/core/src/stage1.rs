//! Stage I: a two-layer head trained on frozen-encoder embeddings, whose
//! hidden layer provides forgery-aware features for per-class PCA.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::io::{Checkpoint, EmbeddingSet};
use crate::linalg::{jacobi_eigen, Matrix};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng;
use crate::synth::SynthImage;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct MlpHead<T: Real = f32> {
    store: ParamStore<T>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Which side of the hidden nonlinearity to read features from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenTap {
    #[default]
    PostActivation,
    PreActivation,
}

pub struct HeadOutput {
    pub pre: Var,
    pub hidden: Var,
    /// `[batch, 1]`.
    pub logit: Var,
}

impl<T: Real> MlpHead<T> {
    pub fn new(in_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut r = rng::stream(seed, 0x4EAD);
        let mut store = ParamStore::new();
        let w1 = store.add(
            "head.l1.w",
            Tensor::randn(&[in_dim, hidden], 1.0 / (in_dim as f64).sqrt(), &mut r),
            true,
        );
        let b1 = store.add("head.l1.b", Tensor::zeros(&[hidden]), true);
        let w2 = store.add(
            "head.l2.w",
            Tensor::randn(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), &mut r),
            true,
        );
        let b2 = store.add("head.l2.b", Tensor::zeros(&[1]), true);
        Ok(Self { store, w1, b1, w2, b2 })
    }

    pub fn in_dim(&self) -> usize {
        self.store.value(self.w1).shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.store.value(self.w1).shape()[1]
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// L2-normalizes `x` (`[batch, D]`), then layer 1, GELU, layer 2.
    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<HeadOutput> {
        let (_, d) = tape.value(x).dims2();
        if d != self.in_dim() {
            return Err(Error::Shape(format!("head expects dim {}, got {d}", self.in_dim())));
        }
        let xn = tape.l2_normalize_rows(x)?;
        let pre = tape.matmul(xn, bind[self.w1])?;
        let pre = tape.add_row(pre, bind[self.b1])?;
        let hidden = tape.gelu(pre);
        let logit = tape.matmul(hidden, bind[self.w2])?;
        let logit = tape.add_row(logit, bind[self.b2])?;
        Ok(HeadOutput { pre, hidden, logit })
    }

    /// Hidden features of `emb` (`[n, D]`) in eval mode.
    pub fn hidden(&self, emb: &Tensor<T>, tap: HiddenTap) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let x = tape.constant(emb.clone());
        let o = self.forward(&mut tape, &bind, x)?;
        Ok(tape
            .value(match tap {
                HiddenTap::PostActivation => o.hidden,
                HiddenTap::PreActivation => o.pre,
            })
            .clone())
    }

    /// Class-1 probabilities.
    pub fn predict(&self, emb: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let x = tape.constant(emb.clone());
        let o = self.forward(&mut tape, &bind, x)?;
        Ok(tape.value(o.logit).data().iter().map(|z| crate::autodiff::sigmoid(z.as_f64())).collect())
    }
}

impl MlpHead<f32> {
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for (_, p) in self.store.iter() {
            ckpt.insert(p.name.clone(), p.value.clone());
        }
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let w1 = ckpt.require("head.l1.w")?;
        let (d, h) = (w1.shape()[0], w1.shape()[1]);
        let mut head = MlpHead::new(d, h, 0)?;
        for id in [head.w1, head.b1, head.w2, head.b2] {
            let name = head.store.get(id).name.clone();
            head.store.assign(id, ckpt.require(&name)?.clone())?;
        }
        Ok(head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch: usize,
    pub hidden: usize,
    pub optim: AdamWConfig,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            hidden: 128,
            optim: AdamWConfig::default(),
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub struct Stage1Result {
    pub head: MlpHead<f32>,
    pub train_acc: f64,
    pub val_acc: f64,
    pub history: Vec<EpochStats>,
}

/// Deterministic split: the last `ceil(frac·n)` indices of a seeded
/// permutation are held out.
pub fn split_indices(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, 0x5917));
    let n_val = if frac > 0.0 && n > 1 {
        ((frac * n as f64).ceil() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn labels_f64(labels: &[u8], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| labels[i] as f64).collect()
}

fn gather(emb: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let (_, d) = emb.dims2();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(emb.row(i));
    }
    Tensor::new(&[idx.len(), d], data)
}

/// Mean loss and 0.5-threshold accuracy of `head` on the rows `idx`.
fn evaluate(head: &MlpHead<f32>, emb: &Tensor<f32>, labels: &[u8], idx: &[usize]) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut tape = Tape::new();
    let bind = head.store.bind_frozen(&mut tape);
    let x = tape.constant(gather(emb, idx)?);
    let o = head.forward(&mut tape, &bind, x)?;
    let y = labels_f64(labels, idx);
    let loss = tape.bce_with_logits(o.logit, &y)?;
    let correct = tape
        .value(o.logit)
        .data()
        .iter()
        .zip(&y)
        .filter(|(z, y)| (**z >= 0.0) == (**y == 1.0))
        .count();
    Ok((tape.value(loss).data()[0] as f64, correct as f64 / idx.len() as f64))
}

/// Trains a head on precomputed embeddings (`[n, D]`, labels in {0, 1}).
pub fn train_stage1_embeddings(emb: &Tensor<f32>, labels: &[u8], cfg: &Stage1Config) -> Result<Stage1Result> {
    let (n, d) = emb.dims2();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} embeddings vs {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Data("stage-1 training needs both classes".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut head = MlpHead::new(d, cfg.hidden, cfg.seed)?;
    let (mut train, val) = split_indices(n, cfg.val_fraction, cfg.seed);
    let mut opt = AdamW::new(cfg.optim);
    let mut r = rng::stream(cfg.seed, 0x0DE5);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut r);
        for chunk in train.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let bind = head.store.bind(&mut tape);
            let x = tape.constant(gather(emb, chunk)?);
            let o = head.forward(&mut tape, &bind, x)?;
            let loss = tape.bce_with_logits(o.logit, &labels_f64(labels, chunk))?;
            let mut g = tape.backward(loss)?;
            opt.step(&mut head.store, &bind.collect(&mut g))?;
        }
        let (train_loss, train_acc) = evaluate(&head, emb, labels, &train)?;
        let (val_loss, val_acc) = evaluate(&head, emb, labels, &val)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
    }
    let (_, train_acc) = evaluate(&head, emb, labels, &train)?;
    let (_, val_acc) = evaluate(&head, emb, labels, &val)?;
    Ok(Stage1Result {
        head,
        train_acc,
        val_acc,
        history,
    })
}

/// Brings an image to the encoder's resolution: center crop when larger,
/// zero padding when smaller.
pub fn fit_to_encoder(img: &Image, size: usize) -> Image {
    if img.height == size && img.width == size {
        img.clone()
    } else {
        img.center_crop(size)
    }
}

pub fn encode_images(enc: &ToyEncoder<f32>, images: &[SynthImage]) -> Result<Tensor<f32>> {
    let size = enc.config().image_size;
    let fitted: Vec<Image> = images.iter().map(|s| fit_to_encoder(&s.image, size)).collect();
    let refs: Vec<&Image> = fitted.iter().collect();
    enc.encode(&refs)
}

pub fn train_stage1(enc: &ToyEncoder<f32>, images: &[SynthImage], cfg: &Stage1Config) -> Result<Stage1Result> {
    if enc.trainable_count() != 0 {
        return Err(Error::Contract("stage-1 encoder must be frozen".into()));
    }
    let emb = encode_images(enc, images)?;
    let labels: Vec<u8> = images.iter().map(|s| s.label).collect();
    train_stage1_embeddings(&emb, &labels, cfg)
}

/// Hidden-layer features of the head for every image, with labels and
/// generator ids carried over.
pub fn extract_forgery_embeddings(
    head: &MlpHead<f32>,
    enc: &ToyEncoder<f32>,
    images: &[SynthImage],
    tap: HiddenTap,
) -> Result<EmbeddingSet> {
    if enc.config().dim != head.in_dim() {
        return Err(Error::Shape(format!(
            "encoder dim {} vs head input {}",
            enc.config().dim,
            head.in_dim()
        )));
    }
    let emb = encode_images(enc, images)?;
    let meta: Vec<(u8, u32)> = images.iter().map(|s| (s.label, s.generator_id)).collect();
    hidden_set(head, &emb, &meta, tap)
}

/// Same as [`extract_forgery_embeddings`] from precomputed embeddings.
pub fn hidden_set(head: &MlpHead<f32>, emb: &Tensor<f32>, meta: &[(u8, u32)], tap: HiddenTap) -> Result<EmbeddingSet> {
    let h = head.hidden(emb, tap)?;
    let mut set = EmbeddingSet::new(head.hidden_dim());
    for (i, &(label, gid)) in meta.iter().enumerate() {
        set.push(h.row(i).to_vec(), label, gid, format!("s{i}"))?;
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit rows, eigenvalue descending.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues of every component, kept or not.
    pub spectrum: Vec<f64>,
}

const SHARD: usize = 64;

/// Centered Gram matrix Σ (f−μ)(f−μ)ᵀ, summed per shard and combined by a
/// pairwise tree so the result does not depend on how work is split.
fn centered_gram(rows: &[Vec<f64>], mean: &[f64]) -> Matrix {
    let d = mean.len();
    let mut parts: Vec<Matrix> = rows
        .chunks(SHARD)
        .map(|shard| {
            let mut g = Matrix::zeros(d, d);
            let mut c = vec![0.0; d];
            for r in shard {
                for ((ci, x), m) in c.iter_mut().zip(r).zip(mean) {
                    *ci = x - m;
                }
                for i in 0..d {
                    for j in i..d {
                        g[(i, j)] += c[i] * c[j];
                    }
                }
            }
            g
        })
        .collect();
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    let mut g = parts.pop().unwrap_or_else(|| Matrix::zeros(d, d));
    for i in 0..d {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Top-`n` principal components of one class (covariance divisor count−1).
pub fn pca_components(rows: &[Vec<f64>], n: usize) -> Result<Pca> {
    let dim = rows.first().map_or(0, Vec::len);
    if n > dim {
        return Err(Error::Domain(format!("{n} components requested from dim {dim}")));
    }
    if rows.len() < n + 1 || rows.len() < 2 {
        return Err(Error::Domain(format!("{} vectors cannot support {n} components", rows.len())));
    }
    let mean = crate::hetero::mean(rows)?;
    let cov = centered_gram(rows, &mean).scaled(1.0 / (rows.len() - 1) as f64);
    let eig = jacobi_eigen(&cov)?;
    Ok(Pca {
        mean,
        components: eig.vectors[..n].to_vec(),
        eigenvalues: eig.values[..n].to_vec(),
        spectrum: eig.values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtoClass {
    Real,
    Fake,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoMeta {
    pub class: ProtoClass,
    pub component: usize,
    /// NaN-free: zero for randomly drawn rows.
    pub eigenvalue: f64,
}

/// `N×D′` prototypes, real rows first then fake rows. Fixed once built.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    rows: Vec<Vec<f64>>,
    meta: Vec<ProtoMeta>,
}

impl PrototypeMatrix {
    pub fn new(rows: Vec<Vec<f64>>, meta: Vec<ProtoMeta>) -> Result<Self> {
        if rows.is_empty() || rows.len() != meta.len() {
            return Err(Error::Contract(format!("{} prototype rows vs {} metadata entries", rows.len(), meta.len())));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("prototype rows must share a positive dim".into()));
        }
        Ok(Self { rows, meta })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn meta(&self) -> &[ProtoMeta] {
        &self.meta
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.rows.iter().flatten().map(|&v| T::lit(v)).collect();
        Tensor::new(&[self.len(), self.dim()], data).expect("consistent rows")
    }

    /// Unit-norm Gaussian rows, half tagged real and half fake.
    pub fn random(n: usize, dim: usize, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        if n == 0 || dim == 0 {
            return Err(Error::Config("random prototypes need positive count and dim".into()));
        }
        let mut r = rng::stream(seed, 0xAB1A);
        let rows = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                let s = crate::linalg::norm(&v);
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let meta = (0..n)
            .map(|i| ProtoMeta {
                class: if i < n / 2 { ProtoClass::Real } else { ProtoClass::Fake },
                component: if i < n / 2 { i } else { i - n / 2 },
                eigenvalue: 0.0,
            })
            .collect();
        Self::new(rows, meta)
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.insert("proto/P", self.to_tensor());
        let json = serde_json::to_string(&self.meta).map_err(|e| Error::Data(e.to_string()))?;
        ckpt.insert_text("proto/meta", &json);
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let p = ckpt.require("proto/P")?;
        let (n, d) = match p.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Data(format!("proto/P has shape {s:?}"))),
        };
        let meta: Vec<ProtoMeta> =
            serde_json::from_str(&ckpt.text("proto/meta")?).map_err(|e| Error::Data(format!("proto/meta: {e}")))?;
        let rows = (0..n).map(|i| p.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()).collect();
        Self::new(rows, meta)
    }
}

/// Stacks `[P_r; P_f]`.
pub fn assemble_prototypes(real: &Pca, fake: &Pca) -> Result<PrototypeMatrix> {
    if real.components.len() != fake.components.len() {
        return Err(Error::Contract(format!(
            "{} real vs {} fake components",
            real.components.len(),
            fake.components.len()
        )));
    }
    if real.mean.len() != fake.mean.len() {
        return Err(Error::Shape(format!("real dim {} vs fake dim {}", real.mean.len(), fake.mean.len())));
    }
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for (class, pca) in [(ProtoClass::Real, real), (ProtoClass::Fake, fake)] {
        for (i, (c, &ev)) in pca.components.iter().zip(&pca.eigenvalues).enumerate() {
            rows.push(c.clone());
            meta.push(ProtoMeta {
                class,
                component: i,
                eigenvalue: ev,
            });
        }
    }
    PrototypeMatrix::new(rows, meta)
}

/// Per-class PCA of a forgery-embedding set into `n` prototypes.
pub fn prototypes_from_set(set: &EmbeddingSet, n: usize) -> Result<PrototypeMatrix> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("prototype count {n} must be even and positive")));
    }
    let real = pca_components(&set.class_rows(0), n / 2)?;
    let fake = pca_components(&set.class_rows(1), n / 2)?;
    assemble_prototypes(&real, &fake)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn separable(n: usize, seed: u64) -> (Tensor<f32>, Vec<u8>) {
        let mut r = rng::seeded(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let angle: f64 = if y == 1 {
                r.random_range(0.2..1.3)
            } else {
                r.random_range(1.8..2.9)
            };
            let radius: f64 = r.random_range(0.5..2.0);
            data.push((radius * angle.cos()) as f32);
            data.push((radius * angle.sin()) as f32);
            labels.push(y);
        }
        (Tensor::new(&[n, 2], data).unwrap(), labels)
    }

    #[test]
    fn separable_fixture_is_learned() {
        let (emb, labels) = separable(2000, 1);
        let cfg = Stage1Config {
            batch: 8,
            ..Stage1Config::default()
        };
        let res = train_stage1_embeddings(&emb, &labels, &cfg).unwrap();
        assert!(res.train_acc >= 0.99, "train acc {}", res.train_acc);
        assert_eq!(res.history.len(), 20);
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let mut r = rng::seeded(3);
        let n = 4000;
        let emb = Tensor::<f32>::randn(&[n, 8], 1.0, &mut r);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let cfg = Stage1Config {
            epochs: 3,
            val_fraction: 0.25,
            ..Stage1Config::default()
        };
        let res = train_stage1_embeddings(&emb, &labels, &cfg).unwrap();
        assert!((0.4..=0.6).contains(&res.val_acc), "val acc {}", res.val_acc);
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let (emb, labels) = separable(200, 2);
        let cfg = Stage1Config {
            epochs: 0,
            ..Stage1Config::default()
        };
        let res = train_stage1_embeddings(&emb, &labels, &cfg).unwrap();
        let init: MlpHead = MlpHead::new(2, 128, cfg.seed).unwrap();
        for (a, b) in res.head.store().iter().zip(init.store().iter()) {
            assert_eq!(a.1.value, b.1.value);
        }
        assert!(res.history.is_empty());
    }

    #[test]
    fn single_class_is_data_error() {
        let emb = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(
            train_stage1_embeddings(&emb, &[1, 1, 1, 1], &Stage1Config::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn split_is_five_percent() {
        let (train, val) = split_indices(200, 0.05, 0);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 190);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn hidden_taps_and_identical_rows() {
        let head: MlpHead = MlpHead::new(4, 6, 0).unwrap();
        let emb = Tensor::new(&[2, 4], vec![1.0, -2.0, 0.5, 3.0, 1.0, -2.0, 0.5, 3.0]).unwrap();
        let post = head.hidden(&emb, HiddenTap::PostActivation).unwrap();
        let pre = head.hidden(&emb, HiddenTap::PreActivation).unwrap();
        assert_eq!(post.row(0), post.row(1));
        assert_eq!(post.shape(), &[2, 6]);
        assert_ne!(post, pre);
        let wrong = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(head.hidden(&wrong, HiddenTap::PostActivation), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_one_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 3.0, 0.0, 0.0]).collect();
        let p = pca_components(&rows, 3).unwrap();
        assert_eq!(p.components[0], vec![1.0, 0.0, 0.0]);
        assert!(p.eigenvalues[1].abs() < 1e-12 && p.eigenvalues[2].abs() < 1e-12);
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * (1.0 + j as f64)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn pca_errors() {
        let rows = random_rows(5, 3, 0);
        assert!(matches!(pca_components(&rows, 4), Err(Error::Domain(_))));
        assert!(matches!(pca_components(&rows[..2], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn pca_reconstruction_and_ordering() {
        let rows = random_rows(200, 6, 4);
        let p = pca_components(&rows, 6).unwrap();
        assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let (mut err, mut tot) = (0.0, 0.0);
        for r in &rows {
            let c: Vec<f64> = r.iter().zip(&p.mean).map(|(x, m)| x - m).collect();
            let mut back = vec![0.0; 6];
            for v in &p.components {
                let a = dot(&c, v);
                back.iter_mut().zip(v).for_each(|(b, vi)| *b += a * vi);
            }
            err += c.iter().zip(&back).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            tot += c.iter().map(|x| x * x).sum::<f64>();
        }
        assert!((err / tot).sqrt() < 1e-5);
    }

    #[test]
    fn pca_order_independent() {
        let rows = random_rows(150, 5, 8);
        let mut rev = rows.clone();
        rev.reverse();
        let (a, b) = (pca_components(&rows, 3).unwrap(), pca_components(&rev, 3).unwrap());
        for (u, v) in a.components.iter().zip(&b.components) {
            for (x, y) in u.iter().zip(v) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isotropic_cloud_has_flat_spectrum() {
        let mut r = rng::seeded(12);
        let rows: Vec<Vec<f64>> = (0..5000)
            .map(|_| (0..6).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let p = pca_components(&rows, 6).unwrap();
        assert!(p.eigenvalues[0] / p.eigenvalues[5] < 2.0);
    }

    #[test]
    fn assembled_rows_are_orthonormal_per_class() {
        let real = pca_components(&random_rows(80, 10, 1), 4).unwrap();
        let fake = pca_components(&random_rows(80, 10, 2), 4).unwrap();
        let pm = assemble_prototypes(&real, &fake).unwrap();
        assert_eq!(pm.len(), 8);
        assert_eq!(pm.meta()[0].class, ProtoClass::Real);
        assert_eq!(pm.meta()[7].class, ProtoClass::Fake);
        for block in pm.rows().chunks(4) {
            for (i, u) in block.iter().enumerate() {
                for (j, v) in block.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(u, v) - want).abs() < 1e-6);
                }
            }
        }
        let short = pca_components(&random_rows(80, 10, 2), 3).unwrap();
        assert!(matches!(assemble_prototypes(&real, &short), Err(Error::Contract(_))));
    }

    #[test]
    fn one_dimensional_pair() {
        let real = pca_components(&[vec![0.0], vec![1.0]], 1).unwrap();
        let fake = pca_components(&[vec![2.0], vec![-1.0]], 1).unwrap();
        let pm = assemble_prototypes(&real, &fake).unwrap();
        assert_eq!((pm.len(), pm.dim()), (2, 1));
    }

    #[test]
    fn prototype_checkpoint_roundtrip() {
        let pm = PrototypeMatrix::random(6, 5, 3).unwrap();
        let mut ck = Checkpoint::new();
        pm.save_into(&mut ck).unwrap();
        let back = PrototypeMatrix::load_from(&ck).unwrap();
        assert_eq!(back.meta(), pm.meta());
        for (a, b) in back.rows().iter().zip(pm.rows()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
