//! Stage II: adapted encoder → projection → prototype cross-attention →
//! linear classifier, trained end to end.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_in_place, Tape, Var};
use crate::encoder::{LoraConfig, Mode, ToyEncoder};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::io::Checkpoint;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng;
use crate::stage1::{split_indices, EpochStats, HiddenTap, MlpHead, PrototypeMatrix};
use crate::synth::SynthImage;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaplConfig {
    pub prototype_mapping: bool,
    /// Adapters on the encoder; `None` keeps it fully frozen.
    pub lora: Option<LoraConfig>,
    pub train_gproj: bool,
    /// Must match the tap the prototypes were extracted with.
    pub tap: HiddenTap,
}

impl Default for GaplConfig {
    fn default() -> Self {
        Self {
            prototype_mapping: true,
            lora: Some(LoraConfig::default()),
            train_gproj: true,
            tap: HiddenTap::PostActivation,
        }
    }
}

#[derive(Clone, Debug)]
struct HeadIds {
    gproj_w: ParamId,
    gproj_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct GaplModel<T: Real = f32> {
    cfg: GaplConfig,
    encoder: ToyEncoder<T>,
    head: ParamStore<T>,
    ids: HeadIds,
    prototypes: Option<PrototypeMatrix>,
    proto_tensor: Option<Tensor<T>>,
}

pub struct GaplOutput {
    /// `[batch, 1]`.
    pub logits: Var,
    /// `[batch, D′]` projected embedding.
    pub projected: Var,
    /// `[batch, D′]` classifier input: the mapped feature, or the projection
    /// itself without prototype mapping.
    pub mapped: Var,
    /// `[batch, N]` attention over prototypes.
    pub attention: Option<Var>,
}

/// Batched single-head cross-attention of `f` (`[B, D′]`) over prototypes
/// `p` (`[N, D′]`): `softmax((f W_q)(P W_k)ᵀ/√D′) · (P W_v)`.
pub fn prototype_map<T: Real>(tape: &mut Tape<T>, f: Var, p: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let (_, d) = tape.value(f).dims2();
    let (_, dp) = tape.value(p).dims2();
    if d != dp {
        return Err(Error::Shape(format!("prototype map: feature dim {d} vs prototype dim {dp}")));
    }
    let q = tape.matmul(f, wq)?;
    let k = tape.matmul(p, wk)?;
    let v = tape.matmul(p, wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let att = tape.softmax_rows(logits)?;
    let out = tape.matmul(att, v)?;
    Ok((out, att))
}

/// Scalar reference of the mapping for one feature; returns `(f̃, weights)`.
pub fn prototype_map_single(
    f: &[f64],
    p: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = f.len();
    if p.iter().any(|r| r.len() != d) || [wq, wk, wv].iter().any(|w| w.len() != d || w.iter().any(|r| r.len() != d)) {
        return Err(Error::Shape(format!("prototype map: inconsistent dims around {d}")));
    }
    let mul = |x: &[f64], w: &[Vec<f64>]| -> Vec<f64> {
        (0..d).map(|j| (0..d).map(|i| x[i] * w[i][j]).sum()).collect()
    };
    let q = mul(f, wq);
    let mut weights: Vec<f64> = p
        .iter()
        .map(|pi| {
            let k = mul(pi, wk);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        })
        .collect();
    softmax_in_place(&mut weights);
    let mut out = vec![0.0; d];
    for (pi, a) in p.iter().zip(&weights) {
        for (o, v) in out.iter_mut().zip(mul(pi, wv)) {
            *o += a * v;
        }
    }
    Ok((out, weights))
}

impl<T: Real> GaplModel<T> {
    /// `encoder` is taken as the frozen base; `head` supplies the projection.
    pub fn new(
        mut encoder: ToyEncoder<T>,
        head: &MlpHead<T>,
        prototypes: Option<PrototypeMatrix>,
        cfg: GaplConfig,
        seed: u64,
    ) -> Result<Self> {
        if head.in_dim() != encoder.config().dim {
            return Err(Error::Shape(format!(
                "projection input {} vs encoder dim {}",
                head.in_dim(),
                encoder.config().dim
            )));
        }
        let dp = head.hidden_dim();
        if cfg.prototype_mapping {
            match &prototypes {
                None => return Err(Error::Contract("prototype mapping needs a prototype matrix".into())),
                Some(p) if p.dim() != dp => {
                    return Err(Error::Shape(format!("prototype dim {} vs projection dim {dp}", p.dim())))
                }
                _ => {}
            }
        }
        if encoder.lora_config().is_none() {
            encoder.freeze();
            if let Some(l) = &cfg.lora {
                encoder.lora_wrap(l.clone(), rng::stream(seed, 0x10A).random())?;
            }
        } else if cfg.lora.is_none() {
            return Err(Error::Config("encoder already carries adapters".into()));
        }
        let mut r = rng::stream(seed, 0x57A2);
        let mut store = ParamStore::new();
        let hs = head.store();
        let gproj_w = store.add("gapl.gproj.w", hs.value(head.w1).clone(), cfg.train_gproj);
        let gproj_b = store.add("gapl.gproj.b", hs.value(head.b1).clone(), cfg.train_gproj);
        let pm = cfg.prototype_mapping;
        let wq = store.add("gapl.pm.wq", Tensor::randn(&[dp, dp], 0.02, &mut r), pm);
        let wk = store.add("gapl.pm.wk", Tensor::randn(&[dp, dp], 0.02, &mut r), pm);
        let wv = store.add("gapl.pm.wv", Tensor::randn(&[dp, dp], 0.02, &mut r), pm);
        let cls_w = store.add("gapl.cls.w", Tensor::randn(&[dp, 1], 0.02, &mut r), true);
        let cls_b = store.add("gapl.cls.b", Tensor::zeros(&[1]), true);
        let proto_tensor = prototypes.as_ref().map(|p| p.to_tensor());
        Ok(Self {
            cfg,
            encoder,
            head: store,
            ids: HeadIds {
                gproj_w,
                gproj_b,
                wq,
                wk,
                wv,
                cls_w,
                cls_b,
            },
            prototypes,
            proto_tensor,
        })
    }

    pub fn config(&self) -> &GaplConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &ToyEncoder<T> {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut ToyEncoder<T> {
        &mut self.encoder
    }

    pub fn head(&self) -> &ParamStore<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.head
    }

    pub fn prototypes(&self) -> Option<&PrototypeMatrix> {
        self.prototypes.as_ref()
    }

    pub fn value_weight(&self) -> ParamId {
        self.ids.wv
    }

    pub fn query_weight(&self) -> ParamId {
        self.ids.wq
    }

    pub fn trainable_count(&self) -> usize {
        self.encoder.trainable_count() + self.head.trainable_count()
    }

    pub fn freeze_all(&mut self) {
        self.encoder.freeze();
        let ids: Vec<ParamId> = self.head.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.head.set_trainable(id, false);
        }
    }

    /// Rows of `P W_v`.
    pub fn value_prototypes(&self) -> Option<Vec<Vec<f64>>> {
        let p = self.proto_tensor.as_ref()?;
        let v = p.matmul(self.head.value(self.ids.wv)).ok()?;
        let (n, _) = v.dims2();
        Some((0..n).map(|i| v.row(i).iter().map(|x| x.as_f64()).collect()).collect())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        enc_bind: &Binding,
        head_bind: &Binding,
        patches: Var,
        batch: usize,
        mode: Mode,
    ) -> Result<GaplOutput> {
        let e = self.encoder.forward(tape, enc_bind, patches, batch, mode)?;
        let x = tape.l2_normalize_rows(e.cls)?;
        let f = tape.matmul(x, head_bind[self.ids.gproj_w])?;
        let mut f = tape.add_row(f, head_bind[self.ids.gproj_b])?;
        if self.cfg.tap == HiddenTap::PostActivation {
            f = tape.gelu(f);
        }
        let (mapped, attention) = if self.cfg.prototype_mapping {
            let p = self
                .proto_tensor
                .clone()
                .ok_or_else(|| Error::Contract("prototype matrix missing".into()))?;
            let p = tape.constant(p);
            let ids = &self.ids;
            let (m, a) = prototype_map(tape, f, p, head_bind[ids.wq], head_bind[ids.wk], head_bind[ids.wv])?;
            (m, Some(a))
        } else {
            (f, None)
        };
        let z = tape.matmul(mapped, head_bind[self.ids.cls_w])?;
        let logits = tape.add_row(z, head_bind[self.ids.cls_b])?;
        Ok(GaplOutput {
            logits,
            projected: f,
            mapped,
            attention,
        })
    }

    /// Eval-mode pass over images already at encoder resolution.
    pub fn infer(&self, images: &[&Image]) -> Result<Inference> {
        const CHUNK: usize = 64;
        let mut inf = Inference::default();
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::new();
            let eb = self.encoder.store().bind_frozen(&mut tape);
            let hb = self.head.bind_frozen(&mut tape);
            let p = tape.constant(self.encoder.patchify(chunk)?);
            let o = self.forward(&mut tape, &eb, &hb, p, chunk.len(), Mode::Eval)?;
            inf.logits.extend(tape.value(o.logits).data().iter().map(|z| z.as_f64()));
            let rows = |v: Var| -> Vec<Vec<f64>> {
                let t = tape.value(v);
                let (n, _) = t.dims2();
                (0..n).map(|i| t.row(i).iter().map(|x| x.as_f64()).collect()).collect()
            };
            inf.mapped.extend(rows(o.mapped));
            if let Some(a) = o.attention {
                inf.attention.extend(rows(a));
            }
        }
        inf.scores = inf.logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(inf)
    }

    pub fn cast<U: Real>(&self) -> GaplModel<U> {
        GaplModel {
            cfg: self.cfg.clone(),
            encoder: self.encoder.cast(),
            head: self.head.cast(),
            ids: self.ids.clone(),
            prototypes: self.prototypes.clone(),
            proto_tensor: self.prototypes.as_ref().map(|p| p.to_tensor()),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub logits: Vec<f64>,
    /// σ(logit).
    pub scores: Vec<f64>,
    pub mapped: Vec<Vec<f64>>,
    /// Empty without prototype mapping.
    pub attention: Vec<Vec<f64>>,
}

impl GaplModel<f32> {
    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.encoder.save_into(ckpt)?;
        for (_, p) in self.head.iter() {
            ckpt.insert(p.name.clone(), p.value.clone());
        }
        if let Some(p) = &self.prototypes {
            p.save_into(ckpt)?;
        }
        let json = serde_json::to_string(&self.cfg).map_err(|e| Error::Data(e.to_string()))?;
        ckpt.insert_text("gapl.config", &json);
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: GaplConfig =
            serde_json::from_str(&ckpt.text("gapl.config")?).map_err(|e| Error::Data(format!("gapl.config: {e}")))?;
        let encoder = ToyEncoder::load_from(ckpt)?;
        let gw = ckpt.require("gapl.gproj.w")?;
        let (d, dp) = (gw.shape()[0], gw.shape()[1]);
        let head = MlpHead::new(d, dp, 0)?;
        let prototypes = if ckpt.get("proto/P").is_some() {
            Some(PrototypeMatrix::load_from(ckpt)?)
        } else {
            None
        };
        let mut model = GaplModel::new(encoder, &head, prototypes, cfg, 0)?;
        let ids: Vec<(ParamId, String)> = model.head.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            model.head.assign(id, ckpt.require(&name)?.clone())?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceBound {
    /// Trace of the population covariance of the mapped features.
    pub trace_var: f64,
    /// ¼ · max pairwise squared distance between value prototypes.
    pub bound: f64,
    pub ratio: f64,
    pub holds: bool,
}

/// Compares the spread of mapped features against the diameter of the
/// value-projected prototypes they are averaged from.
pub fn variance_bound_check(mapped: &[Vec<f64>], values: &[Vec<f64>]) -> Result<VarianceBound> {
    if mapped.is_empty() || values.is_empty() {
        return Err(Error::Domain("variance bound needs features and prototypes".into()));
    }
    let trace_var = crate::hetero::scatter_trace(mapped)? / mapped.len() as f64;
    let mut diam2: f64 = 0.0;
    for (i, a) in values.iter().enumerate() {
        for b in &values[i + 1..] {
            diam2 = diam2.max(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    let bound = 0.25 * diam2;
    let ratio = if bound > 0.0 {
        trace_var / bound
    } else if trace_var > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(VarianceBound {
        trace_var,
        bound,
        ratio,
        holds: trace_var <= bound * (1.0 + 1e-6),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub max_epochs: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub val_fraction: f64,
    /// Stop as soon as validation accuracy reaches this.
    pub target_val_acc: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub random_crop: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch: 32,
            optim: AdamWConfig::default(),
            val_fraction: 0.05,
            target_val_acc: 0.999,
            patience: 3,
            random_crop: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    TargetReached,
    NoImprovement,
    MaxEpochs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2History {
    pub epochs: Vec<EpochStats>,
    pub stop: StopReason,
    pub best_val_acc: f64,
}

/// Random crop to `size`, zero-padded where the image is smaller.
pub fn random_crop(img: &Image, size: usize, r: &mut impl Rng) -> Image {
    let mut pick = |extent: usize| -> isize {
        let slack = extent as i64 - size as i64;
        (if slack >= 0 {
            r.random_range(0..=slack)
        } else {
            -r.random_range(0..=-slack)
        }) as isize
    };
    let top = pick(img.height);
    let left = pick(img.width);
    img.crop(top, left, size)
}

pub fn eval_view(img: &Image, size: usize) -> Image {
    crate::stage1::fit_to_encoder(img, size)
}

fn batch_stats(model: &GaplModel<f32>, images: &[&Image], labels: &[f64]) -> Result<(f64, f64)> {
    let inf = model.infer(images)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (&z, &y) in inf.logits.iter().zip(labels) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        correct += usize::from((z >= 0.0) == (y == 1.0));
    }
    let n = labels.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains with BCE; only parameters flagged trainable move.
pub fn train_stage2(model: &mut GaplModel<f32>, corpus: &[SynthImage], cfg: &Stage2Config) -> Result<Stage2History> {
    if corpus.is_empty() || cfg.batch == 0 {
        return Err(Error::Data("stage-2 training needs images and a positive batch".into()));
    }
    if model.cfg.prototype_mapping && model.prototypes.is_none() {
        return Err(Error::Contract("prototype matrix missing".into()));
    }
    let size = model.encoder.config().image_size;
    let (mut train, val) = split_indices(corpus.len(), cfg.val_fraction, cfg.seed);
    let val_imgs: Vec<Image> = val.iter().map(|&i| eval_view(&corpus[i].image, size)).collect();
    let val_refs: Vec<&Image> = val_imgs.iter().collect();
    let val_labels: Vec<f64> = val.iter().map(|&i| corpus[i].label as f64).collect();

    let (mut opt_enc, mut opt_head) = (AdamW::new(cfg.optim), AdamW::new(cfg.optim));
    let mut r = rng::stream(cfg.seed, 0x57A6);
    let mut epochs = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut step = 0u64;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        train.shuffle(&mut r);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in train.chunks(cfg.batch) {
            let imgs: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    if cfg.random_crop {
                        random_crop(&corpus[i].image, size, &mut r)
                    } else {
                        eval_view(&corpus[i].image, size)
                    }
                })
                .collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let labels: Vec<f64> = chunk.iter().map(|&i| corpus[i].label as f64).collect();
            let mut tape = Tape::new();
            let eb = model.encoder.store().bind(&mut tape);
            let hb = model.head.bind(&mut tape);
            let p = tape.constant(model.encoder.patchify(&refs)?);
            let mode = Mode::Train { seed: cfg.seed, step };
            let o = model.forward(&mut tape, &eb, &hb, p, refs.len(), mode)?;
            let loss = tape.bce_with_logits(o.logits, &labels)?;
            loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += tape
                .value(o.logits)
                .data()
                .iter()
                .zip(&labels)
                .filter(|(z, y)| (**z >= 0.0) == (**y == 1.0))
                .count();
            if model.trainable_count() > 0 {
                let mut g = tape.backward(loss)?;
                opt_enc.step(model.encoder.store_mut(), &eb.collect(&mut g))?;
                opt_head.step(&mut model.head, &hb.collect(&mut g))?;
            }
            step += 1;
        }
        let (val_loss, val_acc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            batch_stats(model, &val_refs, &val_labels)?
        };
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        });
        if val_acc >= cfg.target_val_acc {
            best = best.max(val_acc);
            stop = StopReason::TargetReached;
            break;
        }
        if val_acc > best {
            best = val_acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop = StopReason::NoImprovement;
                break;
            }
        }
    }
    Ok(Stage2History {
        epochs,
        stop,
        best_val_acc: best,
    })
}

/// Class-1 probabilities for images of any size (center-cropped or padded
/// to the encoder resolution).
pub fn predict(model: &GaplModel<f32>, images: &[&Image]) -> Result<Vec<f64>> {
    let size = model.encoder.config().image_size;
    let views: Vec<Image> = images.iter().map(|i| eval_view(i, size)).collect();
    let refs: Vec<&Image> = views.iter().collect();
    Ok(model.infer(&refs)?.scores)
}
