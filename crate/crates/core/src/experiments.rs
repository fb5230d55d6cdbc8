//! Heterogeneity diagnostics over growing generator sets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::{Mode, ToyEncoder};
use crate::error::{Error, Result};
use crate::hetero::{lda_fit, scatter_trace};
use crate::imaging::Image;
use crate::optim::{AdamW, AdamWConfig};
use crate::eval::{accuracy, average_precision};
use crate::pipeline::{corpus, role, run_pipeline_on, RunConfig};
use crate::stage2::predict;
use crate::rng;
use crate::stage1::{encode_images, fit_to_encoder, train_stage1_embeddings, HiddenTap, MlpHead, Stage1Config};
use crate::synth::SynthImage;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeteroConfig {
    pub ks: Vec<u32>,
    pub n_per_class: usize,
    pub eval_n_per_class: usize,
    /// Head training for the frozen pipeline.
    pub head: Stage1Config,
    pub e2e: EndToEndConfig,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            n_per_class: 512,
            eval_n_per_class: 1024,
            head: Stage1Config {
                batch: 16,
                optim: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
                val_fraction: 0.0,
                ..Stage1Config::default()
            },
            e2e: EndToEndConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndToEndConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Head optimizer.
    pub optim: AdamWConfig,
    pub encoder_optim: AdamWConfig,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch: 16,
            optim: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            encoder_optim: AdamWConfig::default(),
            hidden: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroRow {
    pub k: u32,
    pub trace_real: f64,
    pub trace_gen: f64,
    pub fisher_frozen: f64,
    pub fisher_e2e: f64,
    pub acc_frozen: f64,
    pub acc_e2e: f64,
}

/// Trains a copy of `base` with every weight unfrozen jointly with a fresh
/// head; returns both, encoder frozen again.
pub fn train_end_to_end(
    base: &ToyEncoder<f32>,
    images: &[SynthImage],
    cfg: &EndToEndConfig,
) -> Result<(ToyEncoder<f32>, MlpHead<f32>)> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if !(images.iter().any(|s| s.label == 0) && images.iter().any(|s| s.label == 1)) {
        return Err(Error::Data("end-to-end training needs both classes".into()));
    }
    let mut enc = base.clone();
    enc.unfreeze();
    let mut head = MlpHead::new(enc.config().dim, cfg.hidden, cfg.seed)?;
    let size = enc.config().image_size;
    let fitted: Vec<Image> = images.iter().map(|s| fit_to_encoder(&s.image, size)).collect();
    let (mut opt_enc, mut opt_head) = (AdamW::new(cfg.encoder_optim), AdamW::new(cfg.optim));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut r = rng::stream(cfg.seed, 0xE2E);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| &fitted[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| images[i].label as f64).collect();
            let mut tape = Tape::new();
            let eb = enc.store().bind(&mut tape);
            let hb = head.store().bind(&mut tape);
            let patches = tape.constant(enc.patchify(&batch)?);
            let o = enc.forward(&mut tape, &eb, patches, batch.len(), Mode::Eval)?;
            let h = head.forward(&mut tape, &hb, o.cls)?;
            let loss = tape.bce_with_logits(h.logit, &y)?;
            let mut g = tape.backward(loss)?;
            opt_enc.step(enc.store_mut(), &eb.collect(&mut g))?;
            opt_head.step(head.store_mut(), &hb.collect(&mut g))?;
        }
    }
    enc.freeze();
    Ok((enc, head))
}

fn split_rows(t: &Tensor<f32>, images: &[SynthImage]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (_, d) = t.dims2();
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for (row, s) in t.data().chunks(d).zip(images) {
        let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        if s.label == 0 {
            real.push(v)
        } else {
            fake.push(v)
        }
    }
    (real, fake)
}

/// LDA fitted on training features, scored on held-out ones: (J, accuracy).
fn held_out_lda(train: &(Vec<Vec<f64>>, Vec<Vec<f64>>), test: &(Vec<Vec<f64>>, Vec<Vec<f64>>)) -> Result<(f64, f64)> {
    let m = lda_fit(&train.0, &train.1)?;
    if m.degenerate {
        return Ok((0.0, 0.5));
    }
    let j = crate::hetero::fisher_ratio(&m.w, &test.0, &test.1)?;
    Ok((j, m.accuracy(&test.0, &test.1)))
}

/// Scatter traces of the frozen embeddings and penultimate-feature
/// separability of a frozen-encoder pipeline and an end-to-end one, for each
/// generator count `k` (families `1..=k`).
pub fn analyze_hetero(run: &RunConfig, cfg: &HeteroConfig, frozen: &ToyEncoder<f32>) -> Result<Vec<HeteroRow>> {
    if frozen.trainable_count() != 0 {
        return Err(Error::Contract("heterogeneity analysis needs a frozen encoder".into()));
    }
    let size = run.corpus.image_size;
    let mut rows = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        if k == 0 || k > crate::synth::MAX_FAMILIES {
            return Err(Error::Config(format!("k = {k} outside 1..={}", crate::synth::MAX_FAMILIES)));
        }
        let families: Vec<u32> = (1..=k).collect();
        let train = corpus(&families, cfg.n_per_class, size, run.derive(role::TRAIN_CORPUS))?;
        let test = corpus(&families, cfg.eval_n_per_class, size, run.derive(role::EVAL_CORPUS))?;
        let labels: Vec<u8> = train.iter().map(|s| s.label).collect();

        let emb_train = encode_images(frozen, &train)?;
        let emb_test = encode_images(frozen, &test)?;
        let (er, ef) = split_rows(&emb_train, &train);

        let head_cfg = Stage1Config {
            seed: run.derive(role::STAGE1),
            ..cfg.head.clone()
        };
        let head = train_stage1_embeddings(&emb_train, &labels, &head_cfg)?.head;
        let tap = HiddenTap::PostActivation;
        let (jf, af) = held_out_lda(
            &split_rows(&head.hidden(&emb_train, tap)?, &train),
            &split_rows(&head.hidden(&emb_test, tap)?, &test),
        )?;

        let e2e_cfg = EndToEndConfig {
            seed: run.derive(role::STAGE2),
            ..cfg.e2e.clone()
        };
        let (enc2, head2) = train_end_to_end(frozen, &train, &e2e_cfg)?;
        let (je, ae) = held_out_lda(
            &split_rows(&head2.hidden(&encode_images(&enc2, &train)?, tap)?, &train),
            &split_rows(&head2.hidden(&encode_images(&enc2, &test)?, tap)?, &test),
        )?;

        rows.push(HeteroRow {
            k,
            trace_real: scatter_trace(&er)?,
            trace_gen: scatter_trace(&ef)?,
            fisher_frozen: jf,
            fisher_e2e: je,
            acc_frozen: af,
            acc_e2e: ae,
        });
    }
    Ok(rows)
}

/// A module that can be switched off in the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    /// PCA prototypes (random unit rows otherwise).
    Pca,
    /// Prototype mapping.
    Pm,
    Lora,
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pca" => Ok(Self::Pca),
            "pm" => Ok(Self::Pm),
            "lora" => Ok(Self::Lora),
            other => Err(Error::Config(format!("unknown ablation module '{other}' (expected pca, pm or lora)"))),
        }
    }
}

/// The six module combinations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationGroup {
    G1,
    G2,
    G3,
    G4,
    G5,
    Ours,
}

impl AblationGroup {
    pub const ALL: [Self; 6] = [Self::G1, Self::G2, Self::G3, Self::G4, Self::G5, Self::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Self::G1 => "1",
            Self::G2 => "2",
            Self::G3 => "3",
            Self::G4 => "4",
            Self::G5 => "5",
            Self::Ours => "ours",
        }
    }

    /// (PCA, PM, LoRA).
    pub fn modules(self) -> (bool, bool, bool) {
        match self {
            Self::G1 => (false, false, false),
            Self::G2 => (false, true, false),
            Self::G3 => (false, false, true),
            Self::G4 => (true, true, false),
            Self::G5 => (false, true, true),
            Self::Ours => (true, true, true),
        }
    }

    fn uses(self, m: Module) -> bool {
        let (pca, pm, lora) = self.modules();
        match m {
            Module::Pca => pca,
            Module::Pm => pm,
            Module::Lora => lora,
        }
    }

    /// `base` with this group's modules switched on or off.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let (pca, pm, lora) = self.modules();
        let mut cfg = base.clone();
        cfg.stage2.model.prototype_mapping = pm;
        cfg.prototypes.random = pm && !pca;
        cfg.stage2.model.lora = if lora {
            Some(base.stage2.model.lora.clone().unwrap_or_default())
        } else {
            None
        };
        cfg
    }
}

/// Groups whose enabled modules all lie on the given axes.
pub fn groups_for_grid(axes: &[Module]) -> Vec<AblationGroup> {
    AblationGroup::ALL
        .into_iter()
        .filter(|g| [Module::Pca, Module::Pm, Module::Lora].iter().all(|&m| !g.uses(m) || axes.contains(&m)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Training families; also the seen-generator validation families.
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub eval_n_per_class: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            seen: vec![1, 2, 3],
            unseen: vec![4],
            eval_n_per_class: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub pca: bool,
    pub pm: bool,
    pub lora: bool,
    /// Seed means.
    pub unseen_acc: f64,
    pub unseen_ap: f64,
    pub seen_acc: f64,
    pub seen_ap: f64,
    pub unseen_acc_per_seed: Vec<f64>,
    pub seen_acc_per_seed: Vec<f64>,
}

fn score(model: &crate::stage2::GaplModel<f32>, images: &[SynthImage]) -> Result<(f64, f64)> {
    let refs: Vec<&Image> = images.iter().map(|s| &s.image).collect();
    let scores = predict(model, &refs)?;
    let labels: Vec<u8> = images.iter().map(|s| s.label).collect();
    Ok((accuracy(&scores, &labels, 0.5)?, average_precision(&scores, &labels)?))
}

/// Trains every group for every seed on one fixed corpus of the seen
/// families and scores it on held-out seen and unseen corpora. The seed
/// drives stage-1 data, initializations and batching; the training and
/// evaluation corpora and the frozen encoder are shared.
pub fn ablate(
    base: &RunConfig,
    encoder: &ToyEncoder<f32>,
    groups: &[AblationGroup],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    if cfg.seeds.is_empty() || cfg.seen.is_empty() || cfg.unseen.is_empty() {
        return Err(Error::Config("ablation needs seeds, seen and unseen families".into()));
    }
    let size = base.corpus.image_size;
    let train = corpus(&cfg.seen, base.corpus.n_per_class, size, base.derive(role::TRAIN_CORPUS))?;
    let seen = corpus(&cfg.seen, cfg.eval_n_per_class, size, base.derive(role::EVAL_CORPUS))?;
    let unseen = corpus(&cfg.unseen, cfg.eval_n_per_class, size, base.derive(role::EVAL_CORPUS))?;
    let mut rows = Vec::with_capacity(groups.len());
    for &group in groups {
        let (pca, pm, lora) = group.modules();
        let mut acc = Vec::new();
        for &seed in &cfg.seeds {
            let mut run_cfg = group.configure(base);
            run_cfg.seed = seed;
            run_cfg.corpus.families = cfg.seen.clone();
            let run = run_pipeline_on(&run_cfg, encoder.clone(), &train)?;
            acc.push((score(&run.model, &seen)?, score(&run.model, &unseen)?));
        }
        let n = acc.len() as f64;
        let mean = |f: &dyn Fn(&((f64, f64), (f64, f64))) -> f64| acc.iter().map(f).sum::<f64>() / n;
        rows.push(AblationRow {
            group,
            pca,
            pm,
            lora,
            unseen_acc: mean(&|a| a.1 .0),
            unseen_ap: mean(&|a| a.1 .1),
            seen_acc: mean(&|a| a.0 .0),
            seen_ap: mean(&|a| a.0 .1),
            unseen_acc_per_seed: acc.iter().map(|a| a.1 .0).collect(),
            seen_acc_per_seed: acc.iter().map(|a| a.0 .0).collect(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_selects_groups_by_axes() {
        assert_eq!(groups_for_grid(&[Module::Pm, Module::Lora, Module::Pca]), AblationGroup::ALL.to_vec());
        assert_eq!(
            groups_for_grid(&[Module::Pm, Module::Lora]),
            vec![AblationGroup::G1, AblationGroup::G2, AblationGroup::G3, AblationGroup::G5]
        );
        assert_eq!(groups_for_grid(&[]), vec![AblationGroup::G1]);
        assert!("pmx".parse::<Module>().is_err());
    }

    #[test]
    fn group_configuration() {
        let base = RunConfig::default();
        let g1 = AblationGroup::G1.configure(&base);
        assert!(!g1.stage2.model.prototype_mapping && g1.stage2.model.lora.is_none());
        let g2 = AblationGroup::G2.configure(&base);
        assert!(g2.stage2.model.prototype_mapping && g2.prototypes.random);
        let g4 = AblationGroup::G4.configure(&base);
        assert!(!g4.prototypes.random && g4.stage2.model.lora.is_none());
        let ours = AblationGroup::Ours.configure(&base);
        assert_eq!(ours, base);
    }
}
