//! Run configuration and the stage-by-stage pipeline built on it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{pretrain_patch_shuffle, EncoderConfig, PretrainConfig, PretrainReport, ToyEncoder};
use crate::error::{Error, Result};
use crate::eval::Perturbation;
use crate::imaging::Image;
use crate::io::EmbeddingSet;
use crate::optim::AdamWConfig;
use crate::rng;
use crate::stage1::{
    extract_forgery_embeddings, fit_to_encoder, prototypes_from_set, train_stage1, HiddenTap, MlpHead,
    PrototypeMatrix, Stage1Config, Stage1Result,
};
use crate::stage2::{train_stage2, GaplConfig, GaplModel, Stage2Config, Stage2History};
use crate::synth::{make_corpus_with, CorpusSpec, SynthImage, MAX_FAMILIES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Generator families of the fake half.
    pub families: Vec<u32>,
    pub n_per_class: usize,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            families: vec![1, 2, 3],
            n_per_class: 512,
            image_size: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPrior {
    /// Patch-shuffle pretraining on real images, then frozen.
    Pretrained,
    /// Random initialization, frozen.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub kind: EncoderPrior,
    /// Real images used for pretraining.
    pub images: usize,
    pub train: PretrainConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: EncoderPrior::Pretrained,
            images: 512,
            train: PretrainConfig {
                epochs: 4,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Params {
    /// Images per prototype-set family (plus as many real images in total).
    pub m_per_family: usize,
    pub families: Vec<u32>,
    pub tap: HiddenTap,
    pub train: Stage1Config,
}

impl Default for Stage1Params {
    fn default() -> Self {
        Self {
            m_per_family: 128,
            families: vec![1, 2, 3],
            tap: HiddenTap::PostActivation,
            train: Stage1Config {
                batch: 16,
                optim: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
                ..Stage1Config::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrototypeParams {
    pub n: usize,
    /// Replace the PCA prototypes by random unit rows.
    pub random: bool,
}

impl Default for PrototypeParams {
    fn default() -> Self {
        Self { n: 64, random: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Params {
    pub model: GaplConfig,
    pub train: Stage2Config,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Self {
            model: GaplConfig::default(),
            // The validation split is small, so no patience-based stop.
            train: Stage2Config {
                max_epochs: 12,
                patience: 12,
                batch: 16,
                ..Stage2Config::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub families: Vec<u32>,
    pub n_per_class: usize,
    pub jpeg: Vec<f64>,
    pub blur: Vec<f64>,
    pub top_j: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            families: (1..=MAX_FAMILIES).collect(),
            n_per_class: 128,
            jpeg: Perturbation::Jpeg.default_grid(),
            blur: Perturbation::Blur.default_grid(),
            top_j: 8,
        }
    }
}

impl EvalParams {
    pub fn grid(&self) -> Vec<(Perturbation, Vec<f64>)> {
        vec![(Perturbation::Jpeg, self.jpeg.clone()), (Perturbation::Blur, self.blur.clone())]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub prior: PriorConfig,
    pub stage1: Stage1Params,
    pub prototypes: PrototypeParams,
    pub stage2: Stage2Params,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            // 32-pixel images are cropped to 28 for training, so the patch
            // grid is 4×4 of 7-pixel patches.
            encoder: EncoderConfig {
                image_size: 28,
                patch_size: 7,
                ..EncoderConfig::default()
            },
            prior: PriorConfig::default(),
            stage1: Stage1Params::default(),
            prototypes: PrototypeParams::default(),
            stage2: Stage2Params::default(),
            eval: EvalParams::default(),
        }
    }
}

fn check_families(f: &[u32], what: &str) -> Result<()> {
    if f.is_empty() || f.iter().any(|&g| g == 0 || g > MAX_FAMILIES) {
        return Err(Error::Config(format!("{what}: families {f:?} must be non-empty within 1..={MAX_FAMILIES}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        check_families(&self.corpus.families, "corpus")?;
        check_families(&self.stage1.families, "prototype set")?;
        check_families(&self.eval.families, "eval")?;
        if self.corpus.n_per_class == 0 || self.eval.n_per_class == 0 {
            return Err(Error::Config("corpora need at least one image per class".into()));
        }
        let n = self.prototypes.n;
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!("prototype count {n} must be even and positive")));
        }
        if n / 2 > self.stage1.train.hidden {
            return Err(Error::Config(format!(
                "{} components per class exceed the feature dim {}",
                n / 2,
                self.stage1.train.hidden
            )));
        }
        let per_class = self.stage1.m_per_family * self.stage1.families.len();
        if per_class <= n / 2 {
            return Err(Error::Config(format!(
                "prototype set has {per_class} images per class, need more than {}",
                n / 2
            )));
        }
        if self.stage2.model.tap != self.stage1.tap {
            return Err(Error::Config("stage-2 tap must match the stage-1 tap".into()));
        }
        Ok(())
    }

    /// Seed for an independent role (data split, init, ...).
    pub fn derive(&self, role: u64) -> u64 {
        rng::stream(self.seed, role).random()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub mod role {
    pub const TRAIN_CORPUS: u64 = 1;
    pub const PROTOTYPE_SET: u64 = 2;
    pub const EVAL_CORPUS: u64 = 3;
    pub const PRETRAIN_IMAGES: u64 = 4;
    pub const ENCODER_INIT: u64 = 5;
    pub const STAGE1: u64 = 6;
    pub const STAGE2: u64 = 7;
    pub const RANDOM_PROTOTYPES: u64 = 8;
}

pub fn corpus(families: &[u32], n_per_class: usize, size: usize, seed: u64) -> Result<Vec<SynthImage>> {
    make_corpus_with(&CorpusSpec {
        families: families.to_vec(),
        n_per_class,
        seed,
        size,
    })
}

pub fn train_corpus(cfg: &RunConfig) -> Result<Vec<SynthImage>> {
    let c = &cfg.corpus;
    corpus(&c.families, c.n_per_class, c.image_size, cfg.derive(role::TRAIN_CORPUS))
}

pub fn eval_corpus(cfg: &RunConfig) -> Result<Vec<SynthImage>> {
    corpus(
        &cfg.eval.families,
        cfg.eval.n_per_class,
        cfg.corpus.image_size,
        cfg.derive(role::EVAL_CORPUS),
    )
}

pub fn prototype_images(cfg: &RunConfig) -> Result<Vec<SynthImage>> {
    let s = &cfg.stage1;
    crate::synth::prototype_set(
        s.m_per_family,
        &s.families,
        cfg.derive(role::PROTOTYPE_SET),
        cfg.corpus.image_size,
    )
}

/// The frozen base encoder: pretrained on real images or left random.
pub fn frozen_encoder(cfg: &RunConfig) -> Result<(ToyEncoder<f32>, Option<PretrainReport>)> {
    let mut enc = ToyEncoder::new(cfg.encoder.clone(), cfg.derive(role::ENCODER_INIT))?;
    let report = match cfg.prior.kind {
        EncoderPrior::Random => None,
        EncoderPrior::Pretrained => {
            let reals: Vec<Image> = corpus(&[1], cfg.prior.images, cfg.corpus.image_size, cfg.derive(role::PRETRAIN_IMAGES))?
                .into_iter()
                .filter(|s| s.label == 0)
                .map(|s| fit_to_encoder(&s.image, cfg.encoder.image_size))
                .collect();
            let refs: Vec<&Image> = reals.iter().collect();
            let train = PretrainConfig {
                seed: cfg.derive(role::PRETRAIN_IMAGES) ^ 1,
                ..cfg.prior.train.clone()
            };
            Some(pretrain_patch_shuffle(&mut enc, &refs, &train)?)
        }
    };
    enc.freeze();
    Ok((enc, report))
}

pub fn run_stage1(cfg: &RunConfig, enc: &ToyEncoder<f32>) -> Result<Stage1Result> {
    let images = prototype_images(cfg)?;
    let train = Stage1Config {
        seed: cfg.derive(role::STAGE1),
        ..cfg.stage1.train.clone()
    };
    train_stage1(enc, &images, &train)
}

/// Forgery embeddings of the prototype set and the prototypes built from them.
pub fn extract_prototypes(
    cfg: &RunConfig,
    enc: &ToyEncoder<f32>,
    head: &MlpHead<f32>,
) -> Result<(PrototypeMatrix, EmbeddingSet)> {
    let images = prototype_images(cfg)?;
    let set = extract_forgery_embeddings(head, enc, &images, cfg.stage1.tap)?;
    let protos = if cfg.prototypes.random {
        PrototypeMatrix::random(cfg.prototypes.n, head.hidden_dim(), cfg.derive(role::RANDOM_PROTOTYPES))?
    } else {
        prototypes_from_set(&set, cfg.prototypes.n)?
    };
    Ok((protos, set))
}

pub fn build_gapl(
    cfg: &RunConfig,
    enc: &ToyEncoder<f32>,
    head: &MlpHead<f32>,
    protos: Option<PrototypeMatrix>,
) -> Result<GaplModel<f32>> {
    let protos = if cfg.stage2.model.prototype_mapping { protos } else { None };
    GaplModel::new(enc.clone(), head, protos, cfg.stage2.model.clone(), cfg.derive(role::STAGE2))
}

pub fn run_stage2(cfg: &RunConfig, model: &mut GaplModel<f32>, corpus: &[SynthImage]) -> Result<Stage2History> {
    let train = Stage2Config {
        seed: cfg.derive(role::STAGE2),
        ..cfg.stage2.train.clone()
    };
    train_stage2(model, corpus, &train)
}

/// Everything from a fresh encoder to a trained GAPL model.
pub struct PipelineRun {
    pub encoder: ToyEncoder<f32>,
    pub stage1: Stage1Result,
    pub prototypes: Option<PrototypeMatrix>,
    pub model: GaplModel<f32>,
    pub history: Stage2History,
}

pub fn run_pipeline_with(cfg: &RunConfig, encoder: ToyEncoder<f32>) -> Result<PipelineRun> {
    run_pipeline_on(cfg, encoder, &train_corpus(cfg)?)
}

/// As [`run_pipeline_with`], with an explicit stage-2 training corpus.
pub fn run_pipeline_on(cfg: &RunConfig, encoder: ToyEncoder<f32>, train: &[SynthImage]) -> Result<PipelineRun> {
    cfg.validate()?;
    let stage1 = run_stage1(cfg, &encoder)?;
    let prototypes = if cfg.stage2.model.prototype_mapping {
        Some(extract_prototypes(cfg, &encoder, &stage1.head)?.0)
    } else {
        None
    };
    let mut model = build_gapl(cfg, &encoder, &stage1.head, prototypes.clone())?;
    let history = run_stage2(cfg, &mut model, train)?;
    Ok(PipelineRun {
        encoder,
        stage1,
        prototypes,
        model,
        history,
    })
}
