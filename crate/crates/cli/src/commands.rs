use std::path::{Path, PathBuf};

use gapl::encoder::ToyEncoder;
use gapl::eval::{attention_report, evaluate, robustness_suite, variance_bound_batches};
use gapl::experiments::{ablate, analyze_hetero, groups_for_grid, AblationRow};
use gapl::imaging::Image;
use gapl::io::{images_to_set, read_embx, read_gapw, set_to_images, write_embx, write_gapw, Checkpoint};
use gapl::pipeline::{
    build_gapl, eval_corpus, extract_prototypes, frozen_encoder, run_stage1, run_stage2, train_corpus, RunConfig,
};
use gapl::stage1::{MlpHead, PrototypeMatrix};
use gapl::stage2::{predict, GaplModel};
use gapl::synth::SynthImage;
use gapl::verify::run_suite;
use gapl::{Error, Result};
use serde::Serialize;

use crate::config::{write_csv, write_json, CliConfig, DerivedSeeds, RunInfo, SCHEMA};
use crate::{Cli, Command, EvalCorpus, Outcome};

pub const ENCODER_FILE: &str = "encoder.gapw";
pub const STAGE1_FILE: &str = "stage1.gapw";
pub const PROTOTYPES_FILE: &str = "prototypes.gapw";
pub const MODEL_FILE: &str = "model.gapw";
pub const CORPUS_FILE: &str = "corpus.embx";

fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    let run = &mut cfg.run;
    match &cli.command {
        Command::SynthData {
            families,
            n_per_class,
            image_size,
        } => {
            set(&mut run.corpus.families, families.clone());
            set(&mut run.corpus.n_per_class, *n_per_class);
            set(&mut run.corpus.image_size, *image_size);
        }
        Command::AnalyzeHetero { k } => set(&mut cfg.hetero.ks, k.clone()),
        Command::TrainStage1 { m_per_family, epochs } => {
            set(&mut run.stage1.m_per_family, *m_per_family);
            set(&mut run.stage1.train.epochs, *epochs);
        }
        Command::ExtractPrototypes { n_prototypes, .. } => set(&mut run.prototypes.n, *n_prototypes),
        Command::TrainStage2 {
            epochs,
            lr,
            batch,
            no_pm,
            no_lora,
            ..
        } => {
            let t = &mut run.stage2.train;
            set(&mut t.max_epochs, *epochs);
            set(&mut t.optim.lr, *lr);
            set(&mut t.batch, *batch);
            if *no_pm {
                run.stage2.model.prototype_mapping = false;
            }
            if *no_lora {
                run.stage2.model.lora = None;
            }
        }
        Command::Eval { corpus, .. } | Command::Robustness { corpus, .. } => eval_flags(run, corpus),
        Command::AttnReport { corpus, top_j, .. } => {
            eval_flags(run, corpus);
            set(&mut run.eval.top_j, *top_j);
        }
        Command::Ablate { seeds, .. } => set(&mut cfg.ablation.seeds, seeds.clone()),
        Command::Predict { .. } | Command::Verify => {}
    }
    cfg.run.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn eval_flags(run: &mut RunConfig, c: &EvalCorpus) {
    set(&mut run.eval.families, c.families.clone());
    set(&mut run.eval.n_per_class, c.n_per_class);
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write(&out.join("config.json"))?;
    let name = cli.command.name();
    write_json(
        &out.join("run.json"),
        &RunInfo {
            schema: SCHEMA,
            version: env!("CARGO_PKG_VERSION"),
            subcommand: name,
            seed: cfg.run.seed,
            derived_seeds: DerivedSeeds::of(&cfg.run),
        },
    )?;
    let rc = &cfg.run;
    match &cli.command {
        Command::SynthData { .. } => {
            let train = train_corpus(rc)?;
            write_embx(&images_to_set(&train)?, out.join(CORPUS_FILE))?;
            let eval = eval_corpus(rc)?;
            write_embx(&images_to_set(&eval)?, out.join("eval.embx"))?;
            println!("{name}: {} training and {} evaluation images", train.len(), eval.len());
        }
        Command::AnalyzeHetero { .. } => {
            let (enc, _) = frozen_encoder(rc)?;
            let rows = analyze_hetero(rc, &cfg.hetero, &enc)?;
            write_csv(&out.join("hetero.csv"), &rows)?;
            for r in &rows {
                println!(
                    "k={} trace_real={:.2} trace_gen={:.2} fisher_frozen={:.5} fisher_e2e={:.5} acc_frozen={:.4} acc_e2e={:.4}",
                    r.k, r.trace_real, r.trace_gen, r.fisher_frozen, r.fisher_e2e, r.acc_frozen, r.acc_e2e
                );
            }
        }
        Command::TrainStage1 { .. } => {
            let (enc, pre) = frozen_encoder(rc)?;
            let s1 = run_stage1(rc, &enc)?;
            save(&out.join(ENCODER_FILE), |c| enc.save_into(c))?;
            save(&out.join(STAGE1_FILE), |c| {
                s1.head.save_into(c);
                Ok(())
            })?;
            write_json(
                &out.join("stage1.json"),
                &Stage1Summary {
                    schema: SCHEMA,
                    pretrain_loss: pre.as_ref().map(|p| p.final_loss),
                    pretrain_accuracy: pre.as_ref().map(|p| p.accuracy),
                    train_acc: s1.train_acc,
                    val_acc: s1.val_acc,
                    history: &s1.history,
                },
            )?;
            println!("{name}: train acc {:.4}, val acc {:.4}", s1.train_acc, s1.val_acc);
        }
        Command::ExtractPrototypes { from, .. } => {
            let up = Upstream::new(rc, from.from.as_deref());
            let enc = up.encoder()?;
            let head = up.head(&enc)?;
            let (protos, set) = extract_prototypes(rc, &enc, &head)?;
            write_embx(&set, out.join("forgery.embx"))?;
            save(&out.join(PROTOTYPES_FILE), |c| protos.save_into(c))?;
            println!("{name}: {} prototypes of dim {} from {} embeddings", protos.len(), protos.dim(), set.len());
        }
        Command::TrainStage2 { from, .. } => {
            let up = Upstream::new(rc, from.from.as_deref());
            let (model, history) = up.train_model()?;
            save(&out.join(MODEL_FILE), |c| model.save_into(c))?;
            write_json(&out.join("history.json"), &history)?;
            println!(
                "{name}: {} epochs, best val acc {:.4}, stop {:?}",
                history.epochs.len(),
                history.best_val_acc,
                history.stop
            );
        }
        Command::Predict { from, input } => {
            let model = Upstream::new(rc, from.from.as_deref()).model()?;
            let images = set_to_images(&read_embx(input)?)?;
            let refs: Vec<&Image> = images.iter().map(|s| &s.image).collect();
            let scores = predict(&model, &refs)?;
            let rows: Vec<ScoreRow> = images
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(i, (s, &score))| ScoreRow {
                    index: i,
                    label: s.label,
                    generator_id: s.generator_id,
                    score,
                })
                .collect();
            write_csv(&out.join("scores.csv"), &rows)?;
            println!("{name}: scored {} images", rows.len());
        }
        Command::Eval { from, .. } => {
            let model = Upstream::new(rc, from.from.as_deref()).model()?;
            let corpus = eval_corpus(rc)?;
            let report = evaluate(&model, &corpus, &rc.eval.grid(), Some(rc.eval.top_j))?;
            report.write_json(out.join("eval.json"))?;
            let bounds = variance_bound_batches(&model, &corpus, rc.stage2.train.batch)?;
            write_json(&out.join("variance_bound.json"), &bounds)?;
            for s in &report.subsets {
                println!("{name}: {} acc {:.4} ap {:.4}", s.name, s.accuracy, s.average_precision);
            }
            println!("{name}: macro acc {:.4} ap {:.4}", report.macro_accuracy, report.macro_ap);
        }
        Command::Robustness { from, .. } => {
            let model = Upstream::new(rc, from.from.as_deref()).model()?;
            let rows = robustness_suite(&model, &eval_corpus(rc)?, &rc.eval.grid())?;
            write_csv(&out.join("robustness.csv"), &rows)?;
            for r in &rows {
                println!("{name}: {:?} {} acc {:.4}", r.transform, r.severity, r.accuracy);
            }
        }
        Command::AttnReport { from, .. } => {
            let model = Upstream::new(rc, from.from.as_deref()).model()?;
            if !model.config().prototype_mapping {
                return Err(Error::Config("attention report needs prototype mapping".into()));
            }
            let report = attention_report(&model, &eval_corpus(rc)?, rc.eval.top_j)?;
            write_json(&out.join("attention.json"), &report)?;
            println!("{name}: {} prototypes", report.mean_real.len());
        }
        Command::Ablate { grid, .. } => {
            let (enc, _) = frozen_encoder(rc)?;
            let rows = ablate(rc, &enc, &groups_for_grid(grid), &cfg.ablation)?;
            write_json(&out.join("ablation.json"), &AblationReport { schema: SCHEMA, rows: &rows })?;
            let flat: Vec<AblationCsvRow> = rows.iter().map(AblationCsvRow::from).collect();
            write_csv(&out.join("ablation.csv"), &flat)?;
            for r in &rows {
                println!(
                    "{name}: group {:>4} pca={} pm={} lora={} unseen acc {:.4} ap {:.4} seen acc {:.4}",
                    r.group.name(),
                    r.pca as u8,
                    r.pm as u8,
                    r.lora as u8,
                    r.unseen_acc,
                    r.unseen_ap,
                    r.seen_acc
                );
            }
        }
        Command::Verify => {
            let report = run_suite(rc.seed)?;
            write_json(&out.join("verify.json"), &report)?;
            print!("{}", report.table());
            if !report.passed() {
                return Ok(Outcome::ChecksFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn save(path: &Path, fill: impl FnOnce(&mut Checkpoint) -> Result<()>) -> Result<()> {
    let mut c = Checkpoint::new();
    fill(&mut c)?;
    write_gapw(&c, path)
}

/// Upstream artifacts: read from a run directory when given, otherwise
/// recomputed from the config.
struct Upstream<'a> {
    cfg: &'a RunConfig,
    dir: Option<PathBuf>,
}

impl<'a> Upstream<'a> {
    fn new(cfg: &'a RunConfig, dir: Option<&Path>) -> Self {
        Self {
            cfg,
            dir: dir.map(Path::to_path_buf),
        }
    }

    fn read(&self, file: &str) -> Option<Result<Checkpoint>> {
        self.dir.as_ref().map(|d| read_gapw(d.join(file)))
    }

    fn encoder(&self) -> Result<ToyEncoder<f32>> {
        match self.read(ENCODER_FILE) {
            Some(c) => {
                let mut enc = ToyEncoder::load_from(&c?)?;
                enc.freeze();
                Ok(enc)
            }
            None => Ok(frozen_encoder(self.cfg)?.0),
        }
    }

    fn head(&self, enc: &ToyEncoder<f32>) -> Result<MlpHead<f32>> {
        match self.read(STAGE1_FILE) {
            Some(c) => MlpHead::load_from(&c?),
            None => Ok(run_stage1(self.cfg, enc)?.head),
        }
    }

    fn prototypes(&self, enc: &ToyEncoder<f32>, head: &MlpHead<f32>) -> Result<Option<PrototypeMatrix>> {
        if !self.cfg.stage2.model.prototype_mapping {
            return Ok(None);
        }
        match self.read(PROTOTYPES_FILE) {
            Some(c) => PrototypeMatrix::load_from(&c?).map(Some),
            None => Ok(Some(extract_prototypes(self.cfg, enc, head)?.0)),
        }
    }

    /// Training corpus: the run directory's if it has one.
    fn corpus(&self) -> Result<Vec<SynthImage>> {
        match &self.dir {
            Some(d) if d.join(CORPUS_FILE).exists() => set_to_images(&read_embx(d.join(CORPUS_FILE))?),
            _ => train_corpus(self.cfg),
        }
    }

    fn train_model(&self) -> Result<(GaplModel<f32>, gapl::stage2::Stage2History)> {
        let enc = self.encoder()?;
        let head = self.head(&enc)?;
        let protos = self.prototypes(&enc, &head)?;
        let mut model = build_gapl(self.cfg, &enc, &head, protos)?;
        let history = run_stage2(self.cfg, &mut model, &self.corpus()?)?;
        Ok((model, history))
    }

    fn model(&self) -> Result<GaplModel<f32>> {
        match self.read(MODEL_FILE) {
            Some(c) => GaplModel::load_from(&c?),
            None => Ok(self.train_model()?.0),
        }
    }
}

#[derive(Serialize)]
struct Stage1Summary<'a> {
    schema: u32,
    pretrain_loss: Option<f64>,
    pretrain_accuracy: Option<f64>,
    train_acc: f64,
    val_acc: f64,
    history: &'a [gapl::stage1::EpochStats],
}

#[derive(Serialize)]
struct ScoreRow {
    index: usize,
    label: u8,
    generator_id: u32,
    score: f64,
}

#[derive(Serialize)]
struct AblationReport<'a> {
    schema: u32,
    rows: &'a [AblationRow],
}

#[derive(Serialize)]
struct AblationCsvRow {
    group: &'static str,
    pca: bool,
    pm: bool,
    lora: bool,
    unseen_acc: f64,
    unseen_ap: f64,
    seen_acc: f64,
    seen_ap: f64,
}

impl From<&AblationRow> for AblationCsvRow {
    fn from(r: &AblationRow) -> Self {
        Self {
            group: r.group.name(),
            pca: r.pca,
            pm: r.pm,
            lora: r.lora,
            unseen_acc: r.unseen_acc,
            unseen_ap: r.unseen_ap,
            seen_acc: r.seen_acc,
            seen_ap: r.seen_ap,
        }
    }
}
