//! Small pre-norm vision transformer with a class token, learned positions
//! and optional low-rank adapters on the q/k/v projections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutKey, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::io::Checkpoint;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim == 0 || self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    fn slot(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        ["q", "k", "v"][self.slot()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            targets: vec![Projection::Q, Projection::K, Projection::V],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank > dim {
            return Err(Error::Config(format!("lora rank {} outside 1..={dim}", self.rank)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora dropout {} outside [0, 1)", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora needs at least one target projection".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout on, keyed by `(seed, step)`.
    Train { seed: u64, step: u64 },
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: [Linear; 3],
    /// Aᵀ `[D, r]` and Bᵀ `[r, D]` per projection slot.
    lora: [Option<(ParamId, ParamId)>; 3],
    out: Linear,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
}

pub struct EncoderOutput {
    /// `[batch, D]` class-token rows after the final norm.
    pub cls: Var,
    /// Attention node of every block.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ToyEncoder<T: Real = f32> {
    cfg: EncoderConfig,
    lora: Option<LoraConfig>,
    store: ParamStore<T>,
    patch: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

fn add_linear<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Linear {
    let std = 1.0 / (fan_in as f64).sqrt();
    Linear {
        w: store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), true),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true),
    }
}

fn add_norm<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Tensor::full(&[dim], T::one()), true),
        store.add(format!("{name}.b"), Tensor::zeros(&[dim]), true),
    )
}

impl<T: Real> ToyEncoder<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, 0xE4C0);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let patch = add_linear(&mut store, "enc.patch", cfg.patch_dim(), d, &mut r);
        let cls = store.add("enc.cls", Tensor::randn(&[d], 0.02, &mut r), true);
        let pos = store.add("enc.pos", Tensor::randn(&[cfg.seq_len(), d], 0.02, &mut r), true);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("enc.blk{l}");
            let ln1 = add_norm(&mut store, &format!("{p}.ln1"), d);
            let qkv = [Projection::Q, Projection::K, Projection::V]
                .map(|t| add_linear(&mut store, &format!("{p}.{}", t.name()), d, d, &mut r));
            let out = add_linear(&mut store, &format!("{p}.o"), d, d, &mut r);
            let ln2 = add_norm(&mut store, &format!("{p}.ln2"), d);
            let fc1 = add_linear(&mut store, &format!("{p}.fc1"), d, d * cfg.mlp_ratio, &mut r);
            let fc2 = add_linear(&mut store, &format!("{p}.fc2"), d * cfg.mlp_ratio, d, &mut r);
            blocks.push(Block {
                ln1,
                qkv,
                lora: [None, None, None],
                out,
                ln2,
                fc1,
                fc2,
            });
        }
        let ln_f = add_norm(&mut store, "enc.ln_f", d);
        Ok(Self {
            cfg,
            lora: None,
            store,
            patch,
            cls,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn freeze(&mut self) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    /// Makes every non-adapter weight trainable again.
    pub fn unfreeze(&mut self) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !self.is_lora_param(id) {
                self.store.set_trainable(id, true);
            }
        }
    }

    pub fn is_lora_param(&self, id: ParamId) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| b.lora.iter().flatten())
            .any(|&(a, b)| a == id || b == id)
    }

    /// Base parameters of the attention projection `t` in block `layer`.
    pub fn projection_weight(&self, layer: usize, t: Projection) -> ParamId {
        self.blocks[layer].qkv[t.slot()].w
    }

    /// `(Aᵀ, Bᵀ)` of the adapter on projection `t` in block `layer`.
    pub fn lora_params(&self, layer: usize, t: Projection) -> Option<(ParamId, ParamId)> {
        self.blocks[layer].lora[t.slot()]
    }

    /// Freezes the base weights and attaches adapters: A Gaussian (std 0.02),
    /// B zero, so the adapted encoder starts out identical to the base one.
    pub fn lora_wrap(&mut self, lcfg: LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config("encoder already carries adapters".into()));
        }
        lcfg.validate(self.cfg.dim)?;
        self.freeze();
        let mut r = rng::stream(seed, 0x10BA);
        let (d, rank) = (self.cfg.dim, lcfg.rank);
        for l in 0..self.blocks.len() {
            for &t in &lcfg.targets {
                let name = format!("enc.blk{l}.lora_{}", t.name());
                let a = self.store.add(format!("{name}.a"), Tensor::randn(&[d, rank], 0.02, &mut r), true);
                let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[rank, d]), true);
                self.blocks[l].lora[t.slot()] = Some((a, b));
            }
        }
        self.lora = Some(lcfg);
        Ok(())
    }

    /// Images → `[batch·P, C·p·p]` patch rows, channel-major inside a patch,
    /// pixels standardized by a fixed mean and scale.
    pub fn patchify(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (s, p, g) = (self.cfg.image_size, self.cfg.patch_size, self.cfg.grid());
        let pd = self.cfg.patch_dim();
        let mut data = Vec::with_capacity(images.len() * self.cfg.num_patches() * pd);
        for img in images {
            if img.channels != self.cfg.channels || img.height != s || img.width != s {
                return Err(Error::Shape(format!(
                    "encoder expects {}×{s}×{s} images, got {}×{}×{}",
                    self.cfg.channels, img.channels, img.height, img.width
                )));
            }
            for py in 0..g {
                for px in 0..g {
                    for c in 0..img.channels {
                        for dy in 0..p {
                            for dx in 0..p {
                                let v = img.at(c, py * p + dy, px * p + dx) as f64;
                                data.push(T::lit((v - PIXEL_MEAN) / PIXEL_STD));
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[images.len() * self.cfg.num_patches(), pd], data)
    }

    fn linear(tape: &mut Tape<T>, bind: &Binding, x: Var, l: &Linear) -> Result<Var> {
        let y = tape.matmul(x, bind[l.w])?;
        tape.add_row(y, bind[l.b])
    }

    /// Runs the encoder over `patches` (from [`patchify`](Self::patchify)).
    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, patches: Var, batch: usize, mode: Mode) -> Result<EncoderOutput> {
        let emb = Self::linear(tape, bind, patches, &self.patch)?;
        let mut x = tape.tokens(emb, bind[self.cls], bind[self.pos], batch)?;
        let seq = self.cfg.seq_len();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bind[blk.ln1.0], bind[blk.ln1.1])?;
            let mut qkv = [h; 3];
            for slot in 0..3 {
                let mut y = Self::linear(tape, bind, h, &blk.qkv[slot])?;
                if let (Some((a, b)), Some(lc)) = (blk.lora[slot], &self.lora) {
                    let input = match mode {
                        Mode::Train { seed, step } if lc.dropout > 0.0 => tape.dropout(
                            h,
                            lc.dropout,
                            DropoutKey {
                                seed,
                                layer: (l * 3 + slot) as u64,
                                step,
                            },
                        )?,
                        _ => h,
                    };
                    let low = tape.matmul(input, bind[a])?;
                    let up = tape.matmul(low, bind[b])?;
                    let up = tape.scale(up, lc.scale());
                    y = tape.add(y, up)?;
                }
                qkv[slot] = y;
            }
            let att = tape.attention(qkv[0], qkv[1], qkv[2], batch, seq, self.cfg.heads)?;
            attention.push(att);
            let o = Self::linear(tape, bind, att, &blk.out)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, bind[blk.ln2.0], bind[blk.ln2.1])?;
            let m = Self::linear(tape, bind, h, &blk.fc1)?;
            let m = tape.gelu(m);
            let m = Self::linear(tape, bind, m, &blk.fc2)?;
            x = tape.add(x, m)?;
        }
        let x = tape.layer_norm(x, bind[self.ln_f.0], bind[self.ln_f.1])?;
        let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = tape.select_rows(x, &rows)?;
        Ok(EncoderOutput { cls, attention })
    }

    /// Eval-mode class-token embeddings, `[n, D]`.
    pub fn encode(&self, images: &[&Image]) -> Result<Tensor<T>> {
        const CHUNK: usize = 64;
        let d = self.cfg.dim;
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bind = self.store.bind_frozen(&mut tape);
            let patches = tape.constant(self.patchify(chunk)?);
            let o = self.forward(&mut tape, &bind, patches, chunk.len(), Mode::Eval)?;
            out.extend_from_slice(tape.value(o.cls).data());
        }
        Tensor::new(&[images.len(), d], out)
    }

    pub fn cast<U: Real>(&self) -> ToyEncoder<U> {
        ToyEncoder {
            cfg: self.cfg.clone(),
            lora: self.lora.clone(),
            store: self.store.cast(),
            patch: self.patch.clone(),
            cls: self.cls,
            pos: self.pos,
            blocks: self.blocks.clone(),
            ln_f: self.ln_f,
        }
    }

    /// Trainable scalars: with adapters on every target, `depth·|targets|·2rD`.
    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    lora: Option<LoraConfig>,
}

impl ToyEncoder<f32> {
    /// Adds every parameter (by name) plus an `enc.meta` config blob.
    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        let meta = EncoderMeta {
            config: self.cfg.clone(),
            lora: self.lora.clone(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Data(e.to_string()))?;
        ckpt.insert_text("enc.meta", &json);
        for (_, p) in self.store.iter() {
            ckpt.insert(p.name.clone(), p.value.clone());
        }
        Ok(())
    }

    /// Rebuilds an encoder saved by [`save_into`](Self::save_into). Base
    /// weights come back frozen when adapters are present.
    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let meta: EncoderMeta =
            serde_json::from_str(&ckpt.text("enc.meta")?).map_err(|e| Error::Data(format!("enc.meta: {e}")))?;
        let mut enc = ToyEncoder::new(meta.config, 0)?;
        if let Some(l) = meta.lora {
            enc.lora_wrap(l, 0)?;
        }
        let ids: Vec<(ParamId, String)> = enc.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            enc.store.assign(id, ckpt.require(&name)?.clone())?;
        }
        Ok(enc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Side of the square tiles that get shuffled; must divide the image
    /// size. Tiles off the patch grid leave a cue inside each patch.
    pub tile: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch: 32,
            lr: 1e-3,
            tile: 4,
            seed: 0,
        }
    }
}

/// Permutes the `tile`×`tile` blocks of `img` by `perm` (destination ← source).
pub fn shuffle_tiles(img: &Image, tile: usize, perm: &[usize]) -> Image {
    let g = img.width / tile;
    let mut out = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx, sy, sx) = ((dst / g) * tile, (dst % g) * tile, (src / g) * tile, (src % g) * tile);
        for c in 0..img.channels {
            for y in 0..tile {
                for x in 0..tile {
                    *out.at_mut(c, dy + y, dx + x) = img.at(c, sy + y, sx + x);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    /// Shuffle-detection accuracy over the last epoch.
    pub accuracy: f64,
}

/// Self-supervised prior for the frozen mode: learn to tell intact images
/// from ones whose patches were permuted, then freeze the encoder.
pub fn pretrain_patch_shuffle(enc: &mut ToyEncoder<f32>, images: &[&Image], cfg: &PretrainConfig) -> Result<PretrainReport> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    if images.is_empty() || cfg.batch == 0 {
        return Err(Error::Data("pretraining needs images and a positive batch".into()));
    }
    let size = enc.cfg.image_size;
    if cfg.tile == 0 || size % cfg.tile != 0 || cfg.tile == size {
        return Err(Error::Config(format!("shuffle tile {} must divide image size {size}", cfg.tile)));
    }
    let d = enc.cfg.dim;
    let tiles = (size / cfg.tile).pow(2);
    let mut r = rng::stream(cfg.seed, 0x5AF1);
    let mut head: ParamStore<f32> = ParamStore::new();
    let hw = head.add("shuffle.w", Tensor::randn(&[d, 1], 0.02, &mut r), true);
    let hb = head.add("shuffle.b", Tensor::zeros(&[1]), true);
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };
    let (mut opt_enc, mut opt_head) = (AdamW::new(opt_cfg), AdamW::new(opt_cfg));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = PretrainReport {
        final_loss: f64::NAN,
        accuracy: 0.0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if r.random_bool(0.5) {
                    let mut perm: Vec<usize> = (0..tiles).collect();
                    while perm.iter().enumerate().all(|(i, &p)| i == p) {
                        perm.shuffle(&mut r);
                    }
                    batch.push(shuffle_tiles(images[i], cfg.tile, &perm));
                    labels.push(1.0);
                } else {
                    batch.push(images[i].clone());
                    labels.push(0.0);
                }
            }
            let refs: Vec<&Image> = batch.iter().collect();
            let mut tape = Tape::new();
            let eb = enc.store.bind(&mut tape);
            let hbind = head.bind(&mut tape);
            let pv = tape.constant(enc.patchify(&refs)?);
            let o = enc.forward(&mut tape, &eb, pv, refs.len(), Mode::Eval)?;
            let z = tape.matmul(o.cls, hbind[hw])?;
            let z = tape.add_row(z, hbind[hb])?;
            let loss = tape.bce_with_logits(z, &labels)?;
            for (zv, y) in tape.value(z).data().iter().zip(&labels) {
                correct += usize::from((*zv >= 0.0) == (*y == 1.0));
            }
            seen += labels.len();
            loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            let mut g = tape.backward(loss)?;
            opt_enc.step(&mut enc.store, &eb.collect(&mut g))?;
            opt_head.step(&mut head, &hbind.collect(&mut g))?;
        }
        report.final_loss = loss_sum / seen as f64;
        report.accuracy = correct as f64 / seen as f64;
    }
    enc.freeze();
    Ok(report)
}
