use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imaging::{box_blur, gaussian_blur, jpeg_like_compress, nearest_resample, Image};
use crate::rng::{self, Rng as StreamRng};

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const MAX_FAMILIES: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: Image,
    /// 0 real, 1 generated.
    pub label: u8,
    /// 0 for real images, otherwise the artifact family.
    pub generator_id: u32,
}

pub fn family_name(family: u32) -> &'static str {
    match family {
        0 => "real",
        1 => "nn-upsample-2x",
        2 => "hf-noise",
        3 => "box-blur-3",
        4 => "block-dct-q10",
        5 => "nn-upsample-4x",
        6 => "hf-noise-strong",
        7 => "box-blur-5",
        8 => "block-dct-q5",
        _ => "unknown",
    }
}

const REAL_GRAIN: f32 = 0.08;
const SHAPE_OPACITY: f32 = 0.8;
/// Chroma offset of each generator family's base images.
const FAMILY_BIAS: f64 = 0.3;
const FAMILY_ANGLES_DEG: [f64; 8] = [0.0, 120.0, 240.0, 60.0, 180.0, 300.0, 30.0, 210.0];

/// Low-pass noise texture over a random mid-range base colour, one to three
/// rectangles or ellipses composited on top, then uniform fine grain. Content
/// stays away from the clamp so the grain survives everywhere; it is what the
/// smoothing and resampling families remove.
pub fn real_base_image(rng: &mut StreamRng, size: usize) -> Image {
    let n = size * size;
    let mut normal = |len: usize| -> Vec<f32> {
        (0..len).map(|_| StandardNormal.sample(&mut *rng)).map(|z: f64| z as f32).collect()
    };
    let noise = Image::new(3, size, size, normal(3 * n)).expect("noise image");
    let mut img = gaussian_blur(&noise, 2.0).expect("positive sigma");
    // Unit-variance texture per channel so contrast is set by `gain` alone.
    for c in 0..3 {
        let ch = &mut img.data[c * n..(c + 1) * n];
        let sd = (ch.iter().map(|v| v * v).sum::<f32>() / n as f32).sqrt().max(1e-6);
        ch.iter_mut().for_each(|v| *v /= sd);
    }
    let grain = normal(3 * n);
    for c in 0..3 {
        let base: f32 = rng.random_range(0.35..0.65);
        let gain: f32 = rng.random_range(0.03..0.08);
        for v in &mut img.data[c * n..(c + 1) * n] {
            *v = base + gain * *v;
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let colour: [f32; 3] = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let ellipse = rng.random_bool(0.5);
        let (cy, cx) = (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32));
        let (ry, rx) = (
            rng.random_range(2.0..size as f32 / 3.0),
            rng.random_range(2.0..size as f32 / 3.0),
        );
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f32 + 0.5 - cy) / ry, (x as f32 + 0.5 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, &col) in colour.iter().enumerate() {
                        let v = img.at_mut(c, y, x);
                        *v = SHAPE_OPACITY * col + (1.0 - SHAPE_OPACITY) * *v;
                    }
                }
            }
        }
    }
    for (v, z) in img.data.iter_mut().zip(&grain) {
        *v += REAL_GRAIN * z;
    }
    img.clamp01();
    img
}

fn high_frequency_noise(img: &Image, amplitude: f64, sigma: f64, rng: &mut StreamRng) -> Image {
    let noise = Image::new(
        img.channels,
        img.height,
        img.width,
        (0..img.data.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                (z * amplitude) as f32
            })
            .collect(),
    )
    .expect("noise image");
    let low = gaussian_blur(&noise, sigma).expect("positive sigma");
    let mut out = img.clone();
    for ((o, n), l) in out.data.iter_mut().zip(&noise.data).zip(&low.data) {
        *o += n - l;
    }
    out.clamp01();
    out
}

/// Shifts the colour of a generated base image along the family's own
/// direction in the chroma plane (orthogonal to grey): a per-generator mean
/// offset. The first three families sit 120° apart and each later one
/// bisects a gap, so larger family sets surround the real colours ever more
/// evenly.
pub fn apply_family_bias(img: &mut Image, family: u32) {
    let theta = FAMILY_ANGLES_DEG[(family as usize - 1) % FAMILY_ANGLES_DEG.len()].to_radians();
    let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    let n = img.height * img.width;
    for c in 0..img.channels.min(3) {
        let shift = (FAMILY_BIAS * (theta.cos() * u[c] + theta.sin() * v[c])) as f32;
        for p in &mut img.data[c * n..(c + 1) * n] {
            *p += shift;
        }
    }
    img.clamp01();
}

/// Applies the artifact of generator family `family` (1–8).
pub fn imprint_artifact(img: &Image, family: u32, rng: &mut StreamRng) -> Result<Image> {
    Ok(match family {
        1 => nearest_resample(img, 2),
        2 => high_frequency_noise(img, 0.25, 1.0, rng),
        3 => box_blur(img, 3),
        4 => jpeg_like_compress(img, 10)?,
        5 => nearest_resample(img, 4),
        6 => high_frequency_noise(img, 0.4, 0.6, rng),
        7 => box_blur(img, 5),
        8 => jpeg_like_compress(img, 5)?,
        f => return Err(Error::Config(format!("generator family {f} outside 1..={MAX_FAMILIES}"))),
    })
}

/// Which families make up the generated half of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub families: Vec<u32>,
    pub n_per_class: usize,
    pub seed: u64,
    pub size: usize,
}

/// Per-image streams: image `i` of either class draws from its own stream,
/// so the real half and the fake base images do not depend on `k` or `n`.
fn image_stream(seed: u64, index: usize, role: u64) -> StreamRng {
    rng::stream(seed, (index as u64) << 2 | role)
}

/// `n` real images then `n` generated ones, fakes assigned round-robin over
/// `spec.families`.
pub fn make_corpus_with(spec: &CorpusSpec) -> Result<Vec<SynthImage>> {
    if spec.families.is_empty() {
        return Err(Error::Config("corpus needs at least one generator family".into()));
    }
    if let Some(&f) = spec.families.iter().find(|&&f| f == 0 || f > MAX_FAMILIES) {
        return Err(Error::Config(format!("generator family {f} outside 1..={MAX_FAMILIES}")));
    }
    if spec.size < 8 {
        return Err(Error::Config(format!("image size {} too small", spec.size)));
    }
    let mut out = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..spec.n_per_class {
        let mut r = image_stream(spec.seed, i, 0);
        out.push(SynthImage {
            image: real_base_image(&mut r, spec.size),
            label: 0,
            generator_id: 0,
        });
    }
    for i in 0..spec.n_per_class {
        let family = spec.families[i % spec.families.len()];
        let mut base = real_base_image(&mut image_stream(spec.seed, i, 1), spec.size);
        apply_family_bias(&mut base, family);
        let image = imprint_artifact(&base, family, &mut image_stream(spec.seed, i, 2))?;
        out.push(SynthImage {
            image,
            label: 1,
            generator_id: family,
        });
    }
    Ok(out)
}

/// Corpus whose fakes come from families `1..=k`.
pub fn make_corpus(k: u32, n_per_class: usize, seed: u64) -> Result<Vec<SynthImage>> {
    if !(1..=MAX_FAMILIES).contains(&k) {
        return Err(Error::Config(format!("k = {k} outside 1..={MAX_FAMILIES}")));
    }
    make_corpus_with(&CorpusSpec {
        families: (1..=k).collect(),
        n_per_class,
        seed,
        size: DEFAULT_IMAGE_SIZE,
    })
}

/// `m` images from each listed family plus as many real images.
pub fn prototype_set(m: usize, families: &[u32], seed: u64, size: usize) -> Result<Vec<SynthImage>> {
    make_corpus_with(&CorpusSpec {
        families: families.to_vec(),
        n_per_class: m * families.len(),
        seed,
        size,
    })
}
