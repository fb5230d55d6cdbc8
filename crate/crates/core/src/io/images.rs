//! Image corpora stored as EMBX sets: one record per image, the pixel planes
//! flattened into the vector and the shape carried in the tag.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::synth::SynthImage;

use super::EmbeddingSet;

fn shape_tag(img: &Image) -> String {
    format!("img:{}x{}x{}", img.channels, img.height, img.width)
}

fn parse_tag(tag: &str) -> Option<(usize, usize, usize)> {
    let dims: Vec<usize> = tag.strip_prefix("img:")?.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
    match dims[..] {
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

pub fn images_to_set(images: &[SynthImage]) -> Result<EmbeddingSet> {
    let dim = images.first().map_or(0, |s| s.image.data.len());
    let mut set = EmbeddingSet::new(dim);
    for s in images {
        set.push(s.image.data.clone(), s.label, s.generator_id, shape_tag(&s.image))?;
    }
    Ok(set)
}

pub fn set_to_images(set: &EmbeddingSet) -> Result<Vec<SynthImage>> {
    set.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (c, h, w) = parse_tag(&r.tag)
                .ok_or_else(|| Error::Data(format!("record {i}: tag '{}' is not an image shape", r.tag)))?;
            Ok(SynthImage {
                image: Image::new(c, h, w, r.vector.clone())?,
                label: r.label,
                generator_id: r.generator_id,
            })
        })
        .collect()
}
