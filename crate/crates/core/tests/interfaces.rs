//! File formats exchanged with other tools: EMBX embedding sets, CSV, image
//! corpora and GAPW checkpoints.

use gapl::encoder::{EncoderConfig, LoraConfig};
use gapl::imaging::Image;
use gapl::io::{
    decode_embx, encode_embx, export_csv, images_to_set, import_csv, read_embx, read_gapw, set_to_images,
    write_embx, write_gapw, Checkpoint, EmbeddingSet,
};
use gapl::pipeline::corpus;
use gapl::stage1::{MlpHead, PrototypeMatrix};
use gapl::stage2::{predict, GaplConfig, GaplModel};
use gapl::encoder::ToyEncoder;
use gapl::Error;
use proptest::prelude::*;

fn sample_set() -> EmbeddingSet {
    let mut s = EmbeddingSet::new(2);
    s.push(vec![1.0, -2.5], 0, 0, "a").unwrap();
    s.push(vec![0.0, 0.5], 1, 7, "xy").unwrap();
    s
}

/// Byte layout written out by hand.
fn sample_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"EMBX");
    b.extend_from_slice(&[1, 0, 0, 0]);
    b.extend_from_slice(&[2, 0, 0, 0, 2, 0, 0, 0]);
    b.extend_from_slice(&[0, 0, 0, 0, 0, 1, 0, b'a']);
    b.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
    b.extend_from_slice(&[1, 7, 0, 0, 0, 2, 0, b'x', b'y']);
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3f]);
    b
}

#[test]
fn embx_golden_layout() {
    assert_eq!(encode_embx(&sample_set()).unwrap(), sample_bytes());
    assert_eq!(decode_embx(&sample_bytes()).unwrap(), sample_set());
}

#[test]
fn embx_every_truncation_is_a_format_error() {
    let b = sample_bytes();
    for n in 0..b.len() {
        assert!(matches!(decode_embx(&b[..n]), Err(Error::Format { .. })), "prefix {n}");
    }
    let mut extra = b.clone();
    extra.push(0);
    assert!(matches!(decode_embx(&extra), Err(Error::Format { .. })));
}

#[test]
fn embx_rejects_bad_label_magic_and_version() {
    let mut b = sample_bytes();
    b[16] = 2;
    assert!(matches!(decode_embx(&b), Err(Error::Format { offset: 16, .. })));
    let mut b = sample_bytes();
    b[0] = b'X';
    assert!(matches!(decode_embx(&b), Err(Error::Format { offset: 0, .. })));
    let mut b = sample_bytes();
    b[4] = 9;
    assert!(matches!(decode_embx(&b), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn embx_encoding_is_byte_stable_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let set = images_to_set(&corpus(&[1, 4], 3, 8, 11).unwrap()).unwrap();
    write_embx(&set, dir.path().join("a.embx")).unwrap();
    write_embx(&read_embx(dir.path().join("a.embx")).unwrap(), dir.path().join("b.embx")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.embx")).unwrap(),
        std::fs::read(dir.path().join("b.embx")).unwrap()
    );
}

#[test]
fn image_corpus_roundtrips_through_embx() {
    let images = corpus(&[2, 3], 4, 8, 5).unwrap();
    let back = set_to_images(&decode_embx(&encode_embx(&images_to_set(&images).unwrap()).unwrap()).unwrap()).unwrap();
    assert_eq!(back.len(), images.len());
    for (a, b) in images.iter().zip(&back) {
        assert_eq!((a.label, a.generator_id), (b.label, b.generator_id));
        assert_eq!(a.image, b.image);
    }
}

#[test]
fn csv_roundtrip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    export_csv(&sample_set(), &p).unwrap();
    let back = import_csv(&p, 2).unwrap();
    for (a, b) in back.records.iter().zip(&sample_set().records) {
        assert_eq!((a.label, a.generator_id, &a.vector), (b.label, b.generator_id, &b.vector));
    }
    std::fs::write(&p, "label,generator_id,f0,f1\n0,1,0.5,0.25\n1,2,oops,1\n").unwrap();
    assert!(matches!(import_csv(&p, 2), Err(Error::Line { line: 3, .. })));
    assert!(matches!(import_csv(&p, 3), Err(Error::Line { line: 1, .. })));
}

fn tiny_model(seed: u64) -> GaplModel<f32> {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let enc = ToyEncoder::new(cfg, seed).unwrap();
    let head = MlpHead::new(8, 6, seed + 1).unwrap();
    let protos = PrototypeMatrix::random(4, 6, seed + 2).unwrap();
    let gcfg = GaplConfig {
        lora: Some(LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        }),
        ..GaplConfig::default()
    };
    GaplModel::new(enc, &head, Some(protos), gcfg, seed + 3).unwrap()
}

#[test]
fn gapw_model_roundtrip_preserves_predictions_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(3);
    let mut c = Checkpoint::new();
    model.save_into(&mut c).unwrap();
    write_gapw(&c, dir.path().join("m.gapw")).unwrap();
    let back = GaplModel::load_from(&read_gapw(dir.path().join("m.gapw")).unwrap()).unwrap();
    let images = corpus(&[1], 4, 8, 9).unwrap();
    let refs: Vec<&Image> = images.iter().map(|s| &s.image).collect();
    let a = predict(&model, &refs).unwrap();
    let b = predict(&back, &refs).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(back.trainable_count(), model.trainable_count());
    // prototypes are stored at f32 precision, which is what the model computes with
    let (pa, pb) = (model.prototypes().unwrap(), back.prototypes().unwrap());
    assert_eq!(pa.meta(), pb.meta());
    for (ra, rb) in pa.rows().iter().zip(pb.rows()) {
        for (a, b) in ra.iter().zip(rb) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}

#[test]
fn gapw_truncation_is_a_format_error() {
    let mut c = Checkpoint::new();
    tiny_model(1).save_into(&mut c).unwrap();
    let bytes = c.encode().unwrap();
    for n in [0, 3, 8, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::decode(&bytes[..n]), Err(Error::Format { .. })), "prefix {n}");
    }
}

fn arb_set() -> impl Strategy<Value = EmbeddingSet> {
    (0usize..6).prop_flat_map(|dim| {
        prop::collection::vec(
            (
                prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), dim),
                0u8..2,
                any::<u32>(),
                "[a-z0-9:_]{0,12}",
            ),
            0..12,
        )
        .prop_map(move |recs| {
            let mut s = EmbeddingSet::new(dim);
            for (v, l, g, t) in recs {
                s.push(v, l, g, t).unwrap();
            }
            s
        })
    })
}

proptest! {
    #[test]
    fn embx_roundtrip(set in arb_set()) {
        let bytes = encode_embx(&set).unwrap();
        prop_assert_eq!(bytes.len(), 16 + set.records.iter().map(|r| 7 + r.tag.len() + 4 * set.dim).sum::<usize>());
        prop_assert_eq!(decode_embx(&bytes).unwrap(), set);
    }

    #[test]
    fn embx_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
        let _ = decode_embx(&bytes);
    }

    #[test]
    fn gapw_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
        let _ = Checkpoint::decode(&bytes);
    }
}
