use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visenc::data::probe::{class_id, NUM_CLASSES};
use visenc::data::shard::{decode_record, encode_record};
use visenc::data::*;
use visenc::error::ShardError;

fn tiny_records(n: usize) -> Vec<CaptionedImage> {
    (0..n as u64)
        .map(|id| CaptionedImage {
            id,
            png: vec![id as u8; (id % 7) as usize + 1],
            caption_original: format!("caption {id}"),
            caption_synthetic: if id % 3 == 0 { String::new() } else { format!("longer caption number {id}") },
            meta: None,
        })
        .collect()
}

#[test]
fn single_record_round_trip_is_byte_identical() {
    let recs = gen_probe_dataset(1, 1, 32).unwrap();
    let bytes = encode_shard(&recs).unwrap();
    let back = decode_shard(&bytes).unwrap();
    assert_eq!(back, recs);
    assert_eq!(encode_shard(&back).unwrap(), bytes);
}

#[test]
fn empty_input_is_bad_magic_and_empty_write_is_rejected() {
    assert_eq!(decode_shard(&[]).unwrap_err(), ShardError::BadMagic);
    assert!(encode_shard(&[]).is_err());
}

#[test]
fn corruption_modes_have_distinct_errors() {
    let bytes = encode_shard(&tiny_records(5)).unwrap();
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert_eq!(decode_shard(&wrong_version).unwrap_err(), ShardError::UnsupportedVersion(9));
    assert!(matches!(decode_shard(&bytes[..bytes.len() - 2]).unwrap_err(), ShardError::Truncated(_)));
    assert!(matches!(decode_shard(&bytes[..10]).unwrap_err(), ShardError::Truncated("header")));
    let mut flipped = bytes.clone();
    flipped[20] ^= 0x10;
    assert!(matches!(decode_shard(&flipped).unwrap_err(), ShardError::ChecksumMismatch { .. }));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_shard(&extra).unwrap_err(), ShardError::CountMismatch { .. }));
}

#[test]
fn thousand_records_keep_write_order() {
    let recs = tiny_records(1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ovsh");
    write_shard(&path, &recs).unwrap();
    let ids: Vec<u64> = open_shard(&path).unwrap().map(|r| r.unwrap().id).collect();
    assert_eq!(ids, (0..1000).collect::<Vec<_>>());
    assert_eq!(read_shard(&path).unwrap(), recs);
}

#[test]
fn single_bit_flips_are_detected() {
    let bytes = encode_shard(&tiny_records(20)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let mut c = bytes.clone();
        let i = rng.gen_range(0..c.len());
        c[i] ^= 1 << rng.gen_range(0..8);
        assert!(decode_shard(&c).is_err(), "flip at byte {i} went unnoticed");
    }
}

#[test]
fn generator_is_deterministic_byte_for_byte() {
    let a = encode_shard(&gen_probe_dataset(7, 40, 32).unwrap()).unwrap();
    let b = encode_shard(&gen_probe_dataset(7, 40, 32).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = encode_shard(&gen_probe_dataset(8, 40, 32).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn synthetic_captions_are_longer() {
    let recs = gen_probe_dataset(5, 500, 24).unwrap();
    let longer = recs.iter().filter(|r| r.caption_synthetic.len() > r.caption_original.len()).count();
    assert!(longer as f64 >= 0.95 * recs.len() as f64);
    assert!(recs.iter().all(|r| !r.caption_original.is_empty() && !r.caption_synthetic.is_empty()));
}

#[test]
fn mixed_layouts_are_unique_and_sized_one_to_three() {
    let recs = gen_probe_dataset(2, 256, 24).unwrap();
    let mut seen = HashSet::new();
    for r in &recs {
        let meta = r.meta.as_ref().unwrap();
        assert!((1..=3).contains(&meta.layout.len()));
        assert!(seen.insert(r.caption_synthetic.clone()));
        assert_eq!(r.caption_synthetic, probe::synthetic_caption(&meta.layout));
    }
}

#[test]
fn stratified_covers_every_class_once() {
    let recs = gen_probe_dataset_with(4, NUM_CLASSES, 24, ProbeMode::Stratified).unwrap();
    let labels: HashSet<u8> = recs.iter().map(|r| r.meta.as_ref().unwrap().label.unwrap()).collect();
    assert_eq!(labels.len(), NUM_CLASSES);
    for c in Color::ALL {
        for s in ShapeKind::ALL {
            assert!(labels.contains(&class_id(c, s)));
        }
    }
}

#[test]
fn down_up_resize_error_is_bounded() {
    let ds = Dataset::from_records(&gen_probe_dataset(9, 8, 64).unwrap()).unwrap();
    for s in &ds.samples {
        let back = resize(&resize(&s.image, 32).unwrap(), 64).unwrap();
        let mae: f32 = s.image.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / back.data.len() as f32;
        assert!(mae < 0.1, "mean abs error {mae}");
        assert!(back.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn dataset_caches_resized_images() {
    let mut ds = Dataset::from_records(&gen_probe_dataset(1, 3, 48).unwrap()).unwrap();
    assert_eq!(ds.images_at(16).unwrap()[0].height, 16);
    let orig = ds.samples[2].image.data.clone();
    assert_eq!(ds.images_at(48).unwrap()[2].data, orig);
}

#[test]
fn probe_questions_match_meta() {
    let recs = gen_probe_dataset_with(3, 18, 24, ProbeMode::Stratified).unwrap();
    for r in &recs {
        let meta = r.meta.as_ref().unwrap();
        let qs = probe_questions(meta);
        assert_eq!(qs[0].answer, meta.layout[0].color.name());
        assert_eq!(qs[1].answer, meta.layout[0].shape.name());
    }
}

#[test]
fn importer_reads_triples_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::filled(10, 12, [0.2, 0.4, 0.6]);
    for (stem, synth) in [("b", None), ("a", Some("a long caption"))] {
        std::fs::write(dir.path().join(format!("{stem}.png")), img.to_png().unwrap()).unwrap();
        std::fs::write(dir.path().join(format!("{stem}.txt")), format!("photo {stem}\n")).unwrap();
        if let Some(s) = synth {
            std::fs::write(dir.path().join(format!("{stem}.synthetic.txt")), s).unwrap();
        }
    }
    let recs = import_dir(dir.path()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].caption_original, "photo a");
    assert_eq!(recs[0].caption_synthetic, "a long caption");
    assert_eq!(recs[1].caption_synthetic, "");
    assert_eq!(Image::from_png(&recs[1].png).unwrap().width, 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn record_codec_round_trips(
        id in any::<u64>(),
        png in proptest::collection::vec(any::<u8>(), 0..64),
        a in ".{0,20}",
        b in ".{0,40}",
        label in proptest::option::of(0u8..18),
    ) {
        let meta = label.map(|l| ProbeMeta {
            label: Some(l),
            layout: vec![PlacedShape { row: 1, col: 2, color: Color::Green, shape: ShapeKind::Square }],
        });
        let rec = CaptionedImage { id, png, caption_original: a, caption_synthetic: b, meta };
        prop_assert_eq!(decode_record(&encode_record(&rec), 0).unwrap(), rec);
    }
}
