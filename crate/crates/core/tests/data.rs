use hmanet_core::data::{
    apply_augment, generate_dataset, generate_scene, load_scene, read_dataset, save_scene, write_dataset, AugmentOps,
    NUM_CLASSES,
};
use hmanet_core::error::Error;
use hmanet_core::hmat::{self, HmatArray, HmatData};

#[test]
fn every_class_shows_up() {
    let mut total = [0usize; NUM_CLASSES];
    let mut pixels = 0;
    for seed in 0..100 {
        let s = generate_scene(seed, 64, 64).unwrap();
        for (t, c) in total.iter_mut().zip(s.class_histogram()) {
            *t += c;
        }
        pixels += s.labels.len();
    }
    for (k, &c) in total.iter().enumerate() {
        let frac = c as f64 / pixels as f64;
        assert!(frac >= 0.01, "class {k} covers {frac:.4} of pixels");
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(9, 4, 32, 48).unwrap();
    let b = generate_dataset(9, 4, 32, 48).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert_eq!(s.image.dims(), &[3, 32, 48]);
        assert_eq!(s.labels.len(), 32 * 48);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(a[0], generate_dataset(10, 1, 32, 48).unwrap()[0]);
}

#[test]
fn flip_preserves_class_counts() {
    for seed in 0..10 {
        let s = generate_scene(seed, 40, 56).unwrap();
        let ops = AugmentOps {
            flip: true,
            scale: 1.0,
            crop_y: 0,
            crop_x: 0,
            crop_h: 40,
            crop_w: 56,
        };
        let f = apply_augment(&s, &ops).unwrap();
        assert_ne!(f.labels, s.labels);
        assert_eq!(f.class_histogram(), s.class_histogram());
        for y in 0..40 {
            for x in 0..56 {
                assert_eq!(f.labels[y * 56 + x], s.labels[y * 56 + 55 - x]);
            }
        }
    }
}

#[test]
fn scene_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(3, 32, 32).unwrap();
    let base = dir.path().join("one");
    save_scene(&base, &s).unwrap();
    let back = load_scene(&base, s.seed).unwrap();
    let want = s.image.to_dtype(hmanet_core::tensor::DType::F32);
    assert_eq!(back.labels, s.labels);
    assert!(back.image.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let set = generate_dataset(1, 3, 32, 32).unwrap();
    write_dataset(&dir.path().join("set"), &set).unwrap();
    let loaded = read_dataset(&dir.path().join("set")).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded[2].labels, set[2].labels);
}

#[test]
fn truncated_scene_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("cut");
    save_scene(&base, &generate_scene(5, 32, 32).unwrap()).unwrap();
    let lbl = dir.path().join("cut.lbl.hmat");
    let bytes = std::fs::read(&lbl).unwrap();
    std::fs::write(&lbl, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_scene(&base, 5), Err(Error::Format { .. })));
}

#[test]
fn out_of_range_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("bad");
    let mut s = generate_scene(6, 32, 32).unwrap();
    s.labels[17] = 9;
    save_scene(&base, &s).unwrap();
    assert!(matches!(load_scene(&base, 6), Err(Error::Label(_))));
}

#[test]
fn golden_file_decodes() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden.hmat");
    let a = hmat::read(std::path::Path::new(path)).unwrap();
    assert_eq!(a.dims, vec![2, 3]);
    match &a.data {
        HmatData::F32(v) => assert_eq!(v, &[1.0, -2.0, 0.5, 3.25, -0.125, 1e-3]),
        other => panic!("unexpected payload {other:?}"),
    }
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(HmatArray::decode(&bytes).unwrap().encode(), bytes);
}
