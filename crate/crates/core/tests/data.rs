use std::fs;

use diff_retinex::data::{generate_synthetic, load_paired_dir, read_png, write_paired_dir, write_png, SynthConfig};
use diff_retinex::{Error, ImageTensor};

fn small() -> SynthConfig {
    SynthConfig { patch_size: 16, seed: 11, ..SynthConfig::default() }
}

#[test]
fn same_seed_same_corpus() {
    assert_eq!(generate_synthetic(&small(), 3).unwrap(), generate_synthetic(&small(), 3).unwrap());
    let other = SynthConfig { seed: 12, ..small() };
    assert_ne!(generate_synthetic(&small(), 1).unwrap(), generate_synthetic(&other, 1).unwrap());
}

#[test]
fn sample_does_not_depend_on_corpus_size() {
    let a = generate_synthetic(&small(), 2).unwrap();
    let b = generate_synthetic(&small(), 5).unwrap();
    assert_eq!(a[..], b[..2]);
}

#[test]
fn no_darkening_gives_identical_pair() {
    let cfg = SynthConfig { gamma_range: [1.0, 1.0], gain_range: [1.0, 1.0], noise_sigma_range: [0.0, 0.0], ..small() };
    for s in generate_synthetic(&cfg, 3).unwrap() {
        assert_eq!(s.low, s.normal);
    }
}

#[test]
fn ground_truth_reproduces_normal_exactly() {
    for s in generate_synthetic(&small(), 4).unwrap() {
        let gt = s.ground_truth.as_ref().unwrap();
        assert_eq!(gt.low.reflectance, gt.normal.reflectance);
        let rl = gt.normal.recompose();
        let max = rl.data().iter().zip(s.normal.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert_eq!(max, 0.0);
    }
}

#[test]
fn maps_stay_in_their_ranges() {
    for s in generate_synthetic(&small(), 6).unwrap() {
        let gt = s.ground_truth.unwrap();
        let r = &gt.normal.reflectance;
        assert!(r.min() >= 0.1 && r.max() <= 1.0);
        assert!(gt.normal.illumination.min() >= 0.5 && gt.normal.illumination.max() <= 1.0);
        assert!(gt.low.illumination.min() > 0.0 && gt.low.illumination.max() <= 0.3);
        assert!(s.low.min() >= 0.0 && s.low.max() <= 1.0);
        assert!(s.low.mean() < s.normal.mean());
    }
}

#[test]
fn invalid_ranges_are_configuration_errors() {
    let bad = SynthConfig { gamma_range: [2.0, 1.0], ..small() };
    assert!(matches!(generate_synthetic(&bad, 1), Err(Error::Config(_))));
    let bad = SynthConfig { noise_sigma_range: [-0.1, 0.1], ..small() };
    assert!(matches!(generate_synthetic(&bad, 1), Err(Error::Config(_))));
    assert!(matches!(generate_synthetic(&small(), 0), Err(Error::Config(_))));
}

#[test]
fn loads_pairs_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let img = |v: f64| ImageTensor::filled(4, 5, 3, v).unwrap();
    for (name, v) in [("b.png", 0.2), ("a.png", 0.4)] {
        write_png(&dir.path().join("low").join(name), &img(v)).unwrap();
        write_png(&dir.path().join("high").join(name), &img(v * 2.0)).unwrap();
    }
    let samples = load_paired_dir(dir.path()).unwrap();
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(samples[0].low.dims(), (4, 5, 3));
    assert!(samples[0].ground_truth.is_none());
}

#[test]
fn empty_directories_load_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("low")).unwrap();
    fs::create_dir(dir.path().join("high")).unwrap();
    assert!(load_paired_dir(dir.path()).unwrap().is_empty());
}

#[test]
fn eight_bit_values_map_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    image::GrayImage::from_raw(1, 1, vec![128]).unwrap().save(&p).unwrap();
    let img = read_png(&p, 1).unwrap();
    assert!((img.data()[0] - 0.50196).abs() < 1e-5);
    assert_eq!(img.data()[0], 128.0 / 255.0);
}

#[test]
fn unmatched_names_are_aggregated() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::filled(2, 2, 3, 0.5).unwrap();
    write_png(&dir.path().join("low/a.png"), &img).unwrap();
    write_png(&dir.path().join("low/b.png"), &img).unwrap();
    write_png(&dir.path().join("high/a.png"), &img).unwrap();
    write_png(&dir.path().join("high/c.png"), &img).unwrap();
    match load_paired_dir(dir.path()) {
        Err(Error::Unmatched(names)) => assert_eq!(names, ["b.png", "c.png"]),
        other => panic!("expected an unmatched error, got {other:?}"),
    }
}

#[test]
fn unreadable_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("low")).unwrap();
    fs::create_dir_all(dir.path().join("high")).unwrap();
    fs::write(dir.path().join("low/z.png"), b"not a png").unwrap();
    fs::write(dir.path().join("high/z.png"), b"not a png").unwrap();
    match load_paired_dir(dir.path()) {
        Err(Error::File { path, .. }) => assert!(path.ends_with("low/z.png")),
        other => panic!("expected a file error, got {other:?}"),
    }
}

#[test]
fn synthetic_corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(&small(), 2).unwrap();
    write_paired_dir(dir.path(), &samples).unwrap();
    let loaded = load_paired_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        let gt = b.ground_truth.as_ref().unwrap();
        // 8-bit quantisation only
        assert!(a.normal.mean_abs_diff(&b.normal).unwrap() <= 0.5 / 255.0 + 1e-12);
        assert!(
            a.ground_truth.as_ref().unwrap().low.illumination.mean_abs_diff(&gt.low.illumination).unwrap()
                <= 0.5 / 255.0 + 1e-12
        );
    }
}
