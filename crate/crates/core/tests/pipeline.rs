use diff_retinex::denoisers::{DenoiserParams, UNetDescriptor};
use diff_retinex::diffusion::{gaussian, make_linear_schedule, posterior_mean_rules, NoiseSchedule};
use diff_retinex::pipeline::{
    dump_intermediates, enhance, enhance_with, ida_adjust, rda_adjust, rda_adjust_with, Models, IDA_STREAM,
    MIN_ILLUMINATION, RDA_STREAM,
};
use diff_retinex::tdn::{decompose, TdnDescriptor, TdnParams};
use diff_retinex::{Error, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    tdn: TdnParams,
    rda: DenoiserParams,
    ida: DenoiserParams,
    schedule: NoiseSchedule,
}

fn denoiser(target: usize, seed: u64) -> DenoiserParams {
    let desc = UNetDescriptor {
        channel_mults: vec![1, 2],
        res_blocks: 1,
        groups: 2,
        time_dim: 16,
        attention_lowest: false,
        ..UNetDescriptor::denoiser(target, 4)
    };
    let mut p = DenoiserParams::init(desc, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    for (_, t) in p.store_mut().iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * r.gen_range(-1.0..1.0);
        }
    }
    p
}

fn fixture() -> Fixture {
    Fixture {
        tdn: TdnParams::init(
            TdnDescriptor { embed_channels: 4, stages: 2, blocks_per_stage: 1, heads: vec![1, 2, 2] },
            1,
        )
        .unwrap(),
        rda: denoiser(3, 2),
        ida: denoiser(1, 3),
        schedule: make_linear_schedule(10, 1e-3, 0.2).unwrap(),
    }
}

fn image(h: usize, w: usize, seed: u64, scale: f64) -> ImageTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, 3, |_, _, _| scale * r.gen::<f64>()).unwrap()
}

fn run(f: &Fixture, img: &ImageTensor, seed: u64) -> diff_retinex::pipeline::EnhanceResult {
    enhance(img, &f.tdn, &f.rda, &f.ida, &f.schedule, &f.schedule, seed).unwrap()
}

#[test]
fn enhance_contract_on_a_64_pixel_square() {
    let f = fixture();
    let res = run(&f, &image(64, 64, 1, 0.2), 7);
    assert_eq!(res.seed, 7);
    assert_eq!(res.enhanced.dims(), (64, 64, 3));
    assert_eq!(res.adjusted_reflectance.dims(), (64, 64, 3));
    assert_eq!(res.adjusted_illumination.dims(), (64, 64, 1));
    assert!(res.enhanced.min() >= 0.0 && res.enhanced.max() <= 1.0);
    assert!(res.adjusted_reflectance.min() >= 0.0 && res.adjusted_reflectance.max() <= 1.0);
    assert!(res.adjusted_illumination.min() >= MIN_ILLUMINATION && res.adjusted_illumination.max() <= 1.0);
}

#[test]
fn recomposition_is_exact() {
    let f = fixture();
    let res = run(&f, &image(16, 24, 2, 0.3), 3);
    for y in 0..16 {
        for x in 0..24 {
            let l = res.adjusted_illumination.get(y, x, 0);
            for c in 0..3 {
                let expect = (res.adjusted_reflectance.get(y, x, c) * l).clamp(0.0, 1.0);
                assert_eq!(res.enhanced.get(y, x, c).to_bits(), expect.to_bits());
            }
        }
    }
}

#[test]
fn same_seed_same_result() {
    let f = fixture();
    let img = image(16, 16, 3, 0.2);
    assert_eq!(run(&f, &img, 11), run(&f, &img, 11));
}

#[test]
fn seed_drives_both_adjustments_independently() {
    let f = fixture();
    let img = image(16, 16, 4, 0.2);
    let a = run(&f, &img, 11);
    let b = run(&f, &img, 12);
    assert_eq!(a.decomposition, b.decomposition);
    assert_ne!(a.adjusted_reflectance, b.adjusted_reflectance);
    assert_ne!(a.adjusted_illumination, b.adjusted_illumination);

    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        r.set_stream(s);
        gaussian(&[8], &mut r)
    };
    assert_ne!(RDA_STREAM, IDA_STREAM);
    assert_ne!(stream(RDA_STREAM), stream(IDA_STREAM));
}

#[test]
fn stages_run_standalone() {
    let f = fixture();
    let img = image(16, 16, 5, 0.2);
    let res = run(&f, &img, 13);
    let d = decompose(&img, &f.tdn).unwrap();
    assert_eq!(d, res.decomposition);
    assert_eq!(rda_adjust(&d.reflectance, &f.rda, &f.schedule, 13).unwrap(), res.adjusted_reflectance);
    assert_eq!(ida_adjust(&d.illumination, &f.ida, &f.schedule, 13).unwrap(), res.adjusted_illumination);
}

#[test]
fn posterior_rule_is_selectable() {
    let f = fixture();
    let img = image(16, 16, 6, 0.2);
    let rules = posterior_mean_rules();
    let printed = rules.get("printed").unwrap();
    let standard = rules.get("standard").unwrap();
    let models =
        |rule| Models { tdn: &f.tdn, rda: &f.rda, ida: &f.ida, schedule_r: &f.schedule, schedule_i: &f.schedule, rule };
    let a = enhance_with(&img, &models(&*standard), 1).unwrap();
    assert_eq!(a, run(&f, &img, 1));
    let b = enhance_with(&img, &models(&*printed), 1).unwrap();
    assert_ne!(a.adjusted_reflectance, b.adjusted_reflectance);
    let r = &a.decomposition.reflectance;
    assert_eq!(rda_adjust_with(r, &f.rda, &f.schedule, &*printed, 1).unwrap(), b.adjusted_reflectance);
}

#[test]
fn normal_light_input_still_yields_a_valid_image() {
    let f = fixture();
    let img = image(24, 20, 7, 1.0);
    let res = run(&f, &img, 1);
    assert_eq!(res.enhanced.dims(), (24, 20, 3));
    assert!(res.enhanced.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let f = fixture();
    let res = run(&f, &image(13, 7, 8, 0.2), 2);
    assert_eq!(res.enhanced.dims(), (13, 7, 3));
    assert_eq!(res.adjusted_illumination.dims(), (13, 7, 1));
}

#[test]
fn channel_mismatches_are_input_errors() {
    let f = fixture();
    let gray = ImageTensor::filled(16, 16, 1, 0.2).unwrap();
    assert!(matches!(enhance(&gray, &f.tdn, &f.rda, &f.ida, &f.schedule, &f.schedule, 0), Err(Error::Input(_))));
    assert!(matches!(rda_adjust(&gray, &f.rda, &f.schedule, 0), Err(Error::Input(_))));
    let rgb = image(16, 16, 9, 0.5);
    assert!(matches!(ida_adjust(&rgb, &f.ida, &f.schedule, 0), Err(Error::Input(_))));
    assert!(matches!(rda_adjust(&rgb, &f.ida, &f.schedule, 0), Err(Error::Input(_))));
}

#[test]
fn intermediate_dump_writes_four_maps() {
    let f = fixture();
    let res = run(&f, &image(16, 16, 10, 0.2), 1);
    let dir = tempfile::tempdir().unwrap();
    let paths = dump_intermediates(&res, &dir.path().join("nested"), "img").unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["img_r_tdn.png", "img_l_tdn.png", "img_r_adj.png", "img_l_adj.png"]);
    assert!(paths.iter().all(|p| p.is_file()));
}
