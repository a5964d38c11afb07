mod common;

use common::grad::weight_gradient_error;
use diff_retinex::denoisers::Denoiser;
use diff_retinex::denoisers::{
    predict_noise, refine_x0, sinusoidal_embedding, ConsistencyDescriptor, ConsistencyParams, DenoiserParams,
    RefinerDescriptor, UNetDescriptor,
};
use diff_retinex::diffusion::{content_loss, diffusion_loss, gaussian, NoisePredictor};
use diff_retinex::nn::ParamStore;
use diff_retinex::Error;
use dr_autograd::optim::Adam;
use dr_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

fn small_unet(target: usize, base: usize) -> UNetDescriptor {
    UNetDescriptor {
        channel_mults: vec![1, 2],
        res_blocks: 1,
        groups: 4,
        time_dim: 32,
        ..UNetDescriptor::denoiser(target, base)
    }
}

fn refiner(target: usize) -> RefinerDescriptor {
    RefinerDescriptor { target_channels: target, channels: 8, blocks: 1, heads: 2, time_dim: 16 }
}

/// Adds `scale·U(−1, 1)` to every weight so zero-initialized layers carry signal.
fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += scale * r.gen_range(-1.0..1.0);
        }
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rda_and_ida_denoisers_preserve_the_sample_shape() {
    for target in [3, 1] {
        let p = DenoiserParams::init(small_unet(target, 8), 1).unwrap();
        let x = uniform(&[2, target, 32, 32], 2);
        let c = uniform(&[2, target, 32, 32], 3);
        let out = predict_noise(&x, &c, &[0, 99], &p).unwrap();
        assert_eq!(out.shape(), &[2, target, 32, 32]);
        let d = Denoiser::new(&p);
        assert_eq!(d.target_channels(), target);
        assert_eq!(d.predict(&x, &c, &[0, 99]).unwrap(), out);
    }
}

#[test]
fn channel_mismatches_are_config_errors() {
    let p = DenoiserParams::init(small_unet(3, 8), 1).unwrap();
    let x3 = uniform(&[1, 3, 8, 8], 1);
    let x1 = uniform(&[1, 1, 8, 8], 2);
    assert!(matches!(predict_noise(&x1, &x3, &[0], &p), Err(Error::Config(_))));
    assert!(matches!(predict_noise(&x3, &x1, &[0], &p), Err(Error::Config(_))));
    let lopsided = UNetDescriptor { condition_channels: 1, ..small_unet(3, 8) };
    assert!(matches!(DenoiserParams::init(lopsided, 1), Err(Error::Config(_))));
    assert!(matches!(DenoiserParams::init(small_unet(2, 8), 1), Err(Error::Config(_))));
    let c = ConsistencyParams::init(ConsistencyDescriptor::ChannelAttention(refiner(3)), 1).unwrap();
    assert!(matches!(refine_x0(&x1, &[0], &c), Err(Error::Config(_))));
}

#[test]
fn denoiser_weight_gradients_match_finite_differences() {
    let mut p = DenoiserParams::init(small_unet(3, 8), 4).unwrap();
    jitter(p.store_mut(), 0.05, 5);
    let net = p.net();
    let x = Var::constant(uniform(&[1, 3, 8, 8], 6));
    let c = Var::constant(uniform(&[1, 3, 8, 8], 7));
    let f = |b: &_| net.forward(b, &x, Some(&c), &[17]).unwrap().sum();
    let (err, n) = weight_gradient_error(p.store(), f, 0.01, 1, 1e-5, 8);
    assert!(n >= p.store().len());
    assert!(err < 1e-3, "relative error {err:e} over {n} weights");
}

#[test]
fn refiner_weight_gradients_match_finite_differences() {
    let mut p = ConsistencyParams::init(ConsistencyDescriptor::ChannelAttention(refiner(3)), 9).unwrap();
    jitter(p.store_mut(), 0.05, 10);
    let net = p.net();
    let x = Var::constant(uniform(&[2, 3, 8, 8], 11));
    let f = |b: &_| net.refine(b, &x, &[3, 40]).unwrap().sum();
    let (err, _) = weight_gradient_error(p.store(), f, 0.01, 1, 1e-5, 12);
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn time_embedding_is_deterministic_and_injective() {
    let steps: Vec<usize> = (0..1000).collect();
    let e = sinusoidal_embedding(&steps, 128);
    assert_eq!(e, sinusoidal_embedding(&steps, 128));
    let rows: Vec<&[f64]> = e.data().chunks(128).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            assert!(
                max_abs_diff(
                    &Tensor::new(vec![128], rows[i].to_vec()).unwrap(),
                    &Tensor::new(vec![128], rows[j].to_vec()).unwrap()
                ) > 1e-6
            );
        }
    }
}

#[test]
fn fresh_refiner_passes_its_input_through() {
    for desc in [
        ConsistencyDescriptor::ChannelAttention(refiner(3)),
        ConsistencyDescriptor::Unet(UNetDescriptor { condition_channels: 0, ..small_unet(3, 8) }),
    ] {
        let p = ConsistencyParams::init(desc, 13).unwrap();
        let x = uniform(&[1, 3, 16, 16], 14);
        assert_eq!(refine_x0(&x, &[5], &p).unwrap(), x);
    }
}

/// One Adam step on the content loss towards `target`.
fn refiner_step(p: &mut ConsistencyParams, adam: &mut Adam, x: &Tensor, target: &Tensor, t: &[usize]) -> f64 {
    let net = p.net();
    let tape = Tape::new();
    let bound = p.store().bind_tracked(&tape);
    let out = net.refine(&bound, &Var::constant(x.clone()), t).unwrap();
    let loss = content_loss(&Var::constant(target.clone()), &out).unwrap();
    let grads = loss.backward().unwrap();
    p.store_mut().adam_step(adam, &bound, &grads).unwrap();
    loss.value().item().unwrap()
}

#[test]
fn time_affine_is_live_after_one_step() {
    let mut p = ConsistencyParams::init(ConsistencyDescriptor::ChannelAttention(refiner(3)), 15).unwrap();
    let x = uniform(&[1, 3, 16, 16], 16);
    let early = |p: &ConsistencyParams| refine_x0(&x, &[0], p).unwrap();
    let late = |p: &ConsistencyParams| refine_x0(&x, &[999], p).unwrap();
    assert_eq!(early(&p), late(&p));
    let target = uniform(&[2, 3, 16, 16], 17);
    let both = Tensor::new(vec![2, 3, 16, 16], [x.data(), x.data()].concat()).unwrap();
    refiner_step(&mut p, &mut Adam::new(1e-3), &both, &target, &[0, 999]);
    assert!(max_abs_diff(&early(&p), &late(&p)) > 0.0);
}

#[test]
fn refiner_learns_the_identity_task() {
    let mut p = ConsistencyParams::init(ConsistencyDescriptor::ChannelAttention(refiner(3)), 18).unwrap();
    jitter(p.store_mut(), 0.2, 19);
    let x = uniform(&[2, 3, 16, 16], 20);
    let mut adam = Adam::new(2e-3);
    let first = refiner_step(&mut p, &mut adam, &x, &x, &[10, 60]);
    let mut last = first;
    for _ in 1..200 {
        last = refiner_step(&mut p, &mut adam, &x, &x, &[10, 60]);
    }
    assert!(first > 0.02, "identity task already solved at start ({first})");
    assert!(last < 0.02, "loss {first} -> {last}");
}

#[test]
fn parameter_counts_follow_the_descriptor() {
    let count = |base: usize| {
        DenoiserParams::specs(&UNetDescriptor::denoiser(3, base))
            .unwrap()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum::<usize>()
    };
    let a = DenoiserParams::init(UNetDescriptor::denoiser(3, 16), 1).unwrap();
    let b = DenoiserParams::init(UNetDescriptor::denoiser(3, 16), 2).unwrap();
    assert_eq!(a.store().num_scalars(), b.store().num_scalars());
    assert_eq!(a.store().num_scalars(), count(16));
    assert_eq!(DenoiserParams::specs(a.descriptor()).unwrap(), DenoiserParams::specs(b.descriptor()).unwrap());
    let ratio = count(64) as f64 / count(32) as f64;
    assert!((3.2..=4.8).contains(&ratio), "doubling base width scaled parameters by {ratio}");
    assert!(
        ConsistencyParams::from_parts(ConsistencyDescriptor::ChannelAttention(refiner(3)), a.store().clone()).is_err()
    );
}

#[test]
fn denoiser_overfits_a_single_batch() {
    let mut p = DenoiserParams::init(small_unet(3, 8), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = gaussian(&[2, 3, 8, 8], &mut rng);
    let c = uniform(&[2, 3, 8, 8], 23);
    let eps = gaussian(&[2, 3, 8, 8], &mut rng);
    let t = [5, 70];
    let mut adam = Adam::new(3e-3);
    let mut last = f64::INFINITY;
    for _ in 0..1000 {
        let net = p.net();
        let tape = Tape::new();
        let bound = p.store().bind_tracked(&tape);
        let out = net.forward(&bound, &Var::constant(x.clone()), Some(&Var::constant(c.clone())), &t).unwrap();
        let loss = diffusion_loss(&Var::constant(eps.clone()), &out).unwrap();
        last = loss.value().item().unwrap();
        if last < 0.02 {
            break;
        }
        let grads = loss.backward().unwrap();
        p.store_mut().adam_step(&mut adam, &bound, &grads).unwrap();
    }
    assert!(last < 0.02, "final loss {last}");
}

#[test]
fn unet_consistency_overfits_a_single_batch() {
    let desc = ConsistencyDescriptor::Unet(UNetDescriptor { condition_channels: 0, ..small_unet(1, 8) });
    let mut p = ConsistencyParams::init(desc, 24).unwrap();
    let target = uniform(&[2, 1, 8, 8], 25);
    let noisy = target.zip_map(&uniform(&[2, 1, 8, 8], 26), |a, b| (a + 0.3 * b).clamp(-1.0, 1.0)).unwrap();
    let mut adam = Adam::new(3e-3);
    let mut last = f64::INFINITY;
    for _ in 0..1000 {
        last = refiner_step(&mut p, &mut adam, &noisy, &target, &[3, 30]);
        if last < 0.02 {
            break;
        }
    }
    assert!(last < 0.02, "final loss {last}");
}
