//! Staged training: the decomposition network first, then each diffusion
//! path on frozen decomposition maps.

use std::path::{Path, PathBuf};

use dr_autograd::optim::Adam;
use dr_autograd::{cat, Tape, Tensor, Var};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DataSource, Stage, TrainConfig};
use super::{DiffusionCheckpoint, LossTrace, TdnCheckpoint};
use crate::data::{generate_synthetic, load_paired_dir, to_model_range, PairedSample};
use crate::denoisers::{ConsistencyParams, DenoiserParams};
use crate::diffusion::{
    content_loss, diffusion_loss_with, estimate_x0, gaussian, noise_loss_norms, q_sample, sample_timesteps,
    total_diffusion_loss,
};
use crate::tdn::{decompose_batch, total_decomposition_loss, DecompVars, TdnParams};
use crate::{Error, ImageTensor, Result};

const STREAM_INIT: u64 = 10;
const STREAM_BATCH: u64 = 11;
const STREAM_NOISE: u64 = 12;
const STREAM_INIT_CONSISTENCY: u64 = 13;

pub const TDN_TRACE_COLUMNS: [&str; 4] = ["reconstruction", "consistency", "smoothness", "total"];
pub const DIFFUSION_TRACE_COLUMNS: [&str; 3] = ["diffusion", "content", "total"];

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training and held-out pairs of a data source.
pub fn load_data(source: &DataSource) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    match source {
        DataSource::Synthetic { synth, train, test } => {
            let mut all = generate_synthetic(synth, train + test)?;
            let held_out = all.split_off(*train);
            Ok((all, held_out))
        }
        DataSource::PairedDir { root } => Ok((load_paired_dir(root)?, Vec::new())),
    }
}

/// Random aligned crops: each batch element picks a sample and a window,
/// then the window is cut from every image list.
fn crop_batch(rng: &mut ChaCha8Rng, lists: &[&[ImageTensor]], batch: usize, patch: usize) -> Result<Vec<Tensor>> {
    let n = lists[0].len();
    let mut picked: Vec<Vec<ImageTensor>> = vec![Vec::with_capacity(batch); lists.len()];
    for _ in 0..batch {
        let i = rng.gen_range(0..n);
        let (h, w, _) = lists[0][i].dims();
        if h < patch || w < patch {
            return Err(Error::Input(format!("sample {i} ({h}x{w}) is smaller than the {patch}-pixel patch")));
        }
        let y = rng.gen_range(0..=h - patch);
        let x = rng.gen_range(0..=w - patch);
        for (list, out) in lists.iter().zip(picked.iter_mut()) {
            out.push(list[i].crop(y, x, patch, patch)?);
        }
    }
    picked.iter().map(|imgs| ImageTensor::stack(imgs)).collect()
}

fn check_finite(iteration: usize, names: &[&str], values: &[f64]) -> Result<()> {
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged { iteration, detail: format!("{} loss is {}", names[k], values[k]) });
    }
    Ok(())
}

/// Where a run wrote its results.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub trace_path: PathBuf,
    pub trace: LossTrace,
}

fn paths(dir: &Path, stage: Stage) -> (PathBuf, PathBuf) {
    (dir.join(format!("{}.ckpt", stage.name())), dir.join(format!("{}_trace.csv", stage.name())))
}

fn intermediate(dir: &Path, stage: Stage, it: usize) -> PathBuf {
    dir.join(format!("{}_{it:06}.ckpt", stage.name()))
}

/// Minimises the decomposition objective with Adam.
pub fn train_tdn(config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if config.stage != Stage::Tdn {
        return Err(Error::Config(format!("train_tdn called with stage {}", config.stage.name())));
    }
    config.validate()?;
    let (train, _) = load_data(&config.data)?;
    if train.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    let lows: Vec<ImageTensor> = train.iter().map(|s| s.low.clone()).collect();
    let normals: Vec<ImageTensor> = train.iter().map(|s| s.normal.clone()).collect();

    let mut params = TdnParams::init(config.tdn.clone(), stream(seed, STREAM_INIT).gen())?;
    let net = params.net();
    let mut adam = Adam::new(config.learning_rate);
    let mut batches = stream(seed, STREAM_BATCH);
    let mut trace = LossTrace::new(&TDN_TRACE_COLUMNS);
    let (ckpt, trace_path) = paths(&config.output_dir, Stage::Tdn);
    let n = config.batch_size;

    for it in 1..=config.iterations {
        let b = crop_batch(&mut batches, &[&lows, &normals], n, config.patch_size)?;
        let (i_low, i_normal) = (Var::constant(b[0].clone()), Var::constant(b[1].clone()));
        let tape = Tape::new();
        let bound = params.store().bind_tracked(&tape);
        let (r, l) = net.forward(&bound, &cat(&[&i_low, &i_normal], 0)?)?;
        let low = DecompVars { reflectance: r.narrow(0, 0, n)?, illumination: l.narrow(0, 0, n)? };
        let normal = DecompVars { reflectance: r.narrow(0, n, n)?, illumination: l.narrow(0, n, n)? };
        let losses = total_decomposition_loss(&low, &normal, &i_low, &i_normal, &config.loss_weights)?;
        let values: Vec<f64> = [&losses.reconstruction, &losses.consistency, &losses.smoothness, &losses.total]
            .iter()
            .map(|v| v.value().item())
            .collect::<std::result::Result<_, _>>()?;
        check_finite(it, &TDN_TRACE_COLUMNS, &values)?;
        let grads = losses.total.backward()?;
        params.store_mut().adam_step(&mut adam, &bound, &grads)?;
        if it % config.log_every == 0 || it == 1 {
            info!("tdn {it}/{}: total {:.5} rec {:.5}", config.iterations, values[3], values[0]);
        }
        trace.push(it, values);
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 && it < config.iterations {
            TdnCheckpoint { params: params.clone(), iterations: it }.save(&intermediate(
                &config.output_dir,
                Stage::Tdn,
                it,
            ))?;
            trace.save(&trace_path)?;
        }
    }
    TdnCheckpoint { params, iterations: config.iterations }.save(&ckpt)?;
    trace.save(&trace_path)?;
    Ok(TrainOutcome { checkpoint: ckpt, trace_path, trace })
}

/// Decomposition maps of a set of images, batched through the network.
pub fn decompose_all(images: &[ImageTensor], tdn: &TdnParams) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
    const CHUNK: usize = 16;
    let (mut rs, mut ls) = (Vec::with_capacity(images.len()), Vec::with_capacity(images.len()));
    for chunk in images.chunks(CHUNK) {
        // mixed sizes cannot share a batch
        let groups: Vec<&[ImageTensor]> =
            if chunk.iter().all(|i| i.dims() == chunk[0].dims()) { vec![chunk] } else { chunk.chunks(1).collect() };
        for g in groups {
            let (r, l) = decompose_batch(&ImageTensor::stack(g)?, tdn)?;
            rs.extend(ImageTensor::unstack(&r)?);
            ls.extend(ImageTensor::unstack(&l)?);
        }
    }
    Ok((rs, ls))
}

/// Trains one adjustment path. Conditions are decomposition maps of the
/// low-light images, targets the same maps of the paired normal images, both
/// in `[−1, 1]`. The decomposition checkpoint is only read.
pub fn train_diffusion(config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let stage = config.stage;
    let models =
        config.models(stage).ok_or_else(|| Error::Config("train_diffusion needs stage rda or ida".into()))?.clone();
    config.validate()?;
    let tdn_path = config.tdn_checkpoint.as_ref().expect("validated");
    let tdn = TdnCheckpoint::load(tdn_path)?;
    let (train, _) = load_data(&config.data)?;
    if train.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    let lows: Vec<ImageTensor> = train.iter().map(|s| s.low.clone()).collect();
    let normals: Vec<ImageTensor> = train.iter().map(|s| s.normal.clone()).collect();
    let (r_low, l_low) = decompose_all(&lows, &tdn.params)?;
    let (r_normal, l_normal) = decompose_all(&normals, &tdn.params)?;
    let (cond, target) = if stage == Stage::Rda { (r_low, r_normal) } else { (l_low, l_normal) };
    let cond: Vec<ImageTensor> = cond.iter().map(to_model_range).collect();
    let target: Vec<ImageTensor> = target.iter().map(to_model_range).collect();

    let schedule = config.schedule.build()?;
    let norm = noise_loss_norms().get(&config.noise_loss)?;
    let mut denoiser = DenoiserParams::init(models.denoiser, stream(seed, STREAM_INIT).gen())?;
    let mut consistency = ConsistencyParams::init(models.consistency, stream(seed, STREAM_INIT_CONSISTENCY).gen())?;
    let (unet, refiner) = (denoiser.net(), consistency.net());
    let (mut adam_d, mut adam_c) = (Adam::new(config.learning_rate), Adam::new(config.learning_rate));
    let mut batches = stream(seed, STREAM_BATCH);
    let mut noise = stream(seed, STREAM_NOISE);
    let mut trace = LossTrace::new(&DIFFUSION_TRACE_COLUMNS);
    let (ckpt, trace_path) = paths(&config.output_dir, stage);
    let n = config.batch_size;
    let checkpoint = |denoiser: &DenoiserParams, consistency: &ConsistencyParams, it: usize| DiffusionCheckpoint {
        stage: stage.name().into(),
        denoiser: denoiser.clone(),
        consistency: consistency.clone(),
        schedule_config: config.schedule.clone(),
        schedule: schedule.clone(),
        posterior_mean: config.posterior_mean.clone(),
        iterations: it,
    };

    for it in 1..=config.iterations {
        let b = crop_batch(&mut batches, &[&cond, &target], n, config.patch_size)?;
        let (c, x0) = (&b[0], &b[1]);
        let t = sample_timesteps(n, schedule.steps(), &mut noise);
        let eps = gaussian(x0.shape(), &mut noise);
        let x_t = Var::constant(q_sample(x0, &t, &eps, &schedule)?);

        let tape = Tape::new();
        let bd = denoiser.store().bind_tracked(&tape);
        let bc = consistency.store().bind_tracked(&tape);
        let eps_hat = unet.forward(&bd, &x_t, Some(&Var::constant(c.clone())), &t)?;
        let l_diff = diffusion_loss_with(norm.as_ref(), &Var::constant(eps), &eps_hat)?;
        // with a zero weight the content term is only reported
        let live = config.gamma_ct > 0.0;
        let eps_for_x0 = if live { eps_hat.clone() } else { eps_hat.detach() };
        let x0_est = estimate_x0(&x_t, &eps_for_x0, &t, &schedule)?.clamp(-1.0, 1.0);
        let refined = refiner.refine(&bc, &x0_est, &t)?;
        let l_content = content_loss(&Var::constant(x0.clone()), &refined)?;
        let total = if live { total_diffusion_loss(&l_diff, &l_content, config.gamma_ct)? } else { l_diff.clone() };
        let values = vec![l_diff.value().item()?, l_content.value().item()?, total.value().item()?];
        check_finite(it, &DIFFUSION_TRACE_COLUMNS, &values)?;
        let grads = total.backward()?;
        denoiser.store_mut().adam_step(&mut adam_d, &bd, &grads)?;
        if live {
            consistency.store_mut().adam_step(&mut adam_c, &bc, &grads)?;
        }
        if it % config.log_every == 0 || it == 1 {
            info!("{} {it}/{}: diff {:.5} content {:.5}", stage.name(), config.iterations, values[0], values[1]);
        }
        trace.push(it, values);
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 && it < config.iterations {
            checkpoint(&denoiser, &consistency, it).save(&intermediate(&config.output_dir, stage, it))?;
            trace.save(&trace_path)?;
        }
    }
    checkpoint(&denoiser, &consistency, config.iterations).save(&ckpt)?;
    trace.save(&trace_path)?;
    Ok(TrainOutcome { checkpoint: ckpt, trace_path, trace })
}
