//! Shared desk-scale end-to-end flow: synthetic corpus, staged training,
//! enhancement of the held-out split and the resulting measurements.

use std::path::Path;
use std::time::Instant;

use diff_retinex::data::SynthConfig;
use diff_retinex::denoisers::{ConsistencyDescriptor, RefinerDescriptor, UNetDescriptor};
use diff_retinex::diffusion::{posterior_mean_rules, ScheduleConfig};
use diff_retinex::harness::{
    load_data, psnr, train_diffusion, train_tdn, DataSource, DiffusionCheckpoint, DiffusionModels, LossTrace, Stage,
    TdnCheckpoint, TrainConfig,
};
use diff_retinex::pipeline::{enhance_with, Models};
use diff_retinex::tdn::{decompose, TdnDescriptor};
use diff_retinex::ImageTensor;

pub const E2E_SEED: u64 = 20_240_611;

/// The compact network sizes used for the CPU acceptance run.
pub fn acceptance_config(stage: Stage, out: &Path, iterations: usize) -> TrainConfig {
    let unet = |target: usize, base: usize, condition: usize| UNetDescriptor {
        target_channels: target,
        condition_channels: condition,
        base_channels: base,
        channel_mults: vec![1, 2, 4],
        res_blocks: 1,
        attention_lowest: condition > 0,
        groups: 4,
        time_dim: 32,
    };
    TrainConfig {
        stage,
        seed: Some(E2E_SEED),
        data: DataSource::Synthetic {
            synth: SynthConfig { seed: E2E_SEED, ..SynthConfig::default() },
            train: 500,
            test: 50,
        },
        tdn: TdnDescriptor { embed_channels: 8, stages: 3, blocks_per_stage: 1, heads: vec![1, 2, 4, 8] },
        rda: DiffusionModels {
            denoiser: unet(3, 8, 3),
            consistency: ConsistencyDescriptor::ChannelAttention(RefinerDescriptor {
                target_channels: 3,
                channels: 8,
                blocks: 1,
                heads: 1,
                time_dim: 32,
            }),
        },
        ida: DiffusionModels { denoiser: unet(1, 8, 1), consistency: ConsistencyDescriptor::Unet(unet(1, 4, 0)) },
        schedule: ScheduleConfig::linear(100, 1e-3, 0.2),
        learning_rate: 5e-4,
        batch_size: 4,
        patch_size: 32,
        iterations,
        log_every: 500,
        output_dir: out.to_path_buf(),
        ..TrainConfig::desk(stage)
    }
}

pub struct EndToEnd {
    pub tdn_trace: LossTrace,
    pub rda_trace: LossTrace,
    pub ida_trace: LossTrace,
    pub checkpoints: Vec<Vec<u8>>,
    pub enhanced: Vec<ImageTensor>,
    pub psnr_low: f64,
    pub psnr_enhanced: f64,
    pub tdn_reconstruction_l1: f64,
    pub r_l1_tdn: f64,
    pub r_l1_adjusted: f64,
    pub l_l1_tdn: f64,
    pub l_l1_adjusted: f64,
    pub seconds: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run_end_to_end(dir: &Path, tdn_iterations: usize, diffusion_iterations: usize) -> EndToEnd {
    let start = Instant::now();
    let tdn_cfg = acceptance_config(Stage::Tdn, &dir.join("tdn"), tdn_iterations);
    let tdn_out = train_tdn(&tdn_cfg, E2E_SEED).unwrap();
    let mut outs = Vec::new();
    for stage in [Stage::Rda, Stage::Ida] {
        let mut cfg = acceptance_config(stage, &dir.join(stage.name()), diffusion_iterations);
        cfg.tdn_checkpoint = Some(tdn_out.checkpoint.clone());
        outs.push(train_diffusion(&cfg, E2E_SEED).unwrap());
    }
    let tdn = TdnCheckpoint::load(&tdn_out.checkpoint).unwrap();
    let rda = DiffusionCheckpoint::load(&outs[0].checkpoint).unwrap();
    let ida = DiffusionCheckpoint::load(&outs[1].checkpoint).unwrap();
    let rule = posterior_mean_rules().get(&rda.posterior_mean).unwrap();
    let models = Models {
        tdn: &tdn.params,
        rda: &rda.denoiser,
        ida: &ida.denoiser,
        schedule_r: &rda.schedule,
        schedule_i: &ida.schedule,
        rule: rule.as_ref(),
    };

    let (_, test) = load_data(&tdn_cfg.data).unwrap();
    let (mut p_low, mut p_enh, mut rec, mut r_tdn, mut r_adj, mut l_tdn, mut l_adj) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut enhanced = Vec::new();
    for s in &test {
        let gt = s.ground_truth.as_ref().unwrap();
        let res = enhance_with(&s.low, &models, E2E_SEED).unwrap();
        p_low.push(psnr(&s.low, &s.normal).unwrap());
        p_enh.push(psnr(&res.enhanced, &s.normal).unwrap());
        let d_normal = decompose(&s.normal, &tdn.params).unwrap();
        rec.push(res.decomposition.recompose().mean_abs_diff(&s.low).unwrap());
        rec.push(d_normal.recompose().mean_abs_diff(&s.normal).unwrap());
        r_tdn.push(res.decomposition.reflectance.mean_abs_diff(&gt.normal.reflectance).unwrap());
        r_adj.push(res.adjusted_reflectance.mean_abs_diff(&gt.normal.reflectance).unwrap());
        l_tdn.push(res.decomposition.illumination.mean_abs_diff(&gt.normal.illumination).unwrap());
        l_adj.push(res.adjusted_illumination.mean_abs_diff(&gt.normal.illumination).unwrap());
        enhanced.push(res.enhanced);
    }
    let checkpoints = [&tdn_out.checkpoint, &outs[0].checkpoint, &outs[1].checkpoint]
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    EndToEnd {
        tdn_trace: tdn_out.trace,
        rda_trace: outs[0].trace.clone(),
        ida_trace: outs[1].trace.clone(),
        checkpoints,
        enhanced,
        psnr_low: mean(&p_low),
        psnr_enhanced: mean(&p_enh),
        tdn_reconstruction_l1: mean(&rec),
        r_l1_tdn: mean(&r_tdn),
        r_l1_adjusted: mean(&r_adj),
        l_l1_tdn: mean(&l_tdn),
        l_l1_adjusted: mean(&l_adj),
        seconds: start.elapsed().as_secs_f64(),
    }
}

impl EndToEnd {
    pub fn summary(&self) -> String {
        format!(
            "psnr low {:.3} enhanced {:.3} | tdn rec L1 {:.4} | R L1 tdn {:.4} adj {:.4} | L L1 tdn {:.4} adj {:.4} | {:.0}s",
            self.psnr_low,
            self.psnr_enhanced,
            self.tdn_reconstruction_l1,
            self.r_l1_tdn,
            self.r_l1_adjusted,
            self.l_l1_tdn,
            self.l_l1_adjusted,
            self.seconds
        )
    }
}
