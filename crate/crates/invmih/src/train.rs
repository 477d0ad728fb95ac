//! Training: Adam with a halving learning-rate schedule, the three training
//! stages, and the per-iteration metrics log.
//!
//! Stages get exactly the loss terms their module can influence:
//! - `IirWarmup` trains the rescaling network with the distribution-matching,
//!   reconstruction, and guide terms (reveal through sampled latents);
//! - `IihWarmup` trains the hiding network with the conceal, low-frequency,
//!   and mosaic-consistency terms, using bicubic mosaics as stand-in inputs;
//! - `Joint` trains everything with the full objective.
//!
//! Every batch is a pure function of (seed, iteration), so a run can be
//! interrupted and resumed from a checkpoint without changing the sample
//! sequence or the loss curve.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::data::load_patch_batch;
use crate::error::{InvMihError, Result};
use crate::iih::IihModel;
use crate::iir::{stack_batch, unstack_batch, IirModel};
use crate::latent::sample_normal;
use crate::loss::{
    bicubic_downscale, total_loss, total_loss_backward, LossBreakdown, LossInputs, LossWeights,
};
use crate::metrics::psnr;
use crate::nn::GradStore;
use crate::transforms::{quantize_backward, splice_mosaic, unsplice_mosaic, MosaicLayout};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    IirWarmup,
    IihWarmup,
    Joint,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::IirWarmup => "iir_warmup",
            Stage::IihWarmup => "iih_warmup",
            Stage::Joint => "joint",
        }
    }

    /// Decorrelates the batch streams of the three stages.
    fn seed_salt(&self) -> u64 {
        match self {
            Stage::IirWarmup => 0x5157_4d55_5049_4952,
            Stage::IihWarmup => 0x5157_4d55_5049_4948,
            Stage::Joint => 0x0000_0054_4e49_4f4a,
        }
    }
}

/// One stage's training parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub base_lr: f64,
    pub lr_halving_period: u64,
    pub seed: u64,
    pub layout: MosaicLayout,
    pub loss_weights: LossWeights,
    pub histogram_bins: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(InvMihError::Config("batch_size must be positive".into()));
        }
        if self.base_lr <= 0.0 || self.lr_halving_period == 0 {
            return Err(InvMihError::Config("learning-rate schedule must be positive".into()));
        }
        if self.patch_size % (2 * self.layout.m) != 0 || self.patch_size % (2 * self.layout.n) != 0
        {
            return Err(InvMihError::Config(format!(
                "patch_size {} must be divisible by 2m = {} and 2n = {}",
                self.patch_size,
                2 * self.layout.m,
                2 * self.layout.n
            )));
        }
        Ok(())
    }

    /// Build the config for one stage out of a full run configuration.
    pub fn from_run(run: &RunConfig, stage: Stage) -> Result<TrainConfig> {
        let iterations = match stage {
            Stage::IirWarmup => run.iir_warmup_iterations,
            Stage::IihWarmup => run.iih_warmup_iterations,
            Stage::Joint => run.joint_iterations,
        };
        let cfg = TrainConfig {
            stage,
            iterations,
            batch_size: run.batch_size,
            patch_size: run.patch_size,
            base_lr: run.base_lr,
            lr_halving_period: run.lr_halving_period,
            seed: run.seed,
            layout: run.layout()?,
            loss_weights: LossWeights {
                lambda1: run.lambda1,
                lambda2: run.lambda2,
                lambda3: run.lambda3,
            },
            histogram_bins: run.histogram_bins,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Construct freshly initialized models for a run configuration. The
/// initialization stream is seeded from the run seed, so an architecture plus
/// a seed pins the exact starting parameters.
pub fn build_models(run: &RunConfig) -> Result<(IirModel<f32>, IihModel<f32>)> {
    run.validate()?;
    let layout = run.layout()?;
    let subnet = run.subnet_config();
    subnet.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run.seed ^ 0x494e_4954);
    let iir = IirModel::new(run.iir_blocks, layout, subnet, 3, &mut rng);
    let iih = IihModel::new(run.iih_blocks, subnet, 3, &mut rng);
    Ok((iir, iih))
}

/// base_lr halved every `lr_halving_period` iterations.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * 0.5_f64.powi((iteration / cfg.lr_halving_period) as i32)
}

/// One metrics-log record per iteration.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub stage: Stage,
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Cover/stego PSNR of this batch; absent in the IIR warm-up (no stego).
    pub stego_psnr: Option<f64>,
}

impl TrainRecord {
    /// Line-delimited log format, one record per line.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        let psnr_s = match self.stego_psnr {
            Some(v) if v.is_infinite() => "inf".to_string(),
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        format!(
            "stage={} iter={} lr={:.6e} js={:.6e} rec={:.6e} guide={:.6e} msi={:.6e} conceal={:.6e} low_freq={:.6e} total={:.6e} stego_psnr={}",
            self.stage.as_str(),
            self.iteration,
            self.lr,
            l.js_term,
            l.rec_l1_term,
            l.guide_term,
            l.msi_consistency_term,
            l.conceal_term,
            l.low_freq_term,
            l.total,
            psnr_s
        )
    }
}

/// Adam with per-parameter moment buffers, keyed by parameter name so the
/// state survives checkpointing.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    /// One optimizer step: returns the named update to subtract from each
    /// parameter that has a gradient.
    pub fn updates(&mut self, grads: &GradStore<f32>, lr: f64) -> BTreeMap<String, ArrayD<f32>> {
        self.t += 1;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let bias1 = 1.0 - (ADAM_BETA1).powi(self.t as i32);
        let bias2 = 1.0 - (ADAM_BETA2).powi(self.t as i32);
        let mut out = BTreeMap::new();
        for (name, g) in grads.iter() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            let mut upd = ArrayD::<f32>::zeros(g.raw_dim());
            ndarray::Zip::from(&mut upd)
                .and(&*m)
                .and(&*v)
                .for_each(|u, mv, vv| {
                    let m_hat = *mv as f64 / bias1;
                    let v_hat = *vv as f64 / bias2;
                    *u = (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
                });
            out.insert(name.clone(), upd);
        }
        out
    }
}

/// Scale gradients so their global L2 norm is at most `GRAD_CLIP_NORM`.
pub fn clip_gradients(grads: &mut GradStore<f32>) {
    let norm = grads.global_norm() as f64;
    if norm > GRAD_CLIP_NORM {
        grads.scale((GRAD_CLIP_NORM / norm) as f32);
    }
}

fn apply_updates(
    iir: &mut IirModel<f32>,
    iih: &mut IihModel<f32>,
    updates: &BTreeMap<String, ArrayD<f32>>,
) {
    let mut apply = |name: &str, mut view: ndarray::ArrayViewMutD<'_, f32>| {
        if let Some(u) = updates.get(name) {
            view.zip_mut_with(u, |p, du| *p -= du);
        }
    };
    iir.visit_params_mut("iir", &mut apply);
    iih.visit_params_mut("iih", &mut apply);
}

fn latent_seed(cfg: &TrainConfig, iteration: u64, stream: u64) -> u64 {
    (cfg.seed ^ cfg.stage.seed_salt())
        .wrapping_add(iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Bicubic-downscale every secret and splice the tiles into a mosaic.
fn bicubic_mosaic(secrets: &[Array4<f32>], layout: &MosaicLayout) -> Result<Array4<f32>> {
    let tiles: Vec<Array4<f32>> = secrets
        .iter()
        .map(|s| bicubic_downscale(s, layout))
        .collect::<Result<_>>()?;
    splice_mosaic(&tiles, layout)
}

/// Run `cfg.iterations` steps of one stage, starting at `start_iteration`
/// (counted within the stage). Returns one record per executed iteration.
/// A non-finite loss aborts with the parameters as of the previous step.
pub fn train_stage(
    iir: &mut IirModel<f32>,
    iih: &mut IihModel<f32>,
    adam: &mut Adam,
    cfg: &TrainConfig,
    dataset_dir: &Path,
    start_iteration: u64,
    mut on_record: Option<&mut dyn FnMut(&TrainRecord)>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let layout = cfg.layout;
    let n = layout.n_secrets();
    let data_seed = cfg.seed ^ cfg.stage.seed_salt();
    let mut records = Vec::with_capacity(cfg.iterations as usize);

    for iter in start_iteration..start_iteration + cfg.iterations {
        let batch = load_patch_batch::<f32>(
            dataset_dir,
            &layout,
            cfg.batch_size,
            cfg.patch_size,
            data_seed,
            iter,
        )?;
        let x_s_b = stack_batch(&batch.secrets)?;
        let lr = lr_at(iter, cfg);
        let mut grads = GradStore::<f32>::new();

        let (loss, stego_psnr) = match cfg.stage {
            Stage::IirWarmup => {
                let (out, cache_ds) = iir.downscale_cached(&x_s_b)?;
                let tiles = unstack_batch(&out.tile, n);
                let msi = splice_mosaic(&tiles, &layout)?;
                let x_ref = bicubic_mosaic(&batch.secrets, &layout)?;
                let z = sample_normal::<f32>(
                    (
                        out.r_high.dim().0,
                        out.r_high.dim().1,
                        out.r_high.dim().2,
                        out.r_high.dim().3,
                    ),
                    latent_seed(cfg, iter, 0),
                );
                let (x_rs_b, cache_up) = iir.upscale_cached(&out.tile, &z)?;
                let inputs = LossInputs {
                    x_s: &x_s_b,
                    x_rs: &x_rs_b,
                    x_ds: &msi,
                    x_ds_hat: &msi,
                    x_ref: &x_ref,
                    x_c: &batch.cover,
                    x_stego_pre_quant: &batch.cover,
                };
                let loss = total_loss(&inputs, &cfg.loss_weights, cfg.histogram_bins)?;
                let lg = total_loss_backward(&inputs, &cfg.loss_weights, cfg.histogram_bins)?;
                let (g_tile_up, _g_z) =
                    iir.upscale_backward(&cache_up, &lg.g_x_rs, &mut grads, "iir")?;
                let g_tiles = unsplice_mosaic(&lg.g_x_ds, &layout)?;
                let g_tile_total = g_tile_up + stack_batch(&g_tiles)?;
                let g_r = Array4::<f32>::zeros(out.r_high.dim());
                iir.downscale_backward(&cache_ds, &g_tile_total, &g_r, &mut grads, "iir")?;
                (loss, None)
            }
            Stage::IihWarmup => {
                let x_ds = bicubic_mosaic(&batch.secrets, &layout)?;
                let (out, cache_c) = iih.conceal_cached(&batch.cover, &x_ds)?;
                let z = sample_normal::<f32>(
                    (
                        out.r_hide.dim().0,
                        out.r_hide.dim().1,
                        out.r_hide.dim().2,
                        out.r_hide.dim().3,
                    ),
                    latent_seed(cfg, iter, 1),
                );
                let ((x_ds_hat, _x_c_hat), cache_r) = iih.reveal_cached(&out.stego, &z)?;
                let inputs = LossInputs {
                    x_s: &x_s_b,
                    x_rs: &x_s_b,
                    x_ds: &x_ds,
                    x_ds_hat: &x_ds_hat,
                    x_ref: &x_ds,
                    x_c: &batch.cover,
                    x_stego_pre_quant: &out.stego_pre_quant,
                };
                let loss = total_loss(&inputs, &cfg.loss_weights, cfg.histogram_bins)?;
                let lg = total_loss_backward(&inputs, &cfg.loss_weights, cfg.histogram_bins)?;
                let g_zero = Array4::<f32>::zeros(batch.cover.dim());
                let g_stego_reveal =
                    iih.reveal_backward(&cache_r, &lg.g_x_ds_hat, &g_zero, &mut grads, "iih")?;
                let g_stego_pre = &lg.g_x_stego_pre_quant
                    + &quantize_backward(&out.stego_pre_quant, &g_stego_reveal);
                let g_r_hide = Array4::<f32>::zeros(out.r_hide.dim());
                iih.conceal_backward(&cache_c, &g_stego_pre, &g_r_hide, &mut grads, "iih")?;
                let p = psnr(&batch.cover, &out.stego)?;
                (loss, Some(p))
            }
            Stage::Joint => {
                let (out_ds, cache_ds) = iir.downscale_cached(&x_s_b)?;
                let tiles = unstack_batch(&out_ds.tile, n);
                let x_ds = splice_mosaic(&tiles, &layout)?;
                let x_ref = bicubic_mosaic(&batch.secrets, &layout)?;
                let (out_c, cache_c) = iih.conceal_cached(&batch.cover, &x_ds)?;
                let z_hide = sample_normal::<f32>(
                    (
                        out_c.r_hide.dim().0,
                        out_c.r_hide.dim().1,
                        out_c.r_hide.dim().2,
                        out_c.r_hide.dim().3,
                    ),
                    latent_seed(cfg, iter, 1),
                );
                let ((x_ds_hat, _x_c_hat), cache_r) =
                    iih.reveal_cached(&out_c.stego, &z_hide)?;
                let hat_tiles = unsplice_mosaic(&x_ds_hat, &layout)?;
                let tile_hat_b = stack_batch(&hat_tiles)?;
                let z_up = sample_normal::<f32>(
                    (
                        out_ds.r_high.dim().0,
                        out_ds.r_high.dim().1,
                        out_ds.r_high.dim().2,
                        out_ds.r_high.dim().3,
                    ),
                    latent_seed(cfg, iter, 0),
                );
                let (x_rs_b, cache_up) = iir.upscale_cached(&tile_hat_b, &z_up)?;
                let inputs = LossInputs {
                    x_s: &x_s_b,
                    x_rs: &x_rs_b,
                    x_ds: &x_ds,
                    x_ds_hat: &x_ds_hat,
                    x_ref: &x_ref,
                    x_c: &batch.cover,
                    x_stego_pre_quant: &out_c.stego_pre_quant,
                };
                let loss = total_loss(&inputs, &cfg.loss_weights, cfg.histogram_bins)?;
                let lg = total_loss_backward(&inputs, &cfg.loss_weights, cfg.histogram_bins)?;

                // Recovery branch back to the revealed mosaic.
                let (g_tile_up, _g_z) =
                    iir.upscale_backward(&cache_up, &lg.g_x_rs, &mut grads, "iir")?;
                let g_hat_tiles = unstack_batch(&g_tile_up, n);
                let g_x_ds_hat = &lg.g_x_ds_hat + &splice_mosaic(&g_hat_tiles, &layout)?;

                // Reveal back to the stego image, through the rounding grid.
                let g_zero = Array4::<f32>::zeros(batch.cover.dim());
                let g_stego_reveal =
                    iih.reveal_backward(&cache_r, &g_x_ds_hat, &g_zero, &mut grads, "iih")?;
                let g_stego_pre = &lg.g_x_stego_pre_quant
                    + &quantize_backward(&out_c.stego_pre_quant, &g_stego_reveal);

                // Conceal back to the mosaic.
                let g_r_hide = Array4::<f32>::zeros(out_c.r_hide.dim());
                let (_g_cover, g_x_ds_conceal) =
                    iih.conceal_backward(&cache_c, &g_stego_pre, &g_r_hide, &mut grads, "iih")?;

                // Mosaic back through the rescaling network.
                let g_x_ds = &lg.g_x_ds + &g_x_ds_conceal;
                let g_ds_tiles = unsplice_mosaic(&g_x_ds, &layout)?;
                let g_tile_ds = stack_batch(&g_ds_tiles)?;
                let g_r = Array4::<f32>::zeros(out_ds.r_high.dim());
                iir.downscale_backward(&cache_ds, &g_tile_ds, &g_r, &mut grads, "iir")?;

                let p = psnr(&batch.cover, &out_c.stego)?;
                (loss, Some(p))
            }
        };

        clip_gradients(&mut grads);
        let updates = adam.updates(&grads, lr);
        apply_updates(iir, iih, &updates);

        let record = TrainRecord {
            stage: cfg.stage,
            iteration: iter,
            lr,
            loss,
            stego_psnr,
        };
        if let Some(cb) = on_record.as_deref_mut() {
            cb(&record);
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_synthetic_dataset;
    use crate::nn::SubnetConfig;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn tiny_cfg(stage: Stage, iterations: u64) -> TrainConfig {
        TrainConfig {
            stage,
            iterations,
            batch_size: 1,
            patch_size: 8,
            base_lr: 1e-3,
            lr_halving_period: 10_000,
            seed: 5,
            layout: MosaicLayout::new(2, 2, 4, 4).unwrap(),
            loss_weights: LossWeights::default(),
            histogram_bins: 8,
        }
    }

    fn tiny_models(seed: u64) -> (IirModel<f32>, IihModel<f32>) {
        let cfg = SubnetConfig {
            n_layers: 2,
            growth_channels: 4,
            final_init_scale: 0.01,
            ..SubnetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            IirModel::new(1, MosaicLayout::new(2, 2, 4, 4).unwrap(), cfg, 3, &mut rng),
            IihModel::new(1, cfg, 3, &mut rng),
        )
    }

    fn params_of(iir: &IirModel<f32>, iih: &IihModel<f32>) -> Vec<f32> {
        let mut out = Vec::new();
        iir.visit_params("iir", &mut |_, v| out.extend(v.iter().copied()));
        iih.visit_params("iih", &mut |_, v| out.extend(v.iter().copied()));
        out
    }

    #[test]
    fn lr_schedule_oracles() {
        let cfg = TrainConfig {
            base_lr: 2e-4,
            lr_halving_period: 10_000,
            ..tiny_cfg(Stage::Joint, 1)
        };
        assert_abs_diff_eq!(lr_at(0, &cfg), 2e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(9_999, &cfg), 2e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(10_000, &cfg), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(25_000, &cfg), 5e-5, epsilon = 1e-18);
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(dir.path(), 6, 12, 12, 0).unwrap();
        let (mut iir, mut iih) = tiny_models(1);
        let before = params_of(&iir, &iih);
        let mut adam = Adam::new();
        let records = train_stage(
            &mut iir,
            &mut iih,
            &mut adam,
            &tiny_cfg(Stage::Joint, 0),
            dir.path(),
            0,
            None,
        )
        .unwrap();
        assert!(records.is_empty());
        assert_eq!(before, params_of(&iir, &iih));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn warmup_stages_are_isolated() {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(dir.path(), 6, 12, 12, 1).unwrap();
        let (mut iir, mut iih) = tiny_models(2);
        let mut iih_before = Vec::new();
        iih.visit_params("iih", &mut |_, v| iih_before.extend(v.iter().copied()));
        let mut adam = Adam::new();
        train_stage(
            &mut iir,
            &mut iih,
            &mut adam,
            &tiny_cfg(Stage::IirWarmup, 3),
            dir.path(),
            0,
            None,
        )
        .unwrap();
        let mut iih_after = Vec::new();
        iih.visit_params("iih", &mut |_, v| iih_after.extend(v.iter().copied()));
        assert_eq!(iih_before, iih_after);

        let mut iir_before = Vec::new();
        iir.visit_params("iir", &mut |_, v| iir_before.extend(v.iter().copied()));
        train_stage(
            &mut iir,
            &mut iih,
            &mut adam,
            &tiny_cfg(Stage::IihWarmup, 3),
            dir.path(),
            0,
            None,
        )
        .unwrap();
        let mut iir_after = Vec::new();
        iir.visit_params("iir", &mut |_, v| iir_after.extend(v.iter().copied()));
        assert_eq!(iir_before, iir_after);
    }

    #[test]
    fn loss_identity_and_finiteness_every_step() {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(dir.path(), 6, 12, 12, 2).unwrap();
        let (mut iir, mut iih) = tiny_models(3);
        let mut adam = Adam::new();
        for stage in [Stage::IirWarmup, Stage::IihWarmup, Stage::Joint] {
            let records = train_stage(
                &mut iir,
                &mut iih,
                &mut adam,
                &tiny_cfg(stage, 2),
                dir.path(),
                0,
                None,
            )
            .unwrap();
            for r in &records {
                let l = &r.loss;
                let expected = l.js_term
                    + 1.0 * l.rec_l1_term
                    + 4.0 * l.guide_term
                    + 5.0 * l.msi_consistency_term
                    + l.conceal_term
                    + l.low_freq_term;
                assert_abs_diff_eq!(l.total, expected, epsilon = 1e-12);
                assert!(l.total.is_finite() && l.total > 0.0);
            }
            // Stage-specific vanishing terms.
            match stage {
                Stage::IirWarmup => {
                    assert_eq!(records[0].loss.msi_consistency_term, 0.0);
                    assert_eq!(records[0].loss.conceal_term, 0.0);
                    assert!(records[0].stego_psnr.is_none());
                }
                Stage::IihWarmup => {
                    assert_eq!(records[0].loss.rec_l1_term, 0.0);
                    assert_eq!(records[0].loss.guide_term, 0.0);
                    assert!(records[0].stego_psnr.is_some());
                }
                Stage::Joint => {
                    assert!(records[0].loss.rec_l1_term > 0.0);
                    assert!(records[0].stego_psnr.is_some());
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(dir.path(), 6, 12, 12, 3).unwrap();
        let run = |seed: u64| {
            let (mut iir, mut iih) = tiny_models(seed);
            let mut adam = Adam::new();
            let records = train_stage(
                &mut iir,
                &mut iih,
                &mut adam,
                &tiny_cfg(Stage::Joint, 3),
                dir.path(),
                0,
                None,
            )
            .unwrap();
            (params_of(&iir, &iih), records)
        };
        let (p1, r1) = run(7);
        let (p2, r2) = run(7);
        assert_eq!(p1, p2);
        for (a, b) in r1.iter().zip(r2.iter()) {
            assert_eq!(a.to_line(), b.to_line());
        }
    }

    #[test]
    fn chunked_run_matches_single_run() {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(dir.path(), 6, 12, 12, 4).unwrap();
        // One 4-iteration run.
        let (mut iir_a, mut iih_a) = tiny_models(9);
        let mut adam_a = Adam::new();
        train_stage(
            &mut iir_a,
            &mut iih_a,
            &mut adam_a,
            &tiny_cfg(Stage::Joint, 4),
            dir.path(),
            0,
            None,
        )
        .unwrap();
        // The same run as 2 + 2 with carried optimizer state.
        let (mut iir_b, mut iih_b) = tiny_models(9);
        let mut adam_b = Adam::new();
        train_stage(
            &mut iir_b,
            &mut iih_b,
            &mut adam_b,
            &tiny_cfg(Stage::Joint, 2),
            dir.path(),
            0,
            None,
        )
        .unwrap();
        train_stage(
            &mut iir_b,
            &mut iih_b,
            &mut adam_b,
            &tiny_cfg(Stage::Joint, 2),
            dir.path(),
            2,
            None,
        )
        .unwrap();
        assert_eq!(params_of(&iir_a, &iih_a), params_of(&iir_b, &iih_b));
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut grads = GradStore::<f32>::new();
        grads.accumulate("w", ndarray::ArrayD::from_elem(vec![2, 2], 0.5f32));
        let mut adam = Adam::new();
        let upd = adam.updates(&grads, 1e-3);
        // After bias correction the first update is lr * g/(|g| + eps).
        for u in upd["w"].iter() {
            assert_abs_diff_eq!(*u as f64, 1e-3, epsilon = 1e-6);
        }
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn gradient_clipping_caps_global_norm() {
        let mut grads = GradStore::<f32>::new();
        grads.accumulate("a", ndarray::ArrayD::from_elem(vec![100], 10.0f32));
        assert!((grads.global_norm() as f64) > GRAD_CLIP_NORM);
        clip_gradients(&mut grads);
        assert_abs_diff_eq!(grads.global_norm() as f64, GRAD_CLIP_NORM, epsilon = 1e-3);
        // Already-small gradients are untouched.
        let mut small = GradStore::<f32>::new();
        small.accumulate("a", ndarray::ArrayD::from_elem(vec![4], 0.1f32));
        let before = small.get("a").unwrap().clone();
        clip_gradients(&mut small);
        assert_eq!(&before, small.get("a").unwrap());
    }

    #[test]
    fn stage_config_from_run() {
        let run = RunConfig::default();
        let c = TrainConfig::from_run(&run, Stage::Joint).unwrap();
        assert_eq!(c.iterations, 20_000);
        assert_eq!(c.patch_size, 144);
        let c = TrainConfig::from_run(&run, Stage::IirWarmup).unwrap();
        assert_eq!(c.iterations, 30_000);
        assert_eq!(c.loss_weights.lambda2, 4.0);
    }
}
