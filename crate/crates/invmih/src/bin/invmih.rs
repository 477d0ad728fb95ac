//! Command-line front end: train, conceal, reveal, evaluate, plot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array4;

use invmih::checkpoint::Checkpoint;
use invmih::config::{RunConfig, StageSelector};
use invmih::image_io::{load_png, save_png};
use invmih::latent::{sample_normal, LatentMode};
use invmih::metrics::{evaluate, psnr, ssim, EvalReport};
use invmih::tensor::dim_str;
use invmih::train::{build_models, train_stage, Adam, Stage, TrainConfig, TrainRecord};
use invmih::{InvMihError, Result};

#[derive(Parser)]
#[command(name = "invmih", about = "Invertible mosaic image hiding", version)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (highest precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output path (directory or file, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the models on a directory of PNG images.
    Train { dataset_dir: PathBuf },
    /// Hide N secret images inside a cover image.
    Conceal {
        cover: PathBuf,
        secrets: Vec<PathBuf>,
    },
    /// Recover the N secret images from a stego image.
    Reveal { stego: PathBuf },
    /// Evaluate conceal/reveal quality over a dataset directory.
    Evaluate {
        dataset_dir: PathBuf,
        /// Dataset name recorded in the report.
        #[arg(long, default_value = "dataset")]
        name: String,
    },
    /// Merge evaluation reports into a capacity-sweep figure and table.
    Plot { reports: Vec<PathBuf> },
}

fn exit_code_for(err: &InvMihError) -> u8 {
    match err {
        InvMihError::Config(_)
        | InvMihError::Shape { .. }
        | InvMihError::LayoutMismatch(_)
        | InvMihError::CheckpointVersion { .. }
        | InvMihError::CheckpointShape(_) => 1,
        InvMihError::Data(_)
        | InvMihError::Io(_)
        | InvMihError::Image(_)
        | InvMihError::CheckpointChecksum => 2,
        InvMihError::NonFinite { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| InvMihError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train { dataset_dir } => cmd_train(cli, dataset_dir),
        Cmd::Conceal { cover, secrets } => cmd_conceal(cli, cover, secrets),
        Cmd::Reveal { stego } => cmd_reveal(cli, stego),
        Cmd::Evaluate { dataset_dir, name } => cmd_evaluate(cli, dataset_dir, name),
        Cmd::Plot { reports } => cmd_plot(cli, reports),
    }
}

/// Advisory out-dir lock; removed on drop so a finished or failed run never
/// wedges the directory, while two live runs fail fast.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".invmih.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(InvMihError::Data(format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Stage sequence selected by the config, with per-stage lengths.
fn stage_plan(cfg: &RunConfig) -> Vec<(Stage, u64)> {
    match cfg.stage {
        StageSelector::All => vec![
            (Stage::IirWarmup, cfg.iir_warmup_iterations),
            (Stage::IihWarmup, cfg.iih_warmup_iterations),
            (Stage::Joint, cfg.joint_iterations),
        ],
        StageSelector::IirWarmup => vec![(Stage::IirWarmup, cfg.iir_warmup_iterations)],
        StageSelector::IihWarmup => vec![(Stage::IihWarmup, cfg.iih_warmup_iterations)],
        StageSelector::Joint => vec![(Stage::Joint, cfg.joint_iterations)],
    }
}

fn cmd_train(cli: &Cli, dataset_dir: &Path) -> Result<()> {
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;

    // Resume entirely from the checkpoint's config snapshot; a fresh run
    // takes the config file / env / flags.
    let (cfg, mut iir, mut iih, mut adam, mut done) = match &cli.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = ckpt.config()?;
            if cli.config.is_some() {
                eprintln!(
                    "warning: --config ignored; resuming with the configuration stored in {}",
                    path.display()
                );
            }
            let (mut iir, mut iih) = build_models(&cfg)?;
            ckpt.restore(&mut iir, &mut iih)?;
            let adam = Adam {
                m: ckpt.adam_m.clone(),
                v: ckpt.adam_v.clone(),
                t: ckpt.adam_t,
            };
            (cfg, iir, iih, adam, ckpt.iteration)
        }
        None => {
            let cfg = load_config(cli)?;
            let (iir, iih) = build_models(&cfg)?;
            (cfg, iir, iih, Adam::new(), 0)
        }
    };

    println!("effective configuration:");
    for (k, v) in cfg.entries() {
        println!("  {k} = {v}");
    }

    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("metrics.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let save = |iir: &_, iih: &_, adam: &Adam, iteration: u64| -> Result<()> {
        let mut ckpt = Checkpoint::capture(iir, iih, &cfg, iteration);
        ckpt.adam_m = adam.m.clone();
        ckpt.adam_v = adam.v.clone();
        ckpt.adam_t = adam.t;
        // Write-then-rename so a crash mid-save never clobbers the last
        // good checkpoint.
        let tmp = out_dir.join("model.ckpt.tmp");
        ckpt.save(&tmp)?;
        std::fs::rename(&tmp, &ckpt_path)?;
        Ok(())
    };

    let plan = stage_plan(&cfg);
    let total: u64 = plan.iter().map(|(_, n)| n).sum();
    if done >= total && total > 0 {
        println!("checkpoint already covers all {total} planned iterations; nothing to do");
        return Ok(());
    }

    let mut offset = 0u64; // global iteration at the start of the current stage
    for (stage, stage_iters) in plan {
        let stage_done = done.saturating_sub(offset).min(stage_iters);
        let mut local = stage_done;
        if local < stage_iters {
            println!(
                "stage {}: iterations {}..{}",
                stage.as_str(),
                local,
                stage_iters
            );
        }
        while local < stage_iters {
            let chunk = (stage_iters - local).min(cfg.checkpoint_interval.max(1));
            let mut tcfg = TrainConfig::from_run(&cfg, stage)?;
            tcfg.iterations = chunk;
            let mut write_rec = |r: &TrainRecord| {
                use std::io::Write as _;
                let _ = writeln!(log, "{}", r.to_line());
            };
            let result = train_stage(
                &mut iir,
                &mut iih,
                &mut adam,
                &tcfg,
                dataset_dir,
                local,
                Some(&mut write_rec),
            );
            match result {
                Ok(records) => {
                    local += chunk;
                    done = offset + local;
                    save(&iir, &iih, &adam, done)?;
                    if let Some(last) = records.last() {
                        println!("{}", last.to_line());
                    }
                }
                Err(e) => {
                    eprintln!(
                        "training halted at stage {} iteration {}; last good checkpoint: {}",
                        stage.as_str(),
                        local,
                        ckpt_path.display()
                    );
                    return Err(e);
                }
            }
        }
        offset += stage_iters;
    }
    save(&iir, &iih, &adam, total)?;
    println!("training complete; checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn load_models_from_checkpoint(
    cli: &Cli,
) -> Result<(RunConfig, invmih::iir::IirModel<f32>, invmih::iih::IihModel<f32>)> {
    let path = cli.checkpoint.as_ref().ok_or_else(|| {
        InvMihError::Config("this command requires --checkpoint".to_string())
    })?;
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.config()?;
    let (mut iir, mut iih) = build_models(&cfg)?;
    ckpt.restore(&mut iir, &mut iih)?;
    Ok((cfg, iir, iih))
}

fn cmd_conceal(cli: &Cli, cover: &Path, secrets: &[PathBuf]) -> Result<()> {
    let (cfg, iir, iih) = load_models_from_checkpoint(cli)?;
    let n = cfg.n_secrets;
    if secrets.len() != n {
        return Err(InvMihError::Config(format!(
            "checkpoint expects exactly {n} secret images, got {}",
            secrets.len()
        )));
    }
    let cover_img: Array4<f32> = load_png(cover)?;
    let mut secret_imgs = Vec::with_capacity(n);
    for p in secrets {
        let img: Array4<f32> = load_png(p)?;
        if img.dim() != cover_img.dim() {
            return Err(InvMihError::shape(
                "conceal",
                dim_str(cover_img.dim()),
                format!("{} for {}", dim_str(img.dim()), p.display()),
            ));
        }
        secret_imgs.push(img);
    }
    let layout = iir.layout;
    let (_b, _c, h, w) = cover_img.dim();
    if h % (2 * layout.m) != 0 || w % (2 * layout.n) != 0 {
        return Err(InvMihError::shape(
            "conceal",
            format!("dims divisible by {} and {}", 2 * layout.m, 2 * layout.n),
            dim_str(cover_img.dim()),
        ));
    }
    let (msi, _r) = iir.downscale_all(&secret_imgs)?;
    let out = iih.conceal(&cover_img, &msi)?;
    let out_path = cli.out.clone().unwrap_or_else(|| PathBuf::from("stego.png"));
    save_png(&out_path, &out.stego)?;
    println!(
        "stego written to {}; cover/stego PSNR = {:.4} dB, SSIM = {:.6}",
        out_path.display(),
        psnr(&cover_img, &out.stego)?,
        ssim(&cover_img, &out.stego)?
    );
    Ok(())
}

fn cmd_reveal(cli: &Cli, stego: &Path) -> Result<()> {
    let (cfg, iir, iih) = load_models_from_checkpoint(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let stego_img: Array4<f32> = load_png(stego)?;
    let layout = iir.layout;
    let (_b, _c, h, w) = stego_img.dim();
    if h % (2 * layout.m) != 0 || w % (2 * layout.n) != 0 {
        return Err(InvMihError::shape(
            "reveal",
            format!("dims divisible by {} and {}", 2 * layout.m, 2 * layout.n),
            dim_str(stego_img.dim()),
        ));
    }
    let z = sample_normal::<f32>((1, 4 * iih.channels, h / 2, w / 2), seed);
    let (x_ds_hat, _x_c_hat) = iih.reveal(&stego_img, &z)?;
    let recovered = iir.upscale_all(&x_ds_hat, seed.wrapping_add(1), LatentMode::Normal)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    for (k, img) in recovered.iter().enumerate() {
        let clamped = img.mapv(|v| v.clamp(0.0, 1.0));
        let path = out_dir.join(format!("recovered_{k:02}.png"));
        save_png(&path, &clamped)?;
    }
    println!(
        "{} recovered secrets written to {}",
        recovered.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, dataset_dir: &Path, name: &str) -> Result<()> {
    let (cfg, iir, iih) = load_models_from_checkpoint(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let report = evaluate(&iir, &iih, dataset_dir, name, seed)?;
    print!("{}", report.format_table());
    let out_path = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.txt"));
    std::fs::write(&out_path, report.to_text())?;
    println!("report written to {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Capacity-sweep plot
// ---------------------------------------------------------------------------

fn cmd_plot(cli: &Cli, reports: &[PathBuf]) -> Result<()> {
    if reports.is_empty() {
        return Err(InvMihError::Config("plot needs at least one report".into()));
    }
    let mut by_n: Vec<(usize, EvalReport)> = Vec::new();
    for path in reports {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InvMihError::Config(format!("{}: {e}", path.display())))?;
        let report = EvalReport::from_text(&text)
            .map_err(|e| InvMihError::Config(format!("{}: {e}", path.display())))?;
        if let Some(pos) = by_n.iter().position(|(n, _)| *n == report.n_secrets) {
            eprintln!(
                "warning: duplicate report for N = {}; later file {} wins",
                report.n_secrets,
                path.display()
            );
            by_n[pos] = (report.n_secrets, report);
        } else {
            by_n.push((report.n_secrets, report));
        }
    }
    by_n.sort_by_key(|(n, _)| *n);

    let out_path = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep.svg"));
    std::fs::write(&out_path, render_sweep_svg(&by_n))?;

    let mut table = String::new();
    table.push_str(&format!(
        "{:>4} {:>14} {:>10} {:>14} {:>10}\n",
        "N", "cs_psnr", "cs_ssim", "sr_psnr", "sr_ssim"
    ));
    for (n, r) in &by_n {
        table.push_str(&format!(
            "{:>4} {:>14.4} {:>10.6} {:>14.4} {:>10.6}\n",
            n,
            r.cover_stego_psnr_mean,
            r.cover_stego_ssim_mean,
            r.secret_recovery_psnr_mean,
            r.secret_recovery_ssim_mean
        ));
    }
    let table_path = out_path.with_extension("txt");
    std::fs::write(&table_path, &table)?;
    print!("{table}");
    println!(
        "figure written to {}; table to {}",
        out_path.display(),
        table_path.display()
    );
    Ok(())
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 60.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn render_sweep_svg(points: &[(usize, EvalReport)]) -> String {
    let xs: Vec<f64> = points.iter().map(|(n, _)| *n as f64).collect();
    let psnr_series: Vec<(&str, &str, Vec<f64>)> = vec![
        (
            "cover/stego PSNR",
            "#1f77b4",
            points
                .iter()
                .map(|(_, r)| finite_or(r.cover_stego_psnr_mean, 100.0))
                .collect(),
        ),
        (
            "secret/recovery PSNR",
            "#d62728",
            points
                .iter()
                .map(|(_, r)| finite_or(r.secret_recovery_psnr_mean, 100.0))
                .collect(),
        ),
    ];
    let ssim_series: Vec<(&str, &str, Vec<f64>)> = vec![
        (
            "cover/stego SSIM",
            "#2ca02c",
            points.iter().map(|(_, r)| r.cover_stego_ssim_mean).collect(),
        ),
        (
            "secret/recovery SSIM",
            "#9467bd",
            points
                .iter()
                .map(|(_, r)| r.secret_recovery_ssim_mean)
                .collect(),
        ),
    ];

    let (x_min, x_max) = span(&xs);
    let psnr_all: Vec<f64> = psnr_series.iter().flat_map(|(_, _, v)| v.clone()).collect();
    let (p_min, p_max) = span(&psnr_all);
    let inner_w = PLOT_W - MARGIN_L - MARGIN_R;
    let inner_h = PLOT_H - MARGIN_T - MARGIN_B;
    let sx = |x: f64| {
        MARGIN_L
            + if x_max > x_min {
                (x - x_min) / (x_max - x_min) * inner_w
            } else {
                inner_w / 2.0
            }
    };
    let sy_psnr = |y: f64| {
        MARGIN_T
            + if p_max > p_min {
                (1.0 - (y - p_min) / (p_max - p_min)) * inner_h
            } else {
                inner_h / 2.0
            }
    };
    let sy_ssim = |y: f64| MARGIN_T + (1.0 - y.clamp(0.0, 1.0)) * inner_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">Hiding capacity sweep</text>\n",
        PLOT_W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN_B,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{MARGIN_T}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_W - MARGIN_R,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    ));
    // axis labels
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">N secret images</text>\n",
        PLOT_W / 2.0,
        PLOT_H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">PSNR (dB)</text>\n",
        PLOT_H / 2.0,
        PLOT_H / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(90 {} {})\" text-anchor=\"middle\">SSIM</text>\n",
        PLOT_W - 16.0,
        PLOT_H / 2.0,
        PLOT_W - 16.0,
        PLOT_H / 2.0
    ));
    // x ticks at the sample points
    for x in &xs {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            sx(*x),
            PLOT_H - MARGIN_B + 16.0,
            x
        ));
    }
    // y ticks (PSNR left, SSIM right)
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let pv = p_min + frac * (p_max - p_min).max(1e-9);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{:.1}</text>\n",
            MARGIN_L - 6.0,
            sy_psnr(pv) + 4.0,
            pv
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"start\" font-size=\"11\">{:.2}</text>\n",
            PLOT_W - MARGIN_R + 6.0,
            MARGIN_T + (1.0 - frac) * inner_h + 4.0,
            frac
        ));
    }

    let mut draw = |name: &str, color: &str, ys: &[f64], scale: &dyn Fn(f64) -> f64| {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), scale(*y)))
            .collect();
        if pts.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        for p in &pts {
            let (px, py) = p.split_once(',').unwrap();
            svg.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"><title>{name}</title></circle>\n"
            ));
        }
    };
    for (name, color, ys) in &psnr_series {
        draw(name, color, ys, &sy_psnr);
    }
    for (name, color, ys) in &ssim_series {
        draw(name, color, ys, &sy_ssim);
    }

    // legend
    let mut ly = MARGIN_T + 8.0;
    for (name, color, _) in psnr_series.iter().chain(ssim_series.iter()) {
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            MARGIN_L + 8.0,
            ly - 9.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{name}</text>\n",
            MARGIN_L + 22.0,
            ly
        ));
        ly += 16.0;
    }
    svg.push_str("</svg>\n");
    svg
}

fn finite_or(v: f64, fallback: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        fallback
    }
}

fn span(xs: &[f64]) -> (f64, f64) {
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min.is_finite() && max.is_finite() {
        (min, max)
    } else {
        (0.0, 1.0)
    }
}
