//! Image-quality metrics and dataset-level evaluation.
//!
//! PSNR is computed over all pixels and channels against the [0,1] range.
//! SSIM uses one pinned convention throughout: per-channel 11x11 Gaussian
//! window with sigma 1.5, K1 = 0.01, K2 = 0.03, valid (fully inside) windows
//! only, channel scores averaged.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Array4, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{InvMihError, Result};
use crate::iih::IihModel;
use crate::iir::IirModel;
use crate::image_io::{center_crop, list_images, load_png};
use crate::latent::{sample_normal, LatentMode};
use crate::tensor::{dim_str, Scalar};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; identical inputs give +infinity.
pub fn psnr<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(InvMihError::shape("psnr", dim_str(a.dim()), dim_str(b.dim())));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn gaussian_window() -> Array1<f64> {
    let mut g = Array1::<f64>::zeros(SSIM_WINDOW);
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.sum();
    g.mapv_into(|v| v / s)
}

/// Separable valid-mode Gaussian filtering of a 2-D image.
fn gauss_valid(x: &Array2<f64>, g: &Array1<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for t in 0..k {
                acc += g[t] * x[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for t in 0..k {
                acc += g[t] * rows[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean structural similarity; symmetric, 1 for identical inputs.
pub fn ssim<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(InvMihError::shape("ssim", dim_str(a.dim()), dim_str(b.dim())));
    }
    let (bs, cs, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(InvMihError::shape(
            "ssim",
            format!("dims >= {SSIM_WINDOW}"),
            dim_str(a.dim()),
        ));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for bi in 0..bs {
        for ci in 0..cs {
            let x = a.slice(s![bi, ci, .., ..]).mapv(|v| v.to_f64().unwrap());
            let y = b.slice(s![bi, ci, .., ..]).mapv(|v| v.to_f64().unwrap());
            let mu_x = gauss_valid(&x, &g);
            let mu_y = gauss_valid(&y, &g);
            let xx = gauss_valid(&(&x * &x), &g);
            let yy = gauss_valid(&(&y * &y), &g);
            let xy = gauss_valid(&(&x * &y), &g);
            let mut acc = 0.0;
            for ((m_x, m_y), ((e_xx, e_yy), e_xy)) in mu_x
                .iter()
                .zip(mu_y.iter())
                .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
            {
                let var_x = e_xx - m_x * m_x;
                let var_y = e_yy - m_y * m_y;
                let cov = e_xy - m_x * m_y;
                let num = (2.0 * m_x * m_y + c1) * (2.0 * cov + c2);
                let den = (m_x * m_x + m_y * m_y + c1) * (var_x + var_y + c2);
                acc += num / den;
            }
            total += acc / mu_x.len() as f64;
        }
    }
    Ok(total / (bs * cs) as f64)
}

/// Total learnable parameters across both networks.
pub fn count_params<F: Scalar>(iir: &IirModel<F>, iih: &IihModel<F>) -> usize {
    iir.num_params() + iih.num_params()
}

/// Dataset-level aggregates in the shape of the paper's capacity tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub n_secrets: usize,
    pub m: usize,
    pub n: usize,
    pub image_sets: usize,
    pub param_count: usize,
    pub cover_stego_psnr_mean: f64,
    pub cover_stego_psnr_std: f64,
    pub cover_stego_ssim_mean: f64,
    pub cover_stego_ssim_std: f64,
    pub secret_recovery_psnr_mean: f64,
    pub secret_recovery_psnr_std: f64,
    pub secret_recovery_ssim_mean: f64,
    pub secret_recovery_ssim_std: f64,
    /// Wall-clock diagnostic; excluded from the parseable report body.
    pub seconds_per_set: f64,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    /// Serialize as `key = value` lines. The wall-clock figure goes into a
    /// comment so two runs with the same seed produce identical files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("dataset = {}\n", self.dataset));
        out.push_str(&format!("n_secrets = {}\n", self.n_secrets));
        out.push_str(&format!("m = {}\n", self.m));
        out.push_str(&format!("n = {}\n", self.n));
        out.push_str(&format!("image_sets = {}\n", self.image_sets));
        out.push_str(&format!("param_count = {}\n", self.param_count));
        for (k, v) in [
            ("cover_stego_psnr_mean", self.cover_stego_psnr_mean),
            ("cover_stego_psnr_std", self.cover_stego_psnr_std),
            ("cover_stego_ssim_mean", self.cover_stego_ssim_mean),
            ("cover_stego_ssim_std", self.cover_stego_ssim_std),
            ("secret_recovery_psnr_mean", self.secret_recovery_psnr_mean),
            ("secret_recovery_psnr_std", self.secret_recovery_psnr_std),
            ("secret_recovery_ssim_mean", self.secret_recovery_ssim_mean),
            ("secret_recovery_ssim_std", self.secret_recovery_ssim_std),
        ] {
            out.push_str(&format!("{k} = {}\n", fmt_metric(v)));
        }
        out.push_str(&format!("# seconds_per_set = {:.3}\n", self.seconds_per_set));
        out
    }

    pub fn from_text(text: &str) -> Result<EvalReport> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| InvMihError::Data(format!("report line without '=': {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| InvMihError::Data(format!("report missing key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            let raw = get(k)?;
            if raw == "inf" {
                return Ok(f64::INFINITY);
            }
            raw.parse::<f64>()
                .map_err(|_| InvMihError::Data(format!("report key {k}: bad number {raw}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .map_err(|_| InvMihError::Data(format!("report key {k}: bad integer")))
        };
        Ok(EvalReport {
            dataset: get("dataset")?.clone(),
            n_secrets: int("n_secrets")?,
            m: int("m")?,
            n: int("n")?,
            image_sets: int("image_sets")?,
            param_count: int("param_count")?,
            cover_stego_psnr_mean: num("cover_stego_psnr_mean")?,
            cover_stego_psnr_std: num("cover_stego_psnr_std")?,
            cover_stego_ssim_mean: num("cover_stego_ssim_mean")?,
            cover_stego_ssim_std: num("cover_stego_ssim_std")?,
            secret_recovery_psnr_mean: num("secret_recovery_psnr_mean")?,
            secret_recovery_psnr_std: num("secret_recovery_psnr_std")?,
            secret_recovery_ssim_mean: num("secret_recovery_ssim_mean")?,
            secret_recovery_ssim_std: num("secret_recovery_ssim_std")?,
            seconds_per_set: 0.0,
        })
    }

    /// Aligned human-readable table.
    pub fn format_table(&self) -> String {
        format!(
            "dataset: {}  N={} ({}x{})  sets={}  params={}\n\
             {:<18}{:>14}{:>14}\n\
             {:<18}{:>14}{:>14}\n\
             {:<18}{:>14}{:>14}\n",
            self.dataset,
            self.n_secrets,
            self.m,
            self.n,
            self.image_sets,
            self.param_count,
            "pair",
            "PSNR (dB)",
            "SSIM",
            "cover/stego",
            format!(
                "{} ± {}",
                fmt_metric(self.cover_stego_psnr_mean),
                fmt_metric(self.cover_stego_psnr_std)
            ),
            format!(
                "{} ± {}",
                fmt_metric(self.cover_stego_ssim_mean),
                fmt_metric(self.cover_stego_ssim_std)
            ),
            "secret/recovery",
            format!(
                "{} ± {}",
                fmt_metric(self.secret_recovery_psnr_mean),
                fmt_metric(self.secret_recovery_psnr_std)
            ),
            format!(
                "{} ± {}",
                fmt_metric(self.secret_recovery_ssim_mean),
                fmt_metric(self.secret_recovery_ssim_std)
            ),
        )
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if xs.iter().any(|v| v.is_infinite()) {
        // Mixed finite/infinite means collapse to the sentinel; std is 0 only
        // when every sample is the sentinel.
        let all_inf = xs.iter().all(|v| v.is_infinite());
        let mean = if all_inf {
            f64::INFINITY
        } else {
            xs.iter().copied().filter(|v| v.is_finite()).sum::<f64>()
                / xs.iter().filter(|v| v.is_finite()).count() as f64
        };
        return (if all_inf { f64::INFINITY } else { mean }, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

fn clamp01<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()).min(F::one()))
}

fn set_seed(base: u64, idx: u64) -> u64 {
    base ^ (idx + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Evaluate the full conceal/reveal pipeline over a directory of PNGs.
///
/// File names are sorted, shuffled once with the given seed, and consumed as
/// disjoint consecutive groups of N+1 images (cover first, then N secrets).
/// Images whose dimensions are incompatible with the layout are center-cropped
/// to the largest compatible size shared by the group, with a warning.
pub fn evaluate<F: Scalar>(
    iir: &IirModel<F>,
    iih: &IihModel<F>,
    dataset_dir: &Path,
    dataset_name: &str,
    seed: u64,
) -> Result<EvalReport> {
    let layout = iir.layout;
    let n = layout.n_secrets();
    let mut paths = list_images(dataset_dir)?;
    if paths.is_empty() {
        return Err(InvMihError::Data(format!(
            "no PNG images in {}",
            dataset_dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    paths.shuffle(&mut rng);
    if paths.len() < n + 1 {
        return Err(InvMihError::Data(format!(
            "need at least {} images for one evaluation set, found {}",
            n + 1,
            paths.len()
        )));
    }

    let mut cs_psnr = Vec::new();
    let mut cs_ssim = Vec::new();
    let mut sr_psnr = Vec::new();
    let mut sr_ssim = Vec::new();
    let started = Instant::now();
    let mut sets = 0usize;

    for (set_idx, group) in paths.chunks_exact(n + 1).enumerate() {
        let mut imgs: Vec<Array4<F>> = Vec::with_capacity(n + 1);
        let mut ok = true;
        for p in group {
            match load_png::<F>(p) {
                Ok(img) => imgs.push(img),
                Err(e) => {
                    eprintln!("warning: skipping evaluation set: {e}");
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        // Largest size every image in the group supports, rounded down so the
        // Haar transform and the m x n decomposition both fit.
        let div_h = 2 * layout.m;
        let div_w = 2 * layout.n;
        let ht = imgs.iter().map(|i| i.dim().2).min().unwrap() / div_h * div_h;
        let wt = imgs.iter().map(|i| i.dim().3).min().unwrap() / div_w * div_w;
        if ht == 0 || wt == 0 {
            return Err(InvMihError::Data(format!(
                "images too small for layout {}x{} (need at least {div_h}x{div_w})",
                layout.m, layout.n
            )));
        }
        if imgs.iter().any(|i| i.dim().2 != ht || i.dim().3 != wt) {
            eprintln!(
                "warning: center-cropping evaluation set {set_idx} to {ht}x{wt} for layout compatibility"
            );
        }
        let imgs: Vec<Array4<F>> = imgs.iter().map(|i| center_crop(i, ht, wt)).collect();
        let cover = &imgs[0];
        let secrets = &imgs[1..];

        let (msi, _r) = iir.downscale_all(secrets)?;
        let concealed = iih.conceal(cover, &msi)?;
        let z_dims = (1, 4 * iih.channels, ht / 2, wt / 2);
        let z = sample_normal::<F>(z_dims, set_seed(seed, set_idx as u64));
        let (x_ds_hat, _x_c_hat) = iih.reveal(&concealed.stego, &z)?;
        let recovered = iir.upscale_all(
            &x_ds_hat,
            set_seed(seed, set_idx as u64).wrapping_add(1),
            LatentMode::Normal,
        )?;

        cs_psnr.push(psnr(cover, &concealed.stego)?);
        cs_ssim.push(ssim(cover, &concealed.stego)?);
        for (s, r) in secrets.iter().zip(recovered.iter()) {
            let r = clamp01(r);
            sr_psnr.push(psnr(s, &r)?);
            sr_ssim.push(ssim(s, &r)?);
        }
        sets += 1;
    }
    if sets == 0 {
        return Err(InvMihError::Data(
            "no complete evaluation set could be processed".to_string(),
        ));
    }

    let (csp_m, csp_s) = mean_std(&cs_psnr);
    let (css_m, css_s) = mean_std(&cs_ssim);
    let (srp_m, srp_s) = mean_std(&sr_psnr);
    let (srs_m, srs_s) = mean_std(&sr_ssim);
    Ok(EvalReport {
        dataset: dataset_name.to_string(),
        n_secrets: n,
        m: layout.m,
        n: layout.n,
        image_sets: sets,
        param_count: count_params(iir, iih),
        cover_stego_psnr_mean: csp_m,
        cover_stego_psnr_std: csp_s,
        cover_stego_ssim_mean: css_m,
        cover_stego_ssim_std: css_s,
        secret_recovery_psnr_mean: srp_m,
        secret_recovery_psnr_std: srp_s,
        secret_recovery_ssim_mean: srs_m,
        secret_recovery_ssim_std: srs_s,
        seconds_per_set: started.elapsed().as_secs_f64() / sets as f64,
    })
}
