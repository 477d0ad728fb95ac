//! Training-data ingestion: deterministic random patch batches from a
//! directory of PNGs.
//!
//! The batch for a given (seed, step) pair is a pure function of the sorted
//! file list, so interrupted runs resume with the exact sample sequence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{InvMihError, Result};
use crate::image_io::{list_images, load_png, save_png};
use crate::tensor::Scalar;
use crate::transforms::MosaicLayout;

/// One training batch: a cover patch stack and N secret patch stacks, all of
/// shape (batch, 3, patch, patch).
#[derive(Debug, Clone)]
pub struct PatchBatch<F: Scalar> {
    pub cover: Array4<F>,
    pub secrets: Vec<Array4<F>>,
}

fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn hflip<F: Scalar>(x: &mut Array4<F>) {
    x.invert_axis(ndarray::Axis(3));
}

fn vflip<F: Scalar>(x: &mut Array4<F>) {
    x.invert_axis(ndarray::Axis(2));
}

/// Decoded-image cache so one file is never parsed twice per batch; `None`
/// marks files that failed to decode or are smaller than the patch.
struct ImagePool<'a, F: Scalar> {
    paths: &'a [PathBuf],
    patch: usize,
    cache: HashMap<usize, Option<Array4<F>>>,
}

impl<'a, F: Scalar> ImagePool<'a, F> {
    fn get(&mut self, idx: usize) -> Option<&Array4<F>> {
        let patch = self.patch;
        let path = &self.paths[idx];
        self.cache
            .entry(idx)
            .or_insert_with(|| match load_png::<F>(path) {
                Ok(img) => {
                    let (_b, _c, h, w) = img.dim();
                    if h < patch || w < patch {
                        eprintln!(
                            "warning: skipping {} ({h}x{w} smaller than patch {patch})",
                            path.display()
                        );
                        None
                    } else {
                        Some(img)
                    }
                }
                Err(e) => {
                    eprintln!("warning: skipping unreadable image: {e}");
                    None
                }
            })
            .as_ref()
    }
}

/// Draw one deterministic batch of N+1 distinct random-cropped, randomly
/// flipped patches per batch element.
pub fn load_patch_batch<F: Scalar>(
    dataset_dir: &Path,
    layout: &MosaicLayout,
    batch_size: usize,
    patch_size: usize,
    seed: u64,
    step: u64,
) -> Result<PatchBatch<F>> {
    let n = layout.n_secrets();
    let paths = list_images(dataset_dir)?;
    if paths.is_empty() {
        return Err(InvMihError::Data(format!(
            "no PNG images in {}",
            dataset_dir.display()
        )));
    }
    let mut rng = batch_rng(seed, step);
    let mut pool = ImagePool::<F> {
        paths: &paths,
        patch: patch_size,
        cache: HashMap::new(),
    };

    let mut cover = Array4::<F>::zeros((batch_size, 3, patch_size, patch_size));
    let mut secrets = vec![Array4::<F>::zeros((batch_size, 3, patch_size, patch_size)); n];

    for b in 0..batch_size {
        // N+1 distinct images per element, drawn without replacement;
        // unusable files are discarded from the candidate set.
        let mut candidates: Vec<usize> = (0..paths.len()).collect();
        let mut picked = Vec::with_capacity(n + 1);
        while picked.len() < n + 1 {
            if candidates.is_empty() {
                return Err(InvMihError::Data(format!(
                    "dataset {} has fewer than {} usable images of at least {}x{}",
                    dataset_dir.display(),
                    n + 1,
                    patch_size,
                    patch_size
                )));
            }
            let pos = rng.gen_range(0..candidates.len());
            let idx = candidates.swap_remove(pos);
            if pool.get(idx).is_some() {
                picked.push(idx);
            }
        }
        for (slot, idx) in picked.iter().enumerate() {
            let img = pool.get(*idx).unwrap();
            let (_b, _c, h, w) = img.dim();
            let top = rng.gen_range(0..=h - patch_size);
            let left = rng.gen_range(0..=w - patch_size);
            let mut patch = img
                .slice(ndarray::s![.., .., top..top + patch_size, left..left + patch_size])
                .to_owned();
            if rng.gen_bool(0.5) {
                hflip(&mut patch);
            }
            if rng.gen_bool(0.5) {
                vflip(&mut patch);
            }
            let target = if slot == 0 {
                cover.slice_mut(ndarray::s![b..b + 1, .., .., ..])
            } else {
                secrets[slot - 1].slice_mut(ndarray::s![b..b + 1, .., .., ..])
            };
            let mut target = target;
            target.assign(&patch);
        }
    }
    Ok(PatchBatch { cover, secrets })
}

/// Write `count` smooth synthetic RGB PNGs (random low-frequency mixtures)
/// into `dir`; intended for tests and smoke runs.
pub fn write_synthetic_dataset(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let mut img = Array4::<f32>::zeros((1, 3, height, width));
        for c in 0..3 {
            let base: f32 = rng.gen_range(0.2..0.8);
            let gx: f32 = rng.gen_range(-0.3..0.3);
            let gy: f32 = rng.gen_range(-0.3..0.3);
            let waves: Vec<(f32, f32, f32, f32)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.02..0.25),
                        rng.gen_range(0.5..6.0),
                        rng.gen_range(0.5..6.0),
                        rng.gen_range(0.0..std::f32::consts::TAU),
                    )
                })
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let (u, v) = (x as f32 / width as f32, y as f32 / height as f32);
                    let mut val = base + gx * u + gy * v;
                    for (amp, fx, fy, ph) in &waves {
                        val += amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
                    }
                    img[[0, c, y, x]] = val.clamp(0.0, 1.0);
                }
            }
        }
        save_png(&dir.join(format!("synth_{i:04}.png")), &img)?;
    }
    Ok(())
}
