//! Invertible image rescaling: each secret image is decomposed into one
//! low-frequency tile plus high-frequency residual channels, refined by a
//! stack of coupling blocks. The reverse pass upscales a tile back to full
//! resolution given (true or sampled) residual channels.

use ndarray::{concatenate, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{InvMihError, Result};
use crate::latent::{sample_latent, LatentMode};
use crate::nn::{GradStore, InvBlockStack, StackForwardCache, StackReverseCache, SubnetConfig};
use crate::tensor::{dim_str, Scalar};
use crate::transforms::{
    compose, decompose, splice_mosaic, unsplice_mosaic, MosaicLayout, SubbandPair,
};

/// The rescaling network: decomposition + R coupling blocks, shared across
/// all N secrets.
#[derive(Debug, Clone)]
pub struct IirModel<F: Scalar> {
    pub stack: InvBlockStack<F>,
    pub layout: MosaicLayout,
    pub subnet_config: SubnetConfig,
    pub channels: usize,
}

/// Forward output: the downscaled tile and its residual channels.
#[derive(Debug, Clone)]
pub struct IirForwardOutput<F: Scalar> {
    pub tile: Array4<F>,
    pub r_high: Array4<F>,
}

pub struct IirDownscaleCache<F: Scalar> {
    stack: StackForwardCache<F>,
}

pub struct IirUpscaleCache<F: Scalar> {
    stack: StackReverseCache<F>,
}

impl<F: Scalar> IirModel<F> {
    pub fn new<R: Rng>(
        n_blocks: usize,
        layout: MosaicLayout,
        cfg: SubnetConfig,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let mn = layout.n_secrets();
        let stack = InvBlockStack::new(n_blocks, channels, (mn - 1) * channels, &cfg, rng);
        IirModel {
            stack,
            layout,
            subnet_config: cfg,
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.stack.num_params()
    }

    fn check_secret(&self, x: &Array4<F>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        if c != self.channels || h % self.layout.m != 0 || w % self.layout.n != 0 {
            return Err(InvMihError::shape(
                "iir_downscale",
                format!(
                    "({} channels, dims divisible by ({}, {}))",
                    self.channels, self.layout.m, self.layout.n
                ),
                dim_str(x.dim()),
            ));
        }
        Ok(())
    }

    /// Downscale one (batched) secret image to tile + residual channels.
    pub fn downscale(&self, x_s: &Array4<F>) -> Result<IirForwardOutput<F>> {
        self.check_secret(x_s)?;
        let sub = decompose(x_s, &self.layout)?;
        let (tile, r_high) = self.stack.forward(&sub.low, &sub.high)?;
        Ok(IirForwardOutput { tile, r_high })
    }

    /// Upscale a tile back to full resolution given residual channels `z`.
    pub fn upscale(&self, tile: &Array4<F>, z: &Array4<F>) -> Result<Array4<F>> {
        let (low, high) = self.stack.reverse(tile, z)?;
        compose(&SubbandPair { low, high }, &self.layout)
    }

    pub fn downscale_cached(
        &self,
        x_s: &Array4<F>,
    ) -> Result<(IirForwardOutput<F>, IirDownscaleCache<F>)> {
        self.check_secret(x_s)?;
        let sub = decompose(x_s, &self.layout)?;
        let ((tile, r_high), stack) = self.stack.forward_cached(&sub.low, &sub.high)?;
        Ok((IirForwardOutput { tile, r_high }, IirDownscaleCache { stack }))
    }

    /// Backward through `downscale`: grads of (tile, r_high) to grad of x_s.
    pub fn downscale_backward(
        &self,
        cache: &IirDownscaleCache<F>,
        g_tile: &Array4<F>,
        g_r_high: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> Result<Array4<F>> {
        let (g_low, g_high) = self
            .stack
            .backward_forward(&cache.stack, g_tile, g_r_high, grads, prefix);
        // decompose is orthonormal linear: adjoint = inverse
        compose(
            &SubbandPair {
                low: g_low,
                high: g_high,
            },
            &self.layout,
        )
    }

    pub fn upscale_cached(
        &self,
        tile: &Array4<F>,
        z: &Array4<F>,
    ) -> Result<(Array4<F>, IirUpscaleCache<F>)> {
        let ((low, high), stack) = self.stack.reverse_cached(tile, z)?;
        let x = compose(&SubbandPair { low, high }, &self.layout)?;
        Ok((x, IirUpscaleCache { stack }))
    }

    /// Backward through `upscale`: grad of the upscaled image to grads of
    /// (tile, z).
    pub fn upscale_backward(
        &self,
        cache: &IirUpscaleCache<F>,
        g_x: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> Result<(Array4<F>, Array4<F>)> {
        let sub = decompose(g_x, &self.layout)?;
        let (g_tile, g_z) = self
            .stack
            .backward_reverse(&cache.stack, &sub.low, &sub.high, grads, prefix);
        Ok((g_tile, g_z))
    }

    /// Downscale all N secrets with shared weights and splice the tiles
    /// row-major into the mosaic secret image.
    pub fn downscale_all(&self, secrets: &[Array4<F>]) -> Result<(Array4<F>, Vec<Array4<F>>)> {
        let n = self.layout.n_secrets();
        if secrets.len() != n {
            return Err(InvMihError::shape(
                "downscale_all",
                format!("{n} secrets"),
                format!("{} secrets", secrets.len()),
            ));
        }
        let batched = stack_batch(secrets)?;
        let out = self.downscale(&batched)?;
        let tiles = unstack_batch(&out.tile, n);
        let r_list = unstack_batch(&out.r_high, n);
        let msi = splice_mosaic(&tiles, &self.layout)?;
        Ok((msi, r_list))
    }

    /// Unsplice a mosaic and upscale every tile with sampled latents.
    pub fn upscale_all(&self, msi: &Array4<F>, seed: u64, mode: LatentMode) -> Result<Vec<Array4<F>>> {
        let tiles = unsplice_mosaic(msi, &self.layout)?;
        let batched = stack_batch(&tiles)?;
        let (b, _c, h, w) = batched.dim();
        let mn = self.layout.n_secrets();
        let z = sample_latent((b, (mn - 1) * self.channels, h, w), seed, mode);
        let up = self.upscale(&batched, &z)?;
        Ok(unstack_batch(&up, mn))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.stack.visit_params(prefix, f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.stack.visit_params_mut(prefix, f);
    }
}

/// Stack N same-shaped tensors along the batch axis.
pub fn stack_batch<F: Scalar>(items: &[Array4<F>]) -> Result<Array4<F>> {
    if items.is_empty() {
        return Err(InvMihError::shape("stack_batch", ">= 1 tensor", "0 tensors"));
    }
    let first = items[0].dim();
    for it in items {
        if it.dim() != first {
            return Err(InvMihError::shape(
                "stack_batch",
                dim_str(first),
                dim_str(it.dim()),
            ));
        }
    }
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("concat batch"))
}

/// Split a batch of k*n elements into n chunks along the batch axis.
pub fn unstack_batch<F: Scalar>(x: &Array4<F>, n: usize) -> Vec<Array4<F>> {
    let b = x.dim().0;
    debug_assert_eq!(b % n, 0);
    let per = b / n;
    (0..n)
        .map(|i| x.slice(ndarray::s![i * per..(i + 1) * per, .., .., ..]).to_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(scale: f64) -> SubnetConfig {
        SubnetConfig {
            n_layers: 3,
            growth_channels: 8,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: scale,
        }
    }

    fn random_img(seed: u64, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(dims, || r.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_init_equals_decomposition() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let model = IirModel::<f64>::new(4, layout, cfg(0.0), 3, &mut r);
        let x = random_img(1, (1, 3, 16, 16));
        let out = model.downscale(&x).unwrap();
        let sub = decompose(&x, &layout).unwrap();
        assert_eq!(out.tile, sub.low);
        assert_eq!(out.r_high, sub.high);
    }

    #[test]
    fn shape_contract() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let model = IirModel::<f64>::new(2, layout, cfg(0.02), 3, &mut r);
        let x = random_img(3, (1, 3, 32, 32));
        let out = model.downscale(&x).unwrap();
        assert_eq!(out.tile.dim(), (1, 3, 16, 16));
        assert_eq!(out.r_high.dim(), (1, 9, 16, 16));
        let up = model.upscale(&out.tile, &out.r_high).unwrap();
        assert_eq!(up.dim(), (1, 3, 32, 32));
    }

    #[test]
    fn round_trip_with_true_residuals() {
        for (m, n) in [(1usize, 1usize), (2, 2), (2, 3), (3, 4)] {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let layout = MosaicLayout::new(m, n, 4, 4).unwrap();
            let model = IirModel::<f64>::new(8, layout, cfg(0.02), 3, &mut r);
            let x = random_img(5, (1, 3, 4 * m, 4 * n));
            let out = model.downscale(&x).unwrap();
            let up = model.upscale(&out.tile, &out.r_high).unwrap();
            assert!(max_abs_diff(&up, &x) < 1e-10, "layout ({m},{n})");
        }
    }

    #[test]
    fn downscale_all_splices_and_recovers() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let model = IirModel::<f64>::new(2, layout, cfg(0.02), 3, &mut r);
        let secrets: Vec<_> = (0..4).map(|k| random_img(10 + k, (1, 3, 16, 16))).collect();
        let (msi, r_list) = model.downscale_all(&secrets).unwrap();
        assert_eq!(msi.dim(), (1, 3, 16, 16));
        assert_eq!(r_list.len(), 4);
        // unsplice + upscale with the true residuals recovers every secret
        let tiles = unsplice_mosaic(&msi, &layout).unwrap();
        for k in 0..4 {
            let up = model.upscale(&tiles[k], &r_list[k]).unwrap();
            assert!(max_abs_diff(&up, &secrets[k]) < 1e-10);
        }
    }

    #[test]
    fn weight_sharing_permutation_equivariance() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let model = IirModel::<f64>::new(2, layout, cfg(0.02), 3, &mut r);
        let secrets: Vec<_> = (0..4).map(|k| random_img(20 + k, (1, 3, 16, 16))).collect();
        let (_, r_list) = model.downscale_all(&secrets).unwrap();
        let permuted: Vec<_> = [2usize, 0, 3, 1].iter().map(|&i| secrets[i].clone()).collect();
        let (_, r_perm) = model.downscale_all(&permuted).unwrap();
        for (j, &i) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(r_perm[j], r_list[i]); // exact
        }
    }

    #[test]
    fn upscale_all_zero_init_zero_latent_is_smooth_compose() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let model = IirModel::<f64>::new(2, layout, cfg(0.0), 3, &mut r);
        let msi = random_img(9, (1, 3, 16, 16));
        let ups = model.upscale_all(&msi, 0, LatentMode::Zeros).unwrap();
        assert_eq!(ups.len(), 4);
        let tiles = unsplice_mosaic(&msi, &layout).unwrap();
        for (up, tile) in ups.iter().zip(tiles.iter()) {
            let sub = SubbandPair {
                low: tile.clone(),
                high: Array4::zeros((1, 9, 8, 8)),
            };
            let want = compose(&sub, &layout).unwrap();
            assert!(max_abs_diff(up, &want) < 1e-12);
        }
    }

    #[test]
    fn wrong_secret_count_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let model = IirModel::<f64>::new(1, layout, cfg(0.0), 3, &mut r);
        let secrets: Vec<_> = (0..3).map(|k| random_img(k, (1, 3, 16, 16))).collect();
        assert!(model.downscale_all(&secrets).is_err());
    }
}
