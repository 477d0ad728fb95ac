//! Invertible image hiding: conceal the mosaic secret image inside the cover
//! in the Haar wavelet domain (forward) and reveal it from the stego image
//! with a sampled latent (reverse).
//!
//! The cover occupies the additive branch so the stego stays anchored to the
//! cover at initialization; the mosaic occupies the affine branch.

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::error::{InvMihError, Result};
use crate::nn::{GradStore, InvBlockStack, StackForwardCache, StackReverseCache, SubnetConfig};
use crate::tensor::{dim_str, Scalar};
use crate::transforms::{haar_dwt, haar_idwt, quantize};

/// The hiding network: Haar DWT/IDWT around G coupling blocks with 4C
/// channels on both branches.
#[derive(Debug, Clone)]
pub struct IihModel<F: Scalar> {
    pub stack: InvBlockStack<F>,
    pub subnet_config: SubnetConfig,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ConcealOutput<F: Scalar> {
    /// Quantized stego image on the 1/255 grid.
    pub stego: Array4<F>,
    pub stego_pre_quant: Array4<F>,
    /// Wavelet-domain latent output; discarded after concealment.
    pub r_hide: Array4<F>,
}

pub struct ConcealCache<F: Scalar> {
    stack: StackForwardCache<F>,
}

pub struct RevealCache<F: Scalar> {
    stack: StackReverseCache<F>,
}

impl<F: Scalar> IihModel<F> {
    pub fn new<R: Rng>(n_blocks: usize, cfg: SubnetConfig, channels: usize, rng: &mut R) -> Self {
        let wav_ch = 4 * channels;
        let stack = InvBlockStack::new(n_blocks, wav_ch, wav_ch, &cfg, rng);
        IihModel {
            stack,
            subnet_config: cfg,
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.stack.num_params()
    }

    fn check_pair(&self, x_c: &Array4<F>, x_ds: &Array4<F>) -> Result<()> {
        if x_c.dim() != x_ds.dim() {
            return Err(InvMihError::shape(
                "conceal",
                dim_str(x_c.dim()),
                dim_str(x_ds.dim()),
            ));
        }
        let (_b, c, h, w) = x_c.dim();
        if c != self.channels || h % 2 != 0 || w % 2 != 0 {
            return Err(InvMihError::shape(
                "conceal",
                format!("({} channels, even dims)", self.channels),
                dim_str(x_c.dim()),
            ));
        }
        Ok(())
    }

    /// Conceal the mosaic `x_ds` inside the cover `x_c`.
    pub fn conceal(&self, x_c: &Array4<F>, x_ds: &Array4<F>) -> Result<ConcealOutput<F>> {
        self.check_pair(x_c, x_ds)?;
        let l = haar_dwt(x_c)?;
        let h = haar_dwt(x_ds)?;
        let (l_out, r_hide) = self.stack.forward(&l, &h)?;
        let stego_pre_quant = haar_idwt(&l_out)?;
        let stego = quantize(&stego_pre_quant);
        Ok(ConcealOutput {
            stego,
            stego_pre_quant,
            r_hide,
        })
    }

    /// Reveal (mosaic, cover) estimates from a stego image and latent `z`.
    pub fn reveal(&self, x_stego: &Array4<F>, z: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        let l = haar_dwt(x_stego)?;
        if z.dim() != l.dim() {
            return Err(InvMihError::shape("reveal", dim_str(l.dim()), dim_str(z.dim())));
        }
        let (l0, h0) = self.stack.reverse(&l, z)?;
        let x_c_hat = haar_idwt(&l0)?;
        let x_ds_hat = haar_idwt(&h0)?;
        Ok((x_ds_hat, x_c_hat))
    }

    pub fn conceal_cached(
        &self,
        x_c: &Array4<F>,
        x_ds: &Array4<F>,
    ) -> Result<(ConcealOutput<F>, ConcealCache<F>)> {
        self.check_pair(x_c, x_ds)?;
        let l = haar_dwt(x_c)?;
        let h = haar_dwt(x_ds)?;
        let ((l_out, r_hide), stack) = self.stack.forward_cached(&l, &h)?;
        let stego_pre_quant = haar_idwt(&l_out)?;
        let stego = quantize(&stego_pre_quant);
        Ok((
            ConcealOutput {
                stego,
                stego_pre_quant,
                r_hide,
            },
            ConcealCache { stack },
        ))
    }

    /// Backward through `conceal`: grads of (stego_pre_quant, r_hide) to
    /// grads of (x_c, x_ds).
    pub fn conceal_backward(
        &self,
        cache: &ConcealCache<F>,
        g_stego_pre: &Array4<F>,
        g_r_hide: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> Result<(Array4<F>, Array4<F>)> {
        // idwt is orthonormal: adjoint = dwt
        let g_l_out = haar_dwt(g_stego_pre)?;
        let (g_l, g_h) = self
            .stack
            .backward_forward(&cache.stack, &g_l_out, g_r_hide, grads, prefix);
        Ok((haar_idwt(&g_l)?, haar_idwt(&g_h)?))
    }

    pub fn reveal_cached(
        &self,
        x_stego: &Array4<F>,
        z: &Array4<F>,
    ) -> Result<((Array4<F>, Array4<F>), RevealCache<F>)> {
        let l = haar_dwt(x_stego)?;
        if z.dim() != l.dim() {
            return Err(InvMihError::shape("reveal", dim_str(l.dim()), dim_str(z.dim())));
        }
        let ((l0, h0), stack) = self.stack.reverse_cached(&l, z)?;
        let x_c_hat = haar_idwt(&l0)?;
        let x_ds_hat = haar_idwt(&h0)?;
        Ok(((x_ds_hat, x_c_hat), RevealCache { stack }))
    }

    /// Backward through `reveal`: grads of (x_ds_hat, x_c_hat) to the grad of
    /// the stego input (the latent grad is dropped).
    pub fn reveal_backward(
        &self,
        cache: &RevealCache<F>,
        g_x_ds_hat: &Array4<F>,
        g_x_c_hat: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> Result<Array4<F>> {
        let g_l0 = haar_dwt(g_x_c_hat)?;
        let g_h0 = haar_dwt(g_x_ds_hat)?;
        let (g_l_in, _g_z) = self
            .stack
            .backward_reverse(&cache.stack, &g_l0, &g_h0, grads, prefix);
        haar_idwt(&g_l_in)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.stack.visit_params(prefix, f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.stack.visit_params_mut(prefix, f);
    }
}
