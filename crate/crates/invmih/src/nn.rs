//! Invertible coupling blocks and their learnable subnetworks.
//!
//! The coupling block forward map is
//!   l_out = l + phi(h)
//!   h_out = h * exp(s(rho(l_out))) + psi(l_out)
//! and the reverse map is its exact algebraic inverse with the same
//! parameters. `s` is a sigmoid-based clamp keeping the exponent bounded.
//!
//! All forward/backward passes are hand-written over `ndarray`; convolution
//! goes through im2col + gemm.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{InvMihError, Result};
use crate::tensor::{check_finite, dim_str, fc, Scalar};

/// Accumulator for named parameter gradients.
#[derive(Debug, Clone)]
pub struct GradStore<F: Scalar> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new() -> Self {
        GradStore { map: BTreeMap::new() }
    }

    pub fn accumulate(&mut self, name: &str, grad: ArrayD<F>) {
        match self.map.get_mut(name) {
            Some(g) => *g = &*g + &grad,
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.map.iter_mut()
    }

    /// Global L2 norm over every stored gradient.
    pub fn global_norm(&self) -> F {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| *v * *v)
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<F: Scalar> Default for GradStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Architecture hyperparameters of one subnetwork.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubnetConfig {
    /// Total number of convolutions; the last one is linear.
    pub n_layers: usize,
    /// Width of every hidden layer.
    pub growth_channels: usize,
    /// Odd kernel size; spatial shape is preserved with symmetric padding.
    pub kernel_size: usize,
    /// Bound for the exponent clamp in the affine branch.
    pub clamp_constant: f64,
    /// Init scale of the final layer; 0.0 makes each block start as identity.
    pub final_init_scale: f64,
}

impl Default for SubnetConfig {
    fn default() -> Self {
        SubnetConfig {
            n_layers: 5,
            growth_channels: 32,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.0,
        }
    }
}

impl SubnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.growth_channels == 0 {
            return Err(InvMihError::Config(
                "n_layers and growth_channels must be positive".into(),
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(InvMihError::Config(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.clamp_constant <= 0.0 {
            return Err(InvMihError::Config("clamp_constant must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

fn im2col<F: Scalar>(x: &Array4<F>, k: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c * k * k, b * h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                // valid output-x range so that ix = xx + kx - pad is in [0, w)
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for bi in 0..b {
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (bi * h + y) * w;
                        let src = x.slice(s![bi, ci, iy as usize, x0 + kx - pad..x1 + kx - pad]);
                        cols.slice_mut(s![row, base + x0..base + x1]).assign(&src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    cols: &Array2<F>,
    dims: (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, w) = dims;
    let mut out = Array4::<F>::zeros(dims);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for bi in 0..b {
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (bi * h + y) * w;
                        let src = cols.slice(s![row, base + x0..base + x1]);
                        let mut dst =
                            out.slice_mut(s![bi, ci, iy as usize, x0 + kx - pad..x1 + kx - pad]);
                        dst += &src;
                    }
                }
            }
        }
    }
    out
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, init_std: f64, rng: &mut R) -> Self {
        let mut weight = Array4::<F>::zeros((out_ch, in_ch, k, k));
        if init_std > 0.0 && in_ch > 0 {
            let normal = Normal::new(0.0f64, init_std).expect("init std");
            weight.mapv_inplace(|_| fc(normal.sample(rng)));
        }
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (b, c, h, w) = x.dim();
        let (cout, cin, k, _) = self.weight.dim();
        if c != cin {
            return Err(InvMihError::shape(
                "conv2d",
                format!("{} input channels", cin),
                dim_str(x.dim()),
            ));
        }
        let pad = k / 2;
        let mut out = Array4::<F>::zeros((b, cout, h, w));
        if cin == 0 {
            for co in 0..cout {
                out.slice_mut(s![.., co, .., ..]).fill(self.bias[co]);
            }
            return Ok(out);
        }
        let cols = im2col(x, k, pad);
        let w2 = self
            .weight
            .view()
            .into_shape((cout, cin * k * k))
            .expect("weight reshape");
        let out2 = w2.dot(&cols); // (cout, b*h*w)
        for co in 0..cout {
            for bi in 0..b {
                let seg = out2.slice(s![co, bi * h * w..(bi + 1) * h * w]);
                let seg = seg.into_shape((h, w)).expect("reshape");
                out.slice_mut(s![bi, co, .., ..]).assign(&seg);
            }
        }
        for co in 0..cout {
            let bias = self.bias[co];
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bias);
        }
        Ok(out)
    }

    /// Backward pass; returns the input gradient and accumulates parameter
    /// gradients under `prefix`.
    pub fn backward(
        &self,
        x: &Array4<F>,
        grad_out: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> Array4<F> {
        let (b, _c, h, w) = x.dim();
        let (cout, cin, k, _) = self.weight.dim();
        let pad = k / 2;

        // (cout, b*h*w) view of grad_out
        let mut go2 = Array2::<F>::zeros((cout, b * h * w));
        for bi in 0..b {
            let block = grad_out.slice(s![bi, .., .., ..]);
            let block = block.into_shape((cout, h * w)).expect("reshape");
            go2.slice_mut(s![.., bi * h * w..(bi + 1) * h * w]).assign(&block);
        }

        let grad_b = go2.sum_axis(Axis(1));
        grads.accumulate(&format!("{prefix}.bias"), grad_b.into_dyn());

        if cin == 0 {
            grads.accumulate(
                &format!("{prefix}.weight"),
                Array4::<F>::zeros(self.weight.dim()).into_dyn(),
            );
            return Array4::zeros(x.dim());
        }

        let cols = im2col(x, k, pad);
        let grad_w2 = go2.dot(&cols.t()); // (cout, cin*k*k)
        let grad_w = grad_w2
            .into_shape((cout, cin, k, k))
            .expect("grad weight reshape");
        grads.accumulate(&format!("{prefix}.weight"), grad_w.into_dyn());

        let w2 = self
            .weight
            .view()
            .into_shape((cout, cin * k * k))
            .expect("weight reshape");
        let grad_cols = w2.t().dot(&go2);
        col2im(&grad_cols, x.dim(), k, pad)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.weight"), self.weight.view().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view().into_dyn());
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&format!("{prefix}.weight"), self.weight.view_mut().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Dense subnetwork
// ---------------------------------------------------------------------------

const LEAKY_SLOPE: f64 = 0.2;

fn leaky_relu<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let slope = fc::<F>(LEAKY_SLOPE);
    x.mapv(|v| if v >= F::zero() { v } else { v * slope })
}

fn leaky_relu_grad<F: Scalar>(pre: &Array4<F>, grad: &Array4<F>) -> Array4<F> {
    let slope = fc::<F>(LEAKY_SLOPE);
    let mut g = grad.clone();
    g.zip_mut_with(pre, |gv, pv| {
        if *pv < F::zero() {
            *gv = *gv * slope;
        }
    });
    g
}

/// Densely connected convolutional subnetwork: layer k sees the input
/// concatenated with every previous hidden output; the final layer is linear.
#[derive(Debug, Clone)]
pub struct Subnet<F: Scalar> {
    pub convs: Vec<Conv2d<F>>,
    pub in_ch: usize,
    pub out_ch: usize,
}

#[derive(Debug)]
pub struct SubnetCache<F: Scalar> {
    layer_inputs: Vec<Array4<F>>,
    preacts: Vec<Array4<F>>,
}

impl<F: Scalar> Subnet<F> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, cfg: &SubnetConfig, rng: &mut R) -> Self {
        let k = cfg.kernel_size;
        let g = cfg.growth_channels;
        let mut convs = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers.saturating_sub(1) {
            let cin = in_ch + i * g;
            let fan_in = (cin * k * k).max(1);
            let std = (2.0 / fan_in as f64).sqrt();
            convs.push(Conv2d::new(cin, g, k, std, rng));
        }
        let cin = in_ch + (cfg.n_layers - 1) * g;
        convs.push(Conv2d::new(cin, out_ch, k, cfg.final_init_scale, rng));
        Subnet { convs, in_ch, out_ch }
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.num_params()).sum()
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        if x.dim().1 != self.in_ch {
            return Err(InvMihError::shape(
                "subnet_forward",
                format!("{} input channels", self.in_ch),
                dim_str(x.dim()),
            ));
        }
        Ok(())
    }

    /// Forward pass without cache.
    pub fn infer(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let n = self.convs.len();
        let mut cur = x.clone();
        for conv in &self.convs[..n - 1] {
            let z = conv.forward(&cur)?;
            let a = leaky_relu(&z);
            cur = ndarray::concatenate(Axis(1), &[cur.view(), a.view()]).expect("concat");
        }
        self.convs[n - 1].forward(&cur)
    }

    /// Forward pass caching everything the backward pass needs.
    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, SubnetCache<F>)> {
        self.check_input(x)?;
        let n = self.convs.len();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n - 1);
        let mut cur = x.clone();
        for conv in &self.convs[..n - 1] {
            layer_inputs.push(cur.clone());
            let z = conv.forward(&cur)?;
            let a = leaky_relu(&z);
            preacts.push(z);
            cur = ndarray::concatenate(Axis(1), &[cur.view(), a.view()]).expect("concat");
        }
        layer_inputs.push(cur.clone());
        let out = self.convs[n - 1].forward(&cur)?;
        Ok((out, SubnetCache { layer_inputs, preacts }))
    }

    /// Backward pass; returns grad w.r.t. the subnetwork input.
    pub fn backward(
        &self,
        cache: &SubnetCache<F>,
        grad_out: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> Array4<F> {
        let n = self.convs.len();
        let mut g_cat = self.convs[n - 1].backward(
            &cache.layer_inputs[n - 1],
            grad_out,
            grads,
            &format!("{prefix}.conv{}", n - 1),
        );
        for i in (0..n - 1).rev() {
            let split = cache.layer_inputs[i].dim().1;
            let g_prev = g_cat.slice(s![.., ..split, .., ..]).to_owned();
            let g_a = g_cat.slice(s![.., split.., .., ..]).to_owned();
            let g_z = leaky_relu_grad(&cache.preacts[i], &g_a);
            let g_in = self.convs[i].backward(
                &cache.layer_inputs[i],
                &g_z,
                grads,
                &format!("{prefix}.conv{i}"),
            );
            g_cat = g_prev + g_in;
        }
        g_cat
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit_params(&format!("{prefix}.conv{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params_mut(&format!("{prefix}.conv{i}"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Clamped scale
// ---------------------------------------------------------------------------

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// s(u) = c * (2*sigmoid(u) - 1), elementwise; output lies in (-c, c).
pub fn clamp_scale<F: Scalar>(u: &Array4<F>, clamp_constant: F) -> Array4<F> {
    let two = fc::<F>(2.0);
    u.mapv(|v| clamp_constant * (two * sigmoid(v) - F::one()))
}

/// ds/du = 2c * sigmoid(u) * (1 - sigmoid(u)).
pub fn clamp_scale_grad<F: Scalar>(u: &Array4<F>, clamp_constant: F) -> Array4<F> {
    let two = fc::<F>(2.0);
    u.mapv(|v| {
        let sg = sigmoid(v);
        two * clamp_constant * sg * (F::one() - sg)
    })
}

// ---------------------------------------------------------------------------
// Coupling block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InvBlock<F: Scalar> {
    pub phi: Subnet<F>,
    pub rho: Subnet<F>,
    pub psi: Subnet<F>,
    pub clamp: F,
}

#[derive(Debug)]
pub struct BlockForwardCache<F: Scalar> {
    phi: SubnetCache<F>,
    rho: SubnetCache<F>,
    psi: SubnetCache<F>,
    h_in: Array4<F>,
    rho_out: Array4<F>,
    exp_s: Array4<F>,
}

#[derive(Debug)]
pub struct BlockReverseCache<F: Scalar> {
    phi: SubnetCache<F>,
    rho: SubnetCache<F>,
    psi: SubnetCache<F>,
    h_rec: Array4<F>,
    rho_out: Array4<F>,
    exp_neg_s: Array4<F>,
}

impl<F: Scalar> InvBlock<F> {
    /// `ch_l` is the additive branch width, `ch_h` the affine branch width.
    pub fn new<R: Rng>(ch_l: usize, ch_h: usize, cfg: &SubnetConfig, rng: &mut R) -> Self {
        InvBlock {
            phi: Subnet::new(ch_h, ch_l, cfg, rng),
            rho: Subnet::new(ch_l, ch_h, cfg, rng),
            psi: Subnet::new(ch_l, ch_h, cfg, rng),
            clamp: fc(cfg.clamp_constant),
        }
    }

    pub fn num_params(&self) -> usize {
        self.phi.num_params() + self.rho.num_params() + self.psi.num_params()
    }

    pub fn forward(&self, l: &Array4<F>, h: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        let l_out = l + &self.phi.infer(h)?;
        let sc = clamp_scale(&self.rho.infer(&l_out)?, self.clamp);
        let h_out = h * &sc.mapv(F::exp) + &self.psi.infer(&l_out)?;
        Ok((l_out, h_out))
    }

    pub fn reverse(&self, l_out: &Array4<F>, h_out: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        let sc = clamp_scale(&self.rho.infer(l_out)?, self.clamp);
        let h = (h_out - &self.psi.infer(l_out)?) * &sc.mapv(|v| (-v).exp());
        let l = l_out - &self.phi.infer(&h)?;
        Ok((l, h))
    }

    pub fn forward_cached(
        &self,
        l: &Array4<F>,
        h: &Array4<F>,
    ) -> Result<((Array4<F>, Array4<F>), BlockForwardCache<F>)> {
        let (phi_out, phi_cache) = self.phi.forward(h)?;
        let l_out = l + &phi_out;
        let (rho_out, rho_cache) = self.rho.forward(&l_out)?;
        let exp_s = clamp_scale(&rho_out, self.clamp).mapv(F::exp);
        let (psi_out, psi_cache) = self.psi.forward(&l_out)?;
        let h_out = h * &exp_s + &psi_out;
        let cache = BlockForwardCache {
            phi: phi_cache,
            rho: rho_cache,
            psi: psi_cache,
            h_in: h.clone(),
            rho_out,
            exp_s,
        };
        Ok(((l_out, h_out), cache))
    }

    /// Backward through the forward map.
    pub fn backward_forward(
        &self,
        cache: &BlockForwardCache<F>,
        g_l_out: &Array4<F>,
        g_h_out: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> (Array4<F>, Array4<F>) {
        // h_out = h*exp_s + psi(l_out)
        let mut g_l_acc = g_l_out.clone();
        g_l_acc = g_l_acc
            + self
                .psi
                .backward(&cache.psi, g_h_out, grads, &format!("{prefix}.psi"));
        let g_s = g_h_out * &cache.h_in * &cache.exp_s;
        let g_u = g_s * clamp_scale_grad(&cache.rho_out, self.clamp);
        g_l_acc = g_l_acc
            + self
                .rho
                .backward(&cache.rho, &g_u, grads, &format!("{prefix}.rho"));
        // l_out = l + phi(h)
        let g_l = g_l_acc.clone();
        let g_h = g_h_out * &cache.exp_s
            + self
                .phi
                .backward(&cache.phi, &g_l_acc, grads, &format!("{prefix}.phi"));
        (g_l, g_h)
    }

    pub fn reverse_cached(
        &self,
        l_out: &Array4<F>,
        h_out: &Array4<F>,
    ) -> Result<((Array4<F>, Array4<F>), BlockReverseCache<F>)> {
        let (rho_out, rho_cache) = self.rho.forward(l_out)?;
        let exp_neg_s = clamp_scale(&rho_out, self.clamp).mapv(|v| (-v).exp());
        let (psi_out, psi_cache) = self.psi.forward(l_out)?;
        let h = (h_out - &psi_out) * &exp_neg_s;
        let (phi_out, phi_cache) = self.phi.forward(&h)?;
        let l = l_out - &phi_out;
        let cache = BlockReverseCache {
            phi: phi_cache,
            rho: rho_cache,
            psi: psi_cache,
            h_rec: h.clone(),
            rho_out,
            exp_neg_s,
        };
        Ok(((l, h), cache))
    }

    /// Backward through the reverse map (used when training the reveal path).
    pub fn backward_reverse(
        &self,
        cache: &BlockReverseCache<F>,
        g_l: &Array4<F>,
        g_h: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> (Array4<F>, Array4<F>) {
        // l = l_out - phi(h)
        let mut g_l_out = g_l.clone();
        let neg_g_l = g_l.mapv(|v| -v);
        let mut g_h_acc = g_h
            + &self
                .phi
                .backward(&cache.phi, &neg_g_l, grads, &format!("{prefix}.phi"));
        // h = (h_out - psi(l_out)) * exp(-s)
        let g_h_out = &g_h_acc * &cache.exp_neg_s;
        let neg = g_h_out.mapv(|v| -v);
        g_l_out = g_l_out
            + self
                .psi
                .backward(&cache.psi, &neg, grads, &format!("{prefix}.psi"));
        g_h_acc = g_h_acc * &cache.h_rec;
        let g_s = g_h_acc.mapv(|v| -v);
        let g_u = g_s * clamp_scale_grad(&cache.rho_out, self.clamp);
        g_l_out = g_l_out
            + self
                .rho
                .backward(&cache.rho, &g_u, grads, &format!("{prefix}.rho"));
        (g_l_out, g_h_out)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.phi.visit_params(&format!("{prefix}.phi"), f);
        self.rho.visit_params(&format!("{prefix}.rho"), f);
        self.psi.visit_params(&format!("{prefix}.psi"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.phi.visit_params_mut(&format!("{prefix}.phi"), f);
        self.rho.visit_params_mut(&format!("{prefix}.rho"), f);
        self.psi.visit_params_mut(&format!("{prefix}.psi"), f);
    }
}

// ---------------------------------------------------------------------------
// Block stacks
// ---------------------------------------------------------------------------

/// A chain of coupling blocks sharing one branch-channel layout.
#[derive(Debug, Clone)]
pub struct InvBlockStack<F: Scalar> {
    pub blocks: Vec<InvBlock<F>>,
}

pub struct StackForwardCache<F: Scalar>(Vec<BlockForwardCache<F>>);
pub struct StackReverseCache<F: Scalar>(Vec<BlockReverseCache<F>>);

impl<F: Scalar> InvBlockStack<F> {
    pub fn new<R: Rng>(
        n_blocks: usize,
        ch_l: usize,
        ch_h: usize,
        cfg: &SubnetConfig,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| InvBlock::new(ch_l, ch_h, cfg, rng))
            .collect();
        InvBlockStack { blocks }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.num_params()).sum()
    }

    pub fn forward(&self, l: &Array4<F>, h: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        let mut l = l.clone();
        let mut h = h.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (nl, nh) = block.forward(&l, &h)?;
            check_finite(&nl, &format!("invblock {i} forward (l)"))?;
            check_finite(&nh, &format!("invblock {i} forward (h)"))?;
            l = nl;
            h = nh;
        }
        Ok((l, h))
    }

    pub fn reverse(&self, l: &Array4<F>, h: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        let mut l = l.clone();
        let mut h = h.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (nl, nh) = block.reverse(&l, &h)?;
            check_finite(&nl, &format!("invblock {i} reverse (l)"))?;
            check_finite(&nh, &format!("invblock {i} reverse (h)"))?;
            l = nl;
            h = nh;
        }
        Ok((l, h))
    }

    pub fn forward_cached(
        &self,
        l: &Array4<F>,
        h: &Array4<F>,
    ) -> Result<((Array4<F>, Array4<F>), StackForwardCache<F>)> {
        let mut l = l.clone();
        let mut h = h.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let ((nl, nh), cache) = block.forward_cached(&l, &h)?;
            caches.push(cache);
            l = nl;
            h = nh;
        }
        Ok(((l, h), StackForwardCache(caches)))
    }

    pub fn backward_forward(
        &self,
        cache: &StackForwardCache<F>,
        g_l: &Array4<F>,
        g_h: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> (Array4<F>, Array4<F>) {
        let mut g_l = g_l.clone();
        let mut g_h = g_h.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (nl, nh) = block.backward_forward(
                &cache.0[i],
                &g_l,
                &g_h,
                grads,
                &format!("{prefix}.block{i}"),
            );
            g_l = nl;
            g_h = nh;
        }
        (g_l, g_h)
    }

    /// Reverse evaluation with caches (blocks applied last-to-first).
    pub fn reverse_cached(
        &self,
        l: &Array4<F>,
        h: &Array4<F>,
    ) -> Result<((Array4<F>, Array4<F>), StackReverseCache<F>)> {
        let mut l = l.clone();
        let mut h = h.clone();
        let mut caches: Vec<Option<BlockReverseCache<F>>> =
            (0..self.blocks.len()).map(|_| None).collect();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let ((nl, nh), cache) = block.reverse_cached(&l, &h)?;
            caches[i] = Some(cache);
            l = nl;
            h = nh;
        }
        let caches = caches.into_iter().map(|c| c.expect("cache")).collect();
        Ok(((l, h), StackReverseCache(caches)))
    }

    /// Backward through `reverse_cached`: grads of the reverse outputs map to
    /// grads of the reverse inputs (the stack outputs).
    pub fn backward_reverse(
        &self,
        cache: &StackReverseCache<F>,
        g_l: &Array4<F>,
        g_h: &Array4<F>,
        grads: &mut GradStore<F>,
        prefix: &str,
    ) -> (Array4<F>, Array4<F>) {
        let mut g_l = g_l.clone();
        let mut g_h = g_h.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (nl, nh) = block.backward_reverse(
                &cache.0[i],
                &g_l,
                &g_h,
                grads,
                &format!("{prefix}.block{i}"),
            );
            g_l = nl;
            g_h = nh;
        }
        (g_l, g_h)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit_params(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params_mut(&format!("{prefix}.block{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        Array4::from_shape_simple_fn(dims, || normal.sample(rng))
    }

    fn small_cfg() -> SubnetConfig {
        SubnetConfig {
            n_layers: 3,
            growth_channels: 8,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.02,
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut r = rng(0);
        let cfg = SubnetConfig::default();
        let net = Subnet::<f64>::new(9, 3, &cfg, &mut r);
        let x = random_map(&mut r, (2, 9, 8, 8));
        let y = net.infer(&x).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        assert_eq!(y.dim(), (2, 3, 8, 8));
    }

    #[test]
    fn single_layer_subnet_param_count() {
        // 3->8 channels, k=3, bias: 3*8*9 + 8 = 224
        let mut r = rng(1);
        let cfg = SubnetConfig {
            n_layers: 1,
            ..small_cfg()
        };
        let net = Subnet::<f64>::new(3, 8, &cfg, &mut r);
        assert_eq!(net.num_params(), 224);
    }

    #[test]
    fn subnet_shape_contract() {
        let mut r = rng(2);
        let net = Subnet::<f64>::new(9, 3, &small_cfg(), &mut r);
        let x = random_map(&mut r, (2, 9, 16, 16));
        assert_eq!(net.infer(&x).unwrap().dim(), (2, 3, 16, 16));
    }

    #[test]
    fn subnet_channel_mismatch_is_error() {
        let mut r = rng(3);
        let net = Subnet::<f64>::new(9, 3, &small_cfg(), &mut r);
        let x = random_map(&mut r, (1, 4, 8, 8));
        assert!(net.infer(&x).is_err());
    }

    #[test]
    fn clamp_scale_examples() {
        let u = Array4::from_elem((1, 1, 1, 1), 0.0f64);
        assert_eq!(clamp_scale(&u, 2.0)[[0, 0, 0, 0]], 0.0);
        let u = Array4::from_elem((1, 1, 1, 1), 50.0f64);
        assert!((clamp_scale(&u, 2.0)[[0, 0, 0, 0]] - 2.0).abs() < 1e-12);
        let u = Array4::from_elem((1, 1, 1, 1), 1.0f64);
        let got = clamp_scale(&u, 2.0)[[0, 0, 0, 0]];
        assert!((got - 0.924234).abs() < 1e-5, "got {got}");
    }

    #[test]
    fn zero_subnet_block_is_identity() {
        let mut r = rng(4);
        let cfg = SubnetConfig {
            final_init_scale: 0.0,
            ..small_cfg()
        };
        let block = InvBlock::<f64>::new(3, 9, &cfg, &mut r);
        let l = random_map(&mut r, (1, 3, 8, 8));
        let h = random_map(&mut r, (1, 9, 8, 8));
        let (lo, ho) = block.forward(&l, &h).unwrap();
        assert_eq!(max_abs_diff(&lo, &l), 0.0);
        assert_eq!(max_abs_diff(&ho, &h), 0.0);
        let (li, hi) = block.reverse(&l, &h).unwrap();
        assert_eq!(max_abs_diff(&li, &l), 0.0);
        assert_eq!(max_abs_diff(&hi, &h), 0.0);
    }

    #[test]
    fn block_round_trip_double_precision() {
        let mut r = rng(5);
        let block = InvBlock::<f64>::new(3, 9, &small_cfg(), &mut r);
        let l = random_map(&mut r, (2, 3, 8, 8));
        let h = random_map(&mut r, (2, 9, 8, 8));
        let (lo, ho) = block.forward(&l, &h).unwrap();
        let (li, hi) = block.reverse(&lo, &ho).unwrap();
        assert!(max_abs_diff(&li, &l) < 1e-10);
        assert!(max_abs_diff(&hi, &h) < 1e-10);
    }

    /// Identity single-conv subnet: 1->1, k=3, center tap 1.
    fn identity_subnet(r: &mut ChaCha8Rng) -> Subnet<f64> {
        let cfg = SubnetConfig {
            n_layers: 1,
            growth_channels: 4,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.0,
        };
        let mut net = Subnet::<f64>::new(1, 1, &cfg, r);
        net.convs[0].weight[[0, 0, 1, 1]] = 1.0;
        net
    }

    fn zero_subnet(r: &mut ChaCha8Rng) -> Subnet<f64> {
        let cfg = SubnetConfig {
            n_layers: 1,
            growth_channels: 4,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.0,
        };
        Subnet::<f64>::new(1, 1, &cfg, r)
    }

    /// Scalar stubs phi(h)=h, s(rho(.))=0, psi(l)=l: (1,2) -> (3,5) and back.
    #[test]
    fn scalar_stub_block_hand_evaluation() {
        let mut r = rng(12);
        let block = InvBlock {
            phi: identity_subnet(&mut r),
            rho: zero_subnet(&mut r),
            psi: identity_subnet(&mut r),
            clamp: 2.0,
        };
        let l = Array4::from_elem((1, 1, 1, 1), 1.0f64);
        let h = Array4::from_elem((1, 1, 1, 1), 2.0f64);
        let (lo, ho) = block.forward(&l, &h).unwrap();
        // l_out = 1 + 2 = 3; h_out = 2*exp(0) + 3 = 5
        assert!((lo[[0, 0, 0, 0]] - 3.0).abs() < 1e-12);
        assert!((ho[[0, 0, 0, 0]] - 5.0).abs() < 1e-12);
        let (li, hi) = block.reverse(&lo, &ho).unwrap();
        assert!((li[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((hi[[0, 0, 0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn multiplicative_branch_annihilated() {
        // x_h == 0 and psi == 0 => x_h_out == 0 regardless of rho
        let mut r = rng(6);
        let mut block = InvBlock::<f64>::new(3, 9, &small_cfg(), &mut r);
        let n = block.psi.convs.len();
        block.psi.convs[n - 1].weight.fill(0.0);
        block.psi.convs[n - 1].bias.fill(0.0);
        let l = random_map(&mut r, (1, 3, 8, 8));
        let h = Array4::zeros((1, 9, 8, 8));
        let (_, ho) = block.forward(&l, &h).unwrap();
        assert!(ho.iter().all(|v| *v == 0.0));
    }

    /// Central finite differences against analytic grads for a subnet.
    #[test]
    fn subnet_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let cfg = SubnetConfig {
            n_layers: 2,
            growth_channels: 4,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.1,
        };
        let mut net = Subnet::<f64>::new(2, 3, &cfg, &mut r);
        let x = random_map(&mut r, (1, 2, 5, 5));
        let w = random_map(&mut r, (1, 3, 5, 5));

        let loss = |net: &Subnet<f64>, x: &Array4<f64>| -> f64 {
            (net.infer(x).unwrap() * &w).sum()
        };

        let (out, cache) = net.forward(&x).unwrap();
        assert_eq!(out.dim(), (1, 3, 5, 5));
        let mut grads = GradStore::new();
        let g_in = net.backward(&cache, &w, &mut grads, "net");

        // input gradient
        let eps = 1e-5;
        let mut x_pert = x.clone();
        for idx in [[0, 0, 2, 2], [0, 1, 0, 4], [0, 0, 4, 1]] {
            let orig = x_pert[idx];
            x_pert[idx] = orig + eps;
            let lp = loss(&net, &x_pert);
            x_pert[idx] = orig - eps;
            let lm = loss(&net, &x_pert);
            x_pert[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = g_in[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(1e-8) < 1e-4,
                "input grad mismatch: fd {fd} vs analytic {an}"
            );
        }

        // one weight gradient per conv
        for ci in 0..net.convs.len() {
            let name = format!("net.conv{ci}.weight");
            let an = grads.get(&name).unwrap()[[0, 0, 1, 1]];
            let orig = net.convs[ci].weight[[0, 0, 1, 1]];
            net.convs[ci].weight[[0, 0, 1, 1]] = orig + eps;
            let lp = loss(&net, &x);
            net.convs[ci].weight[[0, 0, 1, 1]] = orig - eps;
            let lm = loss(&net, &x);
            net.convs[ci].weight[[0, 0, 1, 1]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - an).abs() / fd.abs().max(1e-8) < 1e-4,
                "weight grad mismatch ({name}): fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn block_forward_gradient_matches_finite_differences() {
        let mut r = rng(8);
        let cfg = SubnetConfig {
            n_layers: 2,
            growth_channels: 4,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.1,
        };
        let block = InvBlock::<f64>::new(1, 2, &cfg, &mut r);
        let l = random_map(&mut r, (1, 1, 4, 4));
        let h = random_map(&mut r, (1, 2, 4, 4));
        let wl = random_map(&mut r, (1, 1, 4, 4));
        let wh = random_map(&mut r, (1, 2, 4, 4));

        let loss = |l: &Array4<f64>, h: &Array4<f64>| -> f64 {
            let (lo, ho) = block.forward(l, h).unwrap();
            (lo * &wl).sum() + (ho * &wh).sum()
        };

        let (_, cache) = block.forward_cached(&l, &h).unwrap();
        let mut grads = GradStore::new();
        let (g_l, g_h) = block.backward_forward(&cache, &wl, &wh, &mut grads, "b");

        let eps = 1e-6;
        for idx in [[0, 0, 1, 2], [0, 0, 3, 0]] {
            let mut lp = l.clone();
            lp[idx] += eps;
            let mut lm = l.clone();
            lm[idx] -= eps;
            let fd = (loss(&lp, &h) - loss(&lm, &h)) / (2.0 * eps);
            assert!((fd - g_l[idx]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        for idx in [[0, 1, 2, 2], [0, 0, 0, 3]] {
            let mut hp = h.clone();
            hp[idx] += eps;
            let mut hm = h.clone();
            hm[idx] -= eps;
            let fd = (loss(&l, &hp) - loss(&l, &hm)) / (2.0 * eps);
            assert!((fd - g_h[idx]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn block_reverse_gradient_matches_finite_differences() {
        let mut r = rng(9);
        let cfg = SubnetConfig {
            n_layers: 2,
            growth_channels: 4,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.1,
        };
        let block = InvBlock::<f64>::new(1, 2, &cfg, &mut r);
        let lo = random_map(&mut r, (1, 1, 4, 4));
        let ho = random_map(&mut r, (1, 2, 4, 4));
        let wl = random_map(&mut r, (1, 1, 4, 4));
        let wh = random_map(&mut r, (1, 2, 4, 4));

        let loss = |lo: &Array4<f64>, ho: &Array4<f64>| -> f64 {
            let (li, hi) = block.reverse(lo, ho).unwrap();
            (li * &wl).sum() + (hi * &wh).sum()
        };

        let (_, cache) = block.reverse_cached(&lo, &ho).unwrap();
        let mut grads = GradStore::new();
        let (g_lo, g_ho) = block.backward_reverse(&cache, &wl, &wh, &mut grads, "b");

        let eps = 1e-6;
        for idx in [[0, 0, 1, 2], [0, 0, 3, 0]] {
            let mut lp = lo.clone();
            lp[idx] += eps;
            let mut lm = lo.clone();
            lm[idx] -= eps;
            let fd = (loss(&lp, &ho) - loss(&lm, &ho)) / (2.0 * eps);
            assert!((fd - g_lo[idx]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        for idx in [[0, 1, 2, 2], [0, 0, 0, 3]] {
            let mut hp = ho.clone();
            hp[idx] += eps;
            let mut hm = ho.clone();
            hm[idx] -= eps;
            let fd = (loss(&lo, &hp) - loss(&lo, &hm)) / (2.0 * eps);
            assert!((fd - g_ho[idx]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn stack_round_trip() {
        let mut r = rng(10);
        let stack = InvBlockStack::<f64>::new(8, 3, 9, &small_cfg(), &mut r);
        let l = random_map(&mut r, (1, 3, 8, 8));
        let h = random_map(&mut r, (1, 9, 8, 8));
        let (lo, ho) = stack.forward(&l, &h).unwrap();
        let (li, hi) = stack.reverse(&lo, &ho).unwrap();
        assert!(max_abs_diff(&li, &l) < 1e-10);
        assert!(max_abs_diff(&hi, &h) < 1e-10);
    }

    #[test]
    fn zero_channel_branch_supported() {
        // layout 1x1 gives a zero-width high branch
        let mut r = rng(11);
        let stack = InvBlockStack::<f64>::new(2, 3, 0, &small_cfg(), &mut r);
        let l = random_map(&mut r, (1, 3, 8, 8));
        let h = Array4::zeros((1, 0, 8, 8));
        let (lo, ho) = stack.forward(&l, &h).unwrap();
        assert_eq!(ho.dim(), (1, 0, 8, 8));
        let (li, _) = stack.reverse(&lo, &ho).unwrap();
        assert!(max_abs_diff(&li, &l) < 1e-10);
    }
}
