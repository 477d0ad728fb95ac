//! The training objective: a Jensen-Shannon distribution-matching term on
//! soft pixel histograms, an L1 restoration term, a bicubic guidance term,
//! a mosaic consistency term, and two concealment terms (pixel and
//! low-frequency). All six terms and their weighted total are reported every
//! evaluation; backward passes are hand-written.

use ndarray::{Array2, Array4, ArrayView1, Axis};

use crate::error::{InvMihError, Result};
use crate::tensor::{dim_str, fc, Scalar};
use crate::transforms::{haar_idwt, MosaicLayout};

/// Regularization weights (lambda1, lambda2, lambda3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 4.0,
            lambda3: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(InvMihError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// The six evaluated terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub js_term: f64,
    pub rec_l1_term: f64,
    pub guide_term: f64,
    pub msi_consistency_term: f64,
    pub conceal_term: f64,
    pub low_freq_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// total = js + l1*rec + l2*guide + l3*msi + conceal + low_freq
    pub fn from_terms(
        js: f64,
        rec: f64,
        guide: f64,
        msi: f64,
        conceal: f64,
        low_freq: f64,
        w: &LossWeights,
    ) -> Self {
        LossBreakdown {
            js_term: js,
            rec_l1_term: rec,
            guide_term: guide,
            msi_consistency_term: msi,
            conceal_term: conceal,
            low_freq_term: low_freq,
            total: js + w.lambda1 * rec + w.lambda2 * guide + w.lambda3 * msi + conceal + low_freq,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.js_term,
            self.rec_l1_term,
            self.guide_term,
            self.msi_consistency_term,
            self.conceal_term,
            self.low_freq_term,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 64;

// ---------------------------------------------------------------------------
// Soft histogram
// ---------------------------------------------------------------------------

/// Triangular-kernel (hat) histogram over [0,1] with `bins` uniform centers,
/// per channel over batch and spatial dims. Rows sum to 1. Out-of-range
/// values count toward the nearest boundary bin (and carry zero gradient
/// there, mirroring the straight-through rounding convention).
pub fn soft_histogram<F: Scalar>(x: &Array4<F>, bins: usize) -> Result<Array2<F>> {
    if bins < 2 {
        return Err(InvMihError::Config("histogram needs >= 2 bins".into()));
    }
    let (b, c, h, w) = x.dim();
    if b * c * h * w == 0 {
        return Err(InvMihError::Data("soft_histogram: empty input".into()));
    }
    let width = 1.0 / (bins as f64 - 1.0);
    let count = fc::<F>((b * h * w) as f64);
    let mut hist = Array2::<F>::zeros((c, bins));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[bi, ci, y, xx]].to_f64().unwrap().clamp(0.0, 1.0);
                    let pos = v / width;
                    let k0 = pos.floor() as isize;
                    for k in [k0, k0 + 1] {
                        if k < 0 || k >= bins as isize {
                            continue;
                        }
                        let t = (v - k as f64 * width) / width;
                        let wgt = (1.0 - t.abs()).max(0.0);
                        if wgt > 0.0 {
                            hist[[ci, k as usize]] = hist[[ci, k as usize]] + fc::<F>(wgt);
                        }
                    }
                }
            }
        }
    }
    hist.mapv_inplace(|v| v / count);
    Ok(hist)
}

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence
// ---------------------------------------------------------------------------

/// JS(p,q) = KL(p||m)/2 + KL(q||m)/2 with m=(p+q)/2, natural log; in [0, ln 2].
pub fn js_divergence<'a, F: Scalar>(p: ArrayView1<'a, F>, q: ArrayView1<'a, F>) -> Result<F> {
    if p.len() != q.len() {
        return Err(InvMihError::shape(
            "js_divergence",
            format!("{} entries", p.len()),
            format!("{} entries", q.len()),
        ));
    }
    // Loose enough for f32 accumulation over large patches; this is a sanity
    // check on normalization, not a numerical tolerance.
    let tol = 1e-4;
    for (name, v) in [("p", &p), ("q", &q)] {
        if v.iter().any(|x| x.to_f64().unwrap() < 0.0) {
            return Err(InvMihError::Data(format!("js_divergence: negative entry in {name}")));
        }
        let sum: f64 = v.iter().map(|x| x.to_f64().unwrap()).sum();
        if (sum - 1.0).abs() > tol {
            return Err(InvMihError::Data(format!(
                "js_divergence: {name} sums to {sum}, not 1"
            )));
        }
    }
    let mut acc = 0.0f64;
    for (pk, qk) in p.iter().zip(q.iter()) {
        let pk = pk.to_f64().unwrap();
        let qk = qk.to_f64().unwrap();
        let mk = 0.5 * (pk + qk);
        if pk > 0.0 {
            acc += 0.5 * pk * (pk / mk).ln();
        }
        if qk > 0.0 {
            acc += 0.5 * qk * (qk / mk).ln();
        }
    }
    Ok(fc(acc.max(0.0)))
}

/// Channel-averaged JS between the soft histograms of two image stacks.
pub fn js_histogram_term<F: Scalar>(a: &Array4<F>, b: &Array4<F>, bins: usize) -> Result<F> {
    let ha = soft_histogram(a, bins)?;
    let hb = soft_histogram(b, bins)?;
    let c = ha.dim().0;
    let mut acc = F::zero();
    for ci in 0..c {
        acc = acc + js_divergence(ha.index_axis(Axis(0), ci), hb.index_axis(Axis(0), ci))?;
    }
    Ok(acc / fc(c as f64))
}

/// Gradients of [`js_histogram_term`] w.r.t. both image stacks.
fn js_histogram_backward<F: Scalar>(
    a: &Array4<F>,
    b: &Array4<F>,
    bins: usize,
) -> Result<(Array4<F>, Array4<F>)> {
    let ha = soft_histogram(a, bins)?;
    let hb = soft_histogram(b, bins)?;
    let c = ha.dim().0;
    let width = 1.0 / (bins as f64 - 1.0);
    // dJS/dp_k = ln(p_k/m_k)/2, dJS/dq_k = ln(q_k/m_k)/2 (zero where the
    // histogram mass is zero)
    let mut dp = Array2::<f64>::zeros((c, bins));
    let mut dq = Array2::<f64>::zeros((c, bins));
    for ci in 0..c {
        for k in 0..bins {
            let pk = ha[[ci, k]].to_f64().unwrap();
            let qk = hb[[ci, k]].to_f64().unwrap();
            let mk = 0.5 * (pk + qk);
            if pk > 0.0 {
                dp[[ci, k]] = 0.5 * (pk / mk).ln();
            }
            if qk > 0.0 {
                dq[[ci, k]] = 0.5 * (qk / mk).ln();
            }
        }
    }
    let grad_for = |x: &Array4<F>, d: &Array2<f64>| -> Array4<F> {
        let (bb, cc, h, w) = x.dim();
        let count = (bb * h * w) as f64;
        let mut g = Array4::<F>::zeros(x.dim());
        for bi in 0..bb {
            for ci in 0..cc {
                for y in 0..h {
                    for xx in 0..w {
                        let raw = x[[bi, ci, y, xx]].to_f64().unwrap();
                        if !(0.0..=1.0).contains(&raw) {
                            continue; // clamped into a boundary bin; zero slope
                        }
                        let v = raw;
                        let pos = v / width;
                        let k0 = pos.floor() as isize;
                        let mut acc = 0.0;
                        for k in [k0, k0 + 1] {
                            if k < 0 || k >= bins as isize {
                                continue;
                            }
                            let t = (v - k as f64 * width) / width;
                            if t.abs() < 1.0 {
                                // d hat(t)/d v = -sign(t)/width
                                let dw = -t.signum() / width;
                                acc += d[[ci, k as usize]] * dw;
                            }
                        }
                        g[[bi, ci, y, xx]] = fc(acc / (count * cc as f64));
                    }
                }
            }
        }
        g
    };
    Ok((grad_for(a, &dp), grad_for(b, &dq)))
}

// ---------------------------------------------------------------------------
// Elementwise losses
// ---------------------------------------------------------------------------

fn check_same_shape<F: Scalar>(a: &Array4<F>, b: &Array4<F>, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(InvMihError::shape(context, dim_str(a.dim()), dim_str(b.dim())));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> F {
    let n = fc::<F>(a.len() as f64);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs())
        .fold(F::zero(), |s, v| s + v)
        / n
}

/// Mean squared error.
pub fn mse<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> F {
    let n = fc::<F>(a.len() as f64);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .fold(F::zero(), |s, v| s + v)
        / n
}

/// d mae(a,b) / da (the b-gradient is its negation).
fn mae_grad<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let n = fc::<F>(a.len() as f64);
    let mut g = Array4::zeros(a.dim());
    ndarray::Zip::from(&mut g).and(a).and(b).for_each(|gv, x, y| {
        *gv = if x > y {
            F::one() / n
        } else if x < y {
            -F::one() / n
        } else {
            F::zero()
        };
    });
    g
}

/// d mse(a,b) / da (the b-gradient is its negation).
fn mse_grad<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let n = fc::<F>(a.len() as f64);
    let two = fc::<F>(2.0);
    let mut g = Array4::zeros(a.dim());
    ndarray::Zip::from(&mut g).and(a).and(b).for_each(|gv, x, y| {
        *gv = two * (*x - *y) / n;
    });
    g
}

/// Extract the Haar ll subband of a pixel-domain image.
fn ll_of<F: Scalar>(x: &Array4<F>) -> Result<Array4<F>> {
    crate::transforms::haar_ll(x)
}

/// Adjoint of [`ll_of`]: embed an ll-shaped gradient back into pixel space.
fn ll_adjoint<F: Scalar>(g_ll: &Array4<F>, channels: usize) -> Result<Array4<F>> {
    let (b, c, h, w) = g_ll.dim();
    debug_assert_eq!(c, channels);
    let mut wav = Array4::<F>::zeros((b, 4 * c, h, w));
    for ci in 0..c {
        wav.slice_mut(ndarray::s![.., ci * 4, .., ..])
            .assign(&g_ll.slice(ndarray::s![.., ci, .., ..]));
    }
    haar_idwt(&wav)
}

// ---------------------------------------------------------------------------
// Bicubic reference downscale
// ---------------------------------------------------------------------------

fn cubic_kernel(t: f64) -> f64 {
    // Catmull-Rom style cubic with a = -0.5
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Anti-aliased separable bicubic weights for integer downscale `factor`.
fn bicubic_weights(out_len: usize, factor: usize) -> Vec<(isize, Vec<f64>)> {
    let s = factor as f64;
    let support = 2.0 * s;
    let mut rows = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * s - 0.5;
        let j0 = (center - support).ceil() as isize;
        let j1 = (center + support).floor() as isize;
        let mut ws: Vec<f64> = (j0..=j1).map(|j| cubic_kernel((j as f64 - center) / s)).collect();
        let sum: f64 = ws.iter().sum();
        for w in ws.iter_mut() {
            *w /= sum;
        }
        rows.push((j0, ws));
    }
    rows
}

/// Bicubic anti-aliased downscale by the layout's (m, n) factors.
pub fn bicubic_downscale<F: Scalar>(x: &Array4<F>, layout: &MosaicLayout) -> Result<Array4<F>> {
    let (b, c, h, w) = x.dim();
    let (m, n) = (layout.m, layout.n);
    if h % m != 0 || w % n != 0 {
        return Err(InvMihError::shape(
            "bicubic_downscale",
            format!("dims divisible by ({m}, {n})"),
            dim_str(x.dim()),
        ));
    }
    let (oh, ow) = (h / m, w / n);
    // rows (height axis)
    let rows = bicubic_weights(oh, m);
    let mut tmp = Array4::<F>::zeros((b, c, oh, w));
    for (i, (j0, ws)) in rows.iter().enumerate() {
        for (dj, wgt) in ws.iter().enumerate() {
            let j = (*j0 + dj as isize).clamp(0, h as isize - 1) as usize;
            let wgt = fc::<F>(*wgt);
            let src = x.slice(ndarray::s![.., .., j, ..]);
            let mut dst = tmp.slice_mut(ndarray::s![.., .., i, ..]);
            dst.zip_mut_with(&src, |d, s| *d = *d + wgt * *s);
        }
    }
    // cols (width axis)
    let cols = bicubic_weights(ow, n);
    let mut out = Array4::<F>::zeros((b, c, oh, ow));
    for (i, (j0, ws)) in cols.iter().enumerate() {
        for (dj, wgt) in ws.iter().enumerate() {
            let j = (*j0 + dj as isize).clamp(0, w as isize - 1) as usize;
            let wgt = fc::<F>(*wgt);
            let src = tmp.slice(ndarray::s![.., .., .., j]);
            let mut dst = out.slice_mut(ndarray::s![.., .., .., i]);
            dst.zip_mut_with(&src, |d, s| *d = *d + wgt * *s);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

/// All image inputs of the objective, borrowed.
pub struct LossInputs<'a, F: Scalar> {
    /// Original secrets (stacked along the batch axis).
    pub x_s: &'a Array4<F>,
    /// Recovered secrets.
    pub x_rs: &'a Array4<F>,
    /// Mosaic secret image.
    pub x_ds: &'a Array4<F>,
    /// Revealed mosaic estimate.
    pub x_ds_hat: &'a Array4<F>,
    /// Bicubic reference mosaic.
    pub x_ref: &'a Array4<F>,
    /// Cover image.
    pub x_c: &'a Array4<F>,
    /// Stego image before quantization.
    pub x_stego_pre_quant: &'a Array4<F>,
}

/// Gradients of the total loss w.r.t. every image input.
pub struct LossGrads<F: Scalar> {
    pub g_x_s: Array4<F>,
    pub g_x_rs: Array4<F>,
    pub g_x_ds: Array4<F>,
    pub g_x_ds_hat: Array4<F>,
    pub g_x_ref: Array4<F>,
    pub g_x_c: Array4<F>,
    pub g_x_stego_pre_quant: Array4<F>,
}

fn check_loss_shapes<F: Scalar>(inp: &LossInputs<'_, F>) -> Result<()> {
    check_same_shape(inp.x_s, inp.x_rs, "total_loss (x_s vs x_rs)")?;
    check_same_shape(inp.x_ds, inp.x_ds_hat, "total_loss (x_ds vs x_ds_hat)")?;
    check_same_shape(inp.x_ds, inp.x_ref, "total_loss (x_ds vs x_ref)")?;
    check_same_shape(inp.x_c, inp.x_stego_pre_quant, "total_loss (x_c vs stego)")?;
    Ok(())
}

/// Evaluate the six loss terms and the weighted total.
pub fn total_loss<F: Scalar>(
    inp: &LossInputs<'_, F>,
    weights: &LossWeights,
    bins: usize,
) -> Result<LossBreakdown> {
    check_loss_shapes(inp)?;
    let js = js_histogram_term(inp.x_s, inp.x_rs, bins)?.to_f64().unwrap();
    let rec = mae(inp.x_s, inp.x_rs).to_f64().unwrap();
    let guide = mse(inp.x_ds, inp.x_ref).to_f64().unwrap();
    let msi = mse(inp.x_ds, inp.x_ds_hat).to_f64().unwrap();
    let conceal = mse(inp.x_c, inp.x_stego_pre_quant).to_f64().unwrap();
    let low = mse(&ll_of(inp.x_c)?, &ll_of(inp.x_stego_pre_quant)?)
        .to_f64()
        .unwrap();
    let breakdown = LossBreakdown::from_terms(js, rec, guide, msi, conceal, low, weights);
    if !breakdown.is_finite() {
        return Err(InvMihError::NonFinite {
            context: format!("total_loss: {breakdown:?}"),
        });
    }
    Ok(breakdown)
}

/// Analytic gradients of [`total_loss`] w.r.t. every image input.
pub fn total_loss_backward<F: Scalar>(
    inp: &LossInputs<'_, F>,
    weights: &LossWeights,
    bins: usize,
) -> Result<LossGrads<F>> {
    check_loss_shapes(inp)?;
    let l1 = fc::<F>(weights.lambda1);
    let l2 = fc::<F>(weights.lambda2);
    let l3 = fc::<F>(weights.lambda3);

    // js term
    let (g_s_js, g_rs_js) = js_histogram_backward(inp.x_s, inp.x_rs, bins)?;
    // rec term (weighted)
    let g_s_rec = mae_grad(inp.x_s, inp.x_rs);
    let g_x_s = g_s_js + g_s_rec.mapv(|v| v * l1);
    let g_x_rs = g_rs_js - mae_grad(inp.x_s, inp.x_rs).mapv(|v| v * l1);

    // guide + msi terms (both touch x_ds)
    let g_ds_guide = mse_grad(inp.x_ds, inp.x_ref).mapv(|v| v * l2);
    let g_ds_msi = mse_grad(inp.x_ds, inp.x_ds_hat).mapv(|v| v * l3);
    let g_x_ref = mse_grad(inp.x_ref, inp.x_ds).mapv(|v| v * l2);
    let g_x_ds_hat = mse_grad(inp.x_ds_hat, inp.x_ds).mapv(|v| v * l3);
    let g_x_ds = g_ds_guide + g_ds_msi;

    // conceal + low-frequency terms (both touch x_c and the stego)
    let g_c_conceal = mse_grad(inp.x_c, inp.x_stego_pre_quant);
    let g_st_conceal = mse_grad(inp.x_stego_pre_quant, inp.x_c);
    let ll_c = ll_of(inp.x_c)?;
    let ll_st = ll_of(inp.x_stego_pre_quant)?;
    let channels = inp.x_c.dim().1;
    let g_c_low = ll_adjoint(&mse_grad(&ll_c, &ll_st), channels)?;
    let g_st_low = ll_adjoint(&mse_grad(&ll_st, &ll_c), channels)?;
    let g_x_c = g_c_conceal + g_c_low;
    let g_x_stego = g_st_conceal + g_st_low;

    Ok(LossGrads {
        g_x_s,
        g_x_rs,
        g_x_ds,
        g_x_ds_hat,
        g_x_ref,
        g_x_c,
        g_x_stego_pre_quant: g_x_stego,
    })
}
