//! Fixed (parameter-free) invertible transforms: orthonormal Haar DWT/IDWT,
//! the generalized m x n decomposition/composition, mosaic splicing, and
//! pixel quantization with a straight-through backward.

use ndarray::{Array2, Array4};

use crate::error::{InvMihError, Result};
use crate::tensor::{dim_str, fc, Scalar};

/// Geometry of the mosaic secret image: an m x n grid of tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MosaicLayout {
    pub m: usize,
    pub n: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl MosaicLayout {
    pub fn new(m: usize, n: usize, tile_h: usize, tile_w: usize) -> Result<Self> {
        if m == 0 || n == 0 || tile_h == 0 || tile_w == 0 {
            return Err(InvMihError::Config("mosaic layout dims must be positive".into()));
        }
        Ok(MosaicLayout { m, n, tile_h, tile_w })
    }

    /// Grid orientation for a bare secret count: m = rows <= n = cols.
    pub fn from_count(count: usize, tile_h: usize, tile_w: usize) -> Result<Self> {
        let (m, n) = grid_for_count(count)?;
        MosaicLayout::new(m, n, tile_h, tile_w)
    }

    pub fn n_secrets(&self) -> usize {
        self.m * self.n
    }

    pub fn msi_height(&self) -> usize {
        self.m * self.tile_h
    }

    pub fn msi_width(&self) -> usize {
        self.n * self.tile_w
    }
}

/// Factor a secret count into the squarest grid with rows <= cols.
pub fn grid_for_count(count: usize) -> Result<(usize, usize)> {
    if count == 0 {
        return Err(InvMihError::Config("secret count must be positive".into()));
    }
    let mut best = (1, count);
    let mut d = 1;
    while d * d <= count {
        if count % d == 0 {
            best = (d, count / d);
        }
        d += 1;
    }
    Ok(best)
}

/// Low/high frequency split of a decomposed image: `low` carries the C
/// averaging channels, `high` the remaining (mn-1)*C channels.
#[derive(Debug, Clone)]
pub struct SubbandPair<F: Scalar> {
    pub low: Array4<F>,
    pub high: Array4<F>,
}

// ---------------------------------------------------------------------------
// Mixing matrix
// ---------------------------------------------------------------------------

/// Orthonormal mn x mn mixing matrix. First row is the uniform averaging row;
/// the rest are a deterministic Gram-Schmidt completion. For m = n = 2 the
/// matrix is the 2D Haar basis so the default layout matches the Haar DWT.
pub fn mixing_matrix(m: usize, n: usize) -> Array2<f64> {
    let mn = m * n;
    assert!(mn >= 1, "m*n must be >= 1");
    if mn == 1 {
        return Array2::from_elem((1, 1), 1.0);
    }
    if m == 2 && n == 2 {
        return haar_matrix();
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(mn);
    let inv = 1.0 / (mn as f64).sqrt();
    rows.push(vec![inv; mn]);
    let mut cand = 0usize;
    while rows.len() < mn {
        let mut v = vec![0.0; mn];
        v[cand] = 1.0;
        cand += 1;
        // two rounds of Gram-Schmidt for orthonormality well under 1e-12
        for _ in 0..2 {
            for row in &rows {
                let dot: f64 = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (vi, ri) in v.iter_mut().zip(row.iter()) {
                    *vi -= dot * ri;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        rows.push(v);
    }
    let mut mat = Array2::zeros((mn, mn));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            mat[[i, j]] = *v;
        }
    }
    mat
}

/// 2D Haar basis over the four 2x2 polyphase samples (a,b;c,d), rows ordered
/// (ll, lh, hl, hh): ll=(a+b+c+d)/2, lh=(a-b+c-d)/2, hl=(a+b-c-d)/2,
/// hh=(a-b-c+d)/2.
fn haar_matrix() -> Array2<f64> {
    let h = 0.5;
    ndarray::arr2(&[
        [h, h, h, h],
        [h, -h, h, -h],
        [h, h, -h, -h],
        [h, -h, -h, h],
    ])
}

/// Channel layout of a polyphase-mixed tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChannelOrder {
    /// Subbands grouped per input channel: index = c*mn + r (Haar convention).
    Interleaved,
    /// Channels grouped per subband: index = r*C + c (decomposition convention).
    SubbandMajor,
}

fn polyphase_forward<F: Scalar>(
    x: &Array4<F>,
    m: usize,
    n: usize,
    mat: &Array2<f64>,
    order: ChannelOrder,
    context: &str,
) -> Result<Array4<F>> {
    let (b, c, hh, ww) = x.dim();
    let mn = m * n;
    if hh % m != 0 || ww % n != 0 {
        return Err(InvMihError::shape(
            context,
            format!("spatial dims divisible by ({m}, {n})"),
            dim_str(x.dim()),
        ));
    }
    let (oh, ow) = (hh / m, ww / n);
    let mut out = Array4::<F>::zeros((b, c * mn, oh, ow));
    let matf: Vec<Vec<F>> = (0..mn)
        .map(|r| (0..mn).map(|p| fc(mat[[r, p]])).collect())
        .collect();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    for r in 0..mn {
                        let mut acc = F::zero();
                        for py in 0..m {
                            for px in 0..n {
                                let p = py * n + px;
                                acc = acc
                                    + matf[r][p] * x[[bi, ci, y * m + py, xx * n + px]];
                            }
                        }
                        let oc = match order {
                            ChannelOrder::Interleaved => ci * mn + r,
                            ChannelOrder::SubbandMajor => r * c + ci,
                        };
                        out[[bi, oc, y, xx]] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn polyphase_inverse<F: Scalar>(
    y: &Array4<F>,
    m: usize,
    n: usize,
    mat: &Array2<f64>,
    order: ChannelOrder,
    context: &str,
) -> Result<Array4<F>> {
    let (b, ctot, oh, ow) = y.dim();
    let mn = m * n;
    if mn == 0 || ctot % mn != 0 {
        return Err(InvMihError::shape(
            context,
            format!("channel count divisible by {mn}"),
            dim_str(y.dim()),
        ));
    }
    let c = ctot / mn;
    let mut out = Array4::<F>::zeros((b, c, oh * m, ow * n));
    let matf: Vec<Vec<F>> = (0..mn)
        .map(|r| (0..mn).map(|p| fc(mat[[r, p]])).collect())
        .collect();
    for bi in 0..b {
        for ci in 0..c {
            for y0 in 0..oh {
                for xx in 0..ow {
                    for py in 0..m {
                        for px in 0..n {
                            let p = py * n + px;
                            let mut acc = F::zero();
                            for r in 0..mn {
                                let oc = match order {
                                    ChannelOrder::Interleaved => ci * mn + r,
                                    ChannelOrder::SubbandMajor => r * c + ci,
                                };
                                // orthonormal: inverse = transpose
                                acc = acc + matf[r][p] * y[[bi, oc, y0, xx]];
                            }
                            out[[bi, ci, y0 * m + py, xx * n + px]] = acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Haar DWT / IDWT
// ---------------------------------------------------------------------------

/// Orthonormal 2D Haar transform: (B, C, H, W) -> (B, 4C, H/2, W/2),
/// channel order (ll, lh, hl, hh) per input channel.
pub fn haar_dwt<F: Scalar>(x: &Array4<F>) -> Result<Array4<F>> {
    polyphase_forward(x, 2, 2, &haar_matrix(), ChannelOrder::Interleaved, "haar_dwt")
}

/// Exact inverse of [`haar_dwt`].
pub fn haar_idwt<F: Scalar>(y: &Array4<F>) -> Result<Array4<F>> {
    polyphase_inverse(y, 2, 2, &haar_matrix(), ChannelOrder::Interleaved, "haar_idwt")
}

/// The ll subband channels of a Haar-transformed image, or equivalently the
/// Haar ll of a pixel-domain image.
pub fn haar_ll<F: Scalar>(x: &Array4<F>) -> Result<Array4<F>> {
    let y = haar_dwt(x)?;
    let (b, c4, h, w) = y.dim();
    let c = c4 / 4;
    let mut out = Array4::<F>::zeros((b, c, h, w));
    for ci in 0..c {
        out.slice_mut(ndarray::s![.., ci, .., ..])
            .assign(&y.slice(ndarray::s![.., ci * 4, .., ..]));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generalized decomposition / composition
// ---------------------------------------------------------------------------

/// Polyphase rearrangement + orthonormal mixing + (C, (mn-1)C) split.
pub fn decompose<F: Scalar>(x: &Array4<F>, layout: &MosaicLayout) -> Result<SubbandPair<F>> {
    let (m, n) = (layout.m, layout.n);
    let mat = mixing_matrix(m, n);
    let mixed = polyphase_forward(x, m, n, &mat, ChannelOrder::SubbandMajor, "decompose")?;
    let c = x.dim().1;
    let low = mixed.slice(ndarray::s![.., ..c, .., ..]).to_owned();
    let high = mixed.slice(ndarray::s![.., c.., .., ..]).to_owned();
    Ok(SubbandPair { low, high })
}

/// Exact inverse of [`decompose`].
pub fn compose<F: Scalar>(sub: &SubbandPair<F>, layout: &MosaicLayout) -> Result<Array4<F>> {
    let (m, n) = (layout.m, layout.n);
    let mn = m * n;
    let c = sub.low.dim().1;
    let (b, ch, h, w) = sub.high.dim();
    if ch != (mn - 1) * c || sub.low.dim().0 != b || sub.low.dim().2 != h || sub.low.dim().3 != w {
        return Err(InvMihError::shape(
            "compose",
            format!("high with {} channels matching low {}x{}x{}", (mn - 1) * c, b, h, w),
            dim_str(sub.high.dim()),
        ));
    }
    let merged = ndarray::concatenate(ndarray::Axis(1), &[sub.low.view(), sub.high.view()])
        .expect("concat");
    let mat = mixing_matrix(m, n);
    polyphase_inverse(&merged, m, n, &mat, ChannelOrder::SubbandMajor, "compose")
}

// ---------------------------------------------------------------------------
// Mosaic splicing
// ---------------------------------------------------------------------------

/// Splice N = m*n tiles (row-major) into one mosaic image.
pub fn splice_mosaic<F: Scalar>(tiles: &[Array4<F>], layout: &MosaicLayout) -> Result<Array4<F>> {
    let (m, n) = (layout.m, layout.n);
    if tiles.len() != m * n {
        return Err(InvMihError::shape(
            "splice_mosaic",
            format!("{} tiles", m * n),
            format!("{} tiles", tiles.len()),
        ));
    }
    let (b, c, th, tw) = tiles[0].dim();
    for t in tiles {
        if t.dim() != (b, c, th, tw) {
            return Err(InvMihError::shape(
                "splice_mosaic",
                dim_str((b, c, th, tw)),
                dim_str(t.dim()),
            ));
        }
    }
    let mut msi = Array4::<F>::zeros((b, c, m * th, n * tw));
    for (k, tile) in tiles.iter().enumerate() {
        let (row, col) = (k / n, k % n);
        msi.slice_mut(ndarray::s![
            ..,
            ..,
            row * th..(row + 1) * th,
            col * tw..(col + 1) * tw
        ])
        .assign(tile);
    }
    Ok(msi)
}

/// Exact inverse of [`splice_mosaic`].
pub fn unsplice_mosaic<F: Scalar>(msi: &Array4<F>, layout: &MosaicLayout) -> Result<Vec<Array4<F>>> {
    let (m, n) = (layout.m, layout.n);
    let (_b, _c, h, w) = msi.dim();
    if h % m != 0 || w % n != 0 {
        return Err(InvMihError::shape(
            "unsplice_mosaic",
            format!("dims divisible by ({m}, {n})"),
            dim_str(msi.dim()),
        ));
    }
    let (th, tw) = (h / m, w / n);
    let mut tiles = Vec::with_capacity(m * n);
    for k in 0..m * n {
        let (row, col) = (k / n, k % n);
        tiles.push(
            msi.slice(ndarray::s![
                ..,
                ..,
                row * th..(row + 1) * th,
                col * tw..(col + 1) * tw
            ])
            .to_owned(),
        );
    }
    Ok(tiles)
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Quantize onto a uniform grid of `levels` values in [0,1] with
/// round-half-away-from-zero.
pub fn quantize_levels<F: Scalar>(x: &Array4<F>, levels: usize) -> Array4<F> {
    let scale = fc::<F>((levels - 1) as f64);
    x.mapv(|v| {
        let clipped = v.max(F::zero()).min(F::one());
        (clipped * scale).round() / scale
    })
}

/// Quantize to the 256-level [0,1] grid (8-bit pixels).
pub fn quantize<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    quantize_levels(x, 256)
}

/// Straight-through backward of [`quantize`]: rounding passes gradients
/// unchanged, clipping zeroes them outside [0,1].
pub fn quantize_backward<F: Scalar>(x: &Array4<F>, grad_out: &Array4<F>) -> Array4<F> {
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |gv, xv| {
        if *xv < F::zero() || *xv > F::one() {
            *gv = F::zero();
        }
    });
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{l2_norm, max_abs_diff};
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_img(seed: u64, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(dims, || r.gen_range(-1.0..1.0))
    }

    #[test]
    fn haar_constant_image() {
        let x = Array4::from_elem((1, 2, 4, 4), 0.3f64);
        let y = haar_dwt(&x).unwrap();
        assert_eq!(y.dim(), (1, 8, 2, 2));
        for ci in 0..2 {
            assert!((y[[0, ci * 4, 0, 0]] - 0.6).abs() < 1e-12); // ll = 2c
            for r in 1..4 {
                assert!(y[[0, ci * 4 + r, 0, 0]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn haar_hand_example() {
        // [[1,2],[3,4]] -> ll=5, lh=-1, hl=-2, hh=0
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 0, 0, 1]] = 2.0;
        x[[0, 0, 1, 0]] = 3.0;
        x[[0, 0, 1, 1]] = 4.0;
        let y = haar_dwt(&x).unwrap();
        assert!((y[[0, 0, 0, 0]] - 5.0).abs() < 1e-12);
        assert!((y[[0, 1, 0, 0]] + 1.0).abs() < 1e-12);
        assert!((y[[0, 2, 0, 0]] + 2.0).abs() < 1e-12);
        assert!(y[[0, 3, 0, 0]].abs() < 1e-12);
    }

    #[test]
    fn haar_round_trip_and_energy() {
        let x = random_img(0, (2, 3, 8, 12));
        let y = haar_dwt(&x).unwrap();
        let back = haar_idwt(&y).unwrap();
        assert!(max_abs_diff(&back, &x) < 1e-12);
        let rel = (l2_norm(&y) - l2_norm(&x)).abs() / l2_norm(&x);
        assert!(rel < 1e-12);
        // forward of inverse is also identity
        let y2 = haar_dwt(&haar_idwt(&y).unwrap()).unwrap();
        assert!(max_abs_diff(&y2, &y) < 1e-12);
    }

    #[test]
    fn haar_odd_dims_rejected() {
        let x = Array4::<f64>::zeros((1, 1, 3, 4));
        assert!(haar_dwt(&x).is_err());
    }

    #[test]
    fn mixing_matrix_cases() {
        let m1 = mixing_matrix(1, 1);
        assert_eq!(m1[[0, 0]], 1.0);
        // 2x2 is the Haar basis
        let m2 = mixing_matrix(2, 2);
        assert_eq!(m2[[1, 1]], -0.5);
        // orthonormality for all m, n <= 4
        for m in 1..=4usize {
            for n in 1..=4usize {
                let mat = mixing_matrix(m, n);
                let prod = mat.dot(&mat.t());
                let mn = m * n;
                for i in 0..mn {
                    for j in 0..mn {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!(
                            (prod[[i, j]] - want).abs() < 1e-12,
                            "({m},{n}) entry ({i},{j}) = {}",
                            prod[[i, j]]
                        );
                    }
                }
                // uniform first row
                let inv = 1.0 / (mn as f64).sqrt();
                for j in 0..mn {
                    assert!((mat[[0, j]] - inv).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decompose_constant_image() {
        for (m, n) in [(1usize, 1usize), (2, 2), (2, 3), (3, 3), (4, 4)] {
            let layout = MosaicLayout::new(m, n, 4, 4).unwrap();
            let c = 0.25f64;
            let x = Array4::from_elem((1, 3, 4 * m, 4 * n), c);
            let sub = decompose(&x, &layout).unwrap();
            let want = ((m * n) as f64).sqrt() * c;
            for v in sub.low.iter() {
                assert!((*v - want).abs() < 1e-12);
            }
            for v in sub.high.iter() {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decompose_matches_haar_at_2x2() {
        let x = random_img(1, (1, 3, 8, 8));
        let layout = MosaicLayout::new(2, 2, 4, 4).unwrap();
        let sub = decompose(&x, &layout).unwrap();
        let haar = haar_dwt(&x).unwrap();
        let c = 3;
        // low: subband r=0 -> haar channel ci*4
        for ci in 0..c {
            let low = sub.low.slice(ndarray::s![.., ci, .., ..]);
            let hl = haar.slice(ndarray::s![.., ci * 4, .., ..]);
            assert!(low
                .iter()
                .zip(hl.iter())
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
        // high: subband-major channel (r-1)*C + c -> haar channel c*4 + r
        for r in 1..4 {
            for ci in 0..c {
                let hi = sub.high.slice(ndarray::s![.., (r - 1) * c + ci, .., ..]);
                let hh = haar.slice(ndarray::s![.., ci * 4 + r, .., ..]);
                assert!(hi
                    .iter()
                    .zip(hh.iter())
                    .all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn decompose_round_trip_all_layouts() {
        for m in 1..=4usize {
            for n in 1..=4usize {
                let layout = MosaicLayout::new(m, n, 3, 2).unwrap();
                let x = random_img((m * 10 + n) as u64, (1, 3, 3 * m, 2 * n));
                let sub = decompose(&x, &layout).unwrap();
                assert_eq!(sub.low.dim(), (1, 3, 3, 2));
                assert_eq!(sub.high.dim(), (1, (m * n - 1) * 3, 3, 2));
                let back = compose(&sub, &layout).unwrap();
                assert!(max_abs_diff(&back, &x) < 1e-12, "layout ({m},{n})");
                // energy preservation
                let e_in = l2_norm(&x);
                let e_out = (l2_norm(&sub.low).powi(2) + l2_norm(&sub.high).powi(2)).sqrt();
                assert!((e_in - e_out).abs() / e_in < 1e-12);
                // decompose(compose(y)) = y
                let sub2 = decompose(&back, &layout).unwrap();
                assert!(max_abs_diff(&sub2.low, &sub.low) < 1e-12);
                assert!(max_abs_diff(&sub2.high, &sub.high) < 1e-12);
            }
        }
    }

    #[test]
    fn splice_quadrants() {
        let layout = MosaicLayout::new(2, 2, 2, 2).unwrap();
        let tiles: Vec<Array4<f64>> = (0..4)
            .map(|k| Array4::from_elem((1, 1, 2, 2), k as f64))
            .collect();
        let msi = splice_mosaic(&tiles, &layout).unwrap();
        assert_eq!(msi.dim(), (1, 1, 4, 4));
        assert_eq!(msi[[0, 0, 0, 0]], 0.0); // top-left A
        assert_eq!(msi[[0, 0, 0, 3]], 1.0); // top-right B
        assert_eq!(msi[[0, 0, 3, 0]], 2.0); // bottom-left C
        assert_eq!(msi[[0, 0, 3, 3]], 3.0); // bottom-right D
        let back = unsplice_mosaic(&msi, &layout).unwrap();
        for (a, b) in back.iter().zip(tiles.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn splice_single_tile() {
        let layout = MosaicLayout::new(1, 1, 4, 4).unwrap();
        let tile = random_img(2, (1, 3, 4, 4));
        let msi = splice_mosaic(&[tile.clone()], &layout).unwrap();
        assert_eq!(msi, tile);
    }

    #[test]
    fn splice_wrong_count_rejected() {
        let layout = MosaicLayout::new(2, 2, 2, 2).unwrap();
        let tiles: Vec<Array4<f64>> = (0..3)
            .map(|_| Array4::zeros((1, 1, 2, 2)))
            .collect();
        assert!(splice_mosaic(&tiles, &layout).is_err());
    }

    #[test]
    fn quantize_examples() {
        let x = ndarray::arr1(&[0.0f64, 1.0, 0.5, -0.2, 1.7])
            .into_shape((1, 1, 1, 5))
            .unwrap();
        let q = quantize(&x);
        assert_eq!(q[[0, 0, 0, 0]], 0.0);
        assert_eq!(q[[0, 0, 0, 1]], 1.0);
        assert!((q[[0, 0, 0, 2]] - 128.0 / 255.0).abs() < 1e-12); // 0.5 rounds up
        assert_eq!(q[[0, 0, 0, 3]], 0.0);
        assert_eq!(q[[0, 0, 0, 4]], 1.0);
        assert_eq!(quantize(&q), q); // idempotent
    }

    #[test]
    fn quantize_straight_through_backward() {
        let x = ndarray::arr1(&[0.3f64, -0.5, 1.5, 0.0, 1.0])
            .into_shape((1, 1, 1, 5))
            .unwrap();
        let g = Array4::from_elem((1, 1, 1, 5), 2.0f64);
        let gx = quantize_backward(&x, &g);
        assert_eq!(gx[[0, 0, 0, 0]], 2.0);
        assert_eq!(gx[[0, 0, 0, 1]], 0.0);
        assert_eq!(gx[[0, 0, 0, 2]], 0.0);
        assert_eq!(gx[[0, 0, 0, 3]], 2.0);
        assert_eq!(gx[[0, 0, 0, 4]], 2.0);
    }

    #[test]
    fn grid_for_count_orientations() {
        assert_eq!(grid_for_count(4).unwrap(), (2, 2));
        assert_eq!(grid_for_count(6).unwrap(), (2, 3));
        assert_eq!(grid_for_count(8).unwrap(), (2, 4));
        assert_eq!(grid_for_count(9).unwrap(), (3, 3));
        assert_eq!(grid_for_count(16).unwrap(), (4, 4));
        assert_eq!(grid_for_count(1).unwrap(), (1, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn quantize_monotone_and_in_range(a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let x = ndarray::arr1(&[lo, hi]).into_shape((1, 1, 1, 2)).unwrap();
            let q = quantize(&x);
            prop_assert!(q[[0,0,0,0]] <= q[[0,0,0,1]]);
            for v in q.iter() {
                prop_assert!(*v >= 0.0 && *v <= 1.0);
                let scaled = *v * 255.0;
                prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            }
        }

        #[test]
        fn mosaic_round_trip_bit_exact(seed in 0u64..1000, m in 1usize..4, n in 1usize..4) {
            let layout = MosaicLayout::new(m, n, 3, 2).unwrap();
            let tiles: Vec<Array4<f64>> = (0..m*n)
                .map(|k| random_img(seed.wrapping_add(k as u64), (1, 2, 3, 2)))
                .collect();
            let msi = splice_mosaic(&tiles, &layout).unwrap();
            let back = unsplice_mosaic(&msi, &layout).unwrap();
            for (a, b) in back.iter().zip(tiles.iter()) {
                prop_assert_eq!(a, b); // bit-identical
            }
        }
    }
}

