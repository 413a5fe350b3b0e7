//! Single-level orthonormal 2D Haar transform, used as a pooling operator.
//!
//! For every 2x2 block `[[p, q], [r, s]]`:
//!
//! ```text
//! ll = (p + q + r + s) / 2
//! hl = (p - q + r - s) / 2
//! lh = (p + q - r - s) / 2
//! hh = (p - q - r + s) / 2
//! ```
//!
//! The four kernels form an orthonormal basis, so the inverse is the
//! transpose and the transform preserves energy.

use ndarray::{s, Array3, Array4, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Channels x height x width activations of one sample.
pub type FeatureMap<F> = Array3<F>;

#[derive(Debug, Clone, PartialEq)]
pub struct Subbands<F> {
    pub ll: FeatureMap<F>,
    pub lh: FeatureMap<F>,
    pub hl: FeatureMap<F>,
    pub hh: FeatureMap<F>,
}

impl<F: Real> Subbands<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let z = Array3::zeros((channels, height, width));
        Self {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        }
    }
}

/// Batched bands, each `N x C x H/2 x W/2`, in `[ll, lh, hl, hh]` order.
pub(crate) type BatchBands<F> = [Array4<F>; 4];

fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "Haar transform needs even, nonzero spatial dims, got {h}x{w}"
        )));
    }
    Ok(())
}

pub(crate) fn dwt2_batch<F: Real>(x: ArrayView4<F>) -> Result<BatchBands<F>> {
    let (n, c, h, w) = x.dim();
    check_even(h, w)?;
    let (ho, wo) = (h / 2, w / 2);
    let half = F::from_f64(0.5).unwrap();
    let mut bands: BatchBands<F> = std::array::from_fn(|_| Array4::zeros((n, c, ho, wo)));
    let [ll, lh, hl, hh] = &mut bands;
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            for i in 0..ho {
                for j in 0..wo {
                    let p = src[[2 * i, 2 * j]];
                    let q = src[[2 * i, 2 * j + 1]];
                    let r = src[[2 * i + 1, 2 * j]];
                    let t = src[[2 * i + 1, 2 * j + 1]];
                    ll[[b, ch, i, j]] = (p + q + r + t) * half;
                    hl[[b, ch, i, j]] = (p - q + r - t) * half;
                    lh[[b, ch, i, j]] = (p + q - r - t) * half;
                    hh[[b, ch, i, j]] = (p - q - r + t) * half;
                }
            }
        }
    }
    Ok(bands)
}

pub(crate) fn idwt2_batch<F: Real>(bands: [ArrayView4<F>; 4]) -> Result<Array4<F>> {
    let [ll, lh, hl, hh] = bands;
    let dim = ll.dim();
    if lh.dim() != dim || hl.dim() != dim || hh.dim() != dim {
        return Err(Error::shape(format!(
            "subband shapes disagree: ll {:?}, lh {:?}, hl {:?}, hh {:?}",
            ll.dim(),
            lh.dim(),
            hl.dim(),
            hh.dim()
        )));
    }
    let (n, c, ho, wo) = dim;
    let half = F::from_f64(0.5).unwrap();
    let mut out = Array4::zeros((n, c, 2 * ho, 2 * wo));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let a = ll[[b, ch, i, j]];
                    let v = lh[[b, ch, i, j]];
                    let u = hl[[b, ch, i, j]];
                    let d = hh[[b, ch, i, j]];
                    out[[b, ch, 2 * i, 2 * j]] = (a + u + v + d) * half;
                    out[[b, ch, 2 * i, 2 * j + 1]] = (a - u + v - d) * half;
                    out[[b, ch, 2 * i + 1, 2 * j]] = (a + u - v - d) * half;
                    out[[b, ch, 2 * i + 1, 2 * j + 1]] = (a - u - v + d) * half;
                }
            }
        }
    }
    Ok(out)
}

/// Only the low-pass band; cheaper than a full transform when the details
/// are discarded.
pub(crate) fn ll_batch<F: Real>(x: ArrayView4<F>) -> Result<Array4<F>> {
    let (n, c, h, w) = x.dim();
    check_even(h, w)?;
    let half = F::from_f64(0.5).unwrap();
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            let mut dst = out.slice_mut(s![b, ch, .., ..]);
            for ((i, j), v) in dst.indexed_iter_mut() {
                *v = (src[[2 * i, 2 * j]]
                    + src[[2 * i, 2 * j + 1]]
                    + src[[2 * i + 1, 2 * j]]
                    + src[[2 * i + 1, 2 * j + 1]])
                    * half;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`ll_batch`]: spreads each gradient over its 2x2 block.
pub(crate) fn ll_backward<F: Real>(grad: ArrayView4<F>) -> Array4<F> {
    let (n, c, ho, wo) = grad.dim();
    let half = F::from_f64(0.5).unwrap();
    let mut out = Array4::zeros((n, c, 2 * ho, 2 * wo));
    for ((b, ch, i, j), &g) in grad.indexed_iter() {
        let v = g * half;
        out[[b, ch, 2 * i, 2 * j]] = v;
        out[[b, ch, 2 * i, 2 * j + 1]] = v;
        out[[b, ch, 2 * i + 1, 2 * j]] = v;
        out[[b, ch, 2 * i + 1, 2 * j + 1]] = v;
    }
    out
}

fn batch1<F: Real>(x: &FeatureMap<F>) -> ArrayView4<'_, F> {
    x.view().insert_axis(Axis(0))
}

fn unbatch1<F: Real>(x: Array4<F>) -> FeatureMap<F> {
    x.index_axis_move(Axis(0), 0)
}

/// Forward transform, channel by channel.
pub fn haar_dwt2<F: Real>(x: &FeatureMap<F>) -> Result<Subbands<F>> {
    let [ll, lh, hl, hh] = dwt2_batch(batch1(x))?;
    Ok(Subbands {
        ll: unbatch1(ll),
        lh: unbatch1(lh),
        hl: unbatch1(hl),
        hh: unbatch1(hh),
    })
}

/// Exact inverse of [`haar_dwt2`].
pub fn haar_idwt2<F: Real>(b: &Subbands<F>) -> Result<FeatureMap<F>> {
    let out = idwt2_batch([batch1(&b.ll), batch1(&b.lh), batch1(&b.hl), batch1(&b.hh)])?;
    Ok(unbatch1(out))
}

/// Input gradient of [`haar_dwt2`] given gradients on the four bands.
///
/// The transform is orthonormal, so its adjoint is its inverse.
pub fn haar_dwt2_backward<F: Real>(grad: &Subbands<F>) -> Result<FeatureMap<F>> {
    haar_idwt2(grad)
}

/// Wavelet pooling: the low-pass band replaces a stride-2 pooling layer and
/// the details `[lh, hl, hh]` are concatenated along channels.
pub fn wavelet_pool<F: Real>(x: &FeatureMap<F>) -> Result<(FeatureMap<F>, FeatureMap<F>)> {
    let b = haar_dwt2(x)?;
    let details = ndarray::concatenate(Axis(0), &[b.lh.view(), b.hl.view(), b.hh.view()])
        .expect("bands share a shape");
    Ok((b.ll, details))
}

/// Detail bands of a Haar pyramid: entry `l` holds the `[lh, hl, hh]` bands
/// at level `l + 1` (resolution halved `l + 1` times).
pub(crate) fn detail_pyramid<F: Real>(x: ArrayView4<F>, levels: usize) -> Result<Vec<Array4<F>>> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.to_owned();
    for _ in 0..levels {
        let [ll, lh, hl, hh] = dwt2_batch(cur.view())?;
        out.push(
            ndarray::concatenate(Axis(1), &[lh.view(), hl.view(), hh.view()])
                .expect("bands share a shape"),
        );
        cur = ll;
    }
    Ok(out)
}
