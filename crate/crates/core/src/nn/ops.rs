use ndarray::{s, Array2, Array4, ArrayView4, Axis};

use super::Real;

pub fn concat_channels<F: Real>(parts: &[ArrayView4<'_, F>]) -> Array4<F> {
    ndarray::concatenate(Axis(1), parts).expect("concatenated tensors share batch and spatial dims")
}

/// Splits a channel-concatenated gradient back into its parts.
pub fn split_channels<F: Real>(grad: &Array4<F>, sizes: &[usize]) -> Vec<Array4<F>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = grad.slice(s![.., start..start + len, .., ..]).to_owned();
            start += len;
            part
        })
        .collect()
}

pub fn global_avg_pool<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (_, _, h, w) = x.dim();
    let scale = F::one() / F::from_usize(h * w).unwrap();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * scale)
}

pub fn global_avg_pool_backward<F: Real>(grad: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c) = grad.dim();
    let scale = F::one() / F::from_usize(h * w).unwrap();
    let mut out = Array4::zeros((n, c, h, w));
    for ((b, ch), &g) in grad.indexed_iter() {
        out.slice_mut(s![b, ch, .., ..]).fill(g * scale);
    }
    out
}

#[inline]
pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
