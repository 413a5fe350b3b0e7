use ndarray::linalg::general_mat_mul;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Ix2};
use rand::Rng;

use super::{prefixed, Mode, Param, Parameterized, Real};

fn as_2d<F: Real>(p: &Param<F>) -> ArrayView2<'_, F> {
    p.value
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d weight")
}

fn as_2d_mut<F: Real>(a: &mut ndarray::ArrayD<F>) -> ArrayViewMut2<'_, F> {
    a.view_mut()
        .into_dimensionality::<Ix2>()
        .expect("2-d weight")
}

fn standard<F: Real>(x: &Array4<F>) -> std::borrow::Cow<'_, [F]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Sum of `f(i)` over a slice length with eight independent accumulators,
/// which lets the compiler vectorise float reductions.
fn lanes_sum<F: Real>(len: usize, f: impl Fn(usize) -> F) -> F {
    let mut acc = [F::zero(); 8];
    let body = len / 8 * 8;
    for i in (0..body).step_by(8) {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += f(i + k);
        }
    }
    let tail = (body..len).fold(F::zero(), |t, i| t + f(i));
    acc.iter().fold(tail, |t, &v| t + v)
}

/// Square-kernel 2D convolution with zero padding, via im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `(out, in * k * k)`
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<Array4<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::he_normal(&[out_ch, fan_in], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output rows per GEMM tile, sized so the column buffer stays cache
    /// resident.
    fn tile_rows(&self, ho: usize, wo: usize) -> usize {
        let kk = self.in_ch * self.kernel * self.kernel;
        (131_072 / (kk * wo).max(1)).clamp(1, ho.max(1))
    }

    /// Columns for output rows `rows`; `col` is `kk x (rows.len() * wo)`.
    fn im2col(
        &self,
        x: &[F],
        (h, w): (usize, usize),
        wo: usize,
        rows: Range<usize>,
        col: &mut [F],
    ) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let hw = rows.len() * wo;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for (t, oy) in rows.clone().enumerate() {
                        let iy = (oy * s + ky) as isize - pad;
                        let out_row = &mut dst[t * wo..(t + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            let lo = (pad - kx as isize).max(0) as usize;
                            let hi =
                                ((w as isize + pad - kx as isize).min(wo as isize)).max(0) as usize;
                            out_row[..lo].fill(F::zero());
                            if hi > lo {
                                let start = (lo as isize + kx as isize - pad) as usize;
                                out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            }
                            out_row[hi.max(lo)..].fill(F::zero());
                        } else {
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - pad;
                                *v = if ix >= 0 && ix < w as isize {
                                    src[ix as usize]
                                } else {
                                    F::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(
        &self,
        col: &[F],
        (h, w): (usize, usize),
        wo: usize,
        rows: Range<usize>,
        dx: &mut [F],
    ) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let hw = rows.len() * wo;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    for (t, oy) in rows.clone().enumerate() {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[t * wo..(t + 1) * wo];
                        if s == 1 {
                            let lo = (pad - kx as isize).max(0) as usize;
                            let hi =
                                ((w as isize + pad - kx as isize).min(wo as isize)).max(0) as usize;
                            if hi > lo {
                                let start = (lo as isize + kx as isize - pad) as usize;
                                for (d, &v) in
                                    dst[start..start + hi - lo].iter_mut().zip(&g[lo..hi])
                                {
                                    *d += v;
                                }
                            }
                            continue;
                        }
                        for (ox, &v) in g.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.in_ch * self.kernel * self.kernel;
        let tile = self.tile_rows(ho, wo);
        let xs = standard(x);
        let mut out = Array4::<F>::zeros((n, self.out_ch, ho, wo));
        let mut buf = vec![F::zero(); kk * tile * wo];
        let weight = as_2d(&self.weight);
        for b in 0..n {
            let img = &xs[b * c * h * w..(b + 1) * c * h * w];
            let mut dst_all = out
                .index_axis_mut(Axis(0), b)
                .into_shape_with_order((self.out_ch, ho * wo))
                .unwrap();
            for y0 in (0..ho).step_by(tile) {
                let rows = y0..(y0 + tile).min(ho);
                let cols = rows.len() * wo;
                let col = &mut buf[..kk * cols];
                self.im2col(img, (h, w), wo, rows.clone(), col);
                let col = ArrayView2::from_shape((kk, cols), &*col).unwrap();
                let mut dst = dst_all.slice_mut(s![.., y0 * wo..y0 * wo + cols]);
                general_mat_mul(F::one(), &weight, &col, F::zero(), &mut dst);
            }
            if let Some(bias) = &self.bias {
                for (mut row, &bv) in dst_all.rows_mut().into_iter().zip(bias.value.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        }
        self.cache = mode.caches().then(|| x.clone());
        out
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let x = self
            .cache
            .take()
            .expect("conv backward without cached forward");
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.in_ch * self.kernel * self.kernel;
        let tile = self.tile_rows(ho, wo);
        let xs = standard(&x);
        let gs = standard(grad);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let mut buf = vec![F::zero(); kk * tile * wo];
        let mut dbuf = vec![F::zero(); kk * tile * wo];
        let per_out = self.out_ch * ho * wo;
        let dx_s = dx.as_slice_mut().unwrap();
        for b in 0..n {
            let g_all =
                ArrayView2::from_shape((self.out_ch, ho * wo), &gs[b * per_out..(b + 1) * per_out])
                    .unwrap();
            if let Some(bias) = &mut self.bias {
                for (gb, row) in bias.grad.iter_mut().zip(g_all.rows()) {
                    *gb += row.sum();
                }
            }
            let img = &xs[b * c * h * w..(b + 1) * c * h * w];
            let dimg = &mut dx_s[b * c * h * w..(b + 1) * c * h * w];
            for y0 in (0..ho).step_by(tile) {
                let rows = y0..(y0 + tile).min(ho);
                let cols = rows.len() * wo;
                let g = g_all.slice(s![.., y0 * wo..y0 * wo + cols]);
                let col = &mut buf[..kk * cols];
                self.im2col(img, (h, w), wo, rows.clone(), col);
                let col = ArrayView2::from_shape((kk, cols), &*col).unwrap();
                general_mat_mul(
                    F::one(),
                    &g,
                    &col.t(),
                    F::one(),
                    &mut as_2d_mut(&mut self.weight.grad),
                );
                let dcol = &mut dbuf[..kk * cols];
                {
                    let mut dcol = ArrayViewMut2::from_shape((kk, cols), &mut *dcol).unwrap();
                    general_mat_mul(F::one(), &as_2d(&self.weight).t(), &g, F::zero(), &mut dcol);
                }
                self.col2im(dcol, (h, w), wo, rows, dimg);
            }
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for Conv2d<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

#[derive(Debug, Clone)]
enum BnCache<F> {
    Batch { xhat: Array4<F>, inv_std: Array1<F> },
    Running { scale: Array1<F> },
}

/// Per-channel batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    momentum: F,
    eps: F,
    cache: Option<BnCache<F>>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            running_var: Param::buffer(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels]))),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let xs = standard(x);
        let mut out = Array4::<F>::zeros((n, c, h, w));
        let os = out.as_slice_mut().unwrap();
        match mode {
            Mode::Train => {
                let m = F::from_usize(n * hw).unwrap();
                let mut xhat = Array4::<F>::zeros((n, c, h, w));
                let xh = xhat.as_slice_mut().unwrap();
                let mut inv_std = Array1::<F>::zeros(c);
                for ch in 0..c {
                    let mut sum = F::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        let p = &xs[o..o + hw];
                        sum += lanes_sum(hw, |i| p[i]);
                    }
                    let mean = sum / m;
                    let mut var = F::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        let p = &xs[o..o + hw];
                        var += lanes_sum(hw, |i| (p[i] - mean) * (p[i] - mean));
                    }
                    var /= m;
                    let istd = F::one() / (var + self.eps).sqrt();
                    inv_std[ch] = istd;
                    let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            let v = (xs[i] - mean) * istd;
                            xh[i] = v;
                            os[i] = g * v + bt;
                        }
                    }
                    let unbiased = if n * hw > 1 {
                        var * m / (m - F::one())
                    } else {
                        var
                    };
                    let mo = self.momentum;
                    self.running_mean.value[ch] =
                        (F::one() - mo) * self.running_mean.value[ch] + mo * mean;
                    self.running_var.value[ch] =
                        (F::one() - mo) * self.running_var.value[ch] + mo * unbiased;
                }
                self.cache = Some(BnCache::Batch { xhat, inv_std });
            }
            Mode::Eval | Mode::EvalTrace => {
                let mut scale = Array1::<F>::zeros(c);
                for ch in 0..c {
                    let s = self.gamma.value[ch] / (self.running_var.value[ch] + self.eps).sqrt();
                    let shift = self.beta.value[ch] - s * self.running_mean.value[ch];
                    scale[ch] = s;
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            os[i] = s * xs[i] + shift;
                        }
                    }
                }
                self.cache = (mode == Mode::EvalTrace).then_some(BnCache::Running { scale });
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = grad.dim();
        let hw = h * w;
        let gs = standard(grad);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let ds = dx.as_slice_mut().unwrap();
        match self
            .cache
            .take()
            .expect("batchnorm backward without cached forward")
        {
            BnCache::Batch { xhat, inv_std } => {
                let xh = xhat.as_slice().unwrap();
                let m = F::from_usize(n * hw).unwrap();
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (F::zero(), F::zero());
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        let (g, x) = (&gs[o..o + hw], &xh[o..o + hw]);
                        sum_g += lanes_sum(hw, |i| g[i]);
                        sum_gx += lanes_sum(hw, |i| g[i] * x[i]);
                    }
                    self.gamma.grad[ch] += sum_gx;
                    self.beta.grad[ch] += sum_g;
                    let k = self.gamma.value[ch] * inv_std[ch] / m;
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            ds[i] = k * (m * gs[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                }
            }
            BnCache::Running { scale } => {
                for ch in 0..c {
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            ds[i] = scale[ch] * gs[i];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for BatchNorm2d<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        vec![
            ("gamma".into(), &self.gamma),
            ("beta".into(), &self.beta),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<F> {
    cache: Option<Array4<F>>,
}

impl<F: Real> Relu<F> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let y = x.mapv_into(|v| if v > F::zero() { v } else { F::zero() });
        self.cache = mode.caches().then(|| y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let y = self
            .cache
            .take()
            .expect("relu backward without cached forward");
        let mut dx = grad.clone();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &v| {
            if v <= F::zero() {
                *d = F::zero();
            }
        });
        dx
    }
}

/// Convolution, batch norm and ReLU in sequence.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    relu: Relu<F>,
}

impl<F: Real> ConvBnRelu<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        // bias is redundant in front of batch norm
        Self {
            conv: Conv2d::new(in_ch, out_ch, 3, stride, false, rng),
            bn: BatchNorm2d::new(out_ch),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let y = self.conv.forward(x, mode);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(y, mode)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let g = self.relu.backward(grad);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

impl<F: Real> Parameterized<F> for ConvBnRelu<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        prefixed("conv", self.conv.params())
            .chain(prefixed("bn", self.bn.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let conv = self.conv.params_mut();
        let bn = self.bn.params_mut();
        prefixed("conv", conv).chain(prefixed("bn", bn)).collect()
    }
}

/// 2x2 transposed convolution with stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<F> {
    /// `(out * 4, in)`, row `o * 4 + dy * 2 + dx`
    pub weight: Param<F>,
    pub bias: Param<F>,
    in_ch: usize,
    out_ch: usize,
    cache: Option<Array4<F>>,
}

impl<F: Real> ConvTranspose2x2<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he_normal(&[out_ch * 4, in_ch], in_ch, rng),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "upconv input channels");
        let xs = standard(x);
        let mut out = Array4::<F>::zeros((n, self.out_ch, 2 * h, 2 * w));
        let mut tmp = Array2::<F>::zeros((self.out_ch * 4, h * w));
        for b in 0..n {
            let xb = ArrayView2::from_shape((c, h * w), &xs[b * c * h * w..(b + 1) * c * h * w])
                .unwrap();
            general_mat_mul(F::one(), &as_2d(&self.weight), &xb, F::zero(), &mut tmp);
            for o in 0..self.out_ch {
                let bias = self.bias.value[o];
                for q in 0..4 {
                    let (dy, dx) = (q / 2, q % 2);
                    let row = tmp.row(o * 4 + q);
                    for i in 0..h {
                        for j in 0..w {
                            out[[b, o, 2 * i + dy, 2 * j + dx]] = row[i * w + j] + bias;
                        }
                    }
                }
            }
        }
        self.cache = mode.caches().then(|| x.clone());
        out
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let x = self
            .cache
            .take()
            .expect("upconv backward without cached forward");
        let (n, c, h, w) = x.dim();
        let xs = standard(&x);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let mut gtmp = Array2::<F>::zeros((self.out_ch * 4, h * w));
        let mut dxb = Array2::<F>::zeros((c, h * w));
        for b in 0..n {
            for o in 0..self.out_ch {
                let mut bsum = F::zero();
                for q in 0..4 {
                    let (dy, ddx) = (q / 2, q % 2);
                    let mut row = gtmp.row_mut(o * 4 + q);
                    for i in 0..h {
                        for j in 0..w {
                            let g = grad[[b, o, 2 * i + dy, 2 * j + ddx]];
                            row[i * w + j] = g;
                            bsum += g;
                        }
                    }
                }
                self.bias.grad[o] += bsum;
            }
            let xb = ArrayView2::from_shape((c, h * w), &xs[b * c * h * w..(b + 1) * c * h * w])
                .unwrap();
            general_mat_mul(
                F::one(),
                &gtmp,
                &xb.t(),
                F::one(),
                &mut as_2d_mut(&mut self.weight.grad),
            );
            general_mat_mul(
                F::one(),
                &as_2d(&self.weight).t(),
                &gtmp,
                F::zero(),
                &mut dxb,
            );
            dx.slice_mut(ndarray::s![b, .., .., ..])
                .assign(&dxb.view().into_shape_with_order((c, h, w)).unwrap());
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for ConvTranspose2x2<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Winning offset within each window, plus the input shape.
type PoolRoute = (Vec<u8>, (usize, usize, usize, usize));

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<PoolRoute>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { argmax: None }
    }

    pub fn forward<F: Real>(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<F>::zeros((n, c, ho, wo));
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for ((b, ch, i, j), o) in out.indexed_iter_mut() {
            let cands = [
                x[[b, ch, 2 * i, 2 * j]],
                x[[b, ch, 2 * i, 2 * j + 1]],
                x[[b, ch, 2 * i + 1, 2 * j]],
                x[[b, ch, 2 * i + 1, 2 * j + 1]],
            ];
            let mut best = 0;
            for q in 1..4 {
                if cands[q] > cands[best] {
                    best = q;
                }
            }
            *o = cands[best];
            arg.push(best as u8);
        }
        self.argmax = mode.caches().then_some((arg, (n, c, h, w)));
        out
    }

    pub fn backward<F: Real>(&mut self, grad: &Array4<F>) -> Array4<F> {
        let (arg, dim) = self
            .argmax
            .take()
            .expect("maxpool backward without cached forward");
        let mut dx = Array4::<F>::zeros(dim);
        for (((b, ch, i, j), &g), &q) in grad.indexed_iter().zip(arg.iter()) {
            let q = q as usize;
            dx[[b, ch, 2 * i + q / 2, 2 * j + q % 2]] = g;
        }
        dx
    }
}

/// Fully connected layer on `(batch, features)` inputs.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// `(out, in)`
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Array2<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        // Xavier-style scale keeps initial logits near zero
        let mut weight = Param::he_normal(&[out_features, in_features], in_features, rng);
        weight.value.mapv_inplace(|v| v * F::lit(0.5f64.sqrt()));
        Self {
            weight,
            bias: Param::zeros(&[out_features]),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let mut y = x.dot(&as_2d(&self.weight).t());
        for mut row in y.rows_mut() {
            row += &self
                .bias
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
        }
        self.cache = mode.caches().then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let x = self
            .cache
            .take()
            .expect("linear backward without cached forward");
        general_mat_mul(
            F::one(),
            &grad.t(),
            &x,
            F::one(),
            &mut as_2d_mut(&mut self.weight.grad),
        );
        for row in grad.rows() {
            for (gb, &g) in self.bias.grad.iter_mut().zip(row.iter()) {
                *gb += g;
            }
        }
        grad.dot(&as_2d(&self.weight))
    }
}

impl<F: Real> Parameterized<F> for Linear<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
    }

    /// Direct convolution used as an oracle for the im2col path.
    fn conv_direct(x: &Array4<f64>, conv: &Conv2d<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.out_hw(h, w);
        let k = conv.kernel;
        let wt = conv
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut out = Array4::zeros((n, conv.out_ch, ho, wo));
        for ((b, o, i, j), v) in out.indexed_iter_mut() {
            let mut acc = conv.bias.as_ref().map_or(0.0, |bb| bb.value[o]);
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (i * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (j * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[[o, (ci * k + ky) * k + kx]]
                                * x[[b, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            *v = acc;
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, k, h, w) in [
            (1, 3, 7, 5),
            (2, 3, 8, 6),
            (1, 1, 4, 4),
            (2, 3, 7, 9),
            (1, 3, 1, 9),
            (1, 3, 2, 1),
        ] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, stride, true, &mut rng);
            conv.bias
                .as_mut()
                .unwrap()
                .value
                .mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let x = rand4(&mut rng, (2, 3, h, w));
            let got = conv.forward(&x, Mode::Eval);
            let want = conv_direct(&x, &conv);
            assert_eq!(got.dim(), want.dim());
            assert!((&got - &want).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn conv_tiles_cover_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new(32, 2, 3, stride, true, &mut rng);
            assert!(conv.tile_rows(40, 64 / stride) < 40 / stride);
            let x = rand4(&mut rng, (2, 32, 40, 64));
            let got = conv.forward(&x, Mode::Train);
            assert!((&got - &conv_direct(&x, &conv))
                .iter()
                .all(|d| d.abs() < 1e-12));
            // adjoint identity <conv(x), g> = <x, dx> for the bias-free part
            let g = rand4(&mut rng, got.dim());
            let dx = conv.backward(&g);
            let b = conv.bias.as_ref().unwrap().value.clone();
            let bias_part: f64 = g
                .outer_iter()
                .map(|gi| {
                    gi.outer_iter()
                        .zip(b.iter())
                        .map(|(p, &bv)| p.sum() * bv)
                        .sum::<f64>()
                })
                .sum();
            let lhs = (&got * &g).sum() - bias_part;
            let rhs = (&x * &dx).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x), g> is bilinear in (x, W), so finite differences are exact
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, k, bias) in [(2, 3, false), (1, 3, true), (1, 1, true)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, stride, bias, &mut rng);
            let x = rand4(&mut rng, (2, 2, 6, 5));
            let y = conv.forward(&x, Mode::Train);
            let g = rand4(&mut rng, y.dim());
            let dx = conv.backward(&g);
            let e = 1e-6;
            for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 0, 5, 4), (1, 1, 0, 4)] {
                let mut xp = x.clone();
                xp[idx] += e;
                let yp = conv.forward(&xp, Mode::Eval);
                let fd = ((&yp - &y) * &g).sum() / e;
                assert!((fd - dx[idx]).abs() < 1e-6);
            }
            let fan = 2 * k * k;
            for j in [0, fan / 2, fan - 1] {
                for o in 0..3 {
                    let mut cp = conv.clone();
                    cp.weight.value[[o, j]] += e;
                    let yp = cp.forward(&x, Mode::Eval);
                    let fd = ((&yp - &y) * &g).sum() / e;
                    assert!(
                        (fd - conv.weight.grad[[o, j]]).abs() < 1e-6,
                        "stride {stride} k {k}"
                    );
                }
            }
            if let Some(b) = &conv.bias {
                let want = g
                    .sum_axis(ndarray::Axis(3))
                    .sum_axis(ndarray::Axis(2))
                    .sum_axis(ndarray::Axis(0));
                for (o, &v) in want.iter().enumerate() {
                    assert!((b.grad[o] - v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn upconv_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = ConvTranspose2x2::<f64>::new(4, 2, &mut rng);
        let x = rand4(&mut rng, (2, 4, 3, 5));
        let y = up.forward(&x, Mode::Eval);
        assert_eq!(y.dim(), (2, 2, 6, 10));
        // output pixel (1, 3) of channel 1 comes from input (0, 1) and kernel tap (1, 1)
        let wt = up.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let want: f64 = (0..4).map(|c| wt[[4 + 3, c]] * x[[1, c, 0, 1]]).sum();
        assert!((y[[1, 1, 1, 3]] - want).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0f64, 5.0, 2.0, 3.0]).unwrap();
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, Mode::Train);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let dx = pool.backward(&Array4::from_elem((1, 1, 1, 1), 2.0));
        assert_eq!(dx.into_raw_vec_and_offset().0, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0 - 1e-5;
        let x = Array4::from_elem((2, 1, 2, 2), 6.0);
        let y = bn.forward(&x, Mode::Eval);
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }

    #[test]
    fn batchnorm_train_normalises() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::<f64>::new(3);
        let x = rand4(&mut rng, (4, 3, 5, 5)).mapv(|v| 3.0 * v + 7.0);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..3 {
            let s = y.slice(ndarray::s![.., ch, .., ..]);
            let mean = s.mean().unwrap();
            let var = s.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value[0] > 0.5);
    }
}
