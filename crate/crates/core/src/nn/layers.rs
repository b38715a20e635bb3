use super::tensor::{matmul, Scalar, Tensor};

/// Learnable tensor with a lazily allocated gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None }
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        let shape = self.value.shape().to_vec();
        self.grad.get_or_insert_with(|| Tensor::zeros(&shape))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }
}

/// A named view into a layer's state, as produced by [`Layer::visit`].
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    /// Non-learned state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

impl<T: Scalar> Slot<'_, T> {
    pub fn value(&self) -> &Tensor<T> {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => b,
        }
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        match self {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        }
    }

    pub fn is_param(&self) -> bool {
        matches!(self, Slot::Param(_))
    }
}

pub type NamedSlots<'a, T> = Vec<(String, Slot<'a, T>)>;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A differentiable operator with explicit backward pass.
///
/// `forward` with `train = true` caches whatever `backward` needs and, for
/// batch norm, uses and updates batch statistics. With `train = false` the
/// layer is a pure function of its state and nothing is cached.
pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T>;

    /// Consumes the cache from the last training forward, accumulates
    /// parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T>;

    fn visit<'a>(&'a mut self, _prefix: &str, _out: &mut NamedSlots<'a, T>) {}

    fn output_shape(&self, input: &[usize]) -> Vec<usize>;
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: Param<T>,
    bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

// Cap on im2col buffer elements per chunk of images.
const COL_BUDGET: usize = 1 << 18;

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, bias: bool) -> Self {
        let k = geometry.kernel;
        Self {
            in_channels,
            out_channels,
            geometry,
            weight: Param::new(Tensor::zeros(&[out_channels, in_channels, k, k])),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            input: None,
        }
    }

    fn chunk_size(&self, spatial_out: usize) -> usize {
        let rows = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        (COL_BUDGET / (rows * spatial_out).max(1)).max(1)
    }

    /// Unfolds images `n0..n1` into `col[c*k*k + ki*k + kj, n*HoWo + oh*Wo + ow]`.
    fn im2col(&self, x: &Tensor<T>, n0: usize, n1: usize, col: &mut Vec<T>) {
        let (c_in, h, w) = (x.dim(1), x.dim(2), x.dim(3));
        let ConvGeometry { kernel: k, stride: s, pad: p } = self.geometry;
        let (ho, wo) = (self.geometry.out_size(h), self.geometry.out_size(w));
        let chunk = n1 - n0;
        let cols = chunk * ho * wo;
        col.clear();
        col.resize(c_in * k * k * cols, T::zero());
        let xd = x.data();
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let row_data = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi) = valid_range(wo, w, s, kj, p);
                    for (nl, n) in (n0..n1).enumerate() {
                        let plane = &xd[(n * c_in + c) * h * w..(n * c_in + c + 1) * h * w];
                        for oh in 0..ho {
                            let ih = (oh * s + ki) as isize - p as isize;
                            let dst = &mut row_data[nl * ho * wo + oh * wo..nl * ho * wo + (oh + 1) * wo];
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                            if s == 1 {
                                let start = lo + kj - p;
                                dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                            } else {
                                for (ow, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                    *d = src_row[ow * s + kj - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], n0: usize, n1: usize, dx: &mut Tensor<T>) {
        let (c_in, h, w) = (dx.dim(1), dx.dim(2), dx.dim(3));
        let ConvGeometry { kernel: k, stride: s, pad: p } = self.geometry;
        let (ho, wo) = (self.geometry.out_size(h), self.geometry.out_size(w));
        let cols = (n1 - n0) * ho * wo;
        let dxd = dx.data_mut();
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let row_data = &col[row * cols..(row + 1) * cols];
                    let (lo, hi) = valid_range(wo, w, s, kj, p);
                    for (nl, n) in (n0..n1).enumerate() {
                        let plane = &mut dxd[(n * c_in + c) * h * w..(n * c_in + c + 1) * h * w];
                        for oh in 0..ho {
                            let ih = (oh * s + ki) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &row_data[nl * ho * wo + oh * wo..nl * ho * wo + (oh + 1) * wo];
                            let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                            if s == 1 {
                                let start = lo + kj - p;
                                for (d, &g) in dst_row[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *d += g;
                                }
                            } else {
                                for (ow, &g) in src.iter().enumerate().take(hi).skip(lo) {
                                    dst_row[ow * s + kj - p] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ow * stride + kj - pad`
/// falls inside `0..w`.
fn valid_range(wo: usize, w: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    // largest ow with ow * stride + kj < w + pad
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        assert_eq!(x.shape().len(), 4, "conv input must be NCHW");
        assert_eq!(x.dim(1), self.in_channels, "conv input channel mismatch");
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ho, wo) = (self.geometry.out_size(h), self.geometry.out_size(w));
        let spatial = ho * wo;
        let rows = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let o = self.out_channels;
        let mut y = Tensor::zeros(&[n, o, ho, wo]);
        let chunk = self.chunk_size(spatial);
        let mut col = Vec::new();
        let mut out = Vec::new();
        let mut n0 = 0;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let cols = (n1 - n0) * spatial;
            self.im2col(x, n0, n1, &mut col);
            out.clear();
            out.resize(o * cols, T::zero());
            matmul(o, rows, cols, self.weight.value.data(), false, &col, false, &mut out, false);
            let yd = y.data_mut();
            for (nl, img) in (n0..n1).enumerate() {
                for oc in 0..o {
                    let b = self.bias.as_ref().map_or(T::zero(), |b| b.value.data()[oc]);
                    let src = &out[oc * cols + nl * spatial..oc * cols + (nl + 1) * spatial];
                    let dst = &mut yd[(img * o + oc) * spatial..(img * o + oc + 1) * spatial];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
            n0 = n1;
        }
        self.input = train.then(|| x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without training forward");
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ho, wo) = (self.geometry.out_size(h), self.geometry.out_size(w));
        let spatial = ho * wo;
        let rows = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let o = self.out_channels;
        let mut dx = Tensor::zeros(x.shape());
        if let Some(b) = self.bias.as_mut() {
            let gb = b.grad_mut().data_mut();
            for img in 0..n {
                for (oc, g) in gb.iter_mut().enumerate() {
                    let s: T = grad.data()[(img * o + oc) * spatial..(img * o + oc + 1) * spatial]
                        .iter()
                        .copied()
                        .sum();
                    *g += s;
                }
            }
        }
        let chunk = self.chunk_size(spatial);
        let mut col = Vec::new();
        let mut gmat = Vec::new();
        let mut dcol = Vec::new();
        let mut n0 = 0;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let cols = (n1 - n0) * spatial;
            self.im2col(&x, n0, n1, &mut col);
            gmat.clear();
            gmat.resize(o * cols, T::zero());
            for (nl, img) in (n0..n1).enumerate() {
                for oc in 0..o {
                    gmat[oc * cols + nl * spatial..oc * cols + (nl + 1) * spatial].copy_from_slice(
                        &grad.data()[(img * o + oc) * spatial..(img * o + oc + 1) * spatial],
                    );
                }
            }
            matmul(o, cols, rows, &gmat, false, &col, true, self.weight.grad_mut().data_mut(), true);
            dcol.clear();
            dcol.resize(rows * cols, T::zero());
            matmul(rows, o, cols, self.weight.value.data(), true, &gmat, false, &mut dcol, false);
            self.col2im(&dcol, n0, n1, &mut dx);
            n0 = n1;
        }
        dx
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut NamedSlots<'a, T>) {
        out.push((join(prefix, "weight"), Slot::Param(&mut self.weight)));
        if let Some(b) = self.bias.as_mut() {
            out.push((join(prefix, "bias"), Slot::Param(b)));
        }
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![
            input[0],
            self.out_channels,
            self.geometry.out_size(input[2]),
            self.geometry.out_size(input[3]),
        ]
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over axis 1 of `[N, C]` or `[N, C, H, W]`.

pub struct BatchNorm<T> {
    channels: usize,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn layout(shape: &[usize]) -> (usize, usize, usize) {
        let n = shape[0];
        let c = shape[1];
        let s = shape[2..].iter().product::<usize>();
        (n, c, s)
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (n, c, s) = Self::layout(x.shape());
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let xd = x.data();
        let mut y = Tensor::zeros(x.shape());
        let eps = T::from_f64_lossy(self.eps);
        if !train {
            let yd = y.data_mut();
            for ch in 0..c {
                let inv = T::one() / (self.running_var.data()[ch] + eps).sqrt();
                let scale = self.gamma.value.data()[ch] * inv;
                let shift = self.beta.value.data()[ch] - self.running_mean.data()[ch] * scale;
                for img in 0..n {
                    let base = (img * c + ch) * s;
                    for i in base..base + s {
                        yd[i] = xd[i] * scale + shift;
                    }
                }
            }
            return y;
        }
        let m = n * s;
        let mf = T::from_usize(m).unwrap();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let yd = y.data_mut();
        let momentum = T::from_f64_lossy(self.momentum);
        for ch in 0..c {
            let mut sum = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * s;
                sum += xd[base..base + s].iter().copied().sum::<T>();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * s;
                for &v in &xd[base..base + s] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let var = sq / mf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            let g = self.gamma.value.data()[ch];
            let b = self.beta.value.data()[ch];
            for img in 0..n {
                let base = (img * c + ch) * s;
                for i in base..base + s {
                    let h = (xd[i] - mean) * inv;
                    xhat[i] = h;
                    yd[i] = g * h + b;
                }
            }
            let unbiased = if m > 1 {
                sq / T::from_usize(m - 1).unwrap()
            } else {
                var
            };
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - momentum) * *rm + momentum * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - momentum) * *rv + momentum * unbiased;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        });
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batch norm backward without training forward");
        let (n, c, s) = Self::layout(&cache.shape);
        let mf = T::from_usize(n * s).unwrap();
        let gd = grad.data();
        let mut dx = Tensor::zeros(&cache.shape);
        let dxd = dx.data_mut();
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * s;
                for i in base..base + s {
                    sum_g += gd[i];
                    sum_gx += gd[i] * cache.xhat[i];
                }
            }
            self.gamma.grad_mut().data_mut()[ch] += sum_gx;
            self.beta.grad_mut().data_mut()[ch] += sum_g;
            let g = self.gamma.value.data()[ch];
            let k = g * cache.inv_std[ch] / mf;
            for img in 0..n {
                let base = (img * c + ch) * s;
                for i in base..base + s {
                    dxd[i] = k * (mf * gd[i] - sum_g - cache.xhat[i] * sum_gx);
                }
            }
        }
        dx
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut NamedSlots<'a, T>) {
        out.push((join(prefix, "gamma"), Slot::Param(&mut self.gamma)));
        out.push((join(prefix, "beta"), Slot::Param(&mut self.beta)));
        out.push((join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean)));
        out.push((join(prefix, "running_var"), Slot::Buffer(&mut self.running_var)));
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        input.to_vec()
    }
}

// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        self.mask = train.then(|| x.data().iter().map(|&v| v > T::zero()).collect());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without training forward");
        let mut dx = grad.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        dx
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        input.to_vec()
    }
}

// ---------------------------------------------------------------------------
// Pooling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Averages over in-bounds taps only.
    Average,
}

pub struct Pool2d {
    kind: PoolKind,
    geometry: ConvGeometry,
    cache: Option<PoolCache>,
}

struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl Pool2d {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind,
            geometry: ConvGeometry { kernel, stride, pad },
            cache: None,
        }
    }

    fn window(&self, o: usize, size: usize) -> (usize, usize) {
        let start = (o * self.geometry.stride) as isize - self.geometry.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.geometry.kernel as isize).min(size as isize)) as usize;
        (lo, hi)
    }
}

impl<T: Scalar> Layer<T> for Pool2d {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = (self.geometry.out_size(h), self.geometry.out_size(w));
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = if train && self.kind == PoolKind::Max {
            vec![0usize; n * c * ho * wo]
        } else {
            Vec::new()
        };
        let xd = x.data();
        let yd = y.data_mut();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                let (r0, r1) = self.window(oh, h);
                for ow in 0..wo {
                    let (c0, c1) = self.window(ow, w);
                    let out_idx = (plane * ho + oh) * wo + ow;
                    match self.kind {
                        PoolKind::Max => {
                            let mut best = r0 * w + c0;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    if src[r * w + cc] > src[best] {
                                        best = r * w + cc;
                                    }
                                }
                            }
                            yd[out_idx] = src[best];
                            if !argmax.is_empty() {
                                argmax[out_idx] = plane * h * w + best;
                            }
                        }
                        PoolKind::Average => {
                            let mut sum = T::zero();
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    sum += src[r * w + cc];
                                }
                            }
                            yd[out_idx] = sum / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                        }
                    }
                }
            }
        }
        if train {
            self.cache = Some(PoolCache {
                input_shape: x.shape().to_vec(),
                argmax,
            });
        }
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("pool backward without training forward");
        let mut dx = Tensor::zeros(&cache.input_shape);
        let dxd = dx.data_mut();
        match self.kind {
            PoolKind::Max => {
                for (&src, &g) in cache.argmax.iter().zip(grad.data()) {
                    dxd[src] += g;
                }
            }
            PoolKind::Average => {
                let (h, w) = (cache.input_shape[2], cache.input_shape[3]);
                let (ho, wo) = (grad.dim(2), grad.dim(3));
                let planes = cache.input_shape[0] * cache.input_shape[1];
                for plane in 0..planes {
                    for oh in 0..ho {
                        let (r0, r1) = self.window(oh, h);
                        for ow in 0..wo {
                            let (c0, c1) = self.window(ow, w);
                            let g = grad.data()[(plane * ho + oh) * wo + ow]
                                / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    dxd[plane * h * w + r * w + cc] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![
            input[0],
            input[1],
            self.geometry.out_size(input[2]),
            self.geometry.out_size(input[3]),
        ]
    }
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (n, c) = (x.dim(0), x.dim(1));
        let s = x.dim(2) * x.dim(3);
        let sf = T::from_usize(s).unwrap();
        let data = x
            .data()
            .chunks(s)
            .map(|plane| plane.iter().copied().sum::<T>() / sf)
            .collect();
        self.input_shape = train.then(|| x.shape().to_vec());
        Tensor::from_vec(&[n, c], data)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.take().expect("pool backward without training forward");
        let s = shape[2] * shape[3];
        let sf = T::from_usize(s).unwrap();
        let mut data = Vec::with_capacity(grad.len() * s);
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g / sf, s));
        }
        Tensor::from_vec(&shape, data)
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![input[0], input[1]]
    }
}

// ---------------------------------------------------------------------------

/// `[N, in] -> [N, out]` affine map with weight stored as `[out, in]`.
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(Tensor::zeros(&[out_features, in_features])),
            bias: Param::new(Tensor::zeros(&[out_features])),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        assert_eq!(x.shape().len(), 2, "linear input must be [N, features]");
        assert_eq!(x.dim(1), self.in_features, "linear input width mismatch");
        let n = x.dim(0);
        let mut y = Tensor::zeros(&[n, self.out_features]);
        matmul(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            self.weight.value.data(),
            true,
            y.data_mut(),
            false,
        );
        for row in y.data_mut().chunks_mut(self.out_features) {
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        self.input = train.then(|| x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("linear backward without training forward");
        let n = x.dim(0);
        matmul(
            self.out_features,
            n,
            self.in_features,
            grad.data(),
            true,
            x.data(),
            false,
            self.weight.grad_mut().data_mut(),
            true,
        );
        let gb = self.bias.grad_mut().data_mut();
        for row in grad.data().chunks(self.out_features) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        matmul(
            n,
            self.out_features,
            self.in_features,
            grad.data(),
            false,
            self.weight.value.data(),
            false,
            dx.data_mut(),
            false,
        );
        dx
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut NamedSlots<'a, T>) {
        out.push((join(prefix, "weight"), Slot::Param(&mut self.weight)));
        out.push((join(prefix, "bias"), Slot::Param(&mut self.bias)));
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![input[0], self.out_features]
    }
}

// ---------------------------------------------------------------------------
// Composition

/// Named chain of layers.
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self { layers: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut iter = self.layers.iter_mut();
        let Some((_, first)) = iter.next() else {
            return x.clone();
        };
        let mut h = first.forward(x, train);
        for (_, layer) in iter {
            h = layer.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut iter = self.layers.iter_mut().rev();
        let Some((_, last)) = iter.next() else {
            return grad.clone();
        };
        let mut g = last.backward(grad);
        for (_, layer) in iter {
            g = layer.backward(&g);
        }
        g
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut NamedSlots<'a, T>) {
        for (name, layer) in self.layers.iter_mut() {
            layer.visit(&join(prefix, name), out);
        }
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        self.layers
            .iter()
            .fold(input.to_vec(), |s, (_, l)| l.output_shape(&s))
    }
}

/// Residual unit `y = act(main(pre(x)) + shortcut(...))`.
///
/// With `pre` set (pre-activation units) a projection shortcut reads the
/// pre-activated input while an identity shortcut reads the raw input.
pub struct Residual<T> {
    pre: Option<Sequential<T>>,
    main: Sequential<T>,
    projection: Option<Sequential<T>>,
    post_relu: bool,
    relu_mask: Option<Vec<bool>>,
}

impl<T: Scalar> Residual<T> {
    pub fn new(
        pre: Option<Sequential<T>>,
        main: Sequential<T>,
        projection: Option<Sequential<T>>,
        post_relu: bool,
    ) -> Self {
        Self {
            pre,
            main,
            projection,
            post_relu,
            relu_mask: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Residual<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let pre = self.pre.as_mut().map(|p| p.forward(x, train));
        let branch_in = pre.as_ref().unwrap_or(x);
        let mut y = self.main.forward(branch_in, train);
        match self.projection.as_mut() {
            Some(p) => y.add_assign(&p.forward(branch_in, train)),
            None => y.add_assign(x),
        }
        if self.post_relu {
            if train {
                self.relu_mask = Some(y.data().iter().map(|&v| v > T::zero()).collect());
            }
            y.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
        }
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        if self.post_relu {
            let mask = self.relu_mask.take().expect("residual backward without training forward");
            for (v, keep) in g.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        let mut g_branch = self.main.backward(&g);
        let identity = match self.projection.as_mut() {
            Some(p) => {
                g_branch.add_assign(&p.backward(&g));
                None
            }
            None => Some(g),
        };
        let mut dx = match self.pre.as_mut() {
            Some(p) => p.backward(&g_branch),
            None => g_branch,
        };
        if let Some(g) = identity {
            dx.add_assign(&g);
        }
        dx
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut NamedSlots<'a, T>) {
        if let Some(p) = self.pre.as_mut() {
            p.visit(&join(prefix, "pre"), out);
        }
        self.main.visit(prefix, out);
        if let Some(p) = self.projection.as_mut() {
            p.visit(&join(prefix, "shortcut"), out);
        }
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        let inner = match &self.pre {
            Some(p) => p.output_shape(input),
            None => input.to_vec(),
        };
        self.main.output_shape(&inner)
    }
}

/// Dense connectivity: `y = concat_channels(x, body(x))`.
pub struct DenseConcat<T> {
    body: Sequential<T>,
    in_channels: Option<usize>,
}

impl<T: Scalar> DenseConcat<T> {
    pub fn new(body: Sequential<T>) -> Self {
        Self {
            body,
            in_channels: None,
        }
    }
}

impl<T: Scalar> Layer<T> for DenseConcat<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let new = self.body.forward(x, train);
        let (n, c0, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let c1 = new.dim(1);
        let s = h * w;
        let mut data = Vec::with_capacity(n * (c0 + c1) * s);
        for img in 0..n {
            data.extend_from_slice(&x.data()[img * c0 * s..(img + 1) * c0 * s]);
            data.extend_from_slice(&new.data()[img * c1 * s..(img + 1) * c1 * s]);
        }
        if train {
            self.in_channels = Some(c0);
        }
        Tensor::from_vec(&[n, c0 + c1, h, w], data)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let c0 = self.in_channels.take().expect("dense backward without training forward");
        let (n, c, h, w) = (grad.dim(0), grad.dim(1), grad.dim(2), grad.dim(3));
        let c1 = c - c0;
        let s = h * w;
        let mut g_new = Vec::with_capacity(n * c1 * s);
        let mut g_skip = Vec::with_capacity(n * c0 * s);
        for img in 0..n {
            let block = &grad.data()[img * c * s..(img + 1) * c * s];
            g_skip.extend_from_slice(&block[..c0 * s]);
            g_new.extend_from_slice(&block[c0 * s..]);
        }
        let mut dx = self.body.backward(&Tensor::from_vec(&[n, c1, h, w], g_new));
        dx.add_assign(&Tensor::from_vec(&[n, c0, h, w], g_skip));
        dx
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut NamedSlots<'a, T>) {
        self.body.visit(prefix, out);
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        let new = self.body.output_shape(input);
        vec![input[0], input[1] + new[1], input[2], input[3]]
    }
}
