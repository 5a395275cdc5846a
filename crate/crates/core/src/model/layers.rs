//! Layer primitives with explicit forward/backward passes, double precision
//! throughout. Each layer caches what its backward pass needs; backward
//! consumes the cache and accumulates parameter gradients.
//!
//! Convolutions are stride-1 with zero padding, lowered to matrix products
//! via im2col. Weights use He fan-in initialization.

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::ModelError;

/// Visitor over parameter blocks, in a fixed order shared by the optimizer
/// and the checkpoint format. `decay` marks blocks subject to weight decay
/// (kernels yes, biases and affine batch-norm parameters no).
pub(crate) type ParamVisitor<'a> = dyn FnMut(&str, bool, &mut [f64], &mut [f64]) + 'a;

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| rng.sample(dist)).collect()
}

pub(crate) struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    /// `[out_c, in_c * k * k]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    cache: Option<ConvCache>,
}

struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * k * k;
        let w = Array2::from_shape_vec((out_c, fan_in), he_normal(rng, fan_in, out_c * fan_in))
            .unwrap();
        Self {
            in_c,
            out_c,
            k,
            pad,
            w,
            b: Array1::zeros(out_c),
            gw: Array2::zeros((out_c, fan_in)),
            gb: Array1::zeros(out_c),
            cache: None,
        }
    }

    pub fn out_hw(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        (in_h + 2 * self.pad - self.k + 1, in_w + 2 * self.pad - self.k + 1)
    }

    fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut col = Array2::zeros((c * self.k * self.k, oh * ow));
        for ci in 0..c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let mut col_row = col.row_mut(row);
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < self.pad || iy >= h + self.pad {
                            continue;
                        }
                        let iy = iy - self.pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < self.pad || ix >= w + self.pad {
                                continue;
                            }
                            col_row[oy * ow + ox] = x[[ci, iy, ix - self.pad]];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, gcol: &Array2<f64>, h: usize, w: usize) -> ndarray::Array3<f64> {
        let (oh, ow) = self.out_hw(h, w);
        let mut gx = ndarray::Array3::zeros((self.in_c, h, w));
        for ci in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let gcol_row = gcol.row(row);
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < self.pad || iy >= h + self.pad {
                            continue;
                        }
                        let iy = iy - self.pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < self.pad || ix >= w + self.pad {
                                continue;
                            }
                            gx[[ci, iy, ix - self.pad]] += gcol_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&mut self, x: &Array4<f64>, record: bool) -> Array4<f64> {
        let (batch, _c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((batch, self.out_c, oh, ow));
        let mut cols = Vec::with_capacity(if record { batch } else { 0 });
        for bi in 0..batch {
            let col = self.im2col(x.index_axis(Axis(0), bi));
            let y = self.w.dot(&col); // [out_c, oh*ow]
            let mut out_b = out.index_axis_mut(Axis(0), bi);
            for oc in 0..self.out_c {
                let bias = self.b[oc];
                let y_row = y.row(oc);
                let mut plane = out_b.index_axis_mut(Axis(0), oc);
                for oy in 0..oh {
                    for ox in 0..ow {
                        plane[[oy, ox]] = y_row[oy * ow + ox] + bias;
                    }
                }
            }
            if record {
                cols.push(col);
            }
        }
        if record {
            self.cache = Some(ConvCache { cols, in_h: h, in_w: w });
        }
        out
    }

    pub fn backward(&mut self, gout: &Array4<f64>) -> Result<Array4<f64>, ModelError> {
        let cache = self.cache.take().ok_or(ModelError::StaleTape)?;
        let (batch, oc, oh, ow) = gout.dim();
        debug_assert_eq!(oc, self.out_c);
        let mut gx = Array4::zeros((batch, self.in_c, cache.in_h, cache.in_w));
        for bi in 0..batch {
            let g = gout.index_axis(Axis(0), bi);
            let g_mat =
                Array2::from_shape_fn((self.out_c, oh * ow), |(c, i)| g[[c, i / ow, i % ow]]);
            self.gw = &self.gw + &g_mat.dot(&cache.cols[bi].t());
            self.gb = &self.gb + &g_mat.sum_axis(Axis(1));
            let gcol = self.w.t().dot(&g_mat);
            gx.index_axis_mut(Axis(0), bi)
                .assign(&self.col2im(&gcol, cache.in_h, cache.in_w));
        }
        Ok(gx)
    }

    pub fn visit(&mut self, name: &str, f: &mut ParamVisitor<'_>) {
        f(
            &format!("{name}.w"),
            true,
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        f(
            &format!("{name}.b"),
            false,
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

pub(crate) struct Dense {
    /// `[out_f, in_f]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    cache: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Array2::from_shape_vec((out_f, in_f), he_normal(rng, in_f, out_f * in_f)).unwrap();
        Self {
            w,
            b: Array1::zeros(out_f),
            gw: Array2::zeros((out_f, in_f)),
            gb: Array1::zeros(out_f),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, record: bool) -> Array2<f64> {
        let y = x.dot(&self.w.t()) + &self.b;
        if record {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gout: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let x = self.cache.take().ok_or(ModelError::StaleTape)?;
        self.gw = &self.gw + &gout.t().dot(&x);
        self.gb = &self.gb + &gout.sum_axis(Axis(0));
        Ok(gout.dot(&self.w))
    }

    pub fn visit(&mut self, name: &str, f: &mut ParamVisitor<'_>) {
        f(
            &format!("{name}.w"),
            true,
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        f(
            &format!("{name}.b"),
            false,
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

/// 2×2 average pooling, stride 2. Input height/width must be even.
pub(crate) struct AvgPool2 {
    cache: Option<(usize, usize)>,
}

impl AvgPool2 {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, record: bool) -> Array4<f64> {
        let (batch, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((batch, c, oh, ow));
        for bi in 0..batch {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let s = x[[bi, ci, 2 * oy, 2 * ox]]
                            + x[[bi, ci, 2 * oy, 2 * ox + 1]]
                            + x[[bi, ci, 2 * oy + 1, 2 * ox]]
                            + x[[bi, ci, 2 * oy + 1, 2 * ox + 1]];
                        out[[bi, ci, oy, ox]] = 0.25 * s;
                    }
                }
            }
        }
        if record {
            self.cache = Some((h, w));
        }
        out
    }

    pub fn backward(&mut self, gout: &Array4<f64>) -> Result<Array4<f64>, ModelError> {
        let (h, w) = self.cache.take().ok_or(ModelError::StaleTape)?;
        let (batch, c, oh, ow) = gout.dim();
        let mut gx = Array4::zeros((batch, c, h, w));
        for bi in 0..batch {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = 0.25 * gout[[bi, ci, oy, ox]];
                        gx[[bi, ci, 2 * oy, 2 * ox]] = g;
                        gx[[bi, ci, 2 * oy, 2 * ox + 1]] = g;
                        gx[[bi, ci, 2 * oy + 1, 2 * ox]] = g;
                        gx[[bi, ci, 2 * oy + 1, 2 * ox + 1]] = g;
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Elementwise leaky ReLU over any dimensionality (works on flat slices).
pub(crate) struct LeakyRelu {
    pub slope: f64,
    mask: Option<Vec<f64>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, mask: None }
    }

    pub fn forward_slice(&mut self, x: &mut [f64], record: bool) {
        let mut mask = if record { Vec::with_capacity(x.len()) } else { Vec::new() };
        for v in x.iter_mut() {
            let factor = if *v > 0.0 { 1.0 } else { self.slope };
            if record {
                mask.push(factor);
            }
            *v *= factor;
        }
        if record {
            self.mask = Some(mask);
        }
    }

    pub fn backward_slice(&mut self, g: &mut [f64]) -> Result<(), ModelError> {
        let mask = self.mask.take().ok_or(ModelError::StaleTape)?;
        if mask.len() != g.len() {
            return Err(ModelError::Shape(format!(
                "gradient length {} does not match recorded activation {}",
                g.len(),
                mask.len()
            )));
        }
        for (gv, m) in g.iter_mut().zip(&mask) {
            *gv *= m;
        }
        Ok(())
    }
}

/// Inverted dropout: scales kept activations by `1/(1-rate)` in training and
/// is the identity at inference.
pub(crate) struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }

    pub fn forward_slice(&mut self, x: &mut [f64], train: bool, rng: &mut ChaCha8Rng) {
        if !train || self.rate <= 0.0 {
            self.mask = Some(Vec::new()); // identity marker
            return;
        }
        let keep = 1.0 - self.rate;
        let mut mask = Vec::with_capacity(x.len());
        for v in x.iter_mut() {
            let m = if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 };
            mask.push(m);
            *v *= m;
        }
        self.mask = Some(mask);
    }

    pub fn backward_slice(&mut self, g: &mut [f64]) -> Result<(), ModelError> {
        let mask = self.mask.take().ok_or(ModelError::StaleTape)?;
        if mask.is_empty() {
            return Ok(());
        }
        for (gv, m) in g.iter_mut().zip(&mask) {
            *gv *= m;
        }
        Ok(())
    }
}

/// Per-channel batch normalization over `(batch, H, W)` with running
/// statistics for inference.
pub(crate) struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub g_gamma: Array1<f64>,
    pub g_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            g_gamma: Array1::zeros(c),
            g_beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool, record: bool) -> Array4<f64> {
        let (batch, c, h, w) = x.dim();
        let n = (batch * h * w) as f64;
        let mut out = Array4::zeros((batch, c, h, w));
        let mut x_hat = if record { Array4::zeros((batch, c, h, w)) } else { Array4::zeros((0, 0, 0, 0)) };
        let mut inv_stds = Array1::zeros(c);
        for ci in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for bi in 0..batch {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = x[[bi, ci, y, xx]];
                            sum += v;
                            sq += v * v;
                        }
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[ci] = inv_std;
            for bi in 0..batch {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x[[bi, ci, y, xx]] - mean) * inv_std;
                        if record {
                            x_hat[[bi, ci, y, xx]] = xh;
                        }
                        out[[bi, ci, y, xx]] = self.gamma[ci] * xh + self.beta[ci];
                    }
                }
            }
        }
        if record {
            self.cache = Some(BnCache { x_hat, inv_std: inv_stds });
        }
        out
    }

    pub fn backward(&mut self, gout: &Array4<f64>) -> Result<Array4<f64>, ModelError> {
        let cache = self.cache.take().ok_or(ModelError::StaleTape)?;
        let (batch, c, h, w) = gout.dim();
        let n = (batch * h * w) as f64;
        let mut gx = Array4::zeros((batch, c, h, w));
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for bi in 0..batch {
                for y in 0..h {
                    for xx in 0..w {
                        let g = gout[[bi, ci, y, xx]];
                        sum_g += g;
                        sum_gx += g * cache.x_hat[[bi, ci, y, xx]];
                    }
                }
            }
            self.g_beta[ci] += sum_g;
            self.g_gamma[ci] += sum_gx;
            let scale = self.gamma[ci] * cache.inv_std[ci];
            for bi in 0..batch {
                for y in 0..h {
                    for xx in 0..w {
                        let g = gout[[bi, ci, y, xx]];
                        let xh = cache.x_hat[[bi, ci, y, xx]];
                        gx[[bi, ci, y, xx]] =
                            scale * (g - sum_g / n - xh * sum_gx / n);
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn visit(&mut self, name: &str, f: &mut ParamVisitor<'_>) {
        f(
            &format!("{name}.gamma"),
            false,
            self.gamma.as_slice_mut().unwrap(),
            self.g_gamma.as_slice_mut().unwrap(),
        );
        f(
            &format!("{name}.beta"),
            false,
            self.beta.as_slice_mut().unwrap(),
            self.g_beta.as_slice_mut().unwrap(),
        );
    }

    /// Running statistics, serialized with checkpoints.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.running_mean.as_slice_mut().unwrap());
        f(self.running_var.as_slice_mut().unwrap());
    }
}
