//! Trainable convolutional grid detector.
//!
//! The network keeps the residual preprocessing idea: a pool-and-tile skip
//! path shrinks the grayscale input by 2× while a conv → pool → conv → conv
//! path extracts finer detail at the original resolution; the two are summed
//! as a residual block before a small stack of conv/pool stages and a
//! fully-connected head that emits one value per grid predictor variable.
//! Existence channels pass through a logistic squash; everything else is
//! linear.
//!
//! Batch statistics are avoided by standardizing each input image to zero
//! mean and unit variance; full batch normalization is available behind
//! `use_batchnorm` for experiments. All arithmetic is `f64` so gradients can
//! be checked against central finite differences tightly.

mod layers;
mod optim;
mod trainer;

pub use optim::{Adam, OneCycle};
pub use trainer::{
    load_checkpoint, save_checkpoint, train, Checkpoint, EpochMetrics, TrainConfig, TrainError,
    TrainOptions, TrainReport, TrainSample, HISTORY_CSV_HEADER,
};

use image::GrayImage;
use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gridcodec::{self, DecodeMode, Detection, GridSpec, GridTensor};
use layers::{AvgPool2, BatchNorm2d, Conv2d, Dense, Dropout, LeakyRelu};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(String),
    Shape(String),
    /// Backward called without a recorded forward pass.
    StaleTape,
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "model config error: {msg}"),
            ModelError::Shape(msg) => write!(f, "shape error: {msg}"),
            ModelError::StaleTape => write!(f, "backward called without a recorded forward"),
        }
    }
}

impl std::error::Error for ModelError {}

/// Architecture and regularization hyperparameters.
///
/// `input_size` 64 is the desk-scale default; 331 reproduces the full-scale
/// input geometry if you have the patience. The hidden width between the
/// conv stack and the grid head defaults to 512.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square network input edge in pixels.
    pub input_size: u32,
    /// Channel count of the residual pre-block (tile factor of the skip).
    pub pre_channels: usize,
    /// Output channels of each conv stage; each stage halves the resolution.
    pub stage_channels: Vec<usize>,
    pub kernel_size: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub leaky_slope: f64,
    pub use_batchnorm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            pre_channels: 3,
            stage_channels: vec![16, 32, 48],
            kernel_size: 3,
            hidden_width: 512,
            dropout_rate: 0.1,
            weight_decay: 1e-4,
            leaky_slope: 0.1,
            use_batchnorm: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny network (< 10k parameters) for gradient checks.
    pub fn tiny(seed: u64) -> Self {
        Self {
            input_size: 16,
            pre_channels: 2,
            stage_channels: vec![4],
            kernel_size: 3,
            hidden_width: 8,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            leaky_slope: 0.1,
            use_batchnorm: false,
            seed,
        }
    }
}

struct Stage {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    act: LeakyRelu,
    pool: AvgPool2,
}

/// The detector network with explicit forward and reverse passes.
pub struct Detector {
    pub cfg: ModelConfig,
    out_dim: usize,
    vars_per_predictor: usize,

    pre_conv1: Conv2d,
    pre_bn1: Option<BatchNorm2d>,
    pre_act1: LeakyRelu,
    pre_pool: AvgPool2,
    pre_conv2: Conv2d,
    pre_bn2: Option<BatchNorm2d>,
    pre_act2: LeakyRelu,
    pre_conv3: Conv2d,
    pre_bn3: Option<BatchNorm2d>,
    skip_pool: AvgPool2,
    res_act: LeakyRelu,
    dropout: Dropout,
    stages: Vec<Stage>,
    fc1: Dense,
    fc_act: LeakyRelu,
    head: Dense,

    dropout_rng: ChaCha8Rng,
    out_cache: Option<Array2<f64>>,
    flat_dims: (usize, usize, usize), // (c, h, w) entering the flatten
}

impl Detector {
    pub fn new(cfg: &ModelConfig, grid: &GridSpec) -> Result<Self, ModelError> {
        let s = cfg.input_size as usize;
        let halvings = 1 + cfg.stage_channels.len() as u32;
        if s % (1 << halvings) != 0 {
            return Err(ModelError::Config(format!(
                "input_size {} must be divisible by 2^{} (one pre-block pool plus {} stage pools)",
                s,
                halvings,
                cfg.stage_channels.len()
            )));
        }
        if cfg.pre_channels == 0 || cfg.hidden_width == 0 || cfg.stage_channels.is_empty() {
            return Err(ModelError::Config(
                "channels, hidden width, and stages must be nonzero".into(),
            ));
        }
        if cfg.kernel_size % 2 == 0 {
            return Err(ModelError::Config("kernel size must be odd".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel_size;
        let pad = k / 2;
        let c = cfg.pre_channels;
        let bn = |c: usize, on: bool| if on { Some(BatchNorm2d::new(c)) } else { None };

        let pre_conv1 = Conv2d::new(1, c, k, pad, &mut rng);
        let pre_conv2 = Conv2d::new(c, c, k, pad, &mut rng);
        let pre_conv3 = Conv2d::new(c, c, k, pad, &mut rng);

        let mut stages = Vec::new();
        let mut in_c = c;
        let mut hw = s / 2;
        for &out_c in &cfg.stage_channels {
            stages.push(Stage {
                conv: Conv2d::new(in_c, out_c, k, pad, &mut rng),
                bn: bn(out_c, cfg.use_batchnorm),
                act: LeakyRelu::new(cfg.leaky_slope),
                pool: AvgPool2::new(),
            });
            in_c = out_c;
            hw /= 2;
        }
        let flat_dims = (in_c, hw, hw);
        let flat = in_c * hw * hw;
        let fc1 = Dense::new(flat, cfg.hidden_width, &mut rng);
        let out_dim = grid.total_len();
        let head = Dense::new(cfg.hidden_width, out_dim, &mut rng);

        Ok(Self {
            cfg: cfg.clone(),
            out_dim,
            vars_per_predictor: grid.vars_per_predictor,
            pre_bn1: bn(c, cfg.use_batchnorm),
            pre_bn2: bn(c, cfg.use_batchnorm),
            pre_bn3: bn(c, cfg.use_batchnorm),
            pre_conv1,
            pre_conv2,
            pre_conv3,
            pre_act1: LeakyRelu::new(cfg.leaky_slope),
            pre_act2: LeakyRelu::new(cfg.leaky_slope),
            pre_pool: AvgPool2::new(),
            skip_pool: AvgPool2::new(),
            res_act: LeakyRelu::new(cfg.leaky_slope),
            dropout: Dropout::new(cfg.dropout_rate),
            stages,
            fc1,
            fc_act: LeakyRelu::new(cfg.leaky_slope),
            head,
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d80f),
            out_cache: None,
            flat_dims,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Forward pass over a batch of `[B, 1, S, S]` images with values in
    /// `[0, 1]`. With `train` false, dropout is disabled and nothing is
    /// recorded for backward.
    pub fn forward(&mut self, images: &Array4<f64>, train: bool) -> Result<Array2<f64>, ModelError> {
        let (batch, c_in, h, w) = images.dim();
        let s = self.cfg.input_size as usize;
        if c_in != 1 || h != s || w != s {
            return Err(ModelError::Shape(format!(
                "expected [B, 1, {s}, {s}] input, got [{batch}, {c_in}, {h}, {w}]"
            )));
        }
        let record = train;

        // per-image standardization (batch-norm stand-in, no state)
        let mut x = images.clone();
        for bi in 0..batch {
            let mut img = x.index_axis_mut(Axis(0), bi);
            let n = (h * w) as f64;
            let mean = img.sum() / n;
            let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var.sqrt() + 1e-6);
            img.mapv_inplace(|v| (v - mean) * inv);
        }

        // upper path: conv at full res, pool, two convs at half res
        let mut u = self.pre_conv1.forward(&x, record);
        if let Some(bn) = &mut self.pre_bn1 {
            u = bn.forward(&u, train, record);
        }
        self.pre_act1.forward_slice(u.as_slice_mut().unwrap(), record);
        let mut u = self.pre_pool.forward(&u, record);
        u = self.pre_conv2.forward(&u, record);
        if let Some(bn) = &mut self.pre_bn2 {
            u = bn.forward(&u, train, record);
        }
        self.pre_act2.forward_slice(u.as_slice_mut().unwrap(), record);
        u = self.pre_conv3.forward(&u, record);
        if let Some(bn) = &mut self.pre_bn3 {
            u = bn.forward(&u, train, record);
        }

        // lower path: average-pool the input and tile the gray channel
        let skip = self.skip_pool.forward(&x, false);
        for ci in 0..self.cfg.pre_channels {
            let skip_plane = skip.index_axis(Axis(1), 0);
            let mut u_plane = u.index_axis_mut(Axis(1), ci);
            u_plane += &skip_plane;
        }

        self.res_act.forward_slice(u.as_slice_mut().unwrap(), record);
        self.dropout
            .forward_slice(u.as_slice_mut().unwrap(), train, &mut self.dropout_rng);

        let mut h = u;
        for stage in &mut self.stages {
            let mut y = stage.conv.forward(&h, record);
            if let Some(bn) = &mut stage.bn {
                y = bn.forward(&y, train, record);
            }
            stage.act.forward_slice(y.as_slice_mut().unwrap(), record);
            h = stage.pool.forward(&y, record);
        }

        let (fc, fh, fw) = self.flat_dims;
        let flat = h
            .into_shape_with_order((batch, fc * fh * fw))
            .map_err(|e| ModelError::Shape(e.to_string()))?;
        let mut z = self.fc1.forward(&flat, record);
        self.fc_act.forward_slice(z.as_slice_mut().unwrap(), record);
        let mut out = self.head.forward(&z, record);

        // logistic squash on the existence channel of every predictor
        for row in out.rows_mut() {
            let row = row.into_slice().unwrap();
            for p in row.iter_mut().step_by(self.vars_per_predictor) {
                *p = 1.0 / (1.0 + (-*p).exp());
            }
        }
        if record {
            self.out_cache = Some(out.clone());
        }
        Ok(out)
    }

    /// Reverse pass from the gradient of the loss at the outputs; accumulates
    /// parameter gradients. Requires a recorded (training-mode) forward.
    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Result<(), ModelError> {
        let out = self.out_cache.take().ok_or(ModelError::StaleTape)?;
        if grad_out.dim() != out.dim() {
            return Err(ModelError::Shape(format!(
                "gradient shape {:?} does not match output {:?}",
                grad_out.dim(),
                out.dim()
            )));
        }
        let (batch, _) = grad_out.dim();

        let mut g = grad_out.clone();
        for (mut g_row, o_row) in g.rows_mut().into_iter().zip(out.rows()) {
            let g_row = g_row.as_slice_mut().unwrap();
            for (i, gv) in g_row.iter_mut().enumerate() {
                if i % self.vars_per_predictor == 0 {
                    let s = o_row[i];
                    *gv *= s * (1.0 - s);
                }
            }
        }

        let g = self.head.backward(&g)?;
        let mut g = g;
        self.fc_act.backward_slice(g.as_slice_mut().unwrap())?;
        let g = self.fc1.backward(&g)?;

        let (fc, fh, fw) = self.flat_dims;
        let mut g4 = g
            .into_shape_with_order((batch, fc, fh, fw))
            .map_err(|e| ModelError::Shape(e.to_string()))?;

        for stage in self.stages.iter_mut().rev() {
            let mut gy = stage.pool.backward(&g4)?;
            stage.act.backward_slice(gy.as_slice_mut().unwrap())?;
            if let Some(bn) = &mut stage.bn {
                gy = bn.backward(&gy)?;
            }
            g4 = stage.conv.backward(&gy)?;
        }

        self.dropout.backward_slice(g4.as_slice_mut().unwrap())?;
        self.res_act.backward_slice(g4.as_slice_mut().unwrap())?;

        // the skip path holds no parameters and the input needs no gradient,
        // so only the conv path propagates further
        let mut gu = g4;
        if let Some(bn) = &mut self.pre_bn3 {
            gu = bn.backward(&gu)?;
        }
        let mut gu = self.pre_conv3.backward(&gu)?;
        self.pre_act2.backward_slice(gu.as_slice_mut().unwrap())?;
        if let Some(bn) = &mut self.pre_bn2 {
            gu = bn.backward(&gu)?;
        }
        let gu = self.pre_conv2.backward(&gu)?;
        let mut gu = self.pre_pool.backward(&gu)?;
        self.pre_act1.backward_slice(gu.as_slice_mut().unwrap())?;
        if let Some(bn) = &mut self.pre_bn1 {
            gu = bn.backward(&gu)?;
        }
        let _ = self.pre_conv1.backward(&gu)?;
        Ok(())
    }

    pub(crate) fn visit_params(&mut self, f: &mut layers::ParamVisitor<'_>) {
        self.pre_conv1.visit("pre_conv1", f);
        if let Some(bn) = &mut self.pre_bn1 {
            bn.visit("pre_bn1", f);
        }
        self.pre_conv2.visit("pre_conv2", f);
        if let Some(bn) = &mut self.pre_bn2 {
            bn.visit("pre_bn2", f);
        }
        self.pre_conv3.visit("pre_conv3", f);
        if let Some(bn) = &mut self.pre_bn3 {
            bn.visit("pre_bn3", f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.conv.visit(&format!("stage{i}.conv"), f);
            if let Some(bn) = &mut stage.bn {
                bn.visit(&format!("stage{i}.bn"), f);
            }
        }
        self.fc1.visit("fc1", f);
        self.head.visit("head", f);
    }

    /// Running batch-norm statistics (empty when batch norm is off).
    pub(crate) fn visit_state(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for bn in [&mut self.pre_bn1, &mut self.pre_bn2, &mut self.pre_bn3]
            .into_iter()
            .flatten()
        {
            bn.visit_state(f);
        }
        for stage in self.stages.iter_mut() {
            if let Some(bn) = &mut stage.bn {
                bn.visit_state(f);
            }
        }
    }

    pub fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, w, _| n += w.len());
        n
    }

    pub fn params_flat(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, _, w, _| out.extend_from_slice(w));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let mut offset = 0;
        let mut overflow = false;
        self.visit_params(&mut |_, _, w, _| {
            if offset + w.len() <= flat.len() {
                w.copy_from_slice(&flat[offset..offset + w.len()]);
            } else {
                overflow = true;
            }
            offset += w.len();
        });
        if overflow || offset != flat.len() {
            return Err(ModelError::Shape(format!(
                "parameter vector length {} does not match model ({})",
                flat.len(),
                offset
            )));
        }
        Ok(())
    }

    pub fn state_flat(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_state(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_state_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let mut offset = 0;
        let mut overflow = false;
        self.visit_state(&mut |s| {
            if offset + s.len() <= flat.len() {
                s.copy_from_slice(&flat[offset..offset + s.len()]);
            } else {
                overflow = true;
            }
            offset += s.len();
        });
        if overflow || offset != flat.len() {
            return Err(ModelError::Shape(format!(
                "state vector length {} does not match model ({})",
                flat.len(),
                offset
            )));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, _, g| g.fill(0.0));
    }

    /// Forward + decode for a set of frames; dropout disabled.
    pub fn infer(
        &mut self,
        images: &[GrayImage],
        grid: &GridSpec,
        threshold: f64,
        mode: DecodeMode,
    ) -> Result<Vec<Vec<Detection>>, ModelError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = batch_from_images(images, self.cfg.input_size);
        let out = self.forward(&batch, false)?;
        let mut result = Vec::with_capacity(images.len());
        for row in out.rows() {
            let tensor = GridTensor { values: row.to_vec() };
            let dets = gridcodec::decode(&tensor, grid, threshold, mode)
                .map_err(|e| ModelError::Shape(e.to_string()))?;
            result.push(dets);
        }
        Ok(result)
    }
}

/// Stacks grayscale images into a `[B, 1, S, S]` batch scaled to `[0, 1]`,
/// resizing with a triangle filter when dimensions differ.
pub fn batch_from_images(images: &[GrayImage], input_size: u32) -> Array4<f64> {
    let s = input_size as usize;
    let mut batch = Array4::zeros((images.len(), 1, s, s));
    for (bi, img) in images.iter().enumerate() {
        let resized;
        let img = if img.dimensions() == (input_size, input_size) {
            img
        } else {
            resized = image::imageops::resize(
                img,
                input_size,
                input_size,
                image::imageops::FilterType::Triangle,
            );
            &resized
        };
        for y in 0..s {
            for x in 0..s {
                batch[[bi, 0, y, x]] = img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0;
            }
        }
    }
    batch
}
