//! Training loop: stage-1 dataset expansion, per-epoch stage-2 augmentation,
//! Adam with the one-cycle schedule, per-epoch validation metrics, and
//! checkpointing.
//!
//! Everything is deterministic for a fixed set of seeds: sample shuffling,
//! augmentation draws, dropout, and initialization all derive from explicit
//! seeds, and the arithmetic is single-threaded.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::Annotation;
use crate::augment::{self, AugmentConfig};
use crate::eval;
use crate::gridcodec::{self, CodecError, DecodeMode, GridSpec, GridTensor};
use crate::loss::{self, LossError, LossWeights};
use crate::synthgen::scene_seed;

use super::{batch_from_images, Adam, Detector, ModelConfig, ModelError, OneCycle};

/// One training or validation frame at its native resolution.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
}

/// Optimization hyperparameters. `max_lr` defaults to the desk-scale 1e-3;
/// the full-scale runs used 4e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub peak_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Existence threshold used when decoding validation predictions.
    pub decode_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            max_lr: 1e-3,
            div_factor: 25.0,
            final_div: 1e4,
            peak_fraction: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decode_threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based; resumed runs continue the numbering.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ring_acc: f64,
    pub val_map: f64,
    pub lr: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_ring_acc,val_map,lr";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.val_ring_acc, self.val_map, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters of the best-validation model (equal to the final
    /// parameters when no validation set is given).
    pub best_params: Vec<f64>,
    pub best_state: Vec<f64>,
    pub global_step: usize,
}

#[derive(Debug)]
pub enum TrainError {
    /// Loss became non-finite; the report carries the history so far and the
    /// best parameters seen, which are also restored into the model.
    Diverged { epoch: usize, report: Box<TrainReport> },
    Model(ModelError),
    Loss(LossError),
    Codec(CodecError),
    Io { path: PathBuf, source: std::io::Error },
    Checkpoint(String),
    Config(String),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Diverged { epoch, .. } => {
                write!(f, "training diverged (non-finite loss) in epoch {epoch}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Codec(e) => write!(f, "{e}"),
            TrainError::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            TrainError::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            TrainError::Config(msg) => write!(f, "train config error: {msg}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

/// Non-default knobs for [`train`].
pub struct TrainOptions {
    pub weights: LossWeights,
    /// When set, writes `history.csv`, `checkpoint_last.ckpt` and
    /// `checkpoint_best.ckpt` here.
    pub out_dir: Option<PathBuf>,
    /// First epoch index (0 for a fresh run); resumed runs pass the epochs
    /// already completed.
    pub start_epoch: usize,
    /// Restored Adam moments `(m, v, t)` when resuming.
    pub adam_resume: Option<(Vec<f64>, Vec<f64>, u64)>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            out_dir: None,
            start_epoch: 0,
            adam_resume: None,
        }
    }
}

struct Prepared {
    image: GrayImage, // resized to the network input
    target: GridTensor,
}

struct ValFrame {
    image: GrayImage,
    target: GridTensor,
    annotations: Vec<Annotation>,
}

fn resize_to_input(image: &GrayImage, input_size: u32) -> GrayImage {
    if image.dimensions() == (input_size, input_size) {
        image.clone()
    } else {
        image::imageops::resize(
            image,
            input_size,
            input_size,
            image::imageops::FilterType::Triangle,
        )
    }
}

const STAGE1_SEED_SALT: u64 = 0x57a6_e001;

/// Trains the model in place and returns the metric history.
///
/// Stage-1 copies are materialized once up front (copy 0 is the original;
/// augmented copies that no longer encode, e.g. after a translation pushes
/// three antinodes into one cell, are dropped). Stage-2 augmentation is
/// re-drawn from (seed, frame, epoch) at the start of every epoch. Validation
/// runs after each epoch: loss, ring accuracy and mAP at the configured
/// decode threshold.
pub fn train(
    model: &mut Detector,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    grid: &GridSpec,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if tcfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be >= 1".into()));
    }
    if tcfg.epochs < opts.start_epoch {
        return Err(TrainError::Config(format!(
            "target epochs {} below start epoch {}",
            tcfg.epochs, opts.start_epoch
        )));
    }
    let input_size = model.cfg.input_size;

    // stage-1 expansion + target encoding
    let copies = acfg.stage1.copies.max(1);
    let mut prepared: Vec<Prepared> = Vec::with_capacity(train_set.len() * copies as usize);
    for (idx, sample) in train_set.iter().enumerate() {
        for copy in 0..copies {
            let (image, annotations) = if copy == 0 {
                (sample.image.clone(), sample.annotations.clone())
            } else {
                let mut rng = augment::frame_rng(
                    acfg.seed ^ STAGE1_SEED_SALT,
                    idx as u64,
                    copy as u64,
                );
                augment::stage1_apply(&sample.image, &sample.annotations, &acfg.stage1, &mut rng)
            };
            match gridcodec::encode(&annotations, grid) {
                Ok(target) => prepared.push(Prepared {
                    image: resize_to_input(&image, input_size),
                    target,
                }),
                Err(_) if copy > 0 => continue,
                Err(e) => return Err(TrainError::Codec(e)),
            }
        }
    }

    let val_frames: Vec<ValFrame> = val_set
        .iter()
        .map(|s| {
            Ok(ValFrame {
                image: resize_to_input(&s.image, input_size),
                target: gridcodec::encode(&s.annotations, grid).map_err(TrainError::Codec)?,
                annotations: s.annotations.clone(),
            })
        })
        .collect::<Result<_, TrainError>>()?;

    let steps_per_epoch = prepared.len().div_ceil(tcfg.batch_size);
    let sched = OneCycle {
        max_lr: tcfg.max_lr,
        div_factor: tcfg.div_factor,
        final_div: tcfg.final_div,
        peak_fraction: tcfg.peak_fraction,
        total_steps: (tcfg.epochs * steps_per_epoch).max(1),
    };
    let mut adam = Adam::new(tcfg.beta1, tcfg.beta2, tcfg.eps, model.cfg.weight_decay);
    if let Some((m, v, t)) = &opts.adam_resume {
        adam.restore_state(model, m, v, *t);
    }
    let mut global_step = opts.start_epoch * steps_per_epoch;

    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = opts.start_epoch;
    let mut best_params = model.params_flat();
    let mut best_state = model.state_flat();

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io { path: dir.clone(), source: e })?;
        if opts.start_epoch == 0 {
            let path = dir.join("history.csv");
            fs::write(&path, format!("{HISTORY_CSV_HEADER}\n"))
                .map_err(|e| TrainError::Io { path, source: e })?;
        }
    }

    for epoch in opts.start_epoch..tcfg.epochs {
        // stage-2 augmentation, re-drawn per (frame, epoch)
        let augmented: Vec<GrayImage> = prepared
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                let mut rng = augment::frame_rng(acfg.seed, idx as u64, epoch as u64);
                augment::stage2_apply(&p.image, &acfg.stage2, &mut rng)
            })
            .collect();

        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(tcfg.seed, epoch as u64)));

        let mut loss_sum = 0.0;
        let mut last_lr = sched.lr(global_step);
        for chunk in order.chunks(tcfg.batch_size) {
            let images: Vec<GrayImage> = chunk.iter().map(|&i| augmented[i].clone()).collect();
            let batch = batch_from_images(&images, input_size);
            let out = model.forward(&batch, true)?;

            let b = chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut grad = Array2::zeros(out.dim());
            for (row, &sample_idx) in chunk.iter().enumerate() {
                let pred = GridTensor { values: out.row(row).to_vec() };
                let target = &prepared[sample_idx].target;
                batch_loss += loss::total_loss(target, &pred, grid, &opts.weights)?;
                let g = loss::loss_gradient(target, &pred, grid, &opts.weights)?;
                for (col, gv) in g.iter().enumerate() {
                    grad[[row, col]] = gv / b;
                }
            }
            batch_loss /= b;

            if !batch_loss.is_finite() {
                model.set_params_flat(&best_params)?;
                model.set_state_flat(&best_state)?;
                let report = TrainReport {
                    history,
                    best_epoch,
                    best_val_loss,
                    best_params,
                    best_state,
                    global_step,
                };
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(
                        &dir.join("checkpoint_last.ckpt"),
                        model,
                        grid,
                        epoch,
                        report.global_step,
                        Some(&adam),
                    )?;
                }
                return Err(TrainError::Diverged { epoch: epoch + 1, report: Box::new(report) });
            }

            loss_sum += batch_loss;
            last_lr = sched.lr(global_step);
            model.zero_grads();
            model.backward(&grad)?;
            adam.step(model, last_lr);
            global_step += 1;
        }
        let train_loss = loss_sum / steps_per_epoch as f64;

        let (val_loss, val_ring_acc, val_map) =
            validate(model, &val_frames, grid, tcfg, &opts.weights)?;

        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_ring_acc,
            val_map,
            lr: last_lr,
        };

        let improved = if val_frames.is_empty() {
            true // no validation signal; track the latest parameters
        } else {
            val_loss < best_val_loss
        };
        if improved {
            best_val_loss = val_loss;
            best_epoch = epoch + 1;
            best_params = model.params_flat();
            best_state = model.state_flat();
        }

        if let Some(dir) = &opts.out_dir {
            let path = dir.join("history.csv");
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| TrainError::Io { path: path.clone(), source: e })?;
            writeln!(f, "{}", metrics.csv_row())
                .map_err(|e| TrainError::Io { path: path.clone(), source: e })?;
            save_checkpoint(
                &dir.join("checkpoint_last.ckpt"),
                model,
                grid,
                epoch + 1,
                global_step,
                Some(&adam),
            )?;
            if improved {
                save_checkpoint(
                    &dir.join("checkpoint_best.ckpt"),
                    model,
                    grid,
                    epoch + 1,
                    global_step,
                    Some(&adam),
                )?;
            }
        }
        history.push(metrics);
    }

    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        best_params,
        best_state,
        global_step,
    })
}

fn validate(
    model: &mut Detector,
    val_frames: &[ValFrame],
    grid: &GridSpec,
    tcfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(f64, f64, f64), TrainError> {
    if val_frames.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let mut loss_sum = 0.0;
    let mut dets_per_frame = Vec::with_capacity(val_frames.len());
    for chunk in val_frames.chunks(tcfg.batch_size.max(1)) {
        let images: Vec<GrayImage> = chunk.iter().map(|f| f.image.clone()).collect();
        let batch = batch_from_images(&images, model.cfg.input_size);
        let out = model.forward(&batch, false)?;
        for (row, frame) in chunk.iter().enumerate() {
            let pred = GridTensor { values: out.row(row).to_vec() };
            loss_sum += loss::total_loss(&frame.target, &pred, grid, weights)?;
            let dets =
                gridcodec::decode(&pred, grid, tcfg.decode_threshold, DecodeMode::Normalized)
                    .map_err(TrainError::Codec)?;
            dets_per_frame.push(dets);
        }
    }
    let val_loss = loss_sum / val_frames.len() as f64;

    let truths: Vec<Vec<Annotation>> =
        val_frames.iter().map(|f| f.annotations.clone()).collect();
    let n_truths: usize = truths.iter().map(Vec::len).sum();
    let (ring_acc, map) = if n_truths == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let mut ring_pairs = Vec::new();
        for (dets, frame_truths) in dets_per_frame.iter().zip(&truths) {
            let m = eval::match_detections(dets, frame_truths, 0.5);
            for pair in &m.pairs {
                ring_pairs.push((dets[pair.det_idx].rings, frame_truths[pair.truth_idx].rings));
            }
        }
        let acc = eval::ring_accuracy(&ring_pairs, n_truths)
            .expect("n_truths > 0 checked above");
        let map = eval::mean_average_precision(&dets_per_frame, &truths, &eval::coco_thresholds())
            .expect("n_truths > 0 checked above");
        (acc, map)
    };
    Ok((val_loss, ring_acc, map))
}

/// A parsed checkpoint: model/grid configuration, progress counters, and the
/// flattened parameter, batch-norm state, and optimizer vectors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub grid: GridSpec,
    pub epochs_completed: usize,
    pub global_step: usize,
    pub params: Vec<f64>,
    pub state: Vec<f64>,
    pub adam: Option<(Vec<f64>, Vec<f64>, u64)>,
}

impl Checkpoint {
    /// Builds a detector with the stored configuration and parameters.
    pub fn build_model(&self) -> Result<Detector, ModelError> {
        let mut model = Detector::new(&self.model_cfg, &self.grid)?;
        model.set_params_flat(&self.params)?;
        model.set_state_flat(&self.state)?;
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &str = "fringe-checkpoint v1";

/// Writes a checkpoint: a text header (config echo and section lengths)
/// terminated by `end_header`, followed by little-endian `f64` sections for
/// parameters, batch-norm state, and optionally the Adam moments.
pub fn save_checkpoint(
    path: &Path,
    model: &mut Detector,
    grid: &GridSpec,
    epochs_completed: usize,
    global_step: usize,
    adam: Option<&Adam>,
) -> Result<(), TrainError> {
    let cfg = model.cfg.clone();
    let params = model.params_flat();
    let state = model.state_flat();
    let stage_channels: Vec<String> =
        cfg.stage_channels.iter().map(|c| c.to_string()).collect();

    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    let mut kv = |k: &str, v: String| {
        header.push_str(k);
        header.push('=');
        header.push_str(&v);
        header.push('\n');
    };
    kv("input_size", cfg.input_size.to_string());
    kv("pre_channels", cfg.pre_channels.to_string());
    kv("stage_channels", stage_channels.join(","));
    kv("kernel_size", cfg.kernel_size.to_string());
    kv("hidden_width", cfg.hidden_width.to_string());
    kv("dropout_rate", cfg.dropout_rate.to_string());
    kv("weight_decay", cfg.weight_decay.to_string());
    kv("leaky_slope", cfg.leaky_slope.to_string());
    kv("use_batchnorm", (cfg.use_batchnorm as u8).to_string());
    kv("model_seed", cfg.seed.to_string());
    kv("grid_rows", grid.rows.to_string());
    kv("grid_cols", grid.cols.to_string());
    kv("predictors_per_cell", grid.predictors_per_cell.to_string());
    kv("vars_per_predictor", grid.vars_per_predictor.to_string());
    kv("image_width", grid.image_width.to_string());
    kv("image_height", grid.image_height.to_string());
    kv("rings_max", grid.rings_max.to_string());
    kv("epochs_completed", epochs_completed.to_string());
    kv("global_step", global_step.to_string());
    kv("n_params", params.len().to_string());
    kv("n_state", state.len().to_string());
    match adam {
        Some(a) => {
            kv("has_adam", "1".into());
            kv("adam_t", a.t.to_string());
        }
        None => kv("has_adam", "0".into()),
    }
    header.push_str("end_header\n");

    let mut bytes = header.into_bytes();
    let push_f64s = |bytes: &mut Vec<u8>, vals: &[f64]| {
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    push_f64s(&mut bytes, &params);
    push_f64s(&mut bytes, &state);
    if let Some(a) = adam {
        let (m, v) = a.state_flat();
        push_f64s(&mut bytes, &m);
        push_f64s(&mut bytes, &v);
    }
    fs::write(path, bytes).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes =
        fs::read(path).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })?;
    let marker = b"end_header\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| TrainError::Checkpoint("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| TrainError::Checkpoint("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(TrainError::Checkpoint(format!(
            "bad magic, expected `{CHECKPOINT_MAGIC}`"
        )));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String, TrainError> {
        fields
            .get(k)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing header field `{k}`")))
    };
    macro_rules! parse {
        ($k:expr) => {
            get($k)?
                .parse()
                .map_err(|_| TrainError::Checkpoint(format!("bad value for `{}`", $k)))?
        };
    }

    let stage_channels: Vec<usize> = get("stage_channels")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| TrainError::Checkpoint("bad stage_channels".into()))
        })
        .collect::<Result<_, _>>()?;
    let model_cfg = ModelConfig {
        input_size: parse!("input_size"),
        pre_channels: parse!("pre_channels"),
        stage_channels,
        kernel_size: parse!("kernel_size"),
        hidden_width: parse!("hidden_width"),
        dropout_rate: parse!("dropout_rate"),
        weight_decay: parse!("weight_decay"),
        leaky_slope: parse!("leaky_slope"),
        use_batchnorm: get("use_batchnorm")?.as_str() == "1",
        seed: parse!("model_seed"),
    };
    let grid = GridSpec {
        rows: parse!("grid_rows"),
        cols: parse!("grid_cols"),
        predictors_per_cell: parse!("predictors_per_cell"),
        vars_per_predictor: parse!("vars_per_predictor"),
        image_width: parse!("image_width"),
        image_height: parse!("image_height"),
        rings_max: parse!("rings_max"),
    };
    let n_params: usize = parse!("n_params");
    let n_state: usize = parse!("n_state");
    let has_adam = get("has_adam")?.as_str() == "1";

    let mut offset = header_end + marker.len();
    let mut read_f64s = |n: usize| -> Result<Vec<f64>, TrainError> {
        let need = n * 8;
        if offset + need > bytes.len() {
            return Err(TrainError::Checkpoint("truncated data section".into()));
        }
        let vals = bytes[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += need;
        Ok(vals)
    };
    let params = read_f64s(n_params)?;
    let state = read_f64s(n_state)?;
    let adam = if has_adam {
        let t: u64 = parse!("adam_t");
        let m = read_f64s(n_params)?;
        let v = read_f64s(n_params)?;
        Some((m, v, t))
    } else {
        None
    };

    Ok(Checkpoint {
        model_cfg,
        grid,
        epochs_completed: parse!("epochs_completed"),
        global_step: parse!("global_step"),
        params,
        state,
        adam,
    })
}
