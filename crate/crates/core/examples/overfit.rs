//! Desk-scale overfit experiment: train the default small model on 32
//! synthetic 64×64 scenes and report train/held-out metrics. Used to size
//! the default hyperparameters.

use std::time::Instant;

use fringe_core::augment::AugmentConfig;
use fringe_core::eval;
use fringe_core::gridcodec::{DecodeMode, GridSpec};
use fringe_core::model::{train, Detector, ModelConfig, TrainConfig, TrainOptions, TrainSample};
use fringe_core::synthgen::{generate_scene, scene_seed, SceneConfig};

fn dataset(n: usize, base_seed: u64) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let cfg = SceneConfig::desk_64(scene_seed(base_seed, i as u64));
            let (image, annotations) = generate_scene(&cfg).unwrap();
            TrainSample { image, annotations }
        })
        .collect()
}

fn metrics(
    model: &mut Detector,
    set: &[TrainSample],
    grid: &GridSpec,
    threshold: f64,
) -> (f64, f64) {
    let images: Vec<_> = set.iter().map(|s| s.image.clone()).collect();
    let dets = model.infer(&images, grid, threshold, DecodeMode::Normalized).unwrap();
    let truths: Vec<_> = set.iter().map(|s| s.annotations.clone()).collect();
    let report = eval::evaluate_detections(&dets, &truths, 0.5, None).unwrap();
    (report.ring_accuracy, report.map)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let max_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let grid = GridSpec::standard(64, 64);
    let train_set = dataset(32, 1001);
    let holdout = dataset(32, 2002);

    let mcfg = ModelConfig { seed: 7, ..ModelConfig::default() };
    let mut model = Detector::new(&mcfg, &grid).unwrap();
    println!("params: {}", model.n_params());

    let copies: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let tcfg = TrainConfig {
        epochs,
        batch_size: 8,
        max_lr,
        seed: 11,
        ..TrainConfig::default()
    };
    let acfg = if copies > 1 {
        let mut a = AugmentConfig::default();
        a.stage1.copies = copies;
        a.stage1.translation_px = 12.0;
        a
    } else {
        AugmentConfig::off()
    };

    let started = Instant::now();
    let report = train(
        &mut model,
        &train_set,
        &[],
        &grid,
        &tcfg,
        &acfg,
        &TrainOptions::default(),
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let steps = report.global_step;
    println!(
        "trained {} epochs / {} steps in {:.1} s ({:.1} ms/step)",
        epochs,
        steps,
        elapsed,
        1000.0 * elapsed / steps as f64
    );
    for m in report.history.iter().step_by((epochs / 10).max(1)) {
        println!(
            "epoch {:4}  train_loss {:.6}  lr {:.2e}",
            m.epoch, m.train_loss, m.lr
        );
    }

    let (train_acc, train_map) = metrics(&mut model, &train_set, &grid, 0.5);
    let (hold_acc, hold_map) = metrics(&mut model, &holdout, &grid, 0.5);
    println!("train   ring_acc {train_acc:.3}  mAP {train_map:.3}");
    println!("holdout ring_acc {hold_acc:.3}  mAP {hold_map:.3}");
}
