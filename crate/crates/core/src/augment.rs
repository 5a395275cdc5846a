//! Two-stage data augmentation.
//!
//! Stage 1 runs once, before training, and transforms image *and* annotations
//! together: rotations, translations, reflections plus some image-only noise
//! and blur. Small datasets are amplified by writing several stage-1 variants
//! of each frame (`copies`, first copy is the untouched original).
//!
//! Stage 2 runs at the start of every training epoch and touches images only
//! — blur, noise, cutout, brightness, contrast — so the grid targets computed
//! from the annotations stay valid. Stage 1 is never applied during training:
//! a rotation or translation there could move an antinode into a different
//! predictor cell mid-run.

use image::GrayImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::Annotation;
use crate::geometry::{self, Ellipse};
use crate::imgops;

/// Geometric (image + annotation) augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation per axis drawn uniformly from `[-translation_px, translation_px]`.
    pub translation_px: f64,
    /// Allow a coin-flip horizontal reflection.
    pub reflect_horizontal: bool,
    /// Allow a coin-flip vertical reflection.
    pub reflect_vertical: bool,
    /// Image-only Gaussian noise (gray levels out of 255), 0 disables.
    pub noise_sigma: f64,
    /// Image-only blur with sigma drawn from `[0, blur_sigma_max]`.
    pub blur_sigma_max: f64,
    /// Dataset amplification factor; copy 0 is the identity.
    pub copies: u32,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translation_px: 40.0,
            reflect_horizontal: true,
            reflect_vertical: true,
            noise_sigma: 2.0,
            blur_sigma_max: 0.6,
            copies: 41,
        }
    }
}

/// Image-only augmentation parameters, resampled every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub noise_prob: f64,
    /// Gray levels out of 255.
    pub noise_sigma: (f64, f64),
    /// Number of excised rectangles, inclusive range.
    pub cutout_count: (u32, u32),
    /// Rectangle edge length range in pixels.
    pub cutout_size: (u32, u32),
    /// Additive brightness drawn from `[-brightness_delta, brightness_delta]`
    /// (gray levels out of 255).
    pub brightness_delta: f64,
    /// Multiplicative contrast factor range, applied around mid-gray.
    pub contrast_range: (f64, f64),
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            blur_prob: 0.3,
            blur_sigma: (0.4, 1.2),
            noise_prob: 0.5,
            noise_sigma: (2.0, 8.0),
            cutout_count: (0, 3),
            cutout_size: (4, 16),
            brightness_delta: 16.0,
            contrast_range: (0.8, 1.2),
        }
    }
}

impl Stage2Config {
    /// A configuration under which [`stage2_apply`] is the identity.
    pub fn off() -> Self {
        Self {
            blur_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            noise_prob: 0.0,
            noise_sigma: (0.0, 0.0),
            cutout_count: (0, 0),
            cutout_size: (0, 0),
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { stage1: Stage1Config::default(), stage2: Stage2Config::default(), seed: 0 }
    }
}

impl AugmentConfig {
    /// No-op configuration for both stages.
    pub fn off() -> Self {
        Self {
            stage1: Stage1Config {
                rotation_deg: 0.0,
                translation_px: 0.0,
                reflect_horizontal: false,
                reflect_vertical: false,
                noise_sigma: 0.0,
                blur_sigma_max: 0.0,
                copies: 1,
            },
            stage2: Stage2Config::off(),
            seed: 0,
        }
    }
}

/// RNG for one (frame, epoch) pair, so augmentation is reproducible no matter
/// how frames are batched or parallelized.
pub fn frame_rng(seed: u64, frame_index: u64, epoch: u64) -> ChaCha8Rng {
    let mixed = crate::synthgen::scene_seed(crate::synthgen::scene_seed(seed, frame_index), epoch);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Applies one sampled geometric transform to a frame and its annotations.
///
/// The pixel map is reflection → rotation about the image center →
/// translation, resampled bilinearly with the input's mean gray as fill.
/// Ellipse centers follow the same map; a reflection negates the orientation
/// (mod 180°) and the rotation angle adds to it. Ring counts and axes are
/// untouched. Annotations whose centers leave the frame are dropped.
pub fn stage1_apply(
    image: &GrayImage,
    annotations: &[Annotation],
    cfg: &Stage1Config,
    rng: &mut ChaCha8Rng,
) -> (GrayImage, Vec<Annotation>) {
    let (w, h) = image.dimensions();
    let phi = if cfg.rotation_deg > 0.0 {
        rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg)
    } else {
        0.0
    };
    let (dx, dy) = if cfg.translation_px > 0.0 {
        (
            rng.gen_range(-cfg.translation_px..=cfg.translation_px),
            rng.gen_range(-cfg.translation_px..=cfg.translation_px),
        )
    } else {
        (0.0, 0.0)
    };
    let flip_h = cfg.reflect_horizontal && rng.gen_bool(0.5);
    let flip_v = cfg.reflect_vertical && rng.gen_bool(0.5);

    let mut field = imgops::to_field(image);
    let identity = phi == 0.0 && dx == 0.0 && dy == 0.0 && !flip_h && !flip_v;
    if !identity {
        field = warp(&field, w as usize, h as usize, phi, dx, dy, flip_h, flip_v);
    }
    if cfg.blur_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.blur_sigma_max);
        imgops::gaussian_blur(&mut field, w as usize, h as usize, sigma);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = rand_distr::Normal::new(0.0, cfg.noise_sigma / 255.0).unwrap();
        for v in field.iter_mut() {
            *v += rng.sample(normal);
        }
    }

    let mapped = annotations
        .iter()
        .filter_map(|ann| {
            if identity {
                return Some(*ann);
            }
            let e = &ann.ellipse;
            let (cx, cy) = map_point(e.cx, e.cy, w, h, phi, dx, dy, flip_h, flip_v);
            if cx < 0.0 || cx >= w as f64 || cy < 0.0 || cy >= h as f64 {
                return None;
            }
            let mut theta = e.theta;
            if flip_h != flip_v {
                theta = -theta;
            }
            theta += phi;
            let e = geometry::normalize(&Ellipse::new(cx, cy, e.a, e.b, theta))
                .expect("axes unchanged by rigid map");
            Some(Annotation { ellipse: e, rings: ann.rings })
        })
        .collect();

    (imgops::to_image(&field, w, h), mapped)
}

/// Forward map of a point: reflection, then rotation about the image center,
/// then translation.
#[allow(clippy::too_many_arguments)]
fn map_point(
    x: f64,
    y: f64,
    w: u32,
    h: u32,
    phi_deg: f64,
    dx: f64,
    dy: f64,
    flip_h: bool,
    flip_v: bool,
) -> (f64, f64) {
    let (mut x, mut y) = (x, y);
    if flip_h {
        x = (w - 1) as f64 - x;
    }
    if flip_v {
        y = (h - 1) as f64 - y;
    }
    let cx0 = (w - 1) as f64 / 2.0;
    let cy0 = (h - 1) as f64 / 2.0;
    let (sin_p, cos_p) = phi_deg.to_radians().sin_cos();
    let ux = x - cx0;
    let uy = y - cy0;
    (
        cx0 + ux * cos_p - uy * sin_p + dx,
        cy0 + ux * sin_p + uy * cos_p + dy,
    )
}

#[allow(clippy::too_many_arguments)]
fn warp(
    field: &[f64],
    w: usize,
    h: usize,
    phi_deg: f64,
    dx: f64,
    dy: f64,
    flip_h: bool,
    flip_v: bool,
) -> Vec<f64> {
    let fill = imgops::mean(field);
    let cx0 = (w - 1) as f64 / 2.0;
    let cy0 = (h - 1) as f64 / 2.0;
    let (sin_p, cos_p) = phi_deg.to_radians().sin_cos();
    let mut out = vec![fill; w * h];
    for y in 0..h {
        for x in 0..w {
            // invert: translation, rotation, then reflection
            let ux = x as f64 - dx - cx0;
            let uy = y as f64 - dy - cy0;
            let mut sx = cx0 + ux * cos_p + uy * sin_p;
            let mut sy = cy0 - ux * sin_p + uy * cos_p;
            if flip_h {
                sx = (w - 1) as f64 - sx;
            }
            if flip_v {
                sy = (h - 1) as f64 - sy;
            }
            out[y * w + x] = imgops::bilinear(field, w, h, sx, sy, fill);
        }
    }
    out
}

/// Applies the sampled image-only transforms: blur, noise, cutout,
/// brightness, contrast. Output dimensions equal input dimensions and
/// annotations are, by construction, not an input.
pub fn stage2_apply(image: &GrayImage, cfg: &Stage2Config, rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = image.dimensions();
    let mut field = imgops::to_field(image);

    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        imgops::gaussian_blur(&mut field, w as usize, h as usize, sigma);
    }
    if cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob) {
        let sigma = rng.gen_range(cfg.noise_sigma.0..=cfg.noise_sigma.1) / 255.0;
        if sigma > 0.0 {
            let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
            for v in field.iter_mut() {
                *v += rng.sample(normal);
            }
        }
    }
    let n_cut = rng.gen_range(cfg.cutout_count.0..=cfg.cutout_count.1);
    if n_cut > 0 {
        let fill = imgops::mean(&field);
        for _ in 0..n_cut {
            let cw = rng.gen_range(cfg.cutout_size.0..=cfg.cutout_size.1).min(w);
            let ch = rng.gen_range(cfg.cutout_size.0..=cfg.cutout_size.1).min(h);
            if cw == 0 || ch == 0 {
                continue;
            }
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            for y in y0..y0 + ch {
                for x in x0..x0 + cw {
                    field[(y * w + x) as usize] = fill;
                }
            }
        }
    }
    if cfg.brightness_delta > 0.0 {
        let delta = rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta) / 255.0;
        for v in field.iter_mut() {
            *v += delta;
        }
    }
    if cfg.contrast_range != (1.0, 1.0) {
        let factor = rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1);
        for v in field.iter_mut() {
            *v = 0.5 + (*v - 0.5) * factor;
        }
    }

    imgops::to_image(&field, w, h)
}
