//! Procedural generator of fake ESPI-style scenes: groups of concentric
//! elliptical fringes of varying size, orientation and eccentricity over a
//! wavy, noisy background, with exact annotations.
//!
//! Generation is a pure function of the config, including its seed; a dataset
//! derives one sub-seed per image so parallel and serial runs produce
//! identical corpora.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::annotations::{
    self, Annotation, AnnotationError, DatasetManifest, FrameRecord, Split,
};
use crate::geometry::Ellipse;

/// Scene parameters. All ranges are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub n_antinodes: (u32, u32),
    /// Integer ring counts drawn from this range (capped so ring spacing
    /// along the minor axis stays ≥ 2 px).
    pub rings_range: (u32, u32),
    /// Semi-axis range in pixels; the minor axis is drawn from
    /// `[axis_range.0, a]`.
    pub axis_range: (f64, f64),
    /// Number of background sinusoids.
    pub waves_range: (u32, u32),
    /// Per-wave amplitude in normalized gray units.
    pub wave_amplitude: (f64, f64),
    /// Background wavelength range in pixels.
    pub wave_period: (f64, f64),
    /// Gaussian pixel noise, in gray levels out of 255.
    pub noise_sigma: f64,
    /// Gaussian blur applied before noise, in pixels. 0 disables.
    pub blur_sigma: f64,
    /// Minimum centroid separation in pixels. `None` derives a value from the
    /// default 6×6 grid so no cell ever holds more than two centroids.
    pub min_centroid_sep: Option<f64>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 384,
            n_antinodes: (1, 6),
            rings_range: (1, 11),
            axis_range: (28.0, 80.0),
            waves_range: (2, 5),
            wave_amplitude: (0.04, 0.12),
            wave_period: (60.0, 250.0),
            noise_sigma: 6.0,
            blur_sigma: 0.8,
            min_centroid_sep: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Small square scenes sized for CPU training experiments.
    pub fn desk_64(seed: u64) -> Self {
        Self {
            width: 64,
            height: 64,
            n_antinodes: (1, 2),
            rings_range: (1, 4),
            axis_range: (8.0, 15.0),
            waves_range: (2, 3),
            wave_amplitude: (0.03, 0.08),
            wave_period: (24.0, 64.0),
            noise_sigma: 4.0,
            blur_sigma: 0.5,
            min_centroid_sep: None,
            seed,
        }
    }

    /// Effective minimum centroid separation; the derived default guarantees
    /// at most two centroids per cell of a 6×6 grid (pigeonhole on the split
    /// halves of a cell).
    pub fn centroid_separation(&self) -> f64 {
        self.min_centroid_sep.unwrap_or_else(|| {
            let cw = self.width as f64 / 6.0;
            let ch = self.height as f64 / 6.0;
            let (long, short) = if cw >= ch { (cw, ch) } else { (ch, cw) };
            ((long / 2.0).powi(2) + short.powi(2)).sqrt() + 1.0
        })
    }
}

#[derive(Debug)]
pub enum SynthError {
    /// Could not place the requested antinodes without overlap.
    Placement { attempts: usize },
    Io { path: PathBuf, source: std::io::Error },
    Image(image::ImageError),
    Annotation(AnnotationError),
}

impl std::fmt::Display for SynthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthError::Placement { attempts } => {
                write!(f, "failed to place antinodes after {attempts} attempts")
            }
            SynthError::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            SynthError::Image(e) => write!(f, "image error: {e}"),
            SynthError::Annotation(e) => write!(f, "annotation error: {e}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<AnnotationError> for SynthError {
    fn from(e: AnnotationError) -> Self {
        SynthError::Annotation(e)
    }
}

/// Radial fringe intensity: `½(1 + cos(2π·rings·ρ))` for normalized
/// elliptical radius `ρ ∈ [0, 1]`.
///
/// The profile peaks at the center and at `ρ = k/rings`, so an antinode shows
/// exactly `rings` bright fringes between (not counting) the central spot and
/// the boundary inclusive.
pub fn fringe_profile(rings: u32, rho: f64) -> f64 {
    0.5 * (1.0 + (2.0 * std::f64::consts::PI * rings as f64 * rho).cos())
}

const PLACEMENT_RESTARTS: usize = 30;
const POSITION_ATTEMPTS: usize = 80;
// gray levels for fringe rendering and background base
const FRINGE_LO: f64 = 0.12;
const FRINGE_HI: f64 = 0.92;
const BACKGROUND_BASE: f64 = 0.42;

/// Generates one scene. Identical configs (including seed) produce
/// byte-identical images and annotations.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(GrayImage, Vec<Annotation>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = cfg.width as usize;
    let h = cfg.height as usize;

    // background: a few low-frequency plane waves around a base gray
    let mut field = vec![BACKGROUND_BASE; w * h];
    let n_waves = sample_range_u32(&mut rng, cfg.waves_range);
    for _ in 0..n_waves {
        let amp = rng.gen_range(cfg.wave_amplitude.0..=cfg.wave_amplitude.1);
        let period = rng.gen_range(cfg.wave_period.0..=cfg.wave_period.1);
        let dir = rng.gen_range(0.0..std::f64::consts::PI);
        let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let (sin_d, cos_d) = dir.sin_cos();
        let k = 2.0 * std::f64::consts::PI / period;
        for y in 0..h {
            for x in 0..w {
                let proj = x as f64 * cos_d + y as f64 * sin_d;
                field[y * w + x] += amp * (k * proj + phase).sin();
            }
        }
    }

    // antinode placement with rejection, then fringe rendering
    let n = sample_range_u32(&mut rng, cfg.n_antinodes);
    let annotations = place_antinodes(cfg, &mut rng, n)?;
    for ann in &annotations {
        render_fringes(&mut field, w, ann);
    }

    if cfg.blur_sigma > 0.0 {
        gaussian_blur(&mut field, w, h, cfg.blur_sigma);
    }
    if cfg.noise_sigma > 0.0 {
        let sigma = cfg.noise_sigma / 255.0;
        let normal = rand_distr::Normal::new(0.0, sigma).expect("sigma must be finite");
        for v in field.iter_mut() {
            *v += rng.sample(normal);
        }
    }

    let pixels: Vec<u8> = field
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let image = GrayImage::from_raw(cfg.width, cfg.height, pixels)
        .expect("buffer matches dimensions");
    Ok((image, annotations))
}

fn sample_range_u32(rng: &mut ChaCha8Rng, range: (u32, u32)) -> u32 {
    rng.gen_range(range.0..=range.1)
}

fn place_antinodes(
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    n: u32,
) -> Result<Vec<Annotation>, SynthError> {
    let min_sep = cfg.centroid_separation();
    if n == 0 {
        return Ok(Vec::new());
    }

    for _restart in 0..PLACEMENT_RESTARTS {
        // draw shapes first and place largest-first; big antinodes are the
        // hard ones to fit
        let mut shapes: Vec<(f64, f64, f64, u32)> = (0..n)
            .map(|_| {
                let a = rng.gen_range(cfg.axis_range.0..=cfg.axis_range.1);
                let b = rng.gen_range(cfg.axis_range.0..=a.max(cfg.axis_range.0));
                let theta = rng.gen_range(0.0..180.0);
                // cap rings so fringe spacing along the minor axis stays ≥ 2 px
                let rings_hi = cfg.rings_range.1.min((b / 2.0).floor() as u32).max(cfg.rings_range.0);
                let rings = rng.gen_range(cfg.rings_range.0..=rings_hi);
                (a, b, theta, rings)
            })
            .collect();
        shapes.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap());

        let mut placed: Vec<Annotation> = Vec::with_capacity(n as usize);
        'shapes: for &(a, b, theta, rings) in &shapes {
            let candidate = Ellipse::new(0.0, 0.0, a, b, theta);
            let (ex, ey) = candidate.bbox_half_extents();
            if 2.0 * ex + 2.0 >= cfg.width as f64 || 2.0 * ey + 2.0 >= cfg.height as f64 {
                break 'shapes; // does not fit the frame at all; restart
            }
            for _ in 0..POSITION_ATTEMPTS {
                let cx = rng.gen_range(ex + 1.0..cfg.width as f64 - ex - 1.0);
                let cy = rng.gen_range(ey + 1.0..cfg.height as f64 - ey - 1.0);
                // interiors disjoint (circumscribed circles) and centroid
                // separation respected
                let ok = placed.iter().all(|other| {
                    let d = ((cx - other.ellipse.cx).powi(2)
                        + (cy - other.ellipse.cy).powi(2))
                    .sqrt();
                    d > (a + other.ellipse.a + 2.0).max(min_sep)
                });
                if ok {
                    placed.push(Annotation {
                        ellipse: Ellipse::new(cx, cy, a, b, theta),
                        rings: rings as f64,
                    });
                    continue 'shapes;
                }
            }
            break 'shapes; // this shape found no position; restart
        }
        if placed.len() == n as usize {
            return Ok(placed);
        }
    }
    Err(SynthError::Placement { attempts: PLACEMENT_RESTARTS * POSITION_ATTEMPTS })
}

fn render_fringes(field: &mut [f64], w: usize, ann: &Annotation) {
    let e = &ann.ellipse;
    let rings = ann.rings as u32;
    let (ex, ey) = e.bbox_half_extents();
    let h = field.len() / w;
    let x0 = (e.cx - ex).floor().max(0.0) as usize;
    let x1 = ((e.cx + ex).ceil() as usize).min(w - 1);
    let y0 = (e.cy - ey).floor().max(0.0) as usize;
    let y1 = ((e.cy + ey).ceil() as usize).min(h - 1);
    let (sin_t, cos_t) = e.theta.to_radians().sin_cos();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - e.cx;
            let dy = y as f64 - e.cy;
            let u = (dx * cos_t + dy * sin_t) / e.a;
            let v = (-dx * sin_t + dy * cos_t) / e.b;
            let rho2 = u * u + v * v;
            if rho2 <= 1.0 {
                let i = fringe_profile(rings, rho2.sqrt());
                field[y * w + x] = FRINGE_LO + (FRINGE_HI - FRINGE_LO) * i;
            }
        }
    }
}

/// Separable Gaussian blur with edge replication.
pub(crate) fn gaussian_blur(field: &mut Vec<f64>, w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * field[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[sy * w + x];
            }
            field[y * w + x] = acc;
        }
    }
}

/// Sub-seed for image `index` of a dataset (SplitMix64 over the base seed).
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `n_images` scenes into `out_dir`: `images/frame_NNNNNN.png`,
/// per-frame CSVs under `ann/`, and `manifest.csv`. Scenes render in
/// parallel; each derives its own sub-seed so the corpus is reproducible.
pub fn generate_dataset(
    cfg: &SceneConfig,
    n_images: usize,
    out_dir: &Path,
    name: &str,
) -> Result<DatasetManifest, SynthError> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| SynthError::Io {
        path: images_dir.clone(),
        source: e,
    })?;

    let scenes: Result<Vec<(usize, Vec<Annotation>)>, SynthError> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let sub_cfg = SceneConfig { seed: scene_seed(cfg.seed, i as u64), ..cfg.clone() };
            let (image, annotations) = generate_scene(&sub_cfg)?;
            let rel = format!("images/frame_{i:06}.png");
            image
                .save(out_dir.join(&rel))
                .map_err(SynthError::Image)?;
            Ok((i, annotations))
        })
        .collect();
    let mut scenes = scenes?;
    scenes.sort_by_key(|(i, _)| *i);

    let records = scenes
        .into_iter()
        .map(|(i, annotations)| FrameRecord {
            frame_index: i,
            image_path: format!("images/frame_{i:06}.png"),
            annotations,
        })
        .collect();
    let manifest = DatasetManifest {
        name: name.to_string(),
        split: Split::Train,
        records,
        image_width: cfg.width,
        image_height: cfg.height,
    };
    annotations::write_annotations(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Applies a caller-supplied restyling function (CycleGAN stand-in) to the
/// image. Annotations are untouched by construction.
pub fn style_hook<F>(image: GrayImage, styler: F) -> GrayImage
where
    F: Fn(GrayImage) -> GrayImage,
{
    styler(image)
}
