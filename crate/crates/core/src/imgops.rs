//! Grayscale pixel math shared by the generator and the augmentation stages.
//! Images move between `u8` buffers and normalized `f64` fields; all filters
//! run on the `f64` side.

use image::GrayImage;

pub(crate) fn to_field(image: &GrayImage) -> Vec<f64> {
    image.as_raw().iter().map(|&v| v as f64 / 255.0).collect()
}

pub(crate) fn to_image(field: &[f64], width: u32, height: u32) -> GrayImage {
    let pixels: Vec<u8> = field
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(width, height, pixels).expect("buffer matches dimensions")
}

pub(crate) fn mean(field: &[f64]) -> f64 {
    if field.is_empty() {
        0.0
    } else {
        field.iter().sum::<f64>() / field.len() as f64
    }
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is a no-op.
pub(crate) fn gaussian_blur(field: &mut Vec<f64>, w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
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

/// Bilinear sample with a constant fill outside the frame.
pub(crate) fn bilinear(field: &[f64], w: usize, h: usize, x: f64, y: f64, fill: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return fill;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    field[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
        + field[y0 * w + x1] * fx * (1.0 - fy)
        + field[y1 * w + x0] * (1.0 - fx) * fy
        + field[y1 * w + x1] * fx * fy
}
