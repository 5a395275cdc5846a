//! Physics post-processing of detector output: per-note ring-count time
//! series, rectified-cosine frequency fits, and the area/eccentricity scatter
//! exports.
//!
//! The fit model is `r(t) = |A cos(ωt + φ)|` — ring counts measure an
//! oscillation amplitude and cannot go negative, and the fit is deliberately
//! constant-amplitude: its purpose is the frequency. The initial ω comes from
//! the dominant spectral peak of `r(t)²`, which oscillates at twice the
//! underlying frequency.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::geometry::{self, Ellipse};
use crate::gridcodec::Detection;

/// Region of the frame assigned to one named note.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteRegion {
    pub label: String,
    pub roi: Roi,
    pub expected_freq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Roi {
    Ellipse(Ellipse),
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Roi {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Roi::Ellipse(e) => e.contains(x, y),
            Roi::Rect { x0, y0, x1, y1 } => x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1,
        }
    }
}

/// Uniformly sampled ring counts for one note.
#[derive(Debug, Clone, PartialEq)]
pub struct RingSeries {
    pub times: Vec<f64>,
    pub rings: Vec<f64>,
    pub source: String,
}

/// Parameters of a fitted `|A cos(ωt + φ)|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    /// Peak ring count, nonnegative.
    pub amplitude: f64,
    /// Underlying oscillation frequency `ω / 2π` in Hz, positive.
    pub freq_hz: f64,
    /// Phase in radians, folded into `[0, π)`.
    pub phase: f64,
    pub residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    /// No detection ever appeared inside the region.
    EmptySeries,
    /// The series carries no oscillation to fit.
    NoOscillation,
    /// The series is too short for a trustworthy fit.
    InsufficientData(String),
    /// Refinement failed to converge; the best iterate is returned.
    FitDiverged { best: FitResult },
}

impl std::fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnalysisError::EmptySeries => write!(f, "no detections inside the region"),
            AnalysisError::NoOscillation => write!(f, "series shows no oscillation"),
            AnalysisError::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            AnalysisError::FitDiverged { best } => write!(
                f,
                "fit did not converge (best iterate: A={:.3}, f={:.1} Hz)",
                best.amplitude, best.freq_hz
            ),
        }
    }
}

impl std::error::Error for AnalysisError {}

/// Builds the ring-count series for a region: per frame, the
/// highest-confidence detection whose centroid falls inside the region;
/// frames with none contribute 0 rings (an antinode below visibility).
pub fn assemble_series(
    dets_per_frame: &[Vec<Detection>],
    region: &NoteRegion,
    frame_rate: f64,
) -> Result<RingSeries, AnalysisError> {
    assert!(frame_rate > 0.0, "frame rate must be positive");
    let mut rings = Vec::with_capacity(dets_per_frame.len());
    let mut any = false;
    for dets in dets_per_frame {
        let best = dets
            .iter()
            .filter(|d| region.roi.contains(d.ellipse.cx, d.ellipse.cy))
            .max_by(|p, q| p.confidence.partial_cmp(&q.confidence).unwrap());
        match best {
            Some(d) => {
                any = true;
                rings.push(d.rings);
            }
            None => rings.push(0.0),
        }
    }
    if !any {
        return Err(AnalysisError::EmptySeries);
    }
    Ok(RingSeries {
        times: (0..dets_per_frame.len()).map(|i| i as f64 / frame_rate).collect(),
        rings,
        source: region.label.clone(),
    })
}

/// Least-squares fit of `|A cos(ωt + φ)|` to the series.
///
/// The initial frequency comes from the dominant non-DC peak of the power
/// spectrum of `r²` (at twice the underlying frequency); amplitude from
/// `mean(r²) = A²/2`; phase from a coarse grid. A Levenberg-Marquardt loop
/// then refines all three until the relative parameter change drops below
/// 1e-8, for at most 200 iterations.
pub fn fit_abs_cos(series: &RingSeries) -> Result<FitResult, AnalysisError> {
    let n = series.rings.len();
    if n < 16 {
        return Err(AnalysisError::InsufficientData(format!("{n} samples")));
    }
    let t = &series.times;
    let r = &series.rings;
    let dt = t[1] - t[0];

    let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - r.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    if spread <= 1e-9 * scale {
        return Err(AnalysisError::NoOscillation);
    }

    // spectral peak of r² gives 2f
    let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
    let mean_sq = sq.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> =
        sq.iter().map(|v| Complex::new(v - mean_sq, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (peak_bin, peak_mag) = buf[1..n / 2]
        .iter()
        .enumerate()
        .map(|(i, c)| (i + 1, c.norm()))
        .max_by(|p, q| p.1.partial_cmp(&q.1).unwrap())
        .ok_or(AnalysisError::NoOscillation)?;
    if peak_mag <= 1e-9 * n as f64 * scale * scale {
        return Err(AnalysisError::NoOscillation);
    }
    let f_double = peak_bin as f64 / (n as f64 * dt);
    let f0 = f_double / 2.0;
    let duration = t[n - 1] - t[0];
    if duration * f0 < 4.0 {
        return Err(AnalysisError::InsufficientData(format!(
            "{:.1} cycles at the estimated {f0:.1} Hz; need at least 4",
            duration * f0
        )));
    }

    let mut omega = 2.0 * std::f64::consts::PI * f0;
    let mut amp = (2.0 * mean_sq).sqrt().max(1e-12);
    let mut phase = 0.0;
    let sse = |a: f64, w: f64, p: f64| -> f64 {
        t.iter()
            .zip(r)
            .map(|(&ti, &ri)| {
                let e = (a * (w * ti + p).cos()).abs() - ri;
                e * e
            })
            .sum()
    };
    let mut best_sse = f64::INFINITY;
    for k in 0..24 {
        let p = std::f64::consts::PI * k as f64 / 24.0;
        let s = sse(amp, omega, p);
        if s < best_sse {
            best_sse = s;
            phase = p;
        }
    }

    // Levenberg-Marquardt on (A, ω, φ)
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..200 {
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jte = [0.0f64; 3];
        for (&ti, &ri) in t.iter().zip(r) {
            let arg = omega * ti + phase;
            let c = arg.cos();
            let m = amp * c;
            let sign = if m >= 0.0 { 1.0 } else { -1.0 };
            let e = m.abs() - ri;
            let j = [
                sign * c,
                -sign * amp * arg.sin() * ti,
                -sign * amp * arg.sin(),
            ];
            for a in 0..3 {
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
                jte[a] += j[a] * e;
            }
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut m = jtj;
            for d in 0..3 {
                m[d][d] += lambda * jtj[d][d].max(1e-18);
            }
            let Some(delta) = solve3(&m, &[-jte[0], -jte[1], -jte[2]]) else {
                lambda *= 4.0;
                continue;
            };
            let cand = (amp + delta[0], omega + delta[1], phase + delta[2]);
            let s_new = sse(cand.0, cand.1, cand.2);
            if s_new <= best_sse {
                let rel = (delta[0] / amp.abs().max(1e-12))
                    .abs()
                    .max((delta[1] / omega.abs().max(1e-12)).abs())
                    .max((delta[2]).abs().max(0.0) / std::f64::consts::PI);
                amp = cand.0;
                omega = cand.1;
                phase = cand.2;
                best_sse = s_new;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-8 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // stuck in a flat region; treat as converged if the step is tiny
            converged = true;
            break;
        }
    }

    // canonical form: A >= 0, ω > 0, φ in [0, π)
    if amp < 0.0 {
        amp = -amp;
    }
    if omega < 0.0 {
        omega = -omega;
        phase = -phase;
    }
    phase = phase.rem_euclid(std::f64::consts::PI);
    let result = FitResult {
        amplitude: amp,
        freq_hz: omega / (2.0 * std::f64::consts::PI),
        phase,
        residual_rms: (best_sse / n as f64).sqrt(),
    };
    if !converged || !result.freq_hz.is_finite() || result.freq_hz <= 0.0 {
        return Err(AnalysisError::FitDiverged { best: result });
    }
    Ok(result)
}

fn solve3(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let mut a = *m;
    let mut b = *rhs;
    for col in 0..3 {
        let mut pivot = col;
        for row in col + 1..3 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..3).rev() {
        let mut acc = b[col];
        for k in col + 1..3 {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Rows `(frame, π·a·b, rings)` for every detection, using the raw predicted
/// axes.
pub fn export_area_vs_rings(
    dets_per_frame: &[Vec<Detection>],
    frame_indices: &[usize],
) -> Vec<(usize, f64, f64)> {
    assert_eq!(dets_per_frame.len(), frame_indices.len());
    let mut rows = Vec::new();
    for (dets, &frame) in dets_per_frame.iter().zip(frame_indices) {
        for d in dets {
            rows.push((frame, geometry::area(&d.ellipse), d.rings));
        }
    }
    rows
}

/// Rows `(frame, 1 - b²/a², rings)` from the raw predicted axes, so `b > a`
/// produces negative values. Returns the rows and the number of rows skipped
/// for degenerate `a = 0`.
pub fn export_ecc2_vs_rings(
    dets_per_frame: &[Vec<Detection>],
    frame_indices: &[usize],
) -> (Vec<(usize, f64, f64)>, usize) {
    assert_eq!(dets_per_frame.len(), frame_indices.len());
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for (dets, &frame) in dets_per_frame.iter().zip(frame_indices) {
        for d in dets {
            match geometry::ecc_squared(d.ellipse.a, d.ellipse.b) {
                Ok(e2) => rows.push((frame, e2, d.rings)),
                Err(_) => skipped += 1,
            }
        }
    }
    (rows, skipped)
}

pub fn area_table_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("frame,area_px2,rings\n");
    for (frame, area, rings) in rows {
        out.push_str(&format!("{frame},{area:.6},{rings:.6}\n"));
    }
    out
}

pub fn ecc2_table_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("frame,ecc2,rings\n");
    for (frame, e2, rings) in rows {
        out.push_str(&format!("{frame},{e2:.6},{rings:.6}\n"));
    }
    out
}

pub fn fit_results_csv(fits: &[(String, FitResult)]) -> String {
    let mut out = String::from("note,A,f_hz,phase_rad,residual_rms\n");
    for (label, fit) in fits {
        out.push_str(&format!(
            "{label},{:.6},{:.6},{:.6},{:.6}\n",
            fit.amplitude, fit.freq_hz, fit.phase, fit.residual_rms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, rings: f64, conf: f64) -> Detection {
        Detection {
            ellipse: Ellipse::new(cx, cy, 10.0, 5.0, 0.0),
            rings,
            confidence: conf,
        }
    }

    fn d5_region() -> NoteRegion {
        NoteRegion {
            label: "D5".into(),
            roi: Roi::Rect { x0: 0.0, y0: 0.0, x1: 100.0, y1: 100.0 },
            expected_freq: Some(596.0),
        }
    }

    #[test]
    fn series_with_no_in_roi_detection_is_empty_error() {
        let frames = vec![vec![det(200.0, 200.0, 3.0, 0.9)]; 5];
        assert_eq!(
            assemble_series(&frames, &d5_region(), 100.0),
            Err(AnalysisError::EmptySeries)
        );
    }

    #[test]
    fn series_length_equals_frame_count_and_gaps_are_zero() {
        let frames = vec![
            vec![det(50.0, 50.0, 3.0, 0.9)],
            vec![],
            vec![det(50.0, 50.0, 4.0, 0.9)],
        ];
        let s = assemble_series(&frames, &d5_region(), 50.0).unwrap();
        assert_eq!(s.rings, vec![3.0, 0.0, 4.0]);
        assert_eq!(s.times, vec![0.0, 0.02, 0.04]);
        assert_eq!(s.source, "D5");
    }

    #[test]
    fn higher_confidence_detection_wins_within_roi() {
        let frames = vec![vec![det(50.0, 50.0, 3.0, 0.6), det(60.0, 60.0, 7.0, 0.8)]];
        let s = assemble_series(&frames, &d5_region(), 100.0).unwrap();
        assert_eq!(s.rings, vec![7.0]);
    }

    fn synth_series(
        amp: f64,
        freq: f64,
        phase: f64,
        fs: f64,
        duration: f64,
        noise: f64,
        seed: u64,
    ) -> RingSeries {
        let n = (fs * duration).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, noise.max(1e-30)).unwrap();
        let times: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
        let rings = times
            .iter()
            .map(|&t| {
                let clean = (amp * (2.0 * std::f64::consts::PI * freq * t + phase).cos()).abs();
                if noise > 0.0 {
                    (clean + rng.sample(normal)).max(0.0)
                } else {
                    clean
                }
            })
            .collect();
        RingSeries { times, rings, source: "synth".into() }
    }

    #[test]
    fn fit_recovers_596_hz_with_noise() {
        let s = synth_series(8.0, 596.0, 0.4, 10_000.0, 0.15, 0.3, 1);
        let fit = fit_abs_cos(&s).unwrap();
        assert!(
            (fit.freq_hz - 596.0).abs() / 596.0 < 0.01,
            "fit {} Hz",
            fit.freq_hz
        );
        assert!(fit.amplitude > 0.0);
    }

    #[test]
    fn fit_recovers_660_hz_with_noise() {
        let s = synth_series(8.0, 660.0, 1.2, 10_000.0, 0.15, 0.8, 2);
        let fit = fit_abs_cos(&s).unwrap();
        assert!(
            (fit.freq_hz - 660.0).abs() / 660.0 < 0.01,
            "fit {} Hz",
            fit.freq_hz
        );
    }

    #[test]
    fn noiseless_fits_recover_amplitude_and_frequency_to_point1_percent() {
        for (i, freq) in [100.0, 250.0, 596.0, 660.0, 1000.0].into_iter().enumerate() {
            let s = synth_series(5.5, freq, 0.9, 5000.0, 0.2, 0.0, i as u64);
            let fit = fit_abs_cos(&s).unwrap();
            assert!(
                (fit.freq_hz - freq).abs() / freq < 1e-3,
                "{freq} Hz fit as {}",
                fit.freq_hz
            );
            assert!(
                (fit.amplitude - 5.5).abs() / 5.5 < 1e-3,
                "{freq} Hz amplitude {}",
                fit.amplitude
            );
        }
    }

    #[test]
    fn constant_series_is_no_oscillation() {
        let n = 1000;
        let s = RingSeries {
            times: (0..n).map(|i| i as f64 / 1000.0).collect(),
            rings: vec![4.2; n],
            source: "flat".into(),
        };
        assert_eq!(fit_abs_cos(&s), Err(AnalysisError::NoOscillation));
    }

    #[test]
    fn too_short_series_is_rejected() {
        let s = synth_series(3.0, 596.0, 0.0, 10_000.0, 0.001, 0.0, 3);
        assert!(matches!(
            fit_abs_cos(&s),
            Err(AnalysisError::InsufficientData(_))
        ));
    }

    #[test]
    fn fit_result_is_canonical() {
        let s = synth_series(4.0, 300.0, 2.9, 8000.0, 0.1, 0.1, 4);
        let fit = fit_abs_cos(&s).unwrap();
        assert!(fit.amplitude >= 0.0);
        assert!(fit.freq_hz > 0.0);
        assert!((0.0..std::f64::consts::PI).contains(&fit.phase));
    }

    #[test]
    fn area_export_rows() {
        let d = Detection {
            ellipse: Ellipse::new(10.0, 10.0, 2.0, 1.0, 0.0),
            rings: 3.0,
            confidence: 0.9,
        };
        let rows = export_area_vs_rings(&[vec![d], vec![]], &[7, 8]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 7);
        assert!((rows[0].1 - 2.0 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(rows[0].2, 3.0);
        assert!(export_area_vs_rings(&[], &[]).is_empty());
    }

    #[test]
    fn ecc2_export_keeps_raw_sign_and_skips_degenerate() {
        let mk = |a: f64, b: f64| Detection {
            ellipse: Ellipse::new(0.0, 0.0, a, b, 0.0),
            rings: 2.0,
            confidence: 0.5,
        };
        let (rows, skipped) =
            export_ecc2_vs_rings(&[vec![mk(1.0, 1.0), mk(1.0, 2.0), mk(0.0, 1.0), mk(2.0, 1.0)]], &[0]);
        assert_eq!(skipped, 1);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].1, 0.0);
        assert_eq!(rows[1].1, -3.0);
        assert_eq!(rows[2].1, 0.75);
    }

    #[test]
    fn csv_writers_have_expected_headers() {
        assert!(area_table_csv(&[]).starts_with("frame,area_px2,rings\n"));
        assert!(ecc2_table_csv(&[]).starts_with("frame,ecc2,rings\n"));
        let fits = vec![(
            "D5".to_string(),
            FitResult { amplitude: 8.0, freq_hz: 596.0, phase: 0.5, residual_rms: 0.3 },
        )];
        let csv = fit_results_csv(&fits);
        assert!(csv.starts_with("note,A,f_hz,phase_rad,residual_rms\n"));
        assert!(csv.contains("D5,8.000000,596.000000"));
    }
}
