//! Encoding annotations into the grid predictor tensor and decoding model
//! output back into detections.
//!
//! The image is covered by a `rows × cols` grid; each cell owns
//! `predictors_per_cell` predictor slots and each predictor emits 8 values in
//! the order `(p, x, y, a, b, c, s, r)`:
//!
//! * `p` — existence, 1 for an antinode, 0 for background
//! * `x, y` — centroid offset from the cell center, in cell widths/heights,
//!   so both live in `[-0.5, 0.5]`
//! * `a, b` — semi-axes divided by the image width (width for both, so
//!   circles stay circles)
//! * `c, s` — `cos 2θ`, `sin 2θ`
//! * `r` — ring count divided by `rings_max`
//!
//! The flat tensor is ordered `(row, col, predictor, var)`; the model's output
//! layer uses the identical ordering.

use crate::annotations::Annotation;
use crate::geometry::{self, Ellipse};

/// Variable order within one predictor block.
pub const VAR_NAMES: [&str; 8] = ["p", "x", "y", "a", "b", "c", "s", "r"];

/// Grid geometry plus the normalization constants needed by the codec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub predictors_per_cell: usize,
    pub vars_per_predictor: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Ring counts are stored as `rings / rings_max`.
    pub rings_max: f64,
}

impl GridSpec {
    /// The 6×6×2×8 layout (576 outputs) for a given image size.
    pub fn standard(image_width: u32, image_height: u32) -> Self {
        Self {
            rows: 6,
            cols: 6,
            predictors_per_cell: 2,
            vars_per_predictor: 8,
            image_width,
            image_height,
            rings_max: crate::annotations::DEFAULT_RINGS_MAX,
        }
    }

    pub fn total_len(&self) -> usize {
        self.rows * self.cols * self.predictors_per_cell * self.vars_per_predictor
    }

    pub fn n_predictors(&self) -> usize {
        self.rows * self.cols * self.predictors_per_cell
    }

    pub fn cell_width(&self) -> f64 {
        self.image_width as f64 / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.image_height as f64 / self.rows as f64
    }

    /// Flat index of `(row, col, predictor, var)`.
    pub fn index(&self, row: usize, col: usize, pred: usize, var: usize) -> usize {
        ((row * self.cols + col) * self.predictors_per_cell + pred) * self.vars_per_predictor
            + var
    }
}

/// Flat target or prediction tensor, ordered `(row, col, predictor, var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    pub values: Vec<f64>,
}

impl GridTensor {
    /// Tensor with every predictor marked non-existent: `p = 0` and all other
    /// variables at the midpoint of their normalized range
    /// (`x = y = 0`, `a = b = 0.5`, `c = s = 0`, `r = 0.5`).
    pub fn empty(spec: &GridSpec) -> Self {
        let mut values = vec![0.0; spec.total_len()];
        for block in values.chunks_exact_mut(spec.vars_per_predictor) {
            block[3] = 0.5; // a
            block[4] = 0.5; // b
            block[7] = 0.5; // r
        }
        Self { values }
    }

    pub fn get(&self, spec: &GridSpec, row: usize, col: usize, pred: usize, var: usize) -> f64 {
        self.values[spec.index(row, col, pred, var)]
    }
}

/// A decoded prediction: ellipse, ring count, and existence confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub ellipse: Ellipse,
    pub rings: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn annotation(&self) -> Annotation {
        Annotation { ellipse: self.ellipse, rings: self.rings }
    }
}

/// Whether [`decode`] returns raw axes/orientation as predicted (possibly
/// `b > a`) or the normalized `a >= b` form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodecError {
    /// More antinodes landed in one cell than predictor slots.
    CellOverflow { row: usize, col: usize, count: usize },
    /// Tensor length does not match the spec.
    ShapeError { expected: usize, got: usize },
    /// An annotation does not fit the normalized ranges.
    OutOfRange(String),
}

impl std::fmt::Display for CodecError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodecError::CellOverflow { row, col, count } => write!(
                f,
                "cell ({row}, {col}) holds {count} antinodes but has only 2 predictor slots"
            ),
            CodecError::ShapeError { expected, got } => {
                write!(f, "tensor length {got}, expected {expected}")
            }
            CodecError::OutOfRange(msg) => write!(f, "annotation out of range: {msg}"),
        }
    }
}

impl std::error::Error for CodecError {}

/// Encodes a frame's annotations into the target tensor.
///
/// Antinodes are sorted by centroid, first vertically then horizontally, and
/// each is assigned to the cell containing its centroid (cells are half-open,
/// so a centroid exactly on a boundary goes to the higher-index cell). Slot 0
/// fills before slot 1; a third antinode in a cell is an error rather than a
/// silent drop.
pub fn encode(annotations: &[Annotation], spec: &GridSpec) -> Result<GridTensor, CodecError> {
    let mut tensor = GridTensor::empty(spec);
    let w = spec.image_width as f64;
    let h = spec.image_height as f64;

    let mut sorted: Vec<&Annotation> = annotations.iter().collect();
    sorted.sort_by(|p, q| {
        (p.ellipse.cy, p.ellipse.cx)
            .partial_cmp(&(q.ellipse.cy, q.ellipse.cx))
            .expect("annotation centroids must not be NaN")
    });

    let mut occupancy = vec![0usize; spec.rows * spec.cols];
    for ann in sorted {
        let e = geometry::normalize(&ann.ellipse)
            .map_err(|err| CodecError::OutOfRange(err.to_string()))?;
        if !(0.0..w).contains(&e.cx) || !(0.0..h).contains(&e.cy) {
            return Err(CodecError::OutOfRange(format!(
                "centroid ({}, {}) outside {}x{} image",
                e.cx, e.cy, spec.image_width, spec.image_height
            )));
        }
        let a_n = e.a / w;
        let b_n = e.b / w;
        if a_n > 1.0 {
            return Err(CodecError::OutOfRange(format!(
                "semi-major axis {} exceeds image width {}",
                e.a, spec.image_width
            )));
        }
        let r_n = ann.rings / spec.rings_max;
        if !(0.0..=1.0).contains(&r_n) {
            return Err(CodecError::OutOfRange(format!(
                "ring count {} outside [0, {}]",
                ann.rings, spec.rings_max
            )));
        }

        let col = ((e.cx / spec.cell_width()) as usize).min(spec.cols - 1);
        let row = ((e.cy / spec.cell_height()) as usize).min(spec.rows - 1);
        let slot = occupancy[row * spec.cols + col];
        if slot >= spec.predictors_per_cell {
            return Err(CodecError::CellOverflow { row, col, count: slot + 1 });
        }
        occupancy[row * spec.cols + col] += 1;

        let cell_cx = (col as f64 + 0.5) * spec.cell_width();
        let cell_cy = (row as f64 + 0.5) * spec.cell_height();
        let (c, s) = geometry::angle_encode(e.theta);

        let base = spec.index(row, col, slot, 0);
        let block = &mut tensor.values[base..base + 8];
        block[0] = 1.0;
        block[1] = (e.cx - cell_cx) / spec.cell_width();
        block[2] = (e.cy - cell_cy) / spec.cell_height();
        block[3] = a_n;
        block[4] = b_n;
        block[5] = c;
        block[6] = s;
        block[7] = r_n;
    }
    Ok(tensor)
}

/// Decodes a tensor into detections: one per predictor with `p >= threshold`.
///
/// `Raw` mode keeps the predicted axes and half-angle orientation untouched so
/// analysis can observe `b > a`; `Normalized` re-establishes `a >= b`.
/// A degenerate `(c, s) = (0, 0)` decodes to orientation 0.
pub fn decode(
    tensor: &GridTensor,
    spec: &GridSpec,
    threshold: f64,
    mode: DecodeMode,
) -> Result<Vec<Detection>, CodecError> {
    if tensor.values.len() != spec.total_len() {
        return Err(CodecError::ShapeError {
            expected: spec.total_len(),
            got: tensor.values.len(),
        });
    }
    let w = spec.image_width as f64;
    let mut detections = Vec::new();
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            for pred in 0..spec.predictors_per_cell {
                let base = spec.index(row, col, pred, 0);
                let block = &tensor.values[base..base + 8];
                let p = block[0];
                if p < threshold {
                    continue;
                }
                let cell_cx = (col as f64 + 0.5) * spec.cell_width();
                let cell_cy = (row as f64 + 0.5) * spec.cell_height();
                let theta = geometry::angle_decode(block[5], block[6]).unwrap_or(0.0);
                let mut ellipse = Ellipse::new(
                    cell_cx + block[1] * spec.cell_width(),
                    cell_cy + block[2] * spec.cell_height(),
                    block[3] * w,
                    block[4] * w,
                    theta,
                );
                if mode == DecodeMode::Normalized {
                    if let Ok(n) = geometry::normalize(&ellipse) {
                        ellipse = n;
                    }
                }
                detections.push(Detection {
                    ellipse,
                    rings: block[7] * spec.rings_max,
                    confidence: p,
                });
            }
        }
    }
    Ok(detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> GridSpec {
        GridSpec::standard(512, 384)
    }

    fn ann(cx: f64, cy: f64, a: f64, b: f64, theta: f64, rings: f64) -> Annotation {
        Annotation { ellipse: Ellipse::new(cx, cy, a, b, theta), rings }
    }

    /// Random annotation set with at most `predictors_per_cell` per cell,
    /// built directly from the cell structure so it is encodable by
    /// construction. Ellipses are already in normalized form.
    pub(crate) fn random_encodable(spec: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<Annotation> {
        let n_cells = rng.gen_range(0..6);
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for _ in 0..n_cells {
            cells.push((rng.gen_range(0..spec.rows), rng.gen_range(0..spec.cols)));
        }
        cells.sort_unstable();
        cells.dedup();
        let mut out = Vec::new();
        for (row, col) in cells {
            let per_cell = rng.gen_range(1..=spec.predictors_per_cell);
            for _ in 0..per_cell {
                let cx = (col as f64 + rng.gen_range(0.05..0.95)) * spec.cell_width();
                let cy = (row as f64 + rng.gen_range(0.05..0.95)) * spec.cell_height();
                let a = rng.gen_range(5.0..60.0);
                let b = rng.gen_range(1.0..=a);
                let theta = rng.gen_range(0.0..180.0);
                out.push(ann(cx, cy, a, b, theta, rng.gen_range(0.0..spec.rings_max)));
            }
        }
        out
    }

    #[test]
    fn empty_input_gives_background_tensor() {
        let spec = spec();
        let t = encode(&[], &spec).unwrap();
        assert_eq!(t.values.len(), 576);
        for block in t.values.chunks_exact(8) {
            assert_eq!(block[0], 0.0);
            assert_eq!(block[1], 0.0);
            assert_eq!(block[2], 0.0);
            assert_eq!(block[3], 0.5);
            assert_eq!(block[4], 0.5);
            assert_eq!(block[5], 0.0);
            assert_eq!(block[6], 0.0);
            assert_eq!(block[7], 0.5);
        }
    }

    #[test]
    fn centroid_at_cell_center_has_zero_offset() {
        let spec = spec();
        // center of cell (1, 2): x = 2.5 * cw, y = 1.5 * ch
        let cx = 2.5 * spec.cell_width();
        let cy = 1.5 * spec.cell_height();
        let t = encode(&[ann(cx, cy, 30.0, 20.0, 10.0, 4.0)], &spec).unwrap();
        assert_eq!(t.get(&spec, 1, 2, 0, 0), 1.0);
        assert_relative_eq!(t.get(&spec, 1, 2, 0, 1), 0.0, epsilon = 1e-12);
        assert_relative_eq!(t.get(&spec, 1, 2, 0, 2), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn two_in_one_cell_fill_both_slots() {
        let spec = spec();
        let cw = spec.cell_width();
        let ch = spec.cell_height();
        let anns = [
            ann(0.3 * cw, 0.3 * ch, 10.0, 5.0, 0.0, 2.0),
            ann(0.7 * cw, 0.7 * ch, 10.0, 5.0, 0.0, 3.0),
        ];
        let t = encode(&anns, &spec).unwrap();
        assert_eq!(t.get(&spec, 0, 0, 0, 0), 1.0);
        assert_eq!(t.get(&spec, 0, 0, 1, 0), 1.0);
        // sorted first vertically: the y=0.3ch one takes slot 0
        assert!(t.get(&spec, 0, 0, 0, 2) < 0.0);
        assert!(t.get(&spec, 0, 0, 1, 2) > 0.0);
    }

    #[test]
    fn three_in_one_cell_is_overflow() {
        let spec = spec();
        let cw = spec.cell_width();
        let ch = spec.cell_height();
        let anns = [
            ann(0.2 * cw, 0.2 * ch, 5.0, 3.0, 0.0, 1.0),
            ann(0.5 * cw, 0.5 * ch, 5.0, 3.0, 0.0, 1.0),
            ann(0.8 * cw, 0.8 * ch, 5.0, 3.0, 0.0, 1.0),
        ];
        match encode(&anns, &spec) {
            Err(CodecError::CellOverflow { row: 0, col: 0, .. }) => {}
            other => panic!("expected CellOverflow, got {other:?}"),
        }
    }

    #[test]
    fn boundary_centroid_goes_to_higher_cell() {
        let spec = spec();
        let t = encode(
            &[ann(spec.cell_width(), spec.cell_height(), 8.0, 4.0, 0.0, 1.0)],
            &spec,
        )
        .unwrap();
        assert_eq!(t.get(&spec, 1, 1, 0, 0), 1.0);
        assert_relative_eq!(t.get(&spec, 1, 1, 0, 1), -0.5);
        assert_relative_eq!(t.get(&spec, 1, 1, 0, 2), -0.5);
    }

    #[test]
    fn out_of_bounds_centroid_is_error() {
        let spec = spec();
        assert!(matches!(
            encode(&[ann(512.0, 10.0, 5.0, 3.0, 0.0, 1.0)], &spec),
            Err(CodecError::OutOfRange(_))
        ));
        assert!(matches!(
            encode(&[ann(-0.1, 10.0, 5.0, 3.0, 0.0, 1.0)], &spec),
            Err(CodecError::OutOfRange(_))
        ));
    }

    #[test]
    fn rings_above_max_is_error() {
        let spec = spec();
        assert!(matches!(
            encode(&[ann(100.0, 100.0, 5.0, 3.0, 0.0, 12.0)], &spec),
            Err(CodecError::OutOfRange(_))
        ));
    }

    #[test]
    fn encode_respects_range_invariants() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let anns = random_encodable(&spec, &mut rng);
            let t = encode(&anns, &spec).unwrap();
            for block in t.values.chunks_exact(8) {
                assert!(block[0] == 0.0 || block[0] == 1.0);
                assert!((-0.5..=0.5).contains(&block[1]));
                assert!((-0.5..=0.5).contains(&block[2]));
                assert!((0.0..=1.0).contains(&block[3]));
                assert!((0.0..=1.0).contains(&block[4]));
                assert!((-1.0..=1.0).contains(&block[5]));
                assert!((-1.0..=1.0).contains(&block[6]));
                assert!((0.0..=1.0).contains(&block[7]));
            }
        }
    }

    #[test]
    fn decode_of_empty_tensor_is_empty() {
        let spec = spec();
        let t = GridTensor::empty(&spec);
        assert!(decode(&t, &spec, 0.5, DecodeMode::Raw).unwrap().is_empty());
    }

    #[test]
    fn decode_shape_mismatch_is_error() {
        let spec = spec();
        let t = GridTensor { values: vec![0.0; 100] };
        assert!(matches!(
            decode(&t, &spec, 0.5, DecodeMode::Raw),
            Err(CodecError::ShapeError { expected: 576, got: 100 })
        ));
    }

    #[test]
    fn single_soft_existence_decodes_with_confidence() {
        let spec = spec();
        let mut t = GridTensor::empty(&spec);
        let base = spec.index(2, 3, 0, 0);
        t.values[base] = 0.9;
        t.values[base + 3] = 0.1;
        t.values[base + 4] = 0.05;
        t.values[base + 5] = 1.0;
        let dets = decode(&t, &spec, 0.5, DecodeMode::Raw).unwrap();
        assert_eq!(dets.len(), 1);
        assert_relative_eq!(dets[0].confidence, 0.9);
    }

    #[test]
    fn roundtrip_recovers_annotations() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for trial in 0..200 {
            let mut anns = random_encodable(&spec, &mut rng);
            let t = encode(&anns, &spec).unwrap();
            let dets = decode(&t, &spec, 0.5, DecodeMode::Raw).unwrap();
            assert_eq!(dets.len(), anns.len(), "trial {trial}");
            let mut got: Vec<Annotation> = dets.iter().map(|d| d.annotation()).collect();
            let key = |x: &Annotation| (x.ellipse.cy, x.ellipse.cx);
            anns.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
            got.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
            for (orig, dec) in anns.iter().zip(&got) {
                // tolerances in normalized units, scaled back to pixels
                let tol_px = 1e-6 * spec.image_width as f64;
                assert!((orig.ellipse.cx - dec.ellipse.cx).abs() < tol_px);
                assert!((orig.ellipse.cy - dec.ellipse.cy).abs() < tol_px);
                assert!((orig.ellipse.a - dec.ellipse.a).abs() < tol_px);
                assert!((orig.ellipse.b - dec.ellipse.b).abs() < tol_px);
                let dt = (orig.ellipse.theta - dec.ellipse.theta).abs() % 180.0;
                let dt = dt.min(180.0 - dt);
                assert!(dt < 1e-6, "trial {trial}: dtheta {dt}");
                assert!((orig.rings - dec.rings).abs() < 1e-6 * spec.rings_max);
            }
        }
    }

    #[test]
    fn detection_count_non_increasing_in_threshold() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = GridTensor::empty(&spec);
        for block in t.values.chunks_exact_mut(8) {
            block[0] = rng.gen_range(0.0..1.0);
        }
        let mut prev = usize::MAX;
        for k in 0..=10 {
            let thr = k as f64 / 10.0;
            let n = decode(&t, &spec, thr, DecodeMode::Raw).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn normalized_mode_enforces_axis_order() {
        let spec = spec();
        let mut t = GridTensor::empty(&spec);
        let base = spec.index(0, 0, 0, 0);
        t.values[base] = 1.0;
        t.values[base + 3] = 0.05; // a < b in raw prediction
        t.values[base + 4] = 0.10;
        t.values[base + 5] = 1.0;
        let raw = decode(&t, &spec, 0.5, DecodeMode::Raw).unwrap();
        assert!(raw[0].ellipse.a < raw[0].ellipse.b);
        let norm = decode(&t, &spec, 0.5, DecodeMode::Normalized).unwrap();
        assert!(norm[0].ellipse.a > norm[0].ellipse.b);
        assert_relative_eq!(norm[0].ellipse.theta, 90.0);
    }
}
