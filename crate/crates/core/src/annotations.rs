//! Annotation records and the on-disk dataset format.
//!
//! A dataset on disk is a manifest CSV plus one annotation CSV per frame.
//! The aggregation pipelines that produce real ground truth publish no file
//! schema, so this format is a minimal, diff-friendly stand-in:
//!
//! * frame CSV — header `cx,cy,a,b,theta_deg,rings`, one row per antinode,
//!   fields fixed to 6 decimals, UTF-8, LF line endings. A trailing
//!   `confidence` column (written by inference) is accepted and ignored.
//! * manifest CSV — header `frame_index,image_path,annotation_path,split`.
//!
//! Writing is byte-deterministic for identical input, so fixed-seed runs can
//! be compared by file hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Ellipse;

pub const FRAME_CSV_HEADER: &str = "cx,cy,a,b,theta_deg,rings";
pub const MANIFEST_CSV_HEADER: &str = "frame_index,image_path,annotation_path,split";

/// Default cap on ring counts; aggregated labels are decimals below this.
pub const DEFAULT_RINGS_MAX: f64 = 11.0;

/// One labelled antinode: a bounding ellipse plus its fringe count.
///
/// Stored annotations always denote an existing antinode; ring counts are
/// real-valued because label aggregation averages integer counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub ellipse: Ellipse,
    pub rings: f64,
}

/// All annotations for one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub image_path: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named set of frames belonging to one split.
///
/// A freshly generated dataset carries `Split::Train` until
/// [`split_dataset`] partitions it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub records: Vec<FrameRecord>,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug)]
pub enum AnnotationError {
    Io { path: PathBuf, source: std::io::Error },
    Parse { path: PathBuf, line: usize, message: String },
    Config(String),
}

impl std::fmt::Display for AnnotationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnnotationError::Io { path, source } => {
                write!(f, "{}: {}", path.display(), source)
            }
            AnnotationError::Parse { path, line, message } => {
                write!(f, "{}:{}: {}", path.display(), line, message)
            }
            AnnotationError::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for AnnotationError {}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotationError + '_ {
    move |source| AnnotationError::Io { path: path.to_path_buf(), source }
}

/// Writes a manifest CSV at `manifest_path` and one frame CSV per record.
///
/// Frame CSVs are placed in `ann/` next to the manifest, named
/// `frame_NNNNNN.csv`; the manifest references them relative to its parent
/// directory. Output bytes are a pure function of the manifest contents.
pub fn write_annotations(
    manifest: &DatasetManifest,
    manifest_path: &Path,
) -> Result<(), AnnotationError> {
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let ann_dir = root.join("ann");
    if !manifest.records.is_empty() {
        fs::create_dir_all(&ann_dir).map_err(io_err(&ann_dir))?;
    }

    let mut index = String::new();
    index.push_str(MANIFEST_CSV_HEADER);
    index.push('\n');
    for rec in &manifest.records {
        let ann_rel = format!("ann/frame_{:06}.csv", rec.frame_index);
        write_frame_csv(&root.join(&ann_rel), &rec.annotations)?;
        index.push_str(&format!(
            "{},{},{},{}\n",
            rec.frame_index, rec.image_path, ann_rel, manifest.split
        ));
    }
    write_atomic(manifest_path, index.as_bytes())
}

/// Writes one frame's annotation CSV.
pub fn write_frame_csv(path: &Path, annotations: &[Annotation]) -> Result<(), AnnotationError> {
    let mut out = String::new();
    out.push_str(FRAME_CSV_HEADER);
    out.push('\n');
    for ann in annotations {
        let e = &ann.ellipse;
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.cx, e.cy, e.a, e.b, e.theta, ann.rings
        ));
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), AnnotationError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    Ok(())
}

/// Reads a manifest CSV (as written by [`write_annotations`]) and every frame
/// CSV it references. `name` is taken from the manifest file stem.
pub fn read_annotations(
    manifest_path: &Path,
    image_width: u32,
    image_height: u32,
) -> Result<DatasetManifest, AnnotationError> {
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let mut lines = text.lines().enumerate();

    match lines.next() {
        Some((_, header)) if header.trim_end() == MANIFEST_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(AnnotationError::Parse {
                path: manifest_path.to_path_buf(),
                line: 1,
                message: format!("expected header `{MANIFEST_CSV_HEADER}`, got `{header}`"),
            })
        }
        None => {
            return Err(AnnotationError::Parse {
                path: manifest_path.to_path_buf(),
                line: 1,
                message: "empty manifest file".into(),
            })
        }
    }

    let mut split: Option<Split> = None;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(AnnotationError::Parse {
                path: manifest_path.to_path_buf(),
                line: lineno,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let frame_index: usize = fields[0].parse().map_err(|_| AnnotationError::Parse {
            path: manifest_path.to_path_buf(),
            line: lineno,
            message: format!("bad frame_index `{}`", fields[0]),
        })?;
        let row_split = Split::parse(fields[3]).ok_or_else(|| AnnotationError::Parse {
            path: manifest_path.to_path_buf(),
            line: lineno,
            message: format!("bad split `{}` (expected train/val/test)", fields[3]),
        })?;
        match split {
            None => split = Some(row_split),
            Some(s) if s != row_split => {
                return Err(AnnotationError::Parse {
                    path: manifest_path.to_path_buf(),
                    line: lineno,
                    message: "manifest mixes split labels".into(),
                })
            }
            _ => {}
        }
        let annotations = read_frame_csv(&root.join(fields[2]))?;
        records.push(FrameRecord {
            frame_index,
            image_path: fields[1].to_string(),
            annotations,
        });
    }

    let name = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(DatasetManifest {
        name,
        split: split.unwrap_or(Split::Train),
        records,
        image_width,
        image_height,
    })
}

/// Reads one frame CSV. Rows may carry a trailing confidence column, which is
/// ignored here; malformed rows are reported with their line number.
pub fn read_frame_csv(path: &Path) -> Result<Vec<Annotation>, AnnotationError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut annotations = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if idx == 0 {
            let head = line.trim_end();
            if head != FRAME_CSV_HEADER && head != format!("{FRAME_CSV_HEADER},confidence") {
                return Err(AnnotationError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("expected header `{FRAME_CSV_HEADER}`, got `{head}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 && fields.len() != 7 {
            return Err(AnnotationError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 6];
        for (i, field) in fields.iter().take(6).enumerate() {
            let v: f64 = field.parse().map_err(|_| AnnotationError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("bad number `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(AnnotationError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("non-finite value `{field}`"),
                });
            }
            vals[i] = v;
        }
        let [cx, cy, a, b, theta, rings] = vals;
        if a <= 0.0 || b <= 0.0 {
            return Err(AnnotationError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("axes must be positive, got a={a}, b={b}"),
            });
        }
        if rings < 0.0 {
            return Err(AnnotationError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("rings must be >= 0, got {rings}"),
            });
        }
        annotations.push(Annotation { ellipse: Ellipse::new(cx, cy, a, b, theta), rings });
    }
    Ok(annotations)
}

/// Deterministically partitions the records into train/val/test manifests.
///
/// The partition is a seeded shuffle followed by cuts at the cumulative
/// fraction boundaries (rounded), so the three outputs are disjoint and cover
/// the input. Fractions must be nonnegative and sum to 1.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest), AnnotationError> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(AnnotationError::Config(format!(
            "fractions must be nonnegative, got ({ft}, {fv}, {fe})"
        )));
    }
    if ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(AnnotationError::Config(format!(
            "fractions must sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }

    let n = manifest.records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let cut1 = (n as f64 * ft).round() as usize;
    let cut2 = ((n as f64 * (ft + fv)).round() as usize).max(cut1).min(n);
    let cut1 = cut1.min(n);

    let pick = |idxs: &[usize], split: Split| {
        let mut idxs = idxs.to_vec();
        idxs.sort_unstable();
        DatasetManifest {
            name: manifest.name.clone(),
            split,
            records: idxs.iter().map(|&i| manifest.records[i].clone()).collect(),
            image_width: manifest.image_width,
            image_height: manifest.image_height,
        }
    };
    Ok((
        pick(&order[..cut1], Split::Train),
        pick(&order[cut1..cut2], Split::Val),
        pick(&order[cut2..], Split::Test),
    ))
}
