//! Datasets: IDX ingestion, the balancing/resizing protocol for digit
//! images, the 2-D pinwheel domain pair, and sample export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Samples of one domain, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub domain: Domain,
    samples: Tensor,
    labels: Option<Vec<usize>>,
    classes: usize,
}

/// Target-domain labels kept apart from the data. Only evaluation code
/// accepts this type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalLabels {
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        samples: Tensor,
        labels: Option<Vec<usize>>,
        classes: usize,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != samples.batch() {
                return Err(Error::Invalid(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.batch()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= classes) {
                return Err(Error::Invalid(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            domain,
            samples,
            labels,
            classes,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.samples.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Splits off the labels of a target dataset into an evaluation sidecar.
    pub fn strip_labels(mut self) -> (Dataset, Option<EvalLabels>) {
        let side = self.labels.take().map(|labels| EvalLabels {
            labels,
            classes: self.classes,
        });
        (self, side)
    }

    /// Fails on labeled target data; every training entry point calls this.
    pub fn ensure_trainable(&self) -> Result<()> {
        if self.domain == Domain::Target && self.labels.is_some() {
            return Err(Error::LabelLeak(format!(
                "target dataset `{}` carries labels; strip them into an eval sidecar first",
                self.name
            )));
        }
        Ok(())
    }

    /// Like [`ensure_trainable`](Self::ensure_trainable), and also requires labels.
    pub fn ensure_labeled_source(&self) -> Result<&[usize]> {
        if self.domain != Domain::Source {
            return Err(Error::LabelLeak(format!(
                "dataset `{}` is not a source-domain dataset",
                self.name
            )));
        }
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("source dataset `{}` has no labels", self.name)))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            domain: self.domain,
            samples: self.samples.select(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
        }
    }

    pub fn with_samples(&self, samples: Tensor) -> Result<Dataset> {
        Dataset::new(
            self.name.clone(),
            self.domain,
            samples,
            self.labels.clone(),
            self.classes,
        )
    }
}

// ---------------------------------------------------------------- IDX

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxFile {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 4 {
            return Err(fail(
                bytes.len(),
                "file shorter than the 4-byte magic".into(),
            ));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(fail(
                0,
                format!(
                    "magic must start with two zero bytes, got {:02x}{:02x}",
                    bytes[0], bytes[1]
                ),
            ));
        }
        if bytes[2] != 0x08 {
            return Err(fail(
                2,
                format!(
                    "only unsigned-byte payloads (0x08) are supported, got 0x{:02x}",
                    bytes[2]
                ),
            ));
        }
        let ndim = bytes[3] as usize;
        if ndim == 0 {
            return Err(fail(3, "zero dimensions".into()));
        }
        let header = 4 + 4 * ndim;
        if bytes.len() < header {
            return Err(fail(
                bytes.len(),
                format!("truncated header: {ndim} dimensions need {header} bytes"),
            ));
        }
        let dims: Vec<u32> = (0..ndim)
            .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
            .collect();
        let payload: usize = dims.iter().map(|&d| d as usize).product();
        let have = bytes.len() - header;
        if have < payload {
            return Err(fail(
                bytes.len(),
                format!("truncated payload: expected {payload} bytes, found {have}"),
            ));
        }
        if have > payload {
            return Err(fail(
                header + payload,
                format!("{} trailing bytes after payload", have - payload),
            ));
        }
        Ok(IdxFile {
            dims,
            data: bytes[header..].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// `(N, 1, rows, cols)` tensor of pixel values.
    pub fn images(&self, path: &Path) -> Result<Tensor> {
        if self.magic() != IDX_IMAGES_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: format!(
                    "expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{:08x}",
                    self.magic()
                ),
            });
        }
        let [n, r, c] = [self.dims[0], self.dims[1], self.dims[2]].map(|d| d as usize);
        Tensor::new(
            vec![n, 1, r, c],
            self.data.iter().map(|&b| b as f64).collect(),
        )
    }

    pub fn labels(&self, path: &Path) -> Result<Vec<usize>> {
        if self.magic() != IDX_LABELS_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: format!(
                    "expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{:08x}",
                    self.magic()
                ),
            });
        }
        Ok(self.data.iter().map(|&b| b as usize).collect())
    }

    pub fn from_images(images: &Tensor) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::InvalidShape {
                op: "idx_images",
                shape: s.to_vec(),
                reason: "expects (N, 1, H, W)".into(),
            });
        }
        Ok(IdxFile {
            dims: vec![s[0] as u32, s[2] as u32, s[3] as u32],
            data: images
                .data()
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        })
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        IdxFile {
            dims: vec![labels.len() as u32],
            data: labels.iter().map(|&l| l as u8).collect(),
        }
    }
}

/// Reads an IDX file.
pub fn load_idx(path: &Path) -> Result<IdxFile> {
    IdxFile::read(path)
}

/// Reads an image file and an optional label file into a dataset.
pub fn load_idx_dataset(
    name: &str,
    domain: Domain,
    images: &Path,
    labels: Option<&Path>,
    classes: usize,
) -> Result<Dataset> {
    let x = IdxFile::read(images)?.images(images)?;
    let y = match labels {
        Some(p) => {
            let l = IdxFile::read(p)?.labels(p)?;
            if l.len() != x.batch() {
                return Err(Error::Invalid(format!(
                    "{} has {} images but {} has {} labels",
                    images.display(),
                    x.batch(),
                    p.display(),
                    l.len()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(name, domain, x, y, classes)
}

// ---------------------------------------------------------- protocol

fn per_class_pick<R: Rng>(ds: &Dataset, per_class: usize, rng: &mut R) -> Result<Vec<usize>> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Invalid(format!("balancing `{}` requires labels", ds.name)))?;
    let mut picked = Vec::with_capacity(per_class * ds.classes());
    for class in 0..ds.classes() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < per_class {
            return Err(Error::InsufficientClass {
                class,
                available: idx.len(),
                required: per_class,
            });
        }
        idx.shuffle(rng);
        idx.truncate(per_class);
        idx.sort_unstable();
        picked.extend(idx);
    }
    Ok(picked)
}

/// Draws exactly `per_class_train` samples per class from `train` and
/// `per_class_test` per class from `test`. Output is grouped by class.
pub fn balanced_resample(
    train: &Dataset,
    test: &Dataset,
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = per_class_pick(train, per_class_train, &mut rng)?;
    let b = per_class_pick(test, per_class_test, &mut rng)?;
    Ok((train.select(&a), test.select(&b)))
}

/// Bilinear resize of `(N, C, H, W)` images with corner-aligned sampling:
/// output corners coincide with input corners.
pub fn resize_bilinear(images: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "resize_bilinear",
            shape: s.to_vec(),
            reason: "expects (N, C, H, W)".into(),
        });
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape {
            op: "resize_bilinear",
            shape: vec![height, width],
            reason: "output size must be positive".into(),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(inp - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let rows: Vec<_> = (0..height).map(|i| coord(i, height, h)).collect();
    let cols: Vec<_> = (0..width).map(|j| coord(j, width, w)).collect();
    let mut out = Vec::with_capacity(n * c * height * width);
    for plane in images.data().chunks(h * w) {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}

/// Rounds and clamps to integer pixel values in `[0, 255]`.
pub fn to_pixel_range(images: &Tensor) -> Tensor {
    images.map(|v| v.round().clamp(0.0, 255.0))
}

// ----------------------------------------------------------- pinwheel

/// Parameters of the 2-D pinwheel generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinwheelConfig {
    pub classes: usize,
    pub n_per_class: usize,
    /// Target rotation in radians.
    pub rotation: f64,
    /// Target scale factor.
    pub scale: f64,
    pub radial_std: f64,
    pub tangential_std: f64,
    /// Twist of each arm.
    pub rate: f64,
    /// Angular span over which the arm roots are spread; `2π` spaces
    /// them evenly around the circle.
    pub arc: f64,
    /// Overall size multiplier of the source cloud.
    pub radius: f64,
    pub seed: u64,
}

impl Default for PinwheelConfig {
    fn default() -> Self {
        PinwheelConfig {
            classes: 3,
            n_per_class: 1000,
            rotation: std::f64::consts::FRAC_PI_2,
            scale: 0.7,
            radial_std: 0.3,
            tangential_std: 0.1,
            rate: 0.25,
            arc: std::f64::consts::TAU,
            radius: 1.5,
            seed: 0,
        }
    }
}

/// Source/target pair. Target labels live only in the sidecar.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: Dataset,
    pub target_labels: EvalLabels,
}

/// `(N, 2)` pinwheel points with labels, `n_per_class` per arm, class-major.
pub fn pinwheel_points(cfg: &PinwheelConfig, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    if cfg.classes < 2 {
        return Err(Error::Config(
            "a pinwheel needs at least two classes".into(),
        ));
    }
    let k = cfg.classes;
    let radial = Normal::new(1.0, cfg.radial_std).map_err(|e| Error::Config(e.to_string()))?;
    let tangential =
        Normal::new(0.0, cfg.tangential_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * k * cfg.n_per_class);
    let mut labels = Vec::with_capacity(k * cfg.n_per_class);
    let step = if (cfg.arc - std::f64::consts::TAU).abs() < 1e-12 {
        cfg.arc / k as f64
    } else {
        cfg.arc / (k - 1) as f64
    };
    for class in 0..k {
        let base = class as f64 * step;
        for _ in 0..cfg.n_per_class {
            let r: f64 = radial.sample(rng);
            let t: f64 = tangential.sample(rng);
            let angle = base + cfg.rate * r.exp();
            let (s, c) = angle.sin_cos();
            data.push(cfg.radius * (c * r - s * t));
            data.push(cfg.radius * (s * r + c * t));
            labels.push(class);
        }
    }
    Ok((Tensor::new(vec![k * cfg.n_per_class, 2], data)?, labels))
}

/// Rotates by `theta` and scales by `scale`.
pub fn rotate_scale(points: &Tensor, theta: f64, scale: f64) -> Result<Tensor> {
    if points.rank() != 2 || points.shape()[1] != 2 {
        return Err(Error::InvalidShape {
            op: "rotate_scale",
            shape: points.shape().to_vec(),
            reason: "expects (N, 2)".into(),
        });
    }
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(points.len());
    for p in points.data().chunks(2) {
        out.push(scale * (c * p[0] - s * p[1]));
        out.push(scale * (s * p[0] + c * p[1]));
    }
    Tensor::new(points.shape().to_vec(), out)
}

/// Labeled source pinwheel and its rotated, scaled copy as an unlabeled target.
pub fn make_pinwheel_pair(cfg: &PinwheelConfig) -> Result<DomainPair> {
    if cfg.scale == 0.0 || !cfg.scale.is_finite() {
        return Err(Error::Config(format!(
            "target scale must be non-zero, got {}",
            cfg.scale
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x, labels) = pinwheel_points(cfg, &mut rng)?;
    let xt = rotate_scale(&x, cfg.rotation, cfg.scale)?;
    let k = cfg.classes;
    let source = Dataset::new(
        "pinwheel_source",
        Domain::Source,
        x,
        Some(labels.clone()),
        k,
    )?;
    let target = Dataset::new("pinwheel_target", Domain::Target, xt, None, k)?;
    Ok(DomainPair {
        source,
        target,
        target_labels: EvalLabels { labels, classes: k },
    })
}

// ------------------------------------------------------ synthetic digits

/// Seven-segment layout of the digits 0-9: top, upper-left, upper-right,
/// middle, lower-left, lower-right, bottom.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],
    [false, false, true, false, false, true, false],
    [true, false, true, true, true, false, true],
    [true, false, true, true, false, true, true],
    [false, true, true, true, false, true, false],
    [true, true, false, true, false, true, true],
    [true, true, false, true, true, true, true],
    [true, false, true, false, false, true, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * dx + (py - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

/// Renders one `size×size` seven-segment digit with random slant, stroke
/// width, placement and pixel noise.
pub fn render_digit(digit: usize, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let s = size as f64;
    let w = s * rng.random_range(0.28..0.40);
    let h = s * rng.random_range(0.50..0.66);
    let cx = s / 2.0 + rng.random_range(-0.06..0.06) * s;
    let cy = s / 2.0 + rng.random_range(-0.06..0.06) * s;
    let slant = rng.random_range(-0.25..0.25);
    let stroke = s * rng.random_range(0.045..0.08);
    let (l, r, t, m, b) = (cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy, cy + h / 2.0);
    let ends = [
        ((l, t), (r, t)),
        ((l, t), (l, m)),
        ((r, t), (r, m)),
        ((l, m), (r, m)),
        ((l, m), (l, b)),
        ((r, m), (r, b)),
        ((l, b), (r, b)),
    ];
    let shear = |(x, y): (f64, f64)| (x - slant * (y - cy), y);
    let segs: Vec<_> = ends
        .iter()
        .zip(SEGMENTS[digit % 10])
        .filter(|(_, on)| *on)
        .map(|(&(a, b), _)| (shear(a), shear(b)))
        .collect();
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segs
                .iter()
                .map(|&(a, b)| segment_distance(px, py, a, b))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.0 - (d - stroke).max(0.0) / 1.2).clamp(0.0, 1.0);
            let noise = rng.random_range(0.0..12.0);
            img.push((ink * 243.0 + noise).round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

/// IDX image and label files holding `counts[c]` rendered digits of class `c`.
pub fn synthetic_digits(counts: &[usize], size: usize, seed: u64) -> (IdxFile, IdxFile) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(labels.len() * size * size);
    for &l in &labels {
        data.extend(render_digit(l, size, &mut rng));
    }
    (
        IdxFile {
            dims: vec![labels.len() as u32, size as u32, size as u32],
            data,
        },
        IdxFile::from_labels(&labels),
    )
}

// ------------------------------------------------------------- export

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// `x,y,class` rows for 2-D samples; the class column is empty when unknown.
pub fn write_points_csv(path: &Path, points: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if points.rank() != 2 || points.shape()[1] != 2 {
        return Err(Error::InvalidShape {
            op: "write_points_csv",
            shape: points.shape().to_vec(),
            reason: "expects (N, 2)".into(),
        });
    }
    let mut s = String::from("x,y,class\n");
    for (i, p) in points.data().chunks(2).enumerate() {
        let class = labels.map(|l| l[i].to_string()).unwrap_or_default();
        s.push_str(&format!("{:?},{:?},{class}\n", p[0], p[1]));
    }
    create(path)?
        .write_all(s.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads back a file written by [`write_points_csv`].
pub fn read_points_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() as u64 + 1;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: start,
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", f.len())));
        }
        for v in &f[..2] {
            data.push(v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        if !f[2].trim().is_empty() {
            labels.push(
                f[2].trim()
                    .parse::<usize>()
                    .map_err(|e| bad(e.to_string()))?,
            );
        }
    }
    let n = data.len() / 2;
    if n == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "no samples".into(),
        });
    }
    let labels = match labels.len() {
        0 => None,
        l if l == n => Some(labels),
        l => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: format!("{l} of {n} rows carry a class"),
            })
        }
    };
    Ok((Tensor::new(vec![n, 2], data)?, labels))
}

/// Binary 8-bit portable graymap of one `(H, W)` plane.
pub fn write_pgm(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            left: vec![pixels.len()],
            right: vec![height, width],
        });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    create(path)?
        .write_all(&bytes)
        .map_err(|e| Error::io(path, e))
}

/// Writes every image of an `(N, 1, H, W)` batch as `prefix_{i:04}.pgm`.
pub fn write_pgm_batch(dir: &Path, prefix: &str, images: &Tensor) -> Result<Vec<PathBuf>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidShape {
            op: "write_pgm_batch",
            shape: s.to_vec(),
            reason: "expects (N, 1, H, W)".into(),
        });
    }
    (0..s[0])
        .map(|i| {
            let p = dir.join(format!("{prefix}_{i:04}.pgm"));
            write_pgm(&p, images.item(i), s[2], s[3])?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_label_file() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 4, 0, 1, 2, 3];
        let f = IdxFile::parse(&bytes, Path::new("mem")).unwrap();
        assert_eq!(f.labels(Path::new("mem")).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(f.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 4, 0, 1];
        match IdxFile::parse(&bytes, Path::new("mem")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            IdxFile::parse(&[1, 0, 8, 1], Path::new("mem")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn checker_upscale_matches_hand_values() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let third = 1.0 / 3.0;
        let row1 = [third, 4.0 / 9.0, 5.0 / 9.0, 2.0 * third];
        for (a, b) in out.data()[4..8].iter().zip(row1) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(&out.data()[..4], &[0.0, third, 2.0 * third, 1.0]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(vec![2, 1, 5, 3], 7.0);
        let out = resize_bilinear(&img, 9, 11).unwrap();
        assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn pinwheel_identity_and_reflection() {
        let mut cfg = PinwheelConfig {
            n_per_class: 50,
            rotation: 0.0,
            scale: 1.0,
            ..Default::default()
        };
        let p = make_pinwheel_pair(&cfg).unwrap();
        assert_eq!(p.source.samples(), p.target.samples());
        assert!(p.target.labels().is_none());
        cfg.rotation = std::f64::consts::PI;
        let q = make_pinwheel_pair(&cfg).unwrap();
        let neg = q.source.samples().map(|v| -v);
        assert!(q.target.samples().max_abs_diff(&neg) < 1e-12);
        cfg.scale = 0.0;
        assert!(make_pinwheel_pair(&cfg).is_err());
    }

    #[test]
    fn labeled_target_is_not_trainable() {
        let x = Tensor::zeros(vec![2, 2]);
        let ds = Dataset::new("t", Domain::Target, x, Some(vec![0, 1]), 2).unwrap();
        assert!(matches!(ds.ensure_trainable(), Err(Error::LabelLeak(_))));
        let (clean, side) = ds.strip_labels();
        assert!(clean.ensure_trainable().is_ok());
        assert_eq!(side.unwrap().labels, vec![0, 1]);
    }

    #[test]
    fn rendered_digits_differ_by_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = render_digit(1, 28, &mut rng);
        let eight = render_digit(8, 28, &mut rng);
        let ink = |v: &[u8]| v.iter().map(|&b| b as u64).sum::<u64>();
        assert!(ink(&eight) > ink(&one));
    }
}
