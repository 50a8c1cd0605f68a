//! Loading the two domains named by a [`DataSpec`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cdcgen::data::{
    balanced_resample, load_idx_dataset, make_pinwheel_pair, read_points_csv, resize_bilinear,
    synthetic_digits, to_pixel_range, Dataset, Domain, EvalLabels, IdxFile,
};
use cdcgen::diffmath::Tensor;
use cdcgen::{Error, Result};

use crate::config::{DataSpec, DigitsSpec, IdxSpec, PointsSpec};

/// Training data for both domains plus the evaluation-only target labels.
#[derive(Clone, Debug)]
pub struct Domains {
    pub source: Dataset,
    pub target: Dataset,
    pub target_eval: Option<EvalLabels>,
}

impl Domains {
    pub fn load(spec: &DataSpec) -> Result<Self> {
        match spec {
            DataSpec::Pinwheel(p) => {
                let pair = make_pinwheel_pair(p)?;
                Ok(Domains {
                    source: pair.source,
                    target: pair.target,
                    target_eval: Some(pair.target_labels),
                })
            }
            DataSpec::Digits(d) => digits(d),
            DataSpec::Points(p) => points(p),
            DataSpec::Idx(p) => idx(p),
        }
    }
}

fn digits(d: &DigitsSpec) -> Result<Domains> {
    if d.size < 4 || d.size % 2 != 0 {
        return Err(Error::Config(format!(
            "digit size must be even and at least 4, got {}",
            d.size
        )));
    }
    let counts = [d.per_class; 10];
    let (xs, ys) = synthetic_digits(&counts, d.size, d.seed);
    let (xt, yt) = synthetic_digits(&counts, d.size / 2, d.seed ^ 0x7a7a);
    let path = Path::new("<generated>");
    let source = Dataset::new(
        "digits_source",
        Domain::Source,
        xs.images(path)?,
        Some(ys.labels(path)?),
        10,
    )?;
    let small = xt.images(path)?;
    let target = Dataset::new(
        "digits_target",
        Domain::Target,
        to_pixel_range(&resize_bilinear(&small, d.size, d.size)?),
        None,
        10,
    )?;
    Ok(Domains {
        source,
        target,
        target_eval: Some(EvalLabels {
            labels: yt.labels(path)?,
            classes: 10,
        }),
    })
}

fn points(p: &PointsSpec) -> Result<Domains> {
    let (xs, ys) = read_points_csv(&p.source)?;
    let source = Dataset::new("points_source", Domain::Source, xs, ys, p.classes)?;
    let (xt, yt) = read_points_csv(&p.target)?;
    let n = xt.batch();
    let target = Dataset::new("points_target", Domain::Target, xt, yt, p.classes)?;
    let target_eval = match &p.target_eval_labels {
        Some(path) => Some(read_eval_labels(path, n, p.classes)?),
        None => None,
    };
    Ok(Domains {
        source,
        target,
        target_eval,
    })
}

fn idx(p: &IdxSpec) -> Result<Domains> {
    let k = p.classes;
    let mut source = load_idx_dataset(
        "idx_source",
        Domain::Source,
        &p.source_images,
        Some(&p.source_labels),
        k,
    )?;
    let mut target = load_idx_dataset(
        "idx_target",
        Domain::Target,
        &p.target_images,
        p.target_labels.as_deref(),
        k,
    )?;
    if let Some(per_class) = p.per_class {
        source = balanced_resample(&source, &source, per_class, 0, p.seed)?.0;
    }
    if let Some(side) = p.resize {
        let resize = |d: &Dataset| -> Result<Dataset> {
            d.with_samples(to_pixel_range(&resize_bilinear(d.samples(), side, side)?))
        };
        source = resize(&source)?;
        target = resize(&target)?;
    }
    let target_eval = match &p.target_eval_labels {
        Some(path) => {
            let labels = IdxFile::read(path)?.labels(path)?;
            check_eval_labels(path, &labels, target.len(), k)?;
            Some(EvalLabels { labels, classes: k })
        }
        None => None,
    };
    Ok(Domains {
        source,
        target,
        target_eval,
    })
}

fn check_eval_labels(path: &Path, labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{}: {} labels for {n} target samples",
            path.display(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Invalid(format!(
            "{}: label {bad} out of range for {classes} classes",
            path.display()
        )));
    }
    Ok(())
}

/// One `class` per line after a header.
pub fn write_eval_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::from("class\n");
    for l in labels {
        writeln!(s, "{l}").expect("write to string");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_eval_labels(path: &Path, n: usize, classes: usize) -> Result<EvalLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() as u64 + 1;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        labels.push(line.trim().parse().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: start,
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    check_eval_labels(path, &labels, n, classes)?;
    Ok(EvalLabels { labels, classes })
}

/// Samples from a CSV or IDX file, chosen by extension.
pub fn read_samples(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(read_points_csv(path)?.0)
    } else {
        IdxFile::read(path)?.images(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_domains_share_a_shape_and_hide_target_labels() {
        let d = Domains::load(&DataSpec::Digits(DigitsSpec {
            size: 8,
            per_class: 3,
            seed: 1,
        }))
        .unwrap();
        assert_eq!(d.source.samples().shape(), &[30, 1, 8, 8]);
        assert_eq!(d.target.samples().shape(), &[30, 1, 8, 8]);
        assert!(d.target.labels().is_none());
        assert_eq!(d.target_eval.unwrap().labels.len(), 30);
    }

    #[test]
    fn eval_labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_eval_labels(&p, &[2, 0, 1]).unwrap();
        assert_eq!(read_eval_labels(&p, 3, 3).unwrap().labels, vec![2, 0, 1]);
        assert!(read_eval_labels(&p, 4, 3).is_err());
        assert!(read_eval_labels(&p, 3, 2).is_err());
    }
}
