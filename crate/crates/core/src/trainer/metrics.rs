use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Append-only CSV: `step`, one column per loss component, `wall_time`.
pub struct MetricsLog {
    path: PathBuf,
    columns: Vec<&'static str>,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header if the file is new.
    /// An existing file must carry the same header.
    pub fn open(path: &Path, columns: &[&'static str]) -> Result<Self> {
        let header = Self::header_line(columns);
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if text.lines().next() != Some(header.trim_end()) {
                return Err(Error::Invalid(format!(
                    "{} exists with a different header",
                    path.display()
                )));
            }
        } else {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(path, &header).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog {
            path: path.to_path_buf(),
            columns: columns.to_vec(),
        })
    }

    fn header_line(columns: &[&str]) -> String {
        format!("step,{},wall_time\n", columns.join(","))
    }

    pub fn append(&mut self, step: u64, values: &[f64], wall_time: f64) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Invalid(format!(
                "{} metric values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        let mut line = step.to_string();
        for v in values {
            line.push_str(&format!(",{v:?}"));
        }
        line.push_str(&format!(",{wall_time:.3}\n"));
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Metrics rows with the trailing `wall_time` column removed, for
/// comparing runs.
pub fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::open(&p, &["a", "b"]).unwrap();
        log.append(1, &[0.5, 2.0], 0.25).unwrap();
        assert!(log.append(2, &[1.0], 0.0).is_err());
        drop(log);
        let mut again = MetricsLog::open(&p, &["a", "b"]).unwrap();
        again.append(2, &[0.1, 0.2], 1.0).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "step,a,b,wall_time\n1,0.5,2.0,0.250\n2,0.1,0.2,1.000\n"
        );
        assert_eq!(strip_wall_time(&text), "step,a,b\n1,0.5,2.0\n2,0.1,0.2");
        assert!(MetricsLog::open(&p, &["a"]).is_err());
    }
}
