//! Plain CSV persistence for sample matrices, with an optional integer label
//! column for the conditional variant.

use crate::error::{Result, TgdpError};
use ndarray::Array2;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != x.nrows() {
                return Err(TgdpError::argument(format!(
                    "{} labels for {} rows",
                    l.len(),
                    x.nrows()
                )));
            }
        }
        Ok(Dataset { x, labels })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let d = self.dim();
        for j in 0..d {
            if j > 0 {
                write!(w, ",")?;
            }
            write!(w, "x{}", j + 1)?;
        }
        if self.labels.is_some() {
            write!(w, ",label")?;
        }
        writeln!(w)?;
        for (i, row) in self.x.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(w, ",")?;
                }
                // round-trippable float formatting
                let mut buf = ryu_format(*v);
                if buf.is_empty() {
                    buf = v.to_string();
                }
                write!(w, "{buf}")?;
            }
            if let Some(l) = &self.labels {
                write!(w, ",{}", l[i])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| TgdpError::format(format!("{}: empty file", path.display())))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let has_label = cols.last() == Some(&"label");
        let d = if has_label { cols.len() - 1 } else { cols.len() };
        if d == 0 {
            return Err(TgdpError::format(format!(
                "{}: no coordinate columns",
                path.display()
            )));
        }
        for (j, c) in cols.iter().take(d).enumerate() {
            let expect = format!("x{}", j + 1);
            if *c != expect {
                return Err(TgdpError::format(format!(
                    "{}: expected column '{expect}', found '{c}'",
                    path.display()
                )));
            }
        }
        let mut data = Vec::new();
        let mut labels = if has_label { Some(Vec::new()) } else { None };
        let mut rows = 0usize;
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(TgdpError::format(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    i + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            for f in fields.iter().take(d) {
                let v: f64 = f.parse().map_err(|_| {
                    TgdpError::format(format!(
                        "{}: row {}: bad float '{f}'",
                        path.display(),
                        i + 2
                    ))
                })?;
                data.push(v);
            }
            if let Some(l) = &mut labels {
                let raw = fields[d];
                let v: usize = raw.parse().map_err(|_| {
                    TgdpError::format(format!(
                        "{}: row {}: bad label '{raw}'",
                        path.display(),
                        i + 2
                    ))
                })?;
                l.push(v);
            }
            rows += 1;
        }
        let x = Array2::from_shape_vec((rows, d), data)
            .map_err(|e| TgdpError::format(format!("{}: {e}", path.display())))?;
        Dataset::new(x, labels)
    }
}

/// Shortest round-trippable decimal form of a float. f64's Display in Rust is
/// already shortest-round-trip, so just use it; kept as a named helper because
/// save() depends on the round-trip property for byte-identical reruns.
fn ryu_format(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_unlabeled() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let x = array![[0.1, -2.5], [1.0 / 3.0, 1e-17], [f64::MIN_POSITIVE, 4.0]];
        let ds = Dataset::new(x.clone(), None).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.x, x);
        assert!(back.labels.is_none());
    }

    #[test]
    fn roundtrip_labeled() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let x = array![[0.5, -0.5], [-0.5, 0.5]];
        let ds = Dataset::new(x.clone(), Some(vec![0, 1])).unwrap();
        ds.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,x2,label\n"));
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.x, x);
        assert_eq!(back.labels, Some(vec![0, 1]));
    }

    #[test]
    fn save_is_byte_stable() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let x = array![[0.12345678901234567, -1.0], [2.0, 3.0]];
        let ds = Dataset::new(x, None).unwrap();
        ds.save(&a).unwrap();
        ds.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_malformed_input() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,x2\n1.0\n").unwrap();
        assert!(Dataset::load(&path).is_err());
        std::fs::write(&path, "x1,x2\n1.0,abc\n").unwrap();
        assert!(Dataset::load(&path).is_err());
        std::fs::write(&path, "a,b\n1.0,2.0\n").unwrap();
        assert!(Dataset::load(&path).is_err());
        std::fs::write(&path, "").unwrap();
        assert!(Dataset::load(&path).is_err());
        assert!(Dataset::new(array![[1.0]], Some(vec![0, 1])).is_err());
    }
}
