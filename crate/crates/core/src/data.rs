//! Multi-label dataset and its comma-delimited file format.
//!
//! ```text
//! dim=<d>,attrs=<n_attr>,classes=<|Z_1|;...;|Z_n|>
//! <id>,<f_0>,...,<f_{d-1}>,<a_1>,...,<a_{n_attr}>
//! ```
//!
//! Features are written with 17 significant digits so they round-trip
//! exactly; labels are zero-based integers.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    class_counts: Vec<usize>,
    ids: Vec<u64>,
    /// `len × dim`, row-major.
    features: Vec<f64>,
    /// `len × n_attr`, row-major.
    labels: Vec<usize>,
}

impl Dataset {
    /// An empty dataset with `dim` features and one attribute per entry of
    /// `class_counts`.
    pub fn empty(dim: usize, class_counts: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if class_counts.is_empty() {
            return Err(Error::Config("need at least one attribute".into()));
        }
        if let Some(c) = class_counts.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!(
                "every attribute needs at least 2 classes, got {c}"
            )));
        }
        Ok(Self {
            dim,
            class_counts,
            ids: Vec::new(),
            features: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn push(&mut self, id: u64, features: &[f64], labels: &[usize]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::Shape(format!(
                "sample {id} has {} features, expected {}",
                features.len(),
                self.dim
            )));
        }
        if labels.len() != self.class_counts.len() {
            return Err(Error::Shape(format!(
                "sample {id} has {} labels, expected {}",
                labels.len(),
                self.class_counts.len()
            )));
        }
        for (&l, &c) in labels.iter().zip(&self.class_counts) {
            if l >= c {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: c,
                });
            }
        }
        self.ids.push(id);
        self.features.extend_from_slice(features);
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_attributes(&self) -> usize {
        self.class_counts.len()
    }

    /// `|Z_j|` for every attribute.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self, i: usize) -> &[usize] {
        let n = self.class_counts.len();
        &self.labels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize, attribute: usize) -> usize {
        self.labels[i * self.class_counts.len() + attribute]
    }

    pub fn label_column(&self, attribute: usize) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i, attribute)).collect()
    }

    /// Number of samples in each class of `attribute`.
    pub fn class_sizes(&self, attribute: usize) -> Vec<usize> {
        let mut counts = vec![0; self.class_counts[attribute]];
        for i in 0..self.len() {
            counts[self.label(i, attribute)] += 1;
        }
        counts
    }

    /// Sample indices grouped by class of `attribute`, each group ascending.
    pub fn indices_by_class(&self, attribute: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_counts[attribute]];
        for i in 0..self.len() {
            groups[self.label(i, attribute)].push(i);
        }
        groups
    }

    /// New dataset made of the given rows, in the given order. Rows may repeat.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let n_attr = self.class_counts.len();
        let mut out = Dataset {
            dim: self.dim,
            class_counts: self.class_counts.clone(),
            ids: Vec::with_capacity(indices.len()),
            features: Vec::with_capacity(indices.len() * self.dim),
            labels: Vec::with_capacity(indices.len() * n_attr),
        };
        for &i in indices {
            out.ids.push(self.ids[i]);
            out.features.extend_from_slice(self.features(i));
            out.labels.extend_from_slice(self.labels(i));
        }
        out
    }

    /// Feature rows of `indices` as one row-major buffer.
    pub fn feature_matrix(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.features(i));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let classes: Vec<String> = self.class_counts.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            s,
            "dim={},attrs={},classes={}",
            self.dim,
            self.class_counts.len(),
            classes.join(";")
        );
        for i in 0..self.len() {
            let _ = write!(s, "{}", self.ids[i]);
            for f in self.features(i) {
                let _ = write!(s, ",{f:.16e}");
            }
            for l in self.labels(i) {
                let _ = write!(s, ",{l}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        };
        let (dim, n_attr, classes) = parse_header(&header)?;
        if classes.len() != n_attr {
            return Err(Error::Parse {
                line: 1,
                msg: format!("attrs={n_attr} but {} class counts", classes.len()),
            });
        }
        let mut ds = Dataset::empty(dim, classes).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let mut feats = Vec::with_capacity(dim);
        let mut labels = Vec::with_capacity(n_attr);
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 1 + dim + n_attr {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "expected {} fields (id, {dim} features, {n_attr} labels), got {}",
                        1 + dim + n_attr,
                        fields.len()
                    ),
                });
            }
            let bad = |what: &str, field: &str| Error::Parse {
                line: lineno,
                msg: format!("bad {what} {field:?}"),
            };
            let id: u64 = fields[0].trim().parse().map_err(|_| bad("id", fields[0]))?;
            feats.clear();
            for f in &fields[1..=dim] {
                feats.push(f.trim().parse::<f64>().map_err(|_| bad("feature", f))?);
            }
            labels.clear();
            for f in &fields[1 + dim..] {
                labels.push(f.trim().parse::<usize>().map_err(|_| bad("label", f))?);
            }
            ds.push(id, &feats, &labels).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        Ok(ds)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize, Vec<usize>)> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let (mut dim, mut attrs, mut classes) = (None, None, None);
    for part in header.trim().split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field {part:?}")))?;
        match key.trim() {
            "dim" => {
                dim = Some(value.trim().parse::<usize>().map_err(|_| err(format!("bad dim {value:?}")))?)
            }
            "attrs" => {
                attrs = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| err(format!("bad attrs {value:?}")))?,
                )
            }
            "classes" => {
                classes = Some(
                    value
                        .split(';')
                        .map(|c| c.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err(format!("bad classes {value:?}")))?,
                )
            }
            other => return Err(err(format!("unknown header key {other:?}"))),
        }
    }
    match (dim, attrs, classes) {
        (Some(d), Some(a), Some(c)) => Ok((d, a, c)),
        _ => Err(err("header needs dim, attrs and classes".into())),
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    Dataset::from_reader(BufReader::new(file))
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(dataset.to_text().as_bytes())?;
    w.flush()?;
    Ok(())
}
