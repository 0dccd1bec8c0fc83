//! Named parameter storage and the flat text container used for checkpoints.
//!
//! A bundle is an ordered list of `(name, shape, row-major values)`. Trainable
//! tensors (weights, biases, normalization scale/shift) and non-trainable
//! buffers (running statistics) live side by side; the optimizer skips buffers.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Magic first line of a serialized bundle. The trailing integer is the format version.
pub const PARAMS_MAGIC: &str = "CECIL-PARAMS 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    trainable: Vec<bool>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Registers a non-trainable buffer (e.g. batch-norm running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "parameter names must be non-empty and whitespace-free: {name:?}"
        );
        self.names.push(name);
        self.trainable.push(trainable);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.trainable[id.0])
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.values[id.0].len()).sum()
    }

    /// Overwrites every value with the one from `other`. Layouts must match.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("parameter bundles have different tensor names"));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::config(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    self.names[i],
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "{PARAMS_MAGIC}").unwrap();
        writeln!(text, "count {}", self.values.len()).unwrap();
        for (i, value) in self.values.iter().enumerate() {
            let (rows, cols) = value.dim();
            let kind = if self.trainable[i] { "param" } else { "buffer" };
            writeln!(text, "{kind} {} {rows} {cols}", self.names[i]).unwrap();
            for row in value.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(text, "{}", line.join(" ")).unwrap();
            }
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let reader = BufReader::new(input);
        let mut lines = reader.lines();
        let mut next = |what: &str| -> Result<String> {
            match lines.next() {
                Some(line) => Ok(line?),
                None => Err(Error::Format(format!("unexpected end of input, expected {what}"))),
            }
        };

        let magic = next("magic header")?;
        if magic.trim() != PARAMS_MAGIC {
            return Err(Error::Format(format!("bad magic header {magic:?}")));
        }
        let count_line = next("count")?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad count line {count_line:?}")))?;

        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = next("tensor header")?;
            let fields: Vec<&str> = header.split_whitespace().collect();
            let [kind, name, rows, cols] = fields[..] else {
                return Err(Error::Format(format!("bad tensor header {header:?}")));
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad dimension {s:?} in {header:?}")))
            };
            let (rows, cols) = (parse(rows)?, parse(cols)?);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next("tensor row")?;
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Format(format!("bad value {tok:?} in {name}")))?;
                    data.push(v);
                }
            }
            if data.len() != rows * cols {
                return Err(Error::Format(format!(
                    "tensor {name}: expected {} values, found {}",
                    rows * cols,
                    data.len()
                )));
            }
            let value = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            match kind {
                "param" => store.add(name, value),
                "buffer" => store.add_buffer(name, value),
                other => return Err(Error::Format(format!("unknown tensor kind {other:?}"))),
            };
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Buffers stay zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
