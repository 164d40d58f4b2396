//! Unit records, datasets, JSON Lines persistence and seeded splitting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One unit: time-fixed covariates `z`, behaviour `x[0..=T]` (index 0 is the
/// initial state) and actions `d[0..T]`, where `d[i]` is the level applied at
/// time `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitRecord {
    pub unit_id: String,
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub d: Vec<usize>,
}

impl UnitRecord {
    /// Number of action steps `T`.
    pub fn horizon(&self) -> usize {
        self.d.len()
    }

    /// Level applied at time `t` (1-based).
    #[inline]
    pub fn level_at(&self, t: usize) -> usize {
        self.d[t - 1]
    }

    /// Length of the leading all-default window.
    pub fn burn_in(&self) -> usize {
        self.d.iter().take_while(|&&l| l == 0).count()
    }

    /// `(time, level)` for every non-default action, in time order.
    pub fn applications(&self) -> Vec<(usize, usize)> {
        self.d
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, &l)| (i + 1, l))
            .collect()
    }

    pub fn validate(&self, k: usize, z_dim: usize) -> Result<()> {
        let bad = |msg: String| Error::InvalidUnit {
            unit_id: self.unit_id.clone(),
            msg,
        };
        if self.x.len() != self.d.len() + 1 {
            return Err(bad(format!(
                "len(x) = {} but len(d) + 1 = {}",
                self.x.len(),
                self.d.len() + 1
            )));
        }
        if self.z.len() != z_dim {
            return Err(bad(format!("len(z) = {} but z_dim = {z_dim}", self.z.len())));
        }
        let mut seen = vec![false; k];
        for (i, &level) in self.d.iter().enumerate() {
            if level >= k {
                return Err(bad(format!(
                    "level out of range: d[{}] = {level} with K = {k}",
                    i + 1
                )));
            }
            if level != 0 {
                if seen[level] {
                    return Err(bad(format!("level {level} applied more than once")));
                }
                seen[level] = true;
            }
        }
        if self.x.iter().chain(&self.z).any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    /// Number of levels including the default level 0.
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "T0")]
    pub t0: usize,
    pub z_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_hint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub units: Vec<UnitRecord>,
}

impl Dataset {
    /// Builds a dataset after checking every unit against `meta`.
    pub fn new(meta: DatasetMeta, units: Vec<UnitRecord>) -> Result<Self> {
        let ds = Dataset { meta, units };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.meta.k == 0 {
            return Err(Error::InvalidDataset("K must be at least 1".into()));
        }
        for u in &self.units {
            u.validate(self.meta.k, self.meta.z_dim)?;
            if u.horizon() != self.meta.t {
                return Err(Error::InvalidUnit {
                    unit_id: u.unit_id.clone(),
                    msg: format!("{} action steps but T = {}", u.horizon(), self.meta.t),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Same meta, a subset of units (by index, order kept).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut meta: Option<DatasetMeta> = None;
    let mut units = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match meta {
            None => {
                meta = Some(serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("meta object: {e}"),
                })?);
            }
            Some(ref m) => {
                let unit: UnitRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
                unit.validate(m.k, m.z_dim)?;
                units.push(unit);
            }
        }
    }
    let meta = meta.ok_or(Error::Parse {
        line: 1,
        msg: "missing meta line".into(),
    })?;
    Dataset::new(meta, units)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let json = |e: serde_json::Error| Error::io(path, e.into());
    serde_json::to_writer(&mut w, &ds.meta).map_err(json)?;
    w.write_all(b"\n").map_err(io)?;
    for u in &ds.units {
        serde_json::to_writer(&mut w, u).map_err(json)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Partition fractions in the order train / validation / calibration / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub cal: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, cal: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            train,
            val,
            cal,
            test,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    fn fractions(&self) -> [f64; 4] {
        [self.train, self.val, self.cal, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("split fractions must be non-negative".into()));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Partition sizes for `n` units: each partition gets `floor(f·n)`, the
    /// remainder goes to train.
    pub fn sizes(&self, n: usize) -> [usize; 4] {
        let mut sizes = self.fractions().map(|f| (f * n as f64 + 1e-9).floor() as usize);
        let assigned: usize = sizes.iter().sum();
        sizes[0] += n.saturating_sub(assigned);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = ds.len();
    let nonzero = spec.fractions().iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(Error::InvalidDataset(format!(
            "{n} units cannot fill {nonzero} non-empty partitions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(spec.seed, "split"));
    let sizes = spec.sizes(n);
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        parts.push(ds.subset(&idx));
        start += size;
    }
    let mut it = parts.into_iter();
    Ok(Splits {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        cal: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}
