//! Synthetic dataset generators and CSV ingestion with deterministic
//! three-way splitting. Generation and splitting are pure functions of their
//! specs: same seed, same bytes.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::softmax::MulticlassDataset;
use crate::svm::LabeledDataset;

/// Binary or multiclass samples, depending on the generator.
#[derive(Debug, Clone)]
pub enum Dataset {
    Binary(LabeledDataset),
    Multiclass(MulticlassDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Binary(d) => d.len(),
            Dataset::Multiclass(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Binary(d) => d.dim(),
            Dataset::Multiclass(d) => d.dim(),
        }
    }

    pub fn as_binary(&self) -> Result<&LabeledDataset> {
        match self {
            Dataset::Binary(d) => Ok(d),
            Dataset::Multiclass(_) => Err(Error::invalid("expected a binary dataset")),
        }
    }

    pub fn as_multiclass(&self) -> Result<&MulticlassDataset> {
        match self {
            Dataset::Multiclass(d) => Ok(d),
            Dataset::Binary(_) => Err(Error::invalid("expected a multiclass dataset")),
        }
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        match self {
            Dataset::Binary(d) => {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| d.sample(i).to_vec()).collect();
                let labels: Vec<f64> = idx.iter().map(|&i| d.label(i)).collect();
                Dataset::Binary(
                    LabeledDataset::new(Matrix::from_rows(&rows).expect("uniform dims"), labels)
                        .expect("labels preserved"),
                )
            }
            Dataset::Multiclass(d) => {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| d.sample(i).to_vec()).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| d.label(i)).collect();
                Dataset::Multiclass(
                    MulticlassDataset::new(
                        Matrix::from_rows(&rows).expect("uniform dims"),
                        labels,
                        d.classes(),
                    )
                    .expect("labels preserved"),
                )
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetSpec {
    /// Class -1 on the inner radius, class +1 on the outer, balanced counts,
    /// uniform angles, Gaussian radial noise.
    Circles {
        n: usize,
        inner: f64,
        outer: f64,
        noise: f64,
        seed: u64,
    },
    /// Planted W = A B with Gaussian A (classes x rank), B (rank x features);
    /// labels are argmax(W x + label_noise * gaussian).
    LowRankMulticlass {
        n: usize,
        features: usize,
        classes: usize,
        rank: usize,
        label_noise: f64,
        seed: u64,
    },
    CsvFile {
        path: String,
        label_column: String,
    },
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Circles {
            n,
            inner,
            outer,
            noise,
            seed,
        } => generate_circles(*n, *inner, *outer, *noise, *seed).map(Dataset::Binary),
        DatasetSpec::LowRankMulticlass {
            n,
            features,
            classes,
            rank,
            label_noise,
            seed,
        } => generate_low_rank(*n, *features, *classes, *rank, *label_noise, *seed)
            .map(|(d, _)| Dataset::Multiclass(d)),
        DatasetSpec::CsvFile { path, label_column } => load_csv(path, label_column),
    }
}

pub fn generate_circles(
    n: usize,
    inner: f64,
    outer: f64,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::invalid("circles need at least two samples"));
    }
    if !(0.0 < inner && inner < outer) {
        return Err(Error::invalid(format!(
            "need 0 < inner < outer, got inner {inner}, outer {outer}"
        )));
    }
    if noise < 0.0 {
        return Err(Error::invalid("noise must be nonnegative"));
    }
    let mut rng = SplitMix64::new(seed);
    let n_inner = n / 2;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (radius, label) = if i < n_inner {
            (inner, -1.0)
        } else {
            (outer, 1.0)
        };
        let angle = rng.next_f64() * std::f64::consts::TAU;
        let r = radius + noise * rng.next_gaussian();
        rows.push(vec![r * angle.cos(), r * angle.sin()]);
        labels.push(label);
    }
    LabeledDataset::new(Matrix::from_rows(&rows)?, labels)
}

/// Returns the dataset together with the planted weight matrix, so tests can
/// check that the planted model classifies its own noiseless data perfectly.
pub fn generate_low_rank(
    n: usize,
    features: usize,
    classes: usize,
    rank: usize,
    label_noise: f64,
    seed: u64,
) -> Result<(MulticlassDataset, Matrix)> {
    if n == 0 || features == 0 {
        return Err(Error::invalid("counts must be positive"));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if rank == 0 || rank > classes.min(features) {
        return Err(Error::invalid(format!(
            "rank must lie in 1..=min(classes, features), got {rank}"
        )));
    }
    if label_noise < 0.0 {
        return Err(Error::invalid("label noise must be nonnegative"));
    }
    let mut rng = SplitMix64::new(seed);
    let a = Matrix::new(
        classes,
        rank,
        (0..classes * rank).map(|_| rng.next_gaussian()).collect(),
    )?;
    let b = Matrix::new(
        rank,
        features,
        (0..rank * features).map(|_| rng.next_gaussian()).collect(),
    )?;
    let w = a.matmul(&b)?;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..features).map(|_| rng.next_gaussian()).collect();
        let mut logits = w.matvec(&x);
        if label_noise > 0.0 {
            for l in logits.iter_mut() {
                *l += label_noise * rng.next_gaussian();
            }
        }
        let mut best = 0;
        for k in 1..classes {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        rows.push(x);
        labels.push(best);
    }
    Ok((
        MulticlassDataset::new(Matrix::from_rows(&rows)?, labels, classes)?,
        w,
    ))
}

/// Fractions for the optimizee-train / optimizer-train / test split.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (a, b, c) = fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::invalid("all three split fractions must be positive"));
        }
        if (a + b + c - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "fractions must sum to 1, got {}",
                a + b + c
            )));
        }
        Ok(SplitSpec { fractions, seed })
    }
}

/// Seeded shuffle then contiguous slicing into three pairwise-disjoint parts
/// covering the input. A fraction that rounds to zero samples is an error.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let n = dataset.len();
    let (f1, f2, _) = spec.fractions;
    let c1 = (f1 * n as f64).round() as usize;
    let c2 = (f2 * n as f64).round() as usize;
    if c1 == 0 || c2 == 0 || c1 + c2 >= n {
        return Err(Error::invalid(format!(
            "split sizes {c1}/{c2}/{} leave an empty part",
            n.saturating_sub(c1 + c2)
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(spec.seed);
    rng.shuffle(&mut idx);
    let part1 = dataset.subset(&idx[..c1]);
    let part2 = dataset.subset(&idx[c1..c1 + c2]);
    let part3 = dataset.subset(&idx[c1 + c2..]);
    Ok((part1, part2, part3))
}

/// Header `feature_0,...,feature_{d-1},label`; floats print in shortest
/// round-trip form, lines end with LF.
pub fn write_csv<W: Write>(dataset: &Dataset, w: &mut W) -> io::Result<()> {
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
    header.push("label".to_string());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..dataset.len() {
        let (feats, label): (&[f64], String) = match dataset {
            Dataset::Binary(data) => (data.sample(i), data.label(i).to_string()),
            Dataset::Multiclass(data) => (data.sample(i), data.label(i).to_string()),
        };
        let mut row: Vec<String> = feats.iter().map(|v| v.to_string()).collect();
        row.push(label);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> io::Result<()> {
    let mut file = File::create(path)?;
    write_csv(dataset, &mut file)
}

/// Parses a feature/label CSV. Binary when every label is -1 or +1;
/// otherwise labels must be nonnegative integer class ids.
pub fn read_csv<R: BufRead>(r: R, label_column: &str) -> Result<Dataset> {
    let mut lines = r.lines().enumerate();
    let (_, header) = match lines.next() {
        Some((i, Ok(line))) => (i, line),
        Some((i, Err(e))) => {
            return Err(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 0,
                msg: "empty file".into(),
            })
        }
    };
    let columns: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    let label_idx = columns
        .iter()
        .position(|c| *c == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("no column named '{label_column}' in header"),
        })?;
    let width = columns.len();
    if width < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "need at least one feature column and one label column".into(),
        });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {width} cells, got {}", cells.len()),
            });
        }
        let mut feats = Vec::with_capacity(width - 1);
        for (ci, cell) in cells.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("non-numeric cell '{}'", cell.trim()),
            })?;
            if ci == label_idx {
                labels.push(value);
            } else {
                feats.push(value);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }

    let features = Matrix::from_rows(&rows)?;
    if labels.iter().all(|&y| y == 1.0 || y == -1.0) {
        Ok(Dataset::Binary(LabeledDataset::new(features, labels)?))
    } else if labels.iter().all(|&y| y >= 0.0 && y.fract() == 0.0) {
        let ids: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        let classes = ids.iter().copied().max().unwrap_or(0) + 1;
        Ok(Dataset::Multiclass(MulticlassDataset::new(
            features,
            ids,
            classes.max(2),
        )?))
    } else {
        Err(Error::Parse {
            line: 1,
            msg: "labels must be -1/+1 or nonnegative integer class ids".into(),
        })
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let file = File::open(path.as_ref()).map_err(Error::Io)?;
    read_csv(BufReader::new(file), label_column)
}
