//! Per-category text embeddings.
//!
//! Embeddings are produced offline by any sentence encoder and loaded from
//! CSV, or generated deterministically for experiments. Row order is the
//! category-channel order used by every similarity map and mask downstream.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{ten1, Scalar, Tensor};

/// Default embedding width of the sentence encoder.
pub const DEFAULT_TEXT_DIM: usize = 768;

/// Reference vehicle-category descriptions (`name<TAB>description`), for
/// regenerating real embeddings with an external encoder.
pub const VEHICLE_DESCRIPTIONS: &str = include_str!("../assets/vehicle_descriptions.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryDescription {
    pub name: String,
    /// May be empty, in which case an encoder sees only the name.
    pub text: String,
}

fn check_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for name in names {
        if name.is_empty() {
            return Err(Error::Validation("empty category name".into()));
        }
        if !seen.insert(name) {
            return Err(Error::Validation(format!("duplicate category {name:?}")));
        }
    }
    Ok(())
}

/// Parses `name<TAB>description` lines. Blank lines are skipped.
pub fn parse_descriptions(text: &str) -> Result<Vec<CategoryDescription>> {
    let out: Vec<CategoryDescription> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (name, text) = line.split_once('\t').unwrap_or((line, ""));
            CategoryDescription {
                name: name.trim().to_string(),
                text: text.trim().to_string(),
            }
        })
        .collect();
    check_names(out.iter().map(|d| d.name.as_str()))?;
    Ok(out)
}

pub fn load_descriptions(path: &Path) -> Result<Vec<CategoryDescription>> {
    parse_descriptions(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Semantic feature matrix: one row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddings<T> {
    categories: Vec<String>,
    matrix: Tensor<T>,
}

impl<T: Scalar> SemanticEmbeddings<T> {
    pub fn new(categories: Vec<String>, matrix: Tensor<T>) -> Result<Self> {
        check_names(categories.iter().map(String::as_str))?;
        let s = matrix.shape();
        if s.len() != 2 || s[0] != categories.len() {
            return Err(Error::shape("embeddings", s, &[categories.len()]));
        }
        if !matrix.is_finite() {
            return Err(Error::Validation(
                "embedding matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { categories, matrix })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Reorders rows so that new row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.matrix.numel());
        for &i in order {
            data.extend_from_slice(&self.matrix.data()[i * d..(i + 1) * d]);
        }
        Self::new(
            order.iter().map(|&i| self.categories[i].clone()).collect(),
            Tensor::new([order.len(), d], data)?,
        )
    }

    pub fn cast<U: Scalar>(&self) -> SemanticEmbeddings<U> {
        SemanticEmbeddings {
            categories: self.categories.clone(),
            matrix: self.matrix.cast(),
        }
    }

    /// `name,v0,...,v{D-1}` rows with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for (name, row) in self.categories.iter().zip(self.matrix.data().chunks(d)) {
            out.push_str(name);
            for &v in row {
                out.push(',');
                out.push_str(&ten1::format_value(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads the embeddings CSV (`name,v0,...`), preserving row order.
pub fn load_embeddings<T: Scalar>(path: &Path) -> Result<SemanticEmbeddings<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&bytes, &path.display().to_string())
}

pub fn parse_embeddings<T: Scalar>(bytes: &[u8], origin: &str) -> Result<SemanticEmbeddings<T>> {
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut names = Vec::new();
    let mut data: Vec<T> = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| fmt_err(0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut fields = record.iter();
        let name = fields.next().unwrap_or_default().trim().to_string();
        let row = fields
            .map(|f| {
                f.trim()
                    .parse::<T>()
                    .map_err(|_| fmt_err(line, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<T>>>()?;
        match width {
            None if row.is_empty() => return Err(fmt_err(line, "row has no values".into())),
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(fmt_err(
                    line,
                    format!("row has {} values, expected {w}", row.len()),
                ))
            }
            Some(_) => {}
        }
        names.push(name);
        data.extend(row);
    }
    let n = names.len();
    let d = width.unwrap_or(0);
    SemanticEmbeddings::new(names, Tensor::new([n, d], data)?)
}

/// `n` orthonormal rows of width `dim`: Gram–Schmidt over seeded Gaussian
/// draws. Categories are named `cat0`, `cat1`, ...
pub fn make_test_embeddings<T: Scalar>(
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<SemanticEmbeddings<T>> {
    if n > dim {
        return Err(Error::Config(format!(
            "cannot build {n} orthonormal rows in dimension {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    let flat: Vec<f64> = rows.concat();
    SemanticEmbeddings::new(
        (0..n).map(|i| format!("cat{i}")).collect(),
        Tensor::from_f64([n, dim], &flat)?,
    )
}
