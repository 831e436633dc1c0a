//! Class-dependency maps, pixel-relation maps and heatmap rendering.

use std::fmt::Write as _;
use std::path::Path;

use crate::centers::{centers_from_flat, LabelMask};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::netpbm::Image8;
use crate::synth::Sample;
use crate::tensor::Tensor;
use crate::train::batch_images;

/// Pairwise similarity of dataset-level class centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyMap {
    pub class_names: Vec<String>,
    /// Row-major `N × N`; rows and columns of absent classes are zero.
    pub values: Vec<f64>,
    pub present: Vec<bool>,
    pub cosine: bool,
}

impl DependencyMap {
    pub fn n_class(&self) -> usize {
        self.present.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_class() + j]
    }

    /// Mean over ordered pairs `i ≠ j` of present classes.
    pub fn mean_off_diagonal(&self) -> f64 {
        let ids: Vec<usize> = (0..self.n_class()).filter(|&k| self.present[k]).collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        for &i in &ids {
            for &j in &ids {
                if i != j {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn matrix(&self) -> Matrix {
        Matrix {
            rows: self.n_class(),
            cols: self.n_class(),
            data: self.values.clone(),
        }
    }
}

/// Similarity between rows of `centers` (`N × C`) for the classes in
/// `present`; absent rows and columns are left at zero.
pub fn similarity_matrix(centers: &[f64], channels: usize, present: &[bool], cosine: bool) -> Vec<f64> {
    let n = present.len();
    let row = |k: usize| &centers[k * channels..(k + 1) * channels];
    let norms: Vec<f64> = (0..n).map(|k| row(k).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in (0..n).filter(|&i| present[i]) {
        for j in (0..n).filter(|&j| present[j]) {
            let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
            out[i * n + j] = if !cosine {
                dot
            } else if norms[i] == 0.0 || norms[j] == 0.0 {
                if i == j { 1.0 } else { 0.0 }
            } else {
                dot / (norms[i] * norms[j])
            };
        }
    }
    out
}

/// Extract features for every sample, compute class centers over the whole
/// set with the same center extraction the losses use, and compare them
/// pairwise (cosine, or raw dot products).
pub fn compute_dependency_map(model: &Model<f32>, samples: &[Sample], cosine: bool) -> Result<DependencyMap> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples for the dependency map"));
    }
    let n_class = model.config().n_class;
    let channels = model.config().feature_dim;
    let mut flat = Vec::new();
    for s in samples {
        let f = model.features(&batch_images(&[s])?)?;
        flat.extend(f.data().iter().map(|&v| v as f64));
    }
    let masks: Vec<&LabelMask> = samples.iter().map(|s| &s.mask).collect();
    let mask = LabelMask::stack(&masks)?;

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![mask.len(), channels], flat)?);
    let centers = centers_from_flat(&mut g, x, &mask, n_class, true)?;
    let present = centers.present();
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("dependency map needs at least two present classes"));
    }
    let mu = g.value(centers.mu).data().to_vec();
    Ok(DependencyMap {
        class_names: (0..n_class).map(|k| format!("class{k}")).collect(),
        values: similarity_matrix(&mu, channels, &present, cosine),
        present,
        cosine,
    })
}

/// Cosine similarity between one anchor pixel's features and every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMap {
    pub anchor: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub sample_id: usize,
}

impl RelationMap {
    pub fn matrix(&self) -> Matrix {
        Matrix {
            rows: self.height,
            cols: self.width,
            data: self.values.clone(),
        }
    }
}

/// Relation map of an `[H, W, C]` feature map (row-major, channels last).
/// Zero-norm pixels have similarity 0 unless both vectors are zero.
pub fn relation_from_features(
    features: &[f64],
    height: usize,
    width: usize,
    anchor: (usize, usize),
) -> Result<Vec<f64>> {
    let (r, c) = anchor;
    if r >= height || c >= width {
        return Err(Error::invalid(format!(
            "anchor ({r}, {c}) outside {height}×{width} image"
        )));
    }
    let hw = height * width;
    if hw == 0 || features.len() % hw != 0 {
        return Err(Error::invalid("feature map does not match image size"));
    }
    let ch = features.len() / hw;
    let a = &features[(r * width + c) * ch..(r * width + c + 1) * ch];
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(features
        .chunks(ch)
        .map(|p| {
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || np == 0.0 {
                return if na == np { 1.0 } else { 0.0 };
            }
            a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() / (na * np)
        })
        .collect())
}

pub fn compute_relation_map(
    model: &Model<f32>,
    sample: &Sample,
    sample_id: usize,
    anchor: (usize, usize),
) -> Result<RelationMap> {
    let (h, w) = (sample.mask.height(), sample.mask.width());
    if anchor.0 >= h || anchor.1 >= w {
        return Err(Error::invalid(format!(
            "anchor ({}, {}) outside {h}×{w} image",
            anchor.0, anchor.1
        )));
    }
    let f = model.features(&batch_images(&[sample])?)?;
    let f: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
    Ok(RelationMap {
        anchor,
        height: h,
        width: w,
        values: relation_from_features(&f, h, w, anchor)?,
        sample_id,
    })
}

/// A dense row-major matrix of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix",
                lhs: vec![data.len()],
                rhs: vec![rows, cols],
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    fn range(&self) -> (f64, f64) {
        let min = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }
}

/// Blue → red color table, 256 entries.
pub fn color_table() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    for (i, c) in t.iter_mut().enumerate() {
        let s = i as f64 / 255.0;
        let green = 1.0 - (2.0 * s - 1.0).abs();
        *c = [
            (255.0 * s).round() as u8,
            (255.0 * green).round() as u8,
            (255.0 * (1.0 - s)).round() as u8,
        ];
    }
    t
}

/// Table index for each value after min–max normalization. A constant matrix
/// maps to the middle entry.
pub fn color_indices(m: &Matrix) -> Vec<u8> {
    let (min, max) = m.range();
    m.data
        .iter()
        .map(|&v| {
            if max > min {
                ((v - min) / (max - min) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect()
}

pub fn heatmap_image(m: &Matrix) -> Result<Image8> {
    let table = color_table();
    let data = color_indices(m)
        .into_iter()
        .flat_map(|i| table[i as usize])
        .collect();
    Image8::new(m.cols, m.rows, 3, data)
}

/// CSV with a `# min=…,max=…` header line, 9 significant digits.
pub fn heatmap_csv(m: &Matrix) -> String {
    let (min, max) = m.range();
    let mut out = format!("# min={min:.8e},max={max:.8e}\n");
    for row in m.data.chunks(m.cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn parse_heatmap_csv(text: &str) -> Result<Matrix> {
    let bad = |reason: String| Error::Format {
        format: "heatmap csv",
        reason,
    };
    let mut rows = 0;
    let mut cols = None;
    let mut data = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let cells = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("{c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(cells.len()) != cells.len() {
            return Err(bad(format!("row {rows} has {} cells", cells.len())));
        }
        data.extend(cells);
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

/// Write `<stem>.ppm` and `<stem>.csv`.
pub fn render_heatmap(m: &Matrix, stem: &Path) -> Result<()> {
    if m.data.is_empty() || m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("heatmap needs a non-empty matrix of finite values"));
    }
    heatmap_image(m)?.save(stem.with_extension("ppm"))?;
    let csv = stem.with_extension("csv");
    std::fs::write(&csv, heatmap_csv(m)).map_err(|e| Error::io(&csv, e))
}
