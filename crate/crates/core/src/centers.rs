//! Label masks and ground-truth class centers.
//!
//! A class center is the mean feature of all supervised pixels carrying that
//! class label. Centers are computed inside the caller's [`Graph`] so that the
//! losses built on them can send gradients back into the features.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label value marking pixels excluded from supervision.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    ignore_value: u8,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        Self::with_ignore(height, width, labels, IGNORE_LABEL)
    }

    pub fn with_ignore(height: usize, width: usize, labels: Vec<u8>, ignore_value: u8) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} mask given {} labels",
                labels.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
            ignore_value,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ignore_value(&self) -> u8 {
        self.ignore_value
    }

    /// Class id at flat pixel `i`, or `None` when ignored.
    pub fn class_at(&self, i: usize) -> Option<usize> {
        let l = self.labels[i];
        (l != self.ignore_value).then_some(l as usize)
    }

    /// The ignore mask: `true` where the pixel is excluded.
    pub fn sigma(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == self.ignore_value).collect()
    }

    pub fn supervised_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.ignore_value).count()
    }

    pub fn validate(&self, n_class: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != self.ignore_value && l as usize >= n_class)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, n_class }),
            None => Ok(()),
        }
    }

    /// Flattened one-hot view `[HW, n_class]`; ignored rows are all zero.
    pub fn one_hot<T: Scalar>(&self, n_class: usize) -> Result<Tensor<T>> {
        self.validate(n_class)?;
        let mut data = vec![T::zero(); self.len() * n_class];
        for i in 0..self.len() {
            if let Some(k) = self.class_at(i) {
                data[i * n_class + k] = T::one();
            }
        }
        Tensor::new(vec![self.len(), n_class], data)
    }

    /// `1 - sigma` as a `[HW, 1]` column.
    pub fn valid_column<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .labels
            .iter()
            .map(|&l| if l == self.ignore_value { T::zero() } else { T::one() })
            .collect();
        Tensor::new(vec![self.len(), 1], data).expect("column length matches mask")
    }

    /// Nearest-neighbour resampling to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMask {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height.max(1);
            for x in 0..width {
                let sx = (x * self.width) / width.max(1);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        LabelMask {
            height,
            width,
            labels,
            ignore_value: self.ignore_value,
        }
    }

    /// Stack masks vertically; the flattened view equals concatenating the
    /// per-image flattened views.
    pub fn stack(masks: &[&LabelMask]) -> Result<LabelMask> {
        let first = masks.first().ok_or(Error::Empty("mask stack"))?;
        let width = first.width;
        let ignore_value = first.ignore_value;
        if masks
            .iter()
            .any(|m| m.width != width || m.ignore_value != ignore_value)
        {
            return Err(Error::invalid("stacked masks must share width and ignore value"));
        }
        let labels = masks.iter().flat_map(|m| m.labels.iter().copied()).collect();
        Ok(LabelMask {
            height: masks.iter().map(|m| m.height).sum(),
            width,
            labels,
            ignore_value,
        })
    }
}

/// Scope over which centers are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterScope {
    /// One set of centers per image.
    Image,
    /// One set of centers shared by the whole batch.
    Batch,
}

/// Class centers living in a graph: `mu` is an `[n_class, C]` node.
#[derive(Clone, Debug)]
pub struct ClassCenters {
    pub mu: Var,
    pub counts: Vec<usize>,
}

impl ClassCenters {
    pub fn n_class(&self) -> usize {
        self.counts.len()
    }

    pub fn present(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    /// Ids of classes with at least one contributing pixel, ascending.
    pub fn present_ids(&self) -> Vec<usize> {
        present_ids(&self.counts)
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> CenterValues<T> {
        CenterValues {
            mu: g.value(self.mu).clone(),
            counts: self.counts.clone(),
        }
    }
}

pub(crate) fn present_ids(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, _)| k)
        .collect()
}

/// Class centers as plain values, outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterValues<T> {
    pub mu: Tensor<T>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> CenterValues<T> {
    /// All classes absent.
    pub fn empty(n_class: usize, channels: usize) -> Self {
        CenterValues {
            mu: Tensor::zeros(vec![n_class, channels]),
            counts: vec![0; n_class],
        }
    }

    pub fn n_class(&self) -> usize {
        self.counts.len()
    }

    pub fn channels(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn present(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn present_ids(&self) -> Vec<usize> {
        present_ids(&self.counts)
    }

    pub fn row(&self, k: usize) -> &[T] {
        let c = self.channels();
        &self.mu.data()[k * c..(k + 1) * c]
    }

    /// Insert as a constant node.
    pub fn to_graph(&self, g: &mut Graph<T>) -> ClassCenters {
        ClassCenters {
            mu: g.constant(self.mu.clone()),
            counts: self.counts.clone(),
        }
    }
}

/// Running per-class feature sums for centers over arbitrarily many images.
///
/// Pixels are accumulated in the order they are fed, so results depend only on
/// that order.
#[derive(Clone, Debug)]
pub struct CenterAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
    channels: usize,
}

impl CenterAccumulator {
    pub fn new(n_class: usize, channels: usize) -> Self {
        CenterAccumulator {
            sums: vec![0.0; n_class * channels],
            counts: vec![0; n_class],
            channels,
        }
    }

    /// Add one image's `[HW, C]` features.
    pub fn add<T: Scalar>(&mut self, features: &[T], mask: &LabelMask) -> Result<()> {
        let n_class = self.counts.len();
        mask.validate(n_class)?;
        if features.len() != mask.len() * self.channels {
            return Err(Error::Shape {
                op: "center accumulation",
                lhs: vec![features.len()],
                rhs: vec![mask.len(), self.channels],
            });
        }
        let c = self.channels;
        for i in 0..mask.len() {
            if let Some(k) = mask.class_at(i) {
                self.counts[k] += 1;
                for (s, v) in self.sums[k * c..(k + 1) * c]
                    .iter_mut()
                    .zip(&features[i * c..(i + 1) * c])
                {
                    *s += v.as_f64();
                }
            }
        }
        Ok(())
    }

    pub fn finish<T: Scalar>(&self) -> Result<CenterValues<T>> {
        if self.counts.iter().all(|&c| c == 0) {
            return Err(Error::NoSupervisedPixels);
        }
        let c = self.channels;
        let mut mu = vec![T::zero(); self.sums.len()];
        for (k, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                for j in 0..c {
                    mu[k * c + j] = T::from_f64(self.sums[k * c + j] / n as f64);
                }
            }
        }
        Ok(CenterValues {
            mu: Tensor::new(vec![self.counts.len(), c], mu)?,
            counts: self.counts.clone(),
        })
    }
}

/// Centers of `features` (`[HW, C]`) under `mask` as a graph expression:
/// `mu = diag(1 / counts) · Y_flatᵀ · X_flat`, absent rows left at zero.
pub fn centers_from_flat<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    mask: &LabelMask,
    n_class: usize,
    detach: bool,
) -> Result<ClassCenters> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Shape {
            op: "extract_centers",
            lhs: shape,
            rhs: vec![mask.len()],
        });
    }
    let y = mask.one_hot::<T>(n_class)?;
    let mut counts = vec![0usize; n_class];
    for i in 0..mask.len() {
        if let Some(k) = mask.class_at(i) {
            counts[k] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::NoSupervisedPixels);
    }
    let inv: Vec<T> = counts
        .iter()
        .map(|&c| {
            if c > 0 {
                T::one() / T::from_f64(c as f64)
            } else {
                T::zero()
            }
        })
        .collect();
    let yt = transpose_tensor(&y);
    let yt = g.constant(yt);
    let sums = g.matmul(yt, features)?;
    let inv = g.constant(Tensor::new(vec![n_class, 1], inv)?);
    let mut mu = g.mul(sums, inv)?;
    if detach {
        mu = g.detach(mu);
    }
    Ok(ClassCenters { mu, counts })
}

fn transpose_tensor<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::new(vec![c, r], crate::kernels::transpose(t.data(), r, c)).expect("transpose shape")
}

/// Flatten `[B, H, W, C]` features to `[B·H·W, C]`.
pub fn flatten_features<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let &[b, h, w, c] = shape.as_slice() else {
        return Err(Error::Shape {
            op: "flatten_features",
            lhs: shape,
            rhs: vec![0, 0, 0, 0],
        });
    };
    g.reshape(features, &[b * h * w, c])
}

/// Ground-truth centers of a `[B, H, W, C]` feature map.
///
/// `Image` scope yields one [`ClassCenters`] per image, `Batch` scope a single
/// shared one. Masks must already be at feature resolution. Fails with
/// [`Error::NoSupervisedPixels`] when every pixel of the batch is ignored; an
/// image-scope entry for a fully ignored image is returned with all classes
/// absent.
pub fn extract_centers<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    masks: &[LabelMask],
    n_class: usize,
    scope: CenterScope,
    detach: bool,
) -> Result<Vec<ClassCenters>> {
    let shape = g.shape(features).to_vec();
    let &[b, h, w, c] = shape.as_slice() else {
        return Err(Error::Shape {
            op: "extract_centers",
            lhs: shape,
            rhs: vec![0, 0, 0, 0],
        });
    };
    if masks.len() != b || masks.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::invalid(
            "masks must match the feature map's batch and spatial size",
        ));
    }
    if masks.iter().all(|m| m.supervised_count() == 0) {
        return Err(Error::NoSupervisedPixels);
    }
    let flat = g.reshape(features, &[b * h * w, c])?;
    match scope {
        CenterScope::Batch => {
            let refs: Vec<&LabelMask> = masks.iter().collect();
            let stacked = LabelMask::stack(&refs)?;
            Ok(vec![centers_from_flat(g, flat, &stacked, n_class, detach)?])
        }
        CenterScope::Image => {
            let hw = h * w;
            let mut out = Vec::with_capacity(b);
            for (i, m) in masks.iter().enumerate() {
                if m.supervised_count() == 0 {
                    let values = CenterValues::<T>::empty(n_class, c);
                    out.push(values.to_graph(g));
                    continue;
                }
                let rows = g.slice_rows(flat, i * hw, (i + 1) * hw)?;
                out.push(centers_from_flat(g, rows, m, n_class, detach)?);
            }
            Ok(out)
        }
    }
}

/// Exponential moving average of centers.
///
/// Classes present in `fresh` become `decay·old + (1−decay)·fresh`; a class
/// seen for the first time takes the fresh value. Classes absent from `fresh`
/// keep their old value.
pub fn update_moving_centers<T: Scalar>(
    state: &CenterValues<T>,
    fresh: &CenterValues<T>,
    decay: f64,
) -> Result<CenterValues<T>> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid(format!("decay {decay} outside [0, 1)")));
    }
    if state.mu.shape() != fresh.mu.shape() {
        return Err(Error::Shape {
            op: "update_moving_centers",
            lhs: state.mu.shape().to_vec(),
            rhs: fresh.mu.shape().to_vec(),
        });
    }
    let c = state.channels();
    let d = T::from_f64(decay);
    let keep = T::from_f64(1.0 - decay);
    let mut mu = state.mu.clone();
    let mut counts = state.counts.clone();
    for k in 0..state.n_class() {
        if fresh.counts[k] == 0 {
            continue;
        }
        let old_seen = state.counts[k] > 0;
        for (o, &f) in mu.data_mut()[k * c..(k + 1) * c]
            .iter_mut()
            .zip(fresh.row(k))
        {
            *o = if old_seen { d * *o + keep * f } else { f };
        }
        counts[k] += fresh.counts[k];
    }
    Ok(CenterValues { mu, counts })
}

/// `Y_flat · mu`: row `i` is the center of pixel `i`'s class, zero where ignored.
pub fn distribute_centers<T: Scalar>(
    g: &mut Graph<T>,
    centers: &ClassCenters,
    mask: &LabelMask,
) -> Result<Var> {
    let y = mask.one_hot::<T>(centers.n_class())?;
    let y = g.constant(y);
    g.matmul(y, centers.mu)
}
