//! Class-aware regularization losses and the primary cross-entropy.
//!
//! All three regularizers operate on flattened features `X` (`[HW, C]`), the
//! one-hot mask `Y` (`[HW, N]`) and centers `mu` (`[N, C]`):
//!
//! * intra center-to-pixel: mean squared distance of each supervised pixel
//!   feature to its class center;
//! * inter center-to-center: row-softmax of `mu·muᵀ/√C` over present classes,
//!   off-diagonal entries above `eps0/(N-1)` summed per class, mean of squares;
//! * inter center-to-pixel: per-pixel softmax over `X·muᵀ` with the own-class
//!   logit replaced by `|mu_k|²`, non-own entries above `eps1/(N-1)` summed per
//!   pixel, mean of squares over supervised pixels.
//!
//! Absent classes are dropped from both class axes, and `N` in the margins is
//! the number of present classes.

use log::warn;

use crate::centers::{ClassCenters, LabelMask};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Margin numerators for the two inter-class losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarThresholds {
    pub eps0: f64,
    pub eps1: f64,
}

impl Default for CarThresholds {
    fn default() -> Self {
        CarThresholds {
            eps0: 0.5,
            eps1: 0.25,
        }
    }
}

impl CarThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 >= 0.0 && self.eps1 >= 0.0) {
            return Err(Error::invalid(format!(
                "thresholds must be non-negative, got eps0={} eps1={}",
                self.eps0, self.eps1
            )));
        }
        Ok(())
    }
}

/// How the own-class logit is substituted in the center-to-pixel loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Replacement {
    /// `Λ_c2p ⊙ (1−Y) + Y ⊙ Λ_c`: only the ground-truth column takes `|mu_k|²`.
    #[default]
    Masked,
    /// `Λ_c2p ⊙ (1−Y) + Λ_c` broadcast over every pixel row.
    Literal,
}

impl std::str::FromStr for Replacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Replacement::Masked),
            "literal" => Ok(Replacement::Literal),
            _ => Err(Error::invalid(format!("unknown replacement mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for Replacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Replacement::Masked => "masked",
            Replacement::Literal => "literal",
        })
    }
}

fn check_pixels<T: Scalar>(g: &Graph<T>, features: Var, mask: &LabelMask) -> Result<usize> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Shape {
            op: "car loss",
            lhs: shape.to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok(shape[1])
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Intra-class center-to-pixel loss.
///
/// Returns 0 (with a warning) when every pixel is ignored.
pub fn intra_c2p_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    mask: &LabelMask,
    centers: &ClassCenters,
) -> Result<Var> {
    let c = check_pixels(g, features, mask)?;
    let n_valid = mask.supervised_count();
    if n_valid == 0 {
        warn!("intra_c2p_loss: no supervised pixels, loss set to 0");
        return Ok(zero(g));
    }
    let placed = crate::centers::distribute_centers(g, centers, mask)?;
    let diff = g.sub(placed, features)?;
    let dist = g.abs(diff);
    let valid = g.constant(mask.valid_column());
    let masked = g.mul(dist, valid)?;
    let sq = g.square(masked);
    let total = g.sum(sq);
    Ok(g.scale(total, T::one() / T::from_f64((n_valid * c) as f64)))
}

/// Inter-class center-to-center loss.
pub fn inter_c2c_loss<T: Scalar>(g: &mut Graph<T>, centers: &ClassCenters, eps0: f64) -> Result<Var> {
    let present = centers.present_ids();
    let n = present.len();
    if n < 2 {
        return Ok(zero(g));
    }
    let mu = g.select_rows(centers.mu, &present)?;
    let c = g.shape(mu)[1];
    let mu_t = g.transpose(mu)?;
    let gram = g.matmul(mu, mu_t)?;
    let scaled = g.scale(gram, T::one() / T::from_f64((c as f64).sqrt()));
    let sim = g.softmax(scaled, 1)?;
    let off = g.constant(off_diagonal::<T>(n));
    let off_sim = g.mul(sim, off)?;
    let excess = g.relu_max(off_sim, T::from_f64(eps0 / (n - 1) as f64));
    let per_class = g.sum_axis(excess, 1)?;
    let sq = g.square(per_class);
    g.mean(sq)
}

fn off_diagonal<T: Scalar>(n: usize) -> Tensor<T> {
    let data = (0..n * n)
        .map(|i| if i / n == i % n { T::zero() } else { T::one() })
        .collect();
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Inter-class center-to-pixel loss.
///
/// Returns 0 (with a warning) when every pixel is ignored.
pub fn inter_c2p_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    mask: &LabelMask,
    centers: &ClassCenters,
    eps1: f64,
    replacement: Replacement,
) -> Result<Var> {
    check_pixels(g, features, mask)?;
    mask.validate(centers.n_class())?;
    let n_valid = mask.supervised_count();
    if n_valid == 0 {
        warn!("inter_c2p_loss: no supervised pixels, loss set to 0");
        return Ok(zero(g));
    }
    let present = centers.present_ids();
    let n = present.len();
    if n < 2 {
        return Ok(zero(g));
    }
    // supervised pixels whose class has no center get an all-zero Y row
    let mut column_of = vec![None; centers.n_class()];
    for (j, &k) in present.iter().enumerate() {
        column_of[k] = Some(j);
    }
    let hw = mask.len();
    let mut y = vec![T::zero(); hw * n];
    let mut valid = vec![T::zero(); hw];
    for i in 0..hw {
        if let Some(k) = mask.class_at(i) {
            valid[i] = T::one();
            if let Some(j) = column_of[k] {
                y[i * n + j] = T::one();
            }
        }
    }
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();

    let mu = g.select_rows(centers.mu, &present)?;
    let mu_t = g.transpose(mu)?;
    let c2p = g.matmul(features, mu_t)?;
    let self_dot = {
        let sq = g.square(mu);
        g.sum_axis(sq, 1)?
    };
    let not_y = g.constant(Tensor::new(vec![hw, n], not_y)?);
    let kept = g.mul(c2p, not_y)?;
    let replaced = match replacement {
        Replacement::Masked => {
            let y = g.constant(Tensor::new(vec![hw, n], y)?);
            let own = g.mul(y, self_dot)?;
            g.add(kept, own)?
        }
        Replacement::Literal => g.add(kept, self_dot)?,
    };
    let sim = g.softmax(replaced, 1)?;
    let other = g.mul(sim, not_y)?;
    let excess = g.relu_max(other, T::from_f64(eps1 / (n - 1) as f64));
    let per_pixel = g.sum_axis(excess, 1)?;
    let valid = g.constant(Tensor::new(vec![hw], valid)?);
    let per_pixel = g.mul(per_pixel, valid)?;
    let sq = g.square(per_pixel);
    let total = g.sum(sq);
    Ok(g.scale(total, T::one() / T::from_f64(n_valid as f64)))
}

/// Mean negative log-likelihood of the ground-truth class over supervised
/// pixels. `logits` is `[HW, N]`.
pub fn cross_entropy_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &LabelMask) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            lhs: shape,
            rhs: vec![mask.len()],
        });
    }
    let n_valid = mask.supervised_count();
    if n_valid == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    let y = g.constant(mask.one_hot::<T>(shape[1])?);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one() / T::from_f64(n_valid as f64)))
}

/// Combination weights for `(ce, intra_c2p, inter_c2c, inter_c2p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub intra_c2p: f64,
    pub inter_c2c: f64,
    pub inter_c2p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            intra_c2p: 1.0,
            inter_c2c: 1.0,
            inter_c2p: 1.0,
        }
    }
}

impl LossWeights {
    /// Cross-entropy only.
    pub fn baseline() -> Self {
        LossWeights {
            ce: 1.0,
            intra_c2p: 0.0,
            inter_c2c: 0.0,
            inter_c2p: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ce, self.intra_c2p, self.inter_c2c, self.inter_c2p]
    }

    pub fn uses_car(&self) -> bool {
        self.intra_c2p > 0.0 || self.inter_c2c > 0.0 || self.inter_c2p > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid(format!("negative loss weight in {self:?}")));
        }
        Ok(())
    }
}

/// The four loss nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub intra_c2p: Var,
    pub inter_c2c: Var,
    pub inter_c2p: Var,
}

/// Scalar values of each loss and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub intra_c2p: f64,
    pub inter_c2c: f64,
    pub inter_c2p: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    /// Bundle from plain values; `total` is the weighted sum.
    pub fn from_values(values: [f64; 4], weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let total = values
            .iter()
            .zip(weights.as_array())
            .map(|(v, w)| v * w)
            .sum();
        Ok(LossBundle {
            ce: values[0],
            intra_c2p: values[1],
            inter_c2c: values[2],
            inter_c2p: values[3],
            weights,
            total,
        })
    }

    pub fn values(&self) -> [f64; 4] {
        [self.ce, self.intra_c2p, self.inter_c2c, self.inter_c2p]
    }
}

/// Weighted sum of the loss terms as a differentiable node, plus its bundle.
/// Terms with zero weight are left out of the graph expression.
pub fn combine<T: Scalar>(
    g: &mut Graph<T>,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBundle)> {
    weights.validate()?;
    let vars = [terms.ce, terms.intra_c2p, terms.inter_c2c, terms.inter_c2p];
    let mut total: Option<Var> = None;
    for (&v, w) in vars.iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        let term = g.scale(v, T::from_f64(w));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => zero(g),
    };
    let values = vars.map(|v| g.item(v).as_f64());
    let mut bundle = LossBundle::from_values(values, *weights)?;
    bundle.total = g.item(total).as_f64();
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centers::{extract_centers, CenterScope, IGNORE_LABEL};

    fn setup(
        feats: &[f64],
        labels: Vec<u8>,
        c: usize,
        n_class: usize,
    ) -> (Graph<f64>, Var, LabelMask, ClassCenters) {
        let hw = labels.len();
        let mut g = Graph::new();
        let x = g.param(Tensor::from_f64(vec![1, 1, hw, c], feats).unwrap());
        let mask = LabelMask::new(1, hw, labels).unwrap();
        let centers = extract_centers(&mut g, x, &[mask.clone()], n_class, CenterScope::Batch, false)
            .unwrap()
            .remove(0);
        let flat = g.reshape(x, &[hw, c]).unwrap();
        (g, flat, mask, centers)
    }

    #[test]
    fn intra_two_pixels_same_class() {
        let (mut g, x, mask, centers) = setup(&[1.0, 3.0], vec![0, 0], 1, 2);
        let l = intra_c2p_loss(&mut g, x, &mask, &centers).unwrap();
        assert!((g.item(l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn intra_fixed_point_and_all_ignored() {
        let (mut g, x, mask, centers) = setup(&[2.0, 2.0, 5.0], vec![0, 0, 1], 1, 2);
        let l = intra_c2p_loss(&mut g, x, &mask, &centers).unwrap();
        assert_eq!(g.item(l), 0.0);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![2, 1], &[1.0, 4.0]).unwrap());
        let mask = LabelMask::new(1, 2, vec![IGNORE_LABEL; 2]).unwrap();
        let centers = crate::centers::CenterValues::<f64>::empty(2, 1).to_graph(&mut g);
        let l = intra_c2p_loss(&mut g, x, &mask, &centers).unwrap();
        assert_eq!(g.item(l), 0.0);
        let l = inter_c2p_loss(&mut g, x, &mask, &centers, 0.25, Replacement::Masked).unwrap();
        assert_eq!(g.item(l), 0.0);
        assert!(cross_entropy_loss(&mut g, x, &mask).is_err());
    }

    #[test]
    fn c2c_identical_centers_is_exactly_zero() {
        let (mut g, _, _, centers) = setup(&[0.7, -0.3, 0.7, -0.3], vec![0, 1], 2, 2);
        let l = inter_c2c_loss(&mut g, &centers, 0.5).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn c2c_single_class_is_zero() {
        let (mut g, _, _, centers) = setup(&[0.7, -0.3, 0.1, 2.0], vec![1, 1], 2, 3);
        let l = inter_c2c_loss(&mut g, &centers, 0.5).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn c2p_single_class_and_separated_centers() {
        let (mut g, x, mask, centers) = setup(&[1.0, 2.0], vec![0, 0], 1, 1);
        let l = inter_c2p_loss(&mut g, x, &mask, &centers, 0.25, Replacement::Masked).unwrap();
        assert_eq!(g.item(l), 0.0);

        let (mut g, x, mask, centers) = setup(&[10.0, -10.0], vec![0, 1], 1, 2);
        let l = inter_c2p_loss(&mut g, x, &mask, &centers, 0.25, Replacement::Masked).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(vec![3, 4]));
        let mask = LabelMask::new(1, 3, vec![0, 3, 2]).unwrap();
        let l = cross_entropy_loss(&mut g, logits, &mask).unwrap();
        assert!((g.item(l) - 4f64.ln()).abs() < 1e-12);

        let logits = g.param(Tensor::from_f64(vec![1, 3], &[1e4, 0.0, 0.0]).unwrap());
        let mask = LabelMask::new(1, 1, vec![0]).unwrap();
        let l = cross_entropy_loss(&mut g, logits, &mask).unwrap();
        assert!(g.item(l).abs() < 1e-12);
    }

    #[test]
    fn combine_weighting() {
        let mut g = Graph::<f64>::new();
        let vals = [0.5, 0.1, 0.2, 0.3];
        let v: Vec<Var> = vals.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms {
            ce: v[0],
            intra_c2p: v[1],
            inter_c2c: v[2],
            inter_c2p: v[3],
        };
        let (_, b) = combine(&mut g, &terms, &LossWeights::default()).unwrap();
        assert!((b.total - 1.1).abs() < 1e-12);
        let (_, b) = combine(&mut g, &terms, &LossWeights::baseline()).unwrap();
        assert_eq!(b.total, 0.5);
        let neg = LossWeights {
            ce: -1.0,
            ..LossWeights::default()
        };
        assert!(combine(&mut g, &terms, &neg).is_err());
    }
}
