//! A small fully-convolutional segmenter.
//!
//! Layout: a trunk of 3×3 conv + ReLU layers, a head conv (`head_kernel` ×
//! `head_kernel`, linear) whose output is the feature map the CAR losses see,
//! and a 1×1 classifier to per-pixel logits. Everything is NHWC, stride 1,
//! same padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Output widths of the 3×3 trunk layers.
    pub channels: Vec<usize>,
    /// Head kernel size, 1 or 3.
    pub head_kernel: usize,
    pub n_class: usize,
    /// Width of the feature map fed to the CAR losses.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![16, 16, 16],
            head_kernel: 1,
            n_class: 4,
            feature_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.head_kernel == 1 || self.head_kernel == 3) {
            return Err(Error::invalid(format!(
                "head_kernel must be 1 or 3, got {}",
                self.head_kernel
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("trunk needs at least one non-empty layer"));
        }
        if self.n_class < 1 || self.feature_dim < 1 {
            return Err(Error::invalid("n_class and feature_dim must be positive"));
        }
        if self.feature_dim < self.n_class {
            log::warn!(
                "feature_dim {} is smaller than n_class {}",
                self.feature_dim,
                self.n_class
            );
        }
        Ok(())
    }

    /// `(kernel, c_in, c_out)` of every conv in declaration order.
    pub fn layer_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = Vec::new();
        let mut c_in = 3;
        for &c in &self.channels {
            dims.push((3, c_in, c));
            c_in = c;
        }
        dims.push((self.head_kernel, c_in, self.feature_dim));
        dims.push((1, self.feature_dim, self.n_class));
        dims
    }
}

/// Model weights: `[w, b]` per conv layer, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Parameter leaves, matching [`Model::params`].
    pub params: Vec<Var>,
    /// `[B, H, W, feature_dim]`.
    pub features: Var,
    /// `[B, H, W, n_class]`.
    pub logits: Var,
}

impl<T: Scalar> Model<T> {
    /// Seeded He-uniform weights for ReLU layers, `1/√fan_in` bound for the
    /// classifier, zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = config.layer_dims();
        let mut params = Vec::with_capacity(dims.len() * 2);
        for (i, &(k, c_in, c_out)) in dims.iter().enumerate() {
            let fan_in = (k * k * c_in) as f64;
            let bound = if i + 1 == dims.len() {
                1.0 / fan_in.sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            let w = (0..k * k * c_in * c_out)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            params.push(Tensor::new(vec![k, k, c_in, c_out], w)?);
            params.push(Tensor::zeros(vec![c_out]));
        }
        Ok(Model { config, params })
    }

    /// Rebuild a model from weights, inferring the architecture from shapes.
    pub fn from_params(params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() < 6 || params.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "expected an even number (>= 6) of parameter tensors, got {}",
                params.len()
            )));
        }
        let n_layers = params.len() / 2;
        let mut dims = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (w, b) = (&params[2 * l], &params[2 * l + 1]);
            let &[k, k2, c_in, c_out] = w.shape() else {
                return Err(Error::invalid(format!("layer {l} weight is not 4-D")));
            };
            if k != k2 || b.shape() != [c_out] {
                return Err(Error::invalid(format!("layer {l} has inconsistent shapes")));
            }
            dims.push((k, c_in, c_out));
        }
        let trunk = &dims[..n_layers - 2];
        let (head_kernel, _, feature_dim) = dims[n_layers - 2];
        let (_, _, n_class) = dims[n_layers - 1];
        let config = ModelConfig {
            channels: trunk.iter().map(|d| d.2).collect(),
            head_kernel,
            n_class,
            feature_dim,
            seed: 0,
        };
        config.validate()?;
        if config.layer_dims() != dims {
            return Err(Error::invalid("parameter shapes do not form a chain"));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Run the network on `input` (`[B, H, W, 3]`). Parameters enter the graph
    /// as trainable leaves when `trainable`, as constants otherwise.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, trainable: bool) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect();
        let n_layers = params.len() / 2;
        let mut h = input;
        let mut features = input;
        for l in 0..n_layers {
            h = g.conv2d(h, params[2 * l], params[2 * l + 1])?;
            if l + 2 < n_layers {
                h = g.relu(h);
            }
            if l + 2 == n_layers {
                features = h;
            }
        }
        Ok(Forward {
            params,
            features,
            logits: h,
        })
    }

    /// Per-pixel argmax labels for a batch of `[H, W, 3]` images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, x, false)?;
        let n = self.config.n_class;
        Ok(g.value(fwd.logits)
            .data()
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect())
    }

    /// Feature map `[B, H, W, feature_dim]` for a batch of images.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, x, false)?;
        Ok(g.value(fwd.features).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_shape_contract() {
        let model = Model::<f32>::build(ModelConfig {
            channels: vec![4, 4, 6],
            head_kernel: 3,
            n_class: 3,
            feature_dim: 5,
            seed: 1,
        })
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 7, 5, 3], 0.5));
        let fwd = model.forward(&mut g, x, true).unwrap();
        assert_eq!(g.shape(fwd.logits), &[2, 7, 5, 3]);
        assert_eq!(g.shape(fwd.features), &[2, 7, 5, 5]);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::default();
        let a = Model::<f32>::build(cfg.clone()).unwrap();
        let b = Model::<f32>::build(cfg.clone()).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn from_params_recovers_config() {
        let cfg = ModelConfig {
            channels: vec![4, 8],
            head_kernel: 3,
            n_class: 2,
            feature_dim: 6,
            seed: 0,
        };
        let m = Model::<f32>::build(cfg.clone()).unwrap();
        let back = Model::from_params(m.params().to_vec()).unwrap();
        assert_eq!(back.config(), &cfg);
    }

    #[test]
    fn head_kernel_is_validated() {
        let cfg = ModelConfig {
            head_kernel: 5,
            ..ModelConfig::default()
        };
        assert!(Model::<f32>::build(cfg).is_err());
    }
}
