//! Deterministic SGD training of the toy segmenter with optional CAR losses.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::centers::{
    extract_centers, update_moving_centers, CenterScope, CenterValues, ClassCenters, LabelMask,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    combine, cross_entropy_loss, inter_c2c_loss, inter_c2p_loss, intra_c2p_loss, CarThresholds,
    LossBundle, LossTerms, LossWeights, Replacement,
};
use crate::metrics::ConfusionMatrix;
use crate::model::Model;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Where class centers come from during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CenterMode {
    Image,
    Batch,
    /// Exponential moving average of batch centers; `decay` weighs the old value.
    Moving { decay: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub thresholds: CarThresholds,
    pub weights: LossWeights,
    pub centers: CenterMode,
    pub detach_centers: bool,
    pub replacement: Replacement,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 8,
            base_lr: 0.01,
            poly_power: 0.9,
            weight_decay: 0.001,
            momentum: 0.9,
            thresholds: CarThresholds::default(),
            weights: LossWeights::default(),
            centers: CenterMode::Batch,
            detach_centers: false,
            replacement: Replacement::Masked,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations and batch_size must be at least 1"));
        }
        let rates = [self.base_lr, self.poly_power, self.weight_decay, self.momentum];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::invalid("rates must be non-negative"));
        }
        if let CenterMode::Moving { decay } = self.centers {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::invalid(format!("moving-average decay {decay} outside [0, 1)")));
            }
        }
        self.thresholds.validate()?;
        self.weights.validate()
    }
}

/// `base · (1 − step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("poly schedule needs total > 0"));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond total {total}")));
    }
    Ok(base * (1.0 - step as f64 / total as f64).powf(power))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBundle,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,lr,ce,intra,inter_c2c,inter_c2p,total";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.lr, l.ce, l.intra_c2p, l.inter_c2c, l.inter_c2p, l.total
            )
            .expect("write to String");
        }
        out
    }
}

/// Stack sample images into a `[B, H, W, 3]` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (h, w) = (first.image.height, first.image.width);
    if samples.iter().any(|s| s.image.height != h || s.image.width != w) {
        return Err(Error::invalid("all images in a batch must share a size"));
    }
    let data = samples.iter().flat_map(|s| s.pixels_f32()).collect();
    Tensor::new(vec![samples.len(), h, w, 3], data)
}

/// Model plus optimizer state for one run.
pub struct Trainer {
    pub model: Model<f32>,
    config: TrainConfig,
    velocity: Vec<Vec<f32>>,
    moving: Option<CenterValues<f32>>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        // data order depends only on the seed, never on the model or losses
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
        Ok(Trainer {
            model,
            config,
            velocity,
            moving: None,
            order: Vec::new(),
            cursor: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Run all iterations over `data`.
    pub fn run(&mut self, data: &[Sample]) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut log = TrainLog::default();
        for step in 0..self.config.iterations {
            let idx = self.next_batch(data.len());
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            log.rows.push(self.step(step, &batch)?);
        }
        Ok(log)
    }

    /// One SGD step on `batch`.
    pub fn step(&mut self, step: usize, batch: &[&Sample]) -> Result<LogRow> {
        let cfg = self.config.clone();
        let lr = poly_lr(step, cfg.iterations, cfg.base_lr, cfg.poly_power)?;
        let masks: Vec<LabelMask> = batch.iter().map(|s| s.mask.clone()).collect();
        if masks.iter().all(|m| m.supervised_count() == 0) {
            warn!("step {step}: batch has no supervised pixels, update skipped");
            return Ok(LogRow {
                step,
                lr,
                losses: LossBundle::from_values([0.0; 4], cfg.weights)?,
            });
        }
        let n_class = self.model.config().n_class;
        let mut g = Graph::<f32>::new();
        let x = g.constant(batch_images(batch)?);
        let fwd = self.model.forward(&mut g, x, true)?;
        let refs: Vec<&LabelMask> = masks.iter().collect();
        let stacked = LabelMask::stack(&refs)?;
        let logits = g.reshape(fwd.logits, &[stacked.len(), n_class])?;
        let ce = cross_entropy_loss(&mut g, logits, &stacked)?;
        let terms = if cfg.weights.uses_car() {
            let (intra_c2p, inter_c2c, inter_c2p) =
                self.car_terms(&mut g, fwd.features, &masks, &stacked)?;
            LossTerms {
                ce,
                intra_c2p,
                inter_c2c,
                inter_c2p,
            }
        } else {
            let z = g.constant(Tensor::scalar(0.0));
            LossTerms {
                ce,
                intra_c2p: z,
                inter_c2c: z,
                inter_c2p: z,
            }
        };
        let (total, losses) = combine(&mut g, &terms, &cfg.weights)?;
        if !losses.total.is_finite() {
            let (node, op) = g.first_non_finite().unwrap_or((total.index(), "total"));
            return Err(Error::NonFinite { node, op });
        }
        g.backward(total)?;
        self.apply_update(&g, &fwd.params, lr)?;
        Ok(LogRow { step, lr, losses })
    }

    fn car_terms(
        &mut self,
        g: &mut Graph<f32>,
        features: Var,
        masks: &[LabelMask],
        stacked: &LabelMask,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.config;
        let n_class = self.model.config().n_class;
        let c = self.model.config().feature_dim;
        let (eps0, eps1) = (cfg.thresholds.eps0, cfg.thresholds.eps1);
        let flat = g.reshape(features, &[stacked.len(), c])?;
        let batch_terms = |g: &mut Graph<f32>, centers: &ClassCenters| -> Result<(Var, Var, Var)> {
            Ok((
                intra_c2p_loss(g, flat, stacked, centers)?,
                inter_c2c_loss(g, centers, eps0)?,
                inter_c2p_loss(g, flat, stacked, centers, eps1, cfg.replacement)?,
            ))
        };
        match cfg.centers {
            CenterMode::Batch => {
                let centers = extract_centers(
                    g,
                    features,
                    masks,
                    n_class,
                    CenterScope::Batch,
                    cfg.detach_centers,
                )?;
                batch_terms(g, &centers[0])
            }
            CenterMode::Moving { decay } => {
                let fresh = extract_centers(g, features, masks, n_class, CenterScope::Batch, true)?;
                let fresh = fresh[0].values(g);
                let state = self
                    .moving
                    .take()
                    .unwrap_or_else(|| CenterValues::empty(n_class, c));
                let state = update_moving_centers(&state, &fresh, decay)?;
                let centers = state.to_graph(g);
                self.moving = Some(state);
                batch_terms(g, &centers)
            }
            CenterMode::Image => {
                let per_image = extract_centers(
                    g,
                    features,
                    masks,
                    n_class,
                    CenterScope::Image,
                    cfg.detach_centers,
                )?;
                let hw = masks[0].len();
                let mut sums: Option<(Var, Var, Var)> = None;
                let mut used = 0;
                for (i, (m, centers)) in masks.iter().zip(&per_image).enumerate() {
                    if m.supervised_count() == 0 {
                        continue;
                    }
                    used += 1;
                    let rows = g.slice_rows(flat, i * hw, (i + 1) * hw)?;
                    let t = (
                        intra_c2p_loss(g, rows, m, centers)?,
                        inter_c2c_loss(g, centers, eps0)?,
                        inter_c2p_loss(g, rows, m, centers, eps1, cfg.replacement)?,
                    );
                    sums = Some(match sums {
                        None => t,
                        Some(s) => (g.add(s.0, t.0)?, g.add(s.1, t.1)?, g.add(s.2, t.2)?),
                    });
                }
                let s = sums.ok_or(Error::NoSupervisedPixels)?;
                let inv = 1.0 / used as f32;
                Ok((g.scale(s.0, inv), g.scale(s.1, inv), g.scale(s.2, inv)))
            }
        }
    }

    /// Momentum SGD with L2 weight decay:
    /// `v ← m·v + (∇ + wd·w)`, `w ← w − lr·v`.
    fn apply_update(&mut self, g: &Graph<f32>, params: &[Var], lr: f64) -> Result<()> {
        let lr = lr as f32;
        let wd = self.config.weight_decay as f32;
        let mom = self.config.momentum as f32;
        for ((p, &var), vel) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(params)
            .zip(&mut self.velocity)
        {
            let zero;
            let grad = match g.grad(var) {
                Some(gr) => gr,
                None => {
                    zero = vec![0.0; p.len()];
                    &zero
                }
            };
            for ((w, v), &gr) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mom * *v + (gr + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Train a fresh copy of `model` on `data`.
pub fn train(model: Model<f32>, data: &[Sample], config: &TrainConfig) -> Result<(Model<f32>, TrainLog)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let log = trainer.run(data)?;
    Ok((trainer.model, log))
}

/// Per-class IoU and mIoU of `model` on `samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Evaluation batch size; predictions do not depend on it.
const EVAL_BATCH: usize = 16;

pub fn evaluate_miou(model: &Model<f32>, samples: &[Sample]) -> Result<MiouReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut cm = ConfusionMatrix::new(model.config().n_class);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = model.predict(&batch_images(&refs)?)?;
        let hw = chunk[0].mask.len();
        for (s, p) in chunk.iter().zip(pred.chunks(hw)) {
            cm.add(p, &s.mask)?;
        }
    }
    Ok(MiouReport {
        per_class: cm.iou(),
        miou: cm.miou(),
        pixel_accuracy: cm.pixel_accuracy(),
        confusion: cm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.01, 0.9).unwrap();
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(0, 0, 0.01, 0.9).is_err());
        assert!(poly_lr(101, 100, 0.01, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            centers: CenterMode::Moving { decay: 1.0 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
