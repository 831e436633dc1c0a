//! Central finite-difference gradient checks.
//!
//! The suite draws small random segmentation instances and compares the
//! analytic feature gradient of each loss with central differences in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::centers::{extract_centers, CenterScope, LabelMask, IGNORE_LABEL};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{
    combine, cross_entropy_loss, inter_c2c_loss, inter_c2p_loss, intra_c2p_loss, LossTerms,
    LossWeights, Replacement,
};
use crate::par;
use crate::tensor::Tensor;

/// Finite-difference step used throughout.
pub const STEP: f64 = 1e-5;
/// Acceptance bound on the elementwise relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely (scaled by it).
const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// A random segmentation instance: `[1, 1, HW, C]` features with labels.
#[derive(Clone, Debug)]
pub struct Instance {
    pub features: Vec<f64>,
    pub mask: LabelMask,
    pub n_class: usize,
    pub channels: usize,
    /// Logits for the cross-entropy term, `[HW, n_class]`.
    pub logits: Vec<f64>,
}

impl Instance {
    /// HW in `2..=12`, classes in `2..=4`, channels in `1..=5`; roughly one
    /// pixel in eight is ignored and at least two classes are present.
    pub fn random(rng: &mut impl Rng) -> Instance {
        let hw = rng.random_range(2..=12);
        let n_class = rng.random_range(2..=4);
        let channels = rng.random_range(1..=5);
        let mut labels: Vec<u8> = (0..hw)
            .map(|_| {
                if rng.random_bool(0.125) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..n_class) as u8
                }
            })
            .collect();
        labels[0] = 0;
        labels[1] = 1;
        let scale = rng.random_range(0.5..2.0);
        let features = (0..hw * channels)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logits = (0..hw * n_class)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Instance {
            mask: LabelMask::new(1, hw, labels).expect("mask size"),
            features,
            n_class,
            channels,
            logits,
        }
    }

    pub fn hw(&self) -> usize {
        self.mask.len()
    }
}

/// Which scalar the check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedLoss {
    IntraC2p,
    InterC2c,
    InterC2p(Replacement),
    CrossEntropy,
    /// Weighted sum of all four terms, unit weights.
    Total,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 6] = [
        CheckedLoss::IntraC2p,
        CheckedLoss::InterC2c,
        CheckedLoss::InterC2p(Replacement::Masked),
        CheckedLoss::InterC2p(Replacement::Literal),
        CheckedLoss::CrossEntropy,
        CheckedLoss::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckedLoss::IntraC2p => "intra_c2p",
            CheckedLoss::InterC2c => "inter_c2c",
            CheckedLoss::InterC2p(Replacement::Masked) => "inter_c2p(masked)",
            CheckedLoss::InterC2p(Replacement::Literal) => "inter_c2p(literal)",
            CheckedLoss::CrossEntropy => "cross_entropy",
            CheckedLoss::Total => "total",
        }
    }
}

/// Build `loss` over `inst` with the given features (and logits, for the
/// cross-entropy terms). Returns the graph, the feature and logit leaves and
/// the loss node.
pub fn build_loss(
    inst: &Instance,
    features: &[f64],
    logits: &[f64],
    loss: CheckedLoss,
) -> Result<(Graph<f64>, Var, Var, Var)> {
    let hw = inst.hw();
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, hw, inst.channels], features.to_vec())?);
    let z = g.param(Tensor::new(vec![hw, inst.n_class], logits.to_vec())?);
    let centers = extract_centers(
        &mut g,
        x,
        std::slice::from_ref(&inst.mask),
        inst.n_class,
        CenterScope::Batch,
        false,
    )?
    .remove(0);
    let flat = g.reshape(x, &[hw, inst.channels])?;
    let out = match loss {
        CheckedLoss::IntraC2p => intra_c2p_loss(&mut g, flat, &inst.mask, &centers)?,
        CheckedLoss::InterC2c => inter_c2c_loss(&mut g, &centers, 0.5)?,
        CheckedLoss::InterC2p(r) => inter_c2p_loss(&mut g, flat, &inst.mask, &centers, 0.25, r)?,
        CheckedLoss::CrossEntropy => cross_entropy_loss(&mut g, z, &inst.mask)?,
        CheckedLoss::Total => {
            let terms = LossTerms {
                ce: cross_entropy_loss(&mut g, z, &inst.mask)?,
                intra_c2p: intra_c2p_loss(&mut g, flat, &inst.mask, &centers)?,
                inter_c2c: inter_c2c_loss(&mut g, &centers, 0.5)?,
                inter_c2p: inter_c2p_loss(
                    &mut g,
                    flat,
                    &inst.mask,
                    &centers,
                    0.25,
                    Replacement::Masked,
                )?,
            };
            combine(&mut g, &terms, &LossWeights::default())?.0
        }
    };
    Ok((g, x, z, out))
}

/// Outcome of checking one loss over one instance.
#[derive(Clone, Copy, Debug)]
pub struct CheckResult {
    pub max_rel_error: f64,
    /// Loss value at the unperturbed point.
    pub value: f64,
}

/// Compare analytic and numeric gradients of `loss` with respect to the
/// features (and the logits, for terms that read them).
pub fn check_instance(inst: &Instance, loss: CheckedLoss) -> Result<CheckResult> {
    let (mut g, x, z, out) = build_loss(inst, &inst.features, &inst.logits, loss)?;
    let value = g.item(out);
    g.backward(out)?;
    let zeros_x = vec![0.0; inst.features.len()];
    let zeros_z = vec![0.0; inst.logits.len()];
    let gx = g.grad(x).map_or(zeros_x, <[f64]>::to_vec);
    let gz = g.grad(z).map_or(zeros_z, <[f64]>::to_vec);

    let eval = |f: &[f64], l: &[f64]| {
        let (g, _, _, out) = build_loss(inst, f, l, loss).expect("instance is valid");
        g.item(out)
    };
    let nx = central_difference(|f| eval(f, &inst.logits), &inst.features, STEP);
    let mut err = max_relative_error(&gx, &nx);
    if matches!(loss, CheckedLoss::CrossEntropy | CheckedLoss::Total) {
        let nz = central_difference(|l| eval(&inst.features, l), &inst.logits, STEP);
        err = err.max(max_relative_error(&gz, &nz));
    }
    Ok(CheckResult {
        max_rel_error: err,
        value,
    })
}

/// Summary of one loss across all instances of a suite run.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub loss: CheckedLoss,
    pub instances: usize,
    /// Instances where the loss was non-zero at the evaluation point.
    pub active: usize,
    pub max_rel_error: f64,
}

impl LossReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Run every [`CheckedLoss`] over `instances` random instances derived from
/// `seed`. Instances are independent and fan out over the thread pool.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<LossReport>> {
    let insts: Vec<Instance> = (0..instances)
        .map(|i| Instance::random(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) + i as u64)))
        .collect();
    CheckedLoss::ALL
        .iter()
        .map(|&loss| {
            let results = par::map_range(insts.len(), |i| check_instance(&insts[i], loss));
            let mut report = LossReport {
                loss,
                instances: insts.len(),
                active: 0,
                max_rel_error: 0.0,
            };
            for r in results {
                let r = r?;
                report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
                if r.value > 0.0 {
                    report.active += 1;
                }
            }
            Ok(report)
        })
        .collect()
}
