//! Baseline-versus-CAR experiments on the synthetic dataset.

use std::fmt::Write as _;

use crate::analysis::compute_dependency_map;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::Model;
use crate::par;
use crate::synth::{generate, Sample, Split};
use crate::train::{evaluate_miou, train, TrainLog};

/// The three splits of one synthetic dataset.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub test_common: Vec<Sample>,
    pub test_rare: Vec<Sample>,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.scene();
        Ok(Datasets {
            train: generate(&spec, cfg.train_count, Split::Train)?,
            test_common: generate(&spec, cfg.test_count, Split::TestCommon)?,
            test_rare: generate(&spec, cfg.test_count, Split::TestRare)?,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::TestCommon => &self.test_common,
            Split::TestRare => &self.test_rare,
        }
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub miou_common: f64,
    pub miou_rare: f64,
    /// Mean off-diagonal cosine dependency on `test_common`.
    pub dependency: f64,
}

pub fn run(cfg: &ExperimentConfig, data: &Datasets) -> Result<RunSummary> {
    cfg.validate()?;
    let model = Model::build(cfg.model.clone())?;
    let (model, log) = train(model, &data.train, &cfg.train)?;
    let miou_common = evaluate_miou(&model, &data.test_common)?.miou;
    let miou_rare = evaluate_miou(&model, &data.test_rare)?.miou;
    let dependency = compute_dependency_map(&model, &data.test_common, true)?.mean_off_diagonal();
    Ok(RunSummary {
        model,
        log,
        miou_common,
        miou_rare,
        dependency,
    })
}

/// `cfg` with CAR switched off (cross-entropy weight kept).
pub fn baseline_of(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut b = cfg.clone();
    b.train.weights = LossWeights {
        ce: cfg.train.weights.ce,
        ..LossWeights::baseline()
    };
    b
}

/// Baseline and +CAR run for one seed; both share initialization and data order.
#[derive(Clone, Debug)]
pub struct SeedComparison {
    pub seed: u64,
    pub baseline: RunSummary,
    pub car: RunSummary,
}

/// Train baseline and +CAR for every seed. The dataset is shared; the seed
/// controls initialization and batch order. Seeds run in parallel.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<SeedComparison>> {
    let data = Datasets::generate(cfg)?;
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let results = par::map_range(jobs.len(), |i| {
        let (seed, car) = jobs[i];
        let mut c = if car { cfg.clone() } else { baseline_of(cfg) };
        c.set("seed", &seed.to_string())?;
        run(&c, &data)
    });
    let mut results = results.into_iter();
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let baseline = results.next().expect("one result per job")?;
        let car = results.next().expect("one result per job")?;
        out.push(SeedComparison { seed, baseline, car });
    }
    Ok(out)
}

/// One CSV row per seed.
pub fn comparison_csv(rows: &[SeedComparison]) -> String {
    let mut out = String::from(
        "seed,baseline_rare,car_rare,delta_rare,baseline_common,car_common,delta_common,baseline_dep,car_dep\n",
    );
    for r in rows {
        let (b, c) = (&r.baseline, &r.car);
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:+.6},{:.6},{:.6},{:+.6},{:.6},{:.6}",
            r.seed,
            b.miou_rare,
            c.miou_rare,
            c.miou_rare - b.miou_rare,
            b.miou_common,
            c.miou_common,
            c.miou_common - b.miou_common,
            b.dependency,
            c.dependency
        );
    }
    out
}

/// Methods as rows, seeds as columns, +CAR cells carrying the delta, mIOU in
/// percent.
pub fn comparison_table(rows: &[SeedComparison], rare: bool) -> String {
    let pick = |s: &RunSummary| 100.0 * if rare { s.miou_rare } else { s.miou_common };
    let split = if rare { "test_rare" } else { "test_common" };
    let mut head = format!("{:<12}", "method");
    let mut base = format!("{:<12}", "baseline");
    let mut car = format!("{:<12}", "+CAR");
    for r in rows {
        let _ = write!(head, " | {:>15}", format!("seed {}", r.seed));
        let _ = write!(base, " | {:>15.2}", pick(&r.baseline));
        let (b, c) = (pick(&r.baseline), pick(&r.car));
        let _ = write!(car, " | {:>15}", format!("{c:.2}({:+.2})", c - b));
    }
    format!("mIOU (%) on {split}\n{head}\n{base}\n{car}\n")
}
