//! Adam training over random image pairs, validation curves and per-pair
//! refinement.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{loss_total, LossReport, LossWeights, Reduction};
use crate::network::{fcn_bidirectional, FcnConfig, FcnParams};
use crate::volume::Volume;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub learning_rate: f64,
    pub iterations: usize,
    pub validation_fraction: f64,
    /// Validation runs every this many iterations and after the last one.
    pub validation_interval: usize,
    pub seed: u64,
    pub fcn: FcnConfig,
    pub refine_learning_rate: f64,
    pub refine_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            reduction: Reduction::Sum,
            learning_rate: 5e-4,
            iterations: 2000,
            validation_fraction: 0.1,
            validation_interval: 50,
            seed: 0,
            fcn: FcnConfig::default(),
            refine_learning_rate: 1e-5,
            refine_iterations: 100,
        }
    }
}

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.fcn.validate()?;
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("refine_learning_rate", self.refine_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::Config("validation_interval must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.weights.alpha = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "gamma" => self.weights.gamma = parse(key, value)?,
            "reduction" => {
                self.reduction = match value.trim() {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    other => return Err(Error::Config(format!("reduction must be sum or mean, got {other:?}"))),
                }
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "validation_interval" => self.validation_interval = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n" => self.fcn.n = parse(key, value)?,
            "depth" => self.fcn.depth = parse(key, value)?,
            "tau" => self.fcn.tau = parse(key, value)?,
            "refine_learning_rate" => self.refine_learning_rate = parse(key, value)?,
            "refine_iterations" => self.refine_iterations = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, accepted back by [`TrainConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.weights.alpha.to_string()),
            ("beta", self.weights.beta.to_string()),
            ("gamma", self.weights.gamma.to_string()),
            (
                "reduction",
                match self.reduction {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .to_string(),
            ),
            ("learning_rate", self.learning_rate.to_string()),
            ("iterations", self.iterations.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("validation_interval", self.validation_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("n", self.fcn.n.to_string()),
            ("depth", self.fcn.depth.to_string()),
            ("tau", self.fcn.tau.to_string()),
            ("refine_learning_rate", self.refine_learning_rate.to_string()),
            ("refine_iterations", self.refine_iterations.to_string()),
        ]
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &FcnParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut FcnParams, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    let lens: Vec<usize> = params.tensors().map(Tensor::len).collect();
    let aligned = grads.len() == lens.len()
        && state.m.len() == lens.len()
        && lens.iter().zip(grads).zip(&state.m).all(|((&n, g), m)| g.len() == n && m.len() == n);
    if !aligned {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: lens,
            rhs: grads.iter().map(Vec::len).collect(),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Loss report and parameter gradients for one pair.
pub fn loss_and_gradients(
    params: &FcnParams,
    a: &Volume,
    b: &Volume,
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let va = tape.constant(Tensor::from_volume(a));
    let vb = tape.constant(Tensor::from_volume(b));
    let (fab, fba) = fcn_bidirectional(&mut tape, &bound, va, vb)?;
    let (terms, report) = loss_total(&mut tape, va, vb, fab, fba, weights, reduction)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", report.total)));
    }
    let grads = tape.backward(terms.total)?;
    Ok((report, bound.gradients(&grads, params)))
}

/// Loss report for one pair without gradients.
pub fn evaluate_pair(
    params: &FcnParams,
    a: &Volume,
    b: &Volume,
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let va = tape.constant(Tensor::from_volume(a));
    let vb = tape.constant(Tensor::from_volume(b));
    let (fab, fba) = fcn_bidirectional(&mut tape, &bound, va, vb)?;
    loss_total(&mut tape, va, vb, fab, fba, weights, reduction).map(|(_, r)| r)
}

/// Volume indices used for training and for validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl DatasetSplit {
    /// Seeded shuffle, then the last `round(fraction * count)` volumes are
    /// held out. At least two volumes always stay in training, and a single
    /// held-out volume is returned to training since it forms no pair.
    pub fn new(count: usize, fraction: f64, seed: u64) -> Result<Self> {
        if count < 2 {
            return Err(Error::Dataset(format!("need at least 2 volumes, got {count}")));
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = libm::round(fraction * count as f64) as usize;
        held = held.min(count - 2);
        if held == 1 {
            held = 0;
        }
        let validation = order.split_off(count - held);
        Ok(Self { train: order, validation })
    }

    /// Every unordered pair of validation volumes.
    pub fn validation_pairs(&self) -> Vec<(usize, usize)> {
        unordered_pairs(&self.validation)
    }
}

/// All `(i, j)` with `i` before `j` in `indices`.
pub fn unordered_pairs(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        for &j in &indices[k + 1..] {
            pairs.push((i, j));
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// One loss-curve entry. Training rows hold the loss of the sampled pair
/// before the update of that iteration; validation rows the mean over the
/// validation pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub split: Split,
    pub report: LossReport,
}

pub const CURVE_HEADER: &str = "iteration,split,sim,smo,inv,ant,total,folding_count";

/// Loss curve as CSV text with a header line.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let p = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.split.as_str(),
            p.sim,
            p.smo,
            p.inv,
            p.ant,
            p.total,
            p.folding_count
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FcnParams,
    pub curve: Vec<CurveRow>,
    pub split: DatasetSplit,
}

fn check_dataset(dataset: &[Volume]) -> Result<()> {
    if dataset.len() < 2 {
        return Err(Error::Dataset(format!("need at least 2 volumes, got {}", dataset.len())));
    }
    let first = dataset[0].shape();
    for (i, v) in dataset.iter().enumerate() {
        if v.shape() != first || v.channels() != 1 {
            return Err(Error::Dataset(format!(
                "volume {i} is {:?} x{} but volume 0 is {:?} x1",
                v.shape().extents(),
                v.channels(),
                first.extents()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh network on unordered pairs drawn from `dataset`.
pub fn train(dataset: &[Volume], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, config, |_| {})
}

/// [`train`] with a callback invoked for every curve row as it is produced.
pub fn train_with_progress(
    dataset: &[Volume],
    config: &TrainConfig,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset)?;
    config.fcn.check_input(dataset[0].shape())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let split = DatasetSplit::new(dataset.len(), config.validation_fraction, rng.gen())?;
    let mut params = FcnParams::init(config.fcn, rng.gen())?;
    let mut state = AdamState::new(&params);
    let val_pairs = split.validation_pairs();
    let mut curve = Vec::new();
    let mut push = |row: CurveRow, curve: &mut Vec<CurveRow>| {
        progress(&row);
        curve.push(row);
    };

    let validate = |params: &FcnParams| -> Result<LossReport> {
        let reports = val_pairs
            .iter()
            .map(|&(i, j)| evaluate_pair(params, &dataset[i], &dataset[j], &config.weights, config.reduction))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossReport::mean(&reports))
    };

    for it in 0..config.iterations {
        if !val_pairs.is_empty() && it % config.validation_interval == 0 {
            let report = validate(&params)?;
            push(
                CurveRow {
                    iteration: it,
                    split: Split::Validation,
                    report,
                },
                &mut curve,
            );
        }
        let n = split.train.len();
        let first = rng.gen_range(0..n);
        let mut second = rng.gen_range(0..n - 1);
        if second >= first {
            second += 1;
        }
        let (x, y) = (split.train[first], split.train[second]);
        let (i, j) = (x.min(y), x.max(y));
        let (report, grads) = loss_and_gradients(&params, &dataset[i], &dataset[j], &config.weights, config.reduction)?;
        push(
            CurveRow {
                iteration: it,
                split: Split::Train,
                report,
            },
            &mut curve,
        );
        adam_step(&mut params, &grads, &mut state, config.learning_rate)?;
    }
    if !val_pairs.is_empty() {
        let report = validate(&params)?;
        push(
            CurveRow {
                iteration: config.iterations,
                split: Split::Validation,
                report,
            },
            &mut curve,
        );
    }
    params.validate().map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(TrainOutcome { params, curve, split })
}

/// Fine-tunes a copy of `params` on one pair with a fresh optimizer state.
pub fn refine(params: &FcnParams, config: &TrainConfig, a: &Volume, b: &Volume) -> Result<FcnParams> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "refine",
            lhs: a.shape().extents().to_vec(),
            rhs: b.shape().extents().to_vec(),
        });
    }
    let mut tuned = params.clone();
    let mut state = AdamState::new(&tuned);
    for _ in 0..config.refine_iterations {
        let (_, grads) = loss_and_gradients(&tuned, a, b, &config.weights, config.reduction)?;
        adam_step(&mut tuned, &grads, &mut state, config.refine_learning_rate)?;
    }
    Ok(tuned)
}

/// `10^lo, 10^(lo+1), ..., 10^hi`.
pub fn decade_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| libm::pow(10.0, e as f64)).collect()
}

/// Outcome of one `(alpha, beta)` grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    /// Final validation report of the run.
    pub validation: LossReport,
}

/// Trains once per `(alpha, beta)` combination and reports final validation
/// losses. `gamma` and everything else come from `base`.
pub fn grid_search(dataset: &[Volume], base: &TrainConfig, alphas: &[f64], betas: &[f64]) -> Result<Vec<GridPoint>> {
    let mut points = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let mut config = base.clone();
            config.weights.alpha = alpha;
            config.weights.beta = beta;
            let outcome = train(dataset, &config)?;
            let validation = outcome
                .curve
                .iter()
                .rev()
                .find(|r| r.split == Split::Validation)
                .map(|r| r.report)
                .ok_or_else(|| Error::Dataset("grid search needs a validation split of at least 2 volumes".into()))?;
            points.push(GridPoint { alpha, beta, validation });
        }
    }
    Ok(points)
}

/// Fold-free point with the lowest validation similarity; first wins ties.
pub fn select_grid_point(points: &[GridPoint]) -> Option<GridPoint> {
    points
        .iter()
        .filter(|p| p.validation.folding_count == 0)
        .fold(None, |best: Option<&GridPoint>, p| match best {
            Some(b) if b.validation.sim <= p.validation.sim => Some(b),
            _ => Some(p),
        })
        .copied()
}
