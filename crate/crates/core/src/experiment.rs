//! Desk-scale experiments on synthetic data: the pseudo-pair domain gap and
//! the decoder ablation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::infer::infer_volume;
use crate::metrics::{evaluate_case, CaseRow, Comparison, MetricReport};
use crate::model::{TvsrnConfig, TvsrnParams, Variant};
use crate::params::ParamStore;
use crate::synth::{gen_case, Acquisition, Case, PhantomSpec};
use crate::train::{TrainConfig, Trainer};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Simulated acquired thick series paired with thin targets.
    RealPair,
    /// Decimated thin volumes paired with thin targets.
    PseudoPair,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::RealPair => "real_pair",
            TrainMode::PseudoPair => "pseudo_pair",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub acquisition: Acquisition,
    pub model: TvsrnConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// In-plane inference tile.
    pub tile: (usize, usize),
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec { dims: (21, 32, 32), ..PhantomSpec::default() },
            acquisition: Acquisition::default(),
            model: TvsrnConfig { channels: 4, n_enc: 2, ..TvsrnConfig::default() },
            train: TrainConfig { lr: 1e-3, steps: 300, cube: (4, 16, 16), ..TrainConfig::default() },
            n_train: 8,
            n_test: 20,
            tile: (32, 32),
        }
    }
}

/// A synthetic case with both thick series normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCase {
    pub id: usize,
    pub thin: Volume,
    pub real_thick: Volume,
    pub pseudo_thick: Volume,
}

impl NormalizedCase {
    pub fn from_case(c: &Case) -> Result<Self> {
        Ok(Self {
            id: c.id,
            thin: c.thin.normalize_hu()?,
            real_thick: c.real_thick.normalize_hu()?,
            pseudo_thick: c.pseudo_thick.normalize_hu()?,
        })
    }

    pub fn pair(&self, mode: TrainMode) -> (Volume, Volume) {
        let thick = match mode {
            TrainMode::RealPair => self.real_thick.clone(),
            TrainMode::PseudoPair => self.pseudo_thick.clone(),
        };
        (thick, self.thin.clone())
    }
}

/// Cases `first .. first + n` of the synthetic stream.
pub fn make_cases(cfg: &ExperimentConfig, first: usize, n: usize) -> Result<Vec<NormalizedCase>> {
    (first..first + n)
        .map(|id| NormalizedCase::from_case(&gen_case(&cfg.phantom, cfg.model.scale, cfg.acquisition, id)?))
        .collect()
}

pub fn train_model(
    model: &TvsrnConfig,
    train: &TrainConfig,
    pairs: &[(Volume, Volume)],
) -> Result<(TvsrnParams, ParamStore<f32>)> {
    let (params, store) = TvsrnParams::init(model, train.seed)?;
    let mut t = Trainer::new(params, store, train.clone())?;
    t.train(pairs, |_, _| {}, |_| Ok(()))?;
    Ok((t.params, t.store))
}

/// Predicts every case from `input` and scores it against the thin volume.
pub fn evaluate<F>(
    method: &str,
    store: &ParamStore<f32>,
    params: &TvsrnParams,
    cases: &[NormalizedCase],
    tile: (usize, usize),
    input: F,
) -> Result<MetricReport>
where
    F: Fn(&NormalizedCase) -> &Volume,
{
    let rows: Result<Vec<CaseRow>> = cases
        .iter()
        .map(|c| {
            let pred = infer_volume(input(c), store, params, tile)?;
            evaluate_case(format!("{}", c.id), &pred, &c.thin)
        })
        .collect();
    Ok(MetricReport::new(method, rows?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainGapResult {
    pub first: MetricReport,
    pub second: MetricReport,
    /// First arm against second; the alternative is that the first scores
    /// higher.
    pub comparison: Comparison,
}

/// Trains one model per arm and scores both on the simulated acquired thick
/// series of the test cases. The second arm uses the run seed plus one so
/// that two arms of the same mode are distinct runs.
pub fn domain_gap_experiment(cfg: &ExperimentConfig, arms: (TrainMode, TrainMode)) -> Result<DomainGapResult> {
    let train_cases = make_cases(cfg, 0, cfg.n_train)?;
    let test_cases = make_cases(cfg, cfg.n_train, cfg.n_test)?;
    let mut reports = Vec::new();
    for (k, mode) in [arms.0, arms.1].into_iter().enumerate() {
        let pairs: Vec<_> = train_cases.iter().map(|c| c.pair(mode)).collect();
        let train = TrainConfig { seed: cfg.train.seed + k as u64, ..cfg.train.clone() };
        let (params, store) = train_model(&cfg.model, &train, &pairs)?;
        let name = if arms.0 == arms.1 { format!("{}#{k}", mode.name()) } else { String::from(mode.name()) };
        reports.push(evaluate(&name, &store, &params, &test_cases, cfg.tile, |c| &c.real_thick)?);
    }
    let second = reports.pop().unwrap();
    let mut first = reports.pop().unwrap();
    let comparison = first.compare(&second)?;
    first.comparisons.push(comparison.clone());
    Ok(DomainGapResult { first, second, comparison })
}

/// Model configuration of an ablation variant at desk scale: the full and
/// no-TAB variants share `base`, the encoder-only variant keeps its own
/// widened encoder.
pub fn ablation_config(base: &TvsrnConfig, variant: Variant) -> TvsrnConfig {
    match variant {
        Variant::EncoderOnly => TvsrnConfig {
            scale: base.scale,
            depth: base.depth,
            window_xy: base.window_xy,
            window_z: base.window_z,
            ..TvsrnConfig::for_variant(Variant::EncoderOnly)
        },
        v => TvsrnConfig { variant: v, ..base.clone() },
    }
}

/// Trains each variant with the same data, seed and step budget, and reports
/// validation scores on the real-mode inputs.
pub fn ablation_experiment(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    n_val: usize,
) -> Result<Vec<(Variant, MetricReport)>> {
    let train_cases = make_cases(cfg, 0, cfg.n_train)?;
    let val_cases = make_cases(cfg, cfg.n_train, n_val)?;
    let pairs: Vec<_> = train_cases.iter().map(|c| c.pair(TrainMode::RealPair)).collect();
    variants
        .iter()
        .map(|&v| {
            let model = ablation_config(&cfg.model, v);
            let (params, store) = train_model(&model, &cfg.train, &pairs)?;
            let report = evaluate(v.name(), &store, &params, &val_cases, cfg.tile, |c| &c.real_thick)?;
            Ok((v, report))
        })
        .collect()
}
