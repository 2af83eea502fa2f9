//! Stochastic maximum-likelihood training of the CRF and its unary network.
//!
//! Each step draws one training sample, produces a negative sample with a
//! short Gibbs run (contrastive divergence from the ground truth, or one sweep
//! of a persistent chain), and descends the negative log-likelihood along
//! `dE(y_data)/dtheta - dE(y_neg)/dtheta`. Table gradients are indicator
//! counts; the unary part is back-propagated through the network.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::eval::AccuracyTally;
use crate::model::{GradientBundle, GridCrfModel, GridGeometry, Labeling, UnaryField};
use crate::net::{backward_trace, forward_trace, logits_to_unaries, momentum_update, site_table_to_map, FeatureMap, ParameterSet, UnaryNet};
use crate::rng::derive_seed;
use crate::sampler::{gibbs_sweep, infer_max_marginals, ChainState, InferenceSettings, ScheduleKind, SweepSchedule};

const INDEX_STREAM_TAG: u64 = 0xD1;
const CD_SEED_TAG: u64 = 0xCD;
const PCD_SEED_TAG: u64 = 0xBCD;
const EVAL_SEED_TAG: u64 = 0xE7A1;

/// How the negative sample is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingVariant {
    /// `K` sweeps started from the ground-truth labeling.
    ContrastiveDivergence(usize),
    /// One sweep of a chain kept per training sample across iterations.
    Persistent,
}

impl fmt::Display for SamplingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingVariant::ContrastiveDivergence(k) => write!(f, "cd{k}"),
            SamplingVariant::Persistent => write!(f, "pcd"),
        }
    }
}

impl FromStr for SamplingVariant {
    type Err = CrfError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "pcd" {
            return Ok(SamplingVariant::Persistent);
        }
        let k = lower
            .strip_prefix("cd")
            .and_then(|k| k.strip_prefix('-').unwrap_or(k).parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .ok_or_else(|| CrfError::Config(format!("unknown sampling variant {s:?} (expected cdK or pcd)")))?;
        Ok(SamplingVariant::ContrastiveDivergence(k))
    }
}

/// Normalization applied to every gradient before the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientScale {
    /// Raw indicator sums over the whole image.
    Sum,
    /// Divided by the number of sites.
    #[default]
    PerSite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub variant: SamplingVariant,
    /// Initial step size for network parameters.
    pub base_rate: f64,
    /// Initial step size for pairwise tables.
    pub table_rate: f64,
    /// Step sizes follow `rate / (1 + i / decay)`.
    pub decay: f64,
    pub momentum: f64,
    pub table_momentum: f64,
    pub max_iterations: usize,
    /// Separate learning: only the pairwise tables are updated.
    pub freeze_unaries: bool,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub gradient_scale: GradientScale,
    /// Evaluate training accuracy every this many steps (0 = never).
    pub eval_interval: usize,
    /// Number of training samples used by each evaluation.
    pub eval_samples: usize,
    pub inference: InferenceSettings,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            variant: SamplingVariant::Persistent,
            base_rate: 0.01,
            table_rate: 0.01,
            decay: 10_000.0,
            momentum: 0.99,
            table_momentum: 0.0,
            max_iterations: 1000,
            freeze_unaries: false,
            seed: 0,
            schedule: ScheduleKind::RasterSequential,
            gradient_scale: GradientScale::PerSite,
            eval_interval: 0,
            eval_samples: 10,
            inference: InferenceSettings::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CrfError::Config(m.to_string()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.base_rate) || !positive(self.table_rate) {
            return bad("step sizes must be positive");
        }
        if !positive(self.decay) {
            return bad("decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.table_momentum) {
            return bad("momentum coefficients must lie in [0, 1)");
        }
        if let SamplingVariant::ContrastiveDivergence(0) = self.variant {
            return bad("contrastive divergence needs at least one sweep");
        }
        Ok(())
    }

    /// Network step size at iteration `i` (0-based).
    pub fn step_size(&self, i: usize) -> f64 {
        self.base_rate / (1.0 + i as f64 / self.decay)
    }

    pub fn table_step_size(&self, i: usize) -> f64 {
        self.table_rate / (1.0 + i as f64 / self.decay)
    }
}

/// Uniform index into a training set of size `d`.
pub fn draw_training_index(d: usize, rng: &mut impl Rng) -> Result<usize> {
    if d == 0 {
        return Err(CrfError::contract("training set is empty"));
    }
    Ok(rng.random_range(0..d))
}

/// One chain per training sample and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentChains {
    chains: Vec<ChainState>,
}

impl PersistentChains {
    /// Chains start at the ground-truth labelings.
    pub fn from_ground_truth(labels: &[Labeling], seed: u64) -> Self {
        let base = derive_seed(seed, PCD_SEED_TAG);
        let chains = labels
            .iter()
            .enumerate()
            .map(|(d, y)| ChainState::new(y.clone(), derive_seed(base, d as u64)))
            .collect();
        PersistentChains { chains }
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn chain(&self, d: usize) -> &ChainState {
        &self.chains[d]
    }

    pub fn labelings(&self) -> impl Iterator<Item = &Labeling> {
        self.chains.iter().map(|c| c.labeling())
    }

    /// Total label entries held across all chains.
    pub fn stored_label_entries(&self) -> usize {
        self.chains.iter().map(|c| c.labeling().len()).sum()
    }
}

/// Draws the negative sample for training sample `d`.
///
/// `cd_seed` keys the fresh chain used by contrastive divergence; persistent
/// chains carry their own seeds.
#[allow(clippy::too_many_arguments)]
pub fn negative_sample(
    variant: SamplingVariant,
    model: &GridCrfModel,
    unaries: &UnaryField,
    y_data: &Labeling,
    chains: Option<&mut PersistentChains>,
    d: usize,
    schedule: &SweepSchedule,
    cd_seed: u64,
) -> Result<Labeling> {
    match variant {
        SamplingVariant::ContrastiveDivergence(k) => {
            let mut chain = ChainState::new(y_data.clone(), cd_seed);
            for _ in 0..k {
                gibbs_sweep(&mut chain, model, unaries, schedule)?;
            }
            Ok(chain.into_labeling())
        }
        SamplingVariant::Persistent => {
            let chains = chains.ok_or_else(|| CrfError::contract("persistent chains used before initialization"))?;
            let chain = chains
                .chains
                .get_mut(d)
                .ok_or_else(|| CrfError::contract(format!("no persistent chain for sample {d}")))?;
            gibbs_sweep(chain, model, unaries, schedule)?;
            Ok(chain.labeling().clone())
        }
    }
}

/// Heavy-ball buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffers {
    pub tables: Vec<Vec<f64>>,
    pub net: Option<ParameterSet>,
}

/// Where unary potentials come from during training.
pub enum UnarySource<'a> {
    /// Precomputed unaries, one field per training sample.
    Fixed(&'a [UnaryField]),
    /// A network evaluated on one input per training sample.
    Network {
        net: &'a mut UnaryNet,
        inputs: &'a [FeatureMap],
    },
}

impl UnarySource<'_> {
    fn len(&self) -> usize {
        match self {
            UnarySource::Fixed(u) => u.len(),
            UnarySource::Network { inputs, .. } => inputs.len(),
        }
    }

    pub fn unaries(&self, d: usize) -> Result<UnaryField> {
        match self {
            UnarySource::Fixed(u) => Ok(u[d].clone()),
            UnarySource::Network { net, inputs } => net.unaries(&inputs[d]),
        }
    }
}

/// Per-step record for the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub rate: f64,
    pub table_rate: f64,
    pub sample: usize,
    /// Fraction of sites where the negative sample differs from the data.
    pub disagreement: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

/// Optimizer buffers, step position and persistent chains.
pub struct Trainer {
    config: TrainerConfig,
    iteration: usize,
    index_rng: ChaCha8Rng,
    chains: Option<PersistentChains>,
    momentum: MomentumBuffers,
    schedules: HashMap<GridGeometry, SweepSchedule>,
}

impl Trainer {
    pub fn new(config: TrainerConfig, labels: &[Labeling], model: &GridCrfModel, net: Option<&UnaryNet>) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(CrfError::contract("training set is empty"));
        }
        let chains = match config.variant {
            SamplingVariant::Persistent => Some(PersistentChains::from_ground_truth(labels, config.seed)),
            SamplingVariant::ContrastiveDivergence(_) => None,
        };
        let momentum = MomentumBuffers {
            tables: model.tables().iter().map(|t| vec![0.0; t.values().len()]).collect(),
            net: match (net, config.freeze_unaries) {
                (Some(n), false) => Some(ParameterSet::zeros(&n.spec)),
                _ => None,
            },
        };
        Ok(Trainer {
            index_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INDEX_STREAM_TAG)),
            config,
            iteration: 0,
            chains,
            momentum,
            schedules: HashMap::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn chains(&self) -> Option<&PersistentChains> {
        self.chains.as_ref()
    }

    pub fn momentum(&self) -> &MomentumBuffers {
        &self.momentum
    }

    fn schedule_for(&mut self, model: &GridCrfModel, geometry: GridGeometry) -> &SweepSchedule {
        let kind = self.config.schedule;
        self.schedules
            .entry(geometry)
            .or_insert_with(|| SweepSchedule::build(kind, model, geometry))
    }

    /// One iteration: draw `d`, compute unaries, sample, update.
    pub fn train_step(
        &mut self,
        labels: &[Labeling],
        model: &mut GridCrfModel,
        source: &mut UnarySource<'_>,
    ) -> Result<StepRecord> {
        if source.len() != labels.len() {
            return Err(CrfError::contract("unary source and labels differ in length"));
        }
        let d = draw_training_index(labels.len(), &mut self.index_rng)?;
        let y_data = &labels[d];

        let (unaries, trace) = match source {
            UnarySource::Fixed(u) => (u[d].clone(), None),
            UnarySource::Network { net, inputs } => {
                let (logits, trace) = forward_trace(&net.spec, &net.params, &inputs[d])?;
                (logits_to_unaries(&logits)?, Some(trace))
            }
        };
        model.check_labeling(unaries.geometry(), y_data)?;

        let cd_seed = derive_seed(derive_seed(self.config.seed, CD_SEED_TAG), self.iteration as u64);
        let variant = self.config.variant;
        let schedule = self.schedule_for(model, unaries.geometry()).clone();
        let y_neg = negative_sample(variant, model, &unaries, y_data, self.chains.as_mut(), d, &schedule, cd_seed)?;

        let error = model.indicator_error(unaries.geometry(), y_data, &y_neg)?;
        let disagreement = y_data
            .states()
            .iter()
            .zip(y_neg.states())
            .filter(|(a, b)| a != b)
            .count() as f64
            / y_data.len() as f64;
        let (rate, table_rate) = (self.config.step_size(self.iteration), self.config.table_step_size(self.iteration));

        let network_grad = match (source, trace) {
            (UnarySource::Network { net, .. }, Some(trace)) if !self.config.freeze_unaries => {
                // d(-LL)/dz = -d(-LL)/dpsi = indicator error at the unary level
                let upstream = site_table_to_map(&error.unary, unaries.geometry(), error.labels, 1.0);
                let (grads, _) = backward_trace(&net.spec, &net.params, &trace, &upstream, false)?;
                Some((net, grads))
            }
            _ => None,
        };
        let scale = match self.config.gradient_scale {
            GradientScale::Sum => 1.0,
            GradientScale::PerSite => 1.0 / unaries.geometry().sites() as f64,
        };
        self.apply_table_update(model, &error, scale, table_rate);
        if let Some((net, mut grads)) = network_grad {
            grads.scale(scale);
            let velocity = self
                .momentum
                .net
                .get_or_insert_with(|| ParameterSet::zeros(&net.spec));
            momentum_update(&mut net.params, velocity, &grads, rate, self.config.momentum);
        }

        let record = StepRecord {
            iteration: self.iteration,
            rate,
            table_rate,
            sample: d,
            disagreement,
            train_accuracy: None,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Table update from an indicator error (LL-gradient sign):
    /// `v <- mu v - scale * error`, `table <- table - rate * v`.
    fn apply_table_update(&mut self, model: &mut GridCrfModel, error: &GradientBundle, scale: f64, rate: f64) {
        let mu = self.config.table_momentum;
        for ((table, velocity), err) in model
            .tables_mut()
            .iter_mut()
            .zip(self.momentum.tables.iter_mut())
            .zip(&error.tables)
        {
            for ((t, v), e) in table.values_mut().iter_mut().zip(velocity.iter_mut()).zip(err) {
                *v = mu * *v - scale * e;
                *t -= rate * *v;
            }
        }
    }

    /// Applies one table update for a given negative sample, bypassing the
    /// sampler. Network parameters are not touched.
    pub fn update_tables_from_negative(
        &mut self,
        model: &mut GridCrfModel,
        geometry: GridGeometry,
        y_data: &Labeling,
        y_neg: &Labeling,
    ) -> Result<()> {
        let error = model.indicator_error(geometry, y_data, y_neg)?;
        let scale = match self.config.gradient_scale {
            GradientScale::Sum => 1.0,
            GradientScale::PerSite => 1.0 / geometry.sites() as f64,
        };
        let rate = self.config.table_step_size(self.iteration);
        self.apply_table_update(model, &error, scale, rate);
        self.iteration += 1;
        Ok(())
    }

    /// Runs the remaining iterations up to `max_iterations`.
    pub fn train(
        &mut self,
        labels: &[Labeling],
        model: &mut GridCrfModel,
        source: &mut UnarySource<'_>,
    ) -> Result<Vec<StepRecord>> {
        let mut log = Vec::with_capacity(self.config.max_iterations.saturating_sub(self.iteration));
        while self.iteration < self.config.max_iterations {
            let mut record = self.train_step(labels, model, source)?;
            let interval = self.config.eval_interval;
            if interval > 0 && (record.iteration + 1) % interval == 0 {
                record.train_accuracy = self.training_accuracy(labels, model, source)?;
            }
            log.push(record);
        }
        Ok(log)
    }

    fn training_accuracy(
        &self,
        labels: &[Labeling],
        model: &GridCrfModel,
        source: &UnarySource<'_>,
    ) -> Result<Option<f64>> {
        let mut tally = AccuracyTally::default();
        let seed = derive_seed(self.config.seed, EVAL_SEED_TAG);
        for (d, truth) in labels.iter().enumerate().take(self.config.eval_samples.max(1)) {
            let unaries = source.unaries(d)?;
            let (pred, _) = infer_max_marginals(model, &unaries, &self.config.inference, derive_seed(seed, d as u64))?;
            tally.add(&pred, truth)?;
        }
        Ok(tally.value())
    }
}
