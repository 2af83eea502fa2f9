//! End-to-end steps: dataset files, pretraining, CRF training, inference and
//! evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, Dataset, Sample};
use crate::error::{CrfError, Result};
use crate::eval::AccuracyTally;
use crate::model::{GridCrfModel, GridGeometry, LabelSpace, Labeling, OffsetClass, PairwiseTable, UnaryField};
use crate::net::{pretrain_step, FeatureMap, ParameterSet, UnaryNet};
use crate::oracle::{enumerate, exact_loglik, ExactSummary};
use crate::pgm;
use crate::rng::derive_seed;
use crate::sampler::{infer_max_marginals, InferenceSettings};
use crate::trainer::{draw_training_index, StepRecord, Trainer, TrainerConfig, UnarySource};

const PRETRAIN_TAG: u64 = 0x9E7;
const INFER_TAG: u64 = 0x1AF;

pub const MANIFEST: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    labels: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    input: String,
    labels: String,
}

/// Writes `NNNN_depth.pgm` (16-bit), `NNNN_labels.pgm` and a manifest.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.len());
    for (d, s) in data.samples.iter().enumerate() {
        let input = format!("{d:04}_depth.pgm");
        let labels = format!("{d:04}_labels.pgm");
        pgm::write_image(&dir.join(&input), &s.input, u16::MAX)?;
        pgm::write_labels(&dir.join(&labels), s.geometry(), &s.labels)?;
        entries.push(ManifestEntry { input, labels });
    }
    let manifest = Manifest {
        labels: data.labels.count(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CrfError::format(MANIFEST, e.to_string()))?;
    let labels = LabelSpace::new(manifest.labels).map_err(|_| CrfError::format("labels", "must be positive"))?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let input = pgm::read_image(&dir.join(&e.input))?;
            let (geometry, y) = pgm::read_labels(&dir.join(&e.labels), labels)?;
            if geometry.height() != input.height() || geometry.width() != input.width() {
                return Err(CrfError::format(e.labels.clone(), "label map and depth image differ in size"));
            }
            Sample::new(input, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(labels, samples)
}

pub fn train_dir(root: &Path) -> PathBuf {
    root.join("train")
}

pub fn test_dir(root: &Path) -> PathBuf {
    root.join("test")
}

/// Cross-entropy pretraining, batch size one with uniformly drawn samples.
/// Returns the per-iteration losses.
pub fn pretrain(net: &mut UnaryNet, data: &Dataset, iterations: usize, rate: f64, momentum: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PRETRAIN_TAG));
    let mut velocity = ParameterSet::zeros(&net.spec);
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let d = draw_training_index(data.len(), &mut rng)?;
        let s = &data.samples[d];
        losses.push(pretrain_step(&net.spec, &mut net.params, &s.input, &s.labels, rate, momentum, &mut velocity)?);
    }
    Ok(losses)
}

/// Trains the CRF (and the network unless frozen) on `data`.
pub fn train_crf(checkpoint: &mut Checkpoint, data: &Dataset, config: &TrainerConfig) -> Result<Vec<StepRecord>> {
    if data.labels != checkpoint.model.labels() {
        return Err(CrfError::contract("dataset and model label counts differ"));
    }
    let labels = data.labelings();
    let inputs = data.inputs();
    let mut trainer = Trainer::new(config.clone(), &labels, &checkpoint.model, Some(&checkpoint.net))?;
    if config.freeze_unaries {
        let unaries = inputs
            .iter()
            .map(|x| checkpoint.net.unaries(x))
            .collect::<Result<Vec<_>>>()?;
        trainer.train(&labels, &mut checkpoint.model, &mut UnarySource::Fixed(&unaries))
    } else {
        let mut source = UnarySource::Network {
            net: &mut checkpoint.net,
            inputs: &inputs,
        };
        trainer.train(&labels, &mut checkpoint.model, &mut source)
    }
}

/// Max-marginal labelings for every input, one independent chain per image.
pub fn infer_all(checkpoint: &Checkpoint, inputs: &[FeatureMap], settings: &InferenceSettings, seed: u64) -> Result<Vec<Labeling>> {
    let base = derive_seed(seed, INFER_TAG);
    inputs
        .par_iter()
        .enumerate()
        .map(|(d, x)| {
            let unaries = checkpoint.net.unaries(x)?;
            infer_max_marginals(&checkpoint.model, &unaries, settings, derive_seed(base, d as u64)).map(|(y, _)| y)
        })
        .collect()
}

/// Per-site argmax of the network's softmax.
pub fn cnn_predictions(net: &UnaryNet, inputs: &[FeatureMap]) -> Result<Vec<Labeling>> {
    inputs
        .par_iter()
        .map(|x| net.unaries(x).map(|u| u.argmin_labeling()))
        .collect()
}

/// Pooled foreground accuracy over a set of predictions.
pub fn evaluate(preds: &[Labeling], truth: &[Labeling]) -> Result<AccuracyTally> {
    if preds.len() != truth.len() {
        return Err(CrfError::contract(format!("{} predictions for {} images", preds.len(), truth.len())));
    }
    let mut tally = AccuracyTally::default();
    for (p, t) in preds.iter().zip(truth) {
        tally.add(p, t)?;
    }
    Ok(tally)
}

/// Line-delimited JSON, one record per line.
pub fn write_metrics<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Tiny instance for the exact oracle, as read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleInstance {
    pub labels: usize,
    pub height: usize,
    pub width: usize,
    /// `[dx, dy]` per class.
    pub classes: Vec<[i32; 2]>,
    /// One row-major `L x L` table per class.
    pub tables: Vec<Vec<f64>>,
    /// `N x L`, row-major by site.
    pub unaries: Vec<f64>,
    #[serde(default)]
    pub data: Option<Vec<usize>>,
}

pub fn oracle_summary(instance: &OracleInstance) -> Result<ExactSummary> {
    let labels = LabelSpace::new(instance.labels)?;
    let geometry = GridGeometry::new(instance.height, instance.width)?;
    let classes = instance
        .classes
        .iter()
        .map(|&[dx, dy]| OffsetClass::new(dx, dy))
        .collect::<Result<Vec<_>>>()?;
    let tables = instance
        .tables
        .iter()
        .map(|t| PairwiseTable::from_values(labels, t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let model = GridCrfModel::with_tables(labels, classes, tables)?;
    let unaries = UnaryField::from_values(geometry, labels, instance.unaries.clone())?;
    let mut summary = enumerate(&model, &unaries)?;
    if let Some(states) = &instance.data {
        let y = Labeling::new(states.clone(), labels)?;
        summary.log_likelihood = Some(exact_loglik(&model, &unaries, &y)?);
    }
    Ok(summary)
}

/// Parses an instance from JSON and returns its summary as pretty JSON.
pub fn oracle_report(json: &str) -> Result<String> {
    let instance: OracleInstance =
        serde_json::from_str(json).map_err(|e| CrfError::format("instance", e.to_string()))?;
    let summary = oracle_summary(&instance)?;
    Ok(serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

fn train_seed(config: &RunConfig) -> u64 {
    derive_seed(config.seed, 1)
}

fn test_seed(config: &RunConfig) -> u64 {
    derive_seed(config.seed, 2)
}

/// `gen`: synthetic train and test splits under `data_dir`.
pub fn command_gen(config: &RunConfig) -> Result<(usize, usize)> {
    let train = generate_synthetic(config.train_count, config.height, config.width, config.labels, train_seed(config))?;
    let test = generate_synthetic(config.test_count, config.height, config.width, config.labels, test_seed(config))?;
    save_dataset(&train_dir(&config.data_dir), &train)?;
    save_dataset(&test_dir(&config.data_dir), &test)?;
    Ok((train.len(), test.len()))
}

/// Freshly initialized network and zero pairwise tables.
pub fn initial_checkpoint(config: &RunConfig) -> Result<Checkpoint> {
    let net = UnaryNet::initialized(config.network_spec()?, derive_seed(config.seed, 3))?;
    let model = GridCrfModel::new(config.label_space()?, config.offset_classes()?)?;
    Checkpoint::new(net, model)
}

/// `pretrain`: continues from `checkpoint` when it exists, otherwise starts
/// from a fresh initialization. Writes the checkpoint back in place.
pub fn command_pretrain(config: &RunConfig) -> Result<Vec<f64>> {
    let data = load_dataset(&train_dir(&config.data_dir))?;
    let mut checkpoint = if config.checkpoint.exists() {
        Checkpoint::read(&config.checkpoint)?
    } else {
        initial_checkpoint(config)?
    };
    let losses = pretrain(
        &mut checkpoint.net,
        &data,
        config.pretrain_iters,
        config.pretrain_rate,
        config.pretrain_momentum,
        config.seed,
    )?;
    checkpoint.write(&config.checkpoint)?;
    Ok(losses)
}

pub const TRAINED_CHECKPOINT: &str = "model.ccrf";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// `train`: reads `checkpoint`, writes the trained checkpoint and the metrics
/// log into `out_dir`.
pub fn command_train(config: &RunConfig) -> Result<PathBuf> {
    let trainer_config = config.trainer_config()?;
    let data = load_dataset(&train_dir(&config.data_dir))?;
    let mut checkpoint = Checkpoint::read(&config.checkpoint)?;
    let log = train_crf(&mut checkpoint, &data, &trainer_config)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let out = config.out_dir.join(TRAINED_CHECKPOINT);
    checkpoint.write(&out)?;
    write_metrics(&config.out_dir.join(METRICS_LOG), &log)?;
    Ok(out)
}

/// `infer`: one `NNNN_pred.pgm` label map per image of `data` in `out_dir`.
pub fn command_infer(config: &RunConfig, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let checkpoint = Checkpoint::read(&config.checkpoint)?;
    let data = load_dataset(data_dir)?;
    let preds = infer_all(&checkpoint, &data.inputs(), &config.inference(), config.seed)?;
    std::fs::create_dir_all(&config.out_dir)?;
    preds
        .iter()
        .zip(&data.samples)
        .enumerate()
        .map(|(d, (y, s))| {
            let path = config.out_dir.join(format!("{d:04}_pred.pgm"));
            pgm::write_labels(&path, s.geometry(), y)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub accuracy: Option<f64>,
    pub correct: u64,
    pub total: u64,
}

impl EvalRow {
    fn new(method: &str, tally: AccuracyTally) -> Self {
        EvalRow {
            method: method.to_string(),
            accuracy: tally.value(),
            correct: tally.correct,
            total: tally.total,
        }
    }
}

/// `eval`: foreground accuracy of the network alone and of CRF inference.
pub fn command_eval(config: &RunConfig, data_dir: &Path) -> Result<Vec<EvalRow>> {
    let checkpoint = Checkpoint::read(&config.checkpoint)?;
    let data = load_dataset(data_dir)?;
    let truth = data.labelings();
    let inputs = data.inputs();
    let cnn = evaluate(&cnn_predictions(&checkpoint.net, &inputs)?, &truth)?;
    let crf = evaluate(&infer_all(&checkpoint, &inputs, &config.inference(), config.seed)?, &truth)?;
    Ok(vec![EvalRow::new("cnn-only", cnn), EvalRow::new("cnn+crf", crf)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;
    use crate::trainer::SamplingVariant;

    fn tiny_setup() -> (Checkpoint, Dataset) {
        let data = generate_synthetic(3, 16, 12, 3, 2).unwrap();
        let net = UnaryNet::initialized(NetworkSpec::desk(data.labels), 1).unwrap();
        let model = GridCrfModel::new(data.labels, OffsetClass::desk_preset()).unwrap();
        (Checkpoint::new(net, model).unwrap(), data)
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = tiny_setup();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labelings(), data.labelings());
        for (a, b) in back.samples.iter().zip(&data.samples) {
            for (x, y) in a.input.data().iter().zip(b.input.data()) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
    }

    #[test]
    fn pretrain_zero_iterations_is_identity() {
        let (mut ck, data) = tiny_setup();
        let before = ck.net.clone();
        assert!(pretrain(&mut ck.net, &data, 0, 0.1, 0.9, 0).unwrap().is_empty());
        assert_eq!(ck.net, before);
    }

    #[test]
    fn separate_training_keeps_network_bytes() {
        let (mut ck, data) = tiny_setup();
        let net_bits = |n: &UnaryNet| n.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let before_net = net_bits(&ck.net);
        let before_model = ck.model.clone();
        let config = TrainerConfig {
            variant: SamplingVariant::Persistent,
            freeze_unaries: true,
            max_iterations: 20,
            ..Default::default()
        };
        train_crf(&mut ck, &data, &config).unwrap();
        assert_eq!(net_bits(&ck.net), before_net);
        assert_ne!(ck.model, before_model);
    }

    #[test]
    fn joint_training_is_deterministic() {
        let run = || {
            let (mut ck, data) = tiny_setup();
            let config = TrainerConfig {
                max_iterations: 10,
                eval_interval: 5,
                eval_samples: 2,
                ..Default::default()
            };
            let log = train_crf(&mut ck, &data, &config).unwrap();
            assert!(log[4].train_accuracy.is_some() && log[3].train_accuracy.is_none());
            ck.to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_shapes_and_evaluation() {
        let (ck, data) = tiny_setup();
        let settings = InferenceSettings {
            burn_in: 2,
            samples: 3,
            ..Default::default()
        };
        let preds = infer_all(&ck, &data.inputs(), &settings, 4).unwrap();
        assert_eq!(preds.len(), data.len());
        assert_eq!(preds, infer_all(&ck, &data.inputs(), &settings, 4).unwrap());
        let tally = evaluate(&preds, &data.labelings()).unwrap();
        assert!(tally.total > 0);
        assert!(evaluate(&preds[..1], &data.labelings()).is_err());
    }

    #[test]
    fn oracle_instance_from_json() {
        let text = r#"{"labels":2,"height":1,"width":2,"classes":[[1,0]],"tables":[[0,3,3,0]],
            "unaries":[0,1,2,0],"data":[0,1]}"#;
        let inst: OracleInstance = serde_json::from_str(text).unwrap();
        let s = oracle_summary(&inst).unwrap();
        assert!((s.log_z.exp() - 0.5554805).abs() < 1e-6);
        assert!((s.log_likelihood.unwrap() - (-2.412078)).abs() < 1e-6);
    }

    #[test]
    fn command_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            train_count: 2,
            test_count: 1,
            height: 16,
            width: 12,
            labels: 3,
            pretrain_iters: 3,
            iterations: 4,
            burn_in: 1,
            samples: 2,
            data_dir: dir.path().join("data"),
            checkpoint: dir.path().join("pre.ccrf"),
            out_dir: dir.path().join("out"),
            ..Default::default()
        };
        assert_eq!(command_gen(&config).unwrap(), (2, 1));
        assert_eq!(command_pretrain(&config).unwrap().len(), 3);
        let trained = command_train(&config).unwrap();
        let infer_config = RunConfig {
            checkpoint: trained,
            ..config.clone()
        };
        let maps = command_infer(&infer_config, &test_dir(&config.data_dir)).unwrap();
        assert_eq!(maps.len(), 1);
        let rows = command_eval(&infer_config, &test_dir(&config.data_dir)).unwrap();
        assert_eq!(rows.len(), 2);
        let log = std::fs::read_to_string(config.out_dir.join(METRICS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 4);
    }
}
