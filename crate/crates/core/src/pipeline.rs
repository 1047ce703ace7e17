//! Experiment configuration and the pretrain → sparsify → prune → finetune
//! pipeline.
//!
//! Every stage leaves `<stage>_checkpoint.json`, `<stage>_report.json` and,
//! for training stages, `<stage>_log.csv` in the output directory, plus one
//! `<stage>_hist_layer<L>.csv` per parametric layer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_mnist_dir, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{weight_histogram, SparsityReport};
use crate::model::{build_lenet300100, build_lenet5, load_checkpoint, save_checkpoint, Architecture, CheckpointMeta, Network};
use crate::optim::{train_epochs, ObjectiveSpec, OptimizerKind, OptimizerState, TrainConfig, TrainingLog};
use crate::pruning::{finetune, prune, PruneConfig};

pub const HISTOGRAM_BINS: usize = 50;
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory holding the four standard MNIST IDX files.
    Mnist {
        dir: PathBuf,
        /// Use only the first N training images.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
    },
    /// Gaussian blobs; train and test share class centers.
    Synthetic { train: usize, test: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainStage {
    pub epochs: usize,
    /// Start from this checkpoint instead of training from scratch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub objective: ObjectiveSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifyStage {
    pub epochs: usize,
    pub objective: ObjectiveSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStage {
    /// Upper bound on finetuning epochs; the best test accuracy is kept.
    pub epochs: usize,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Architecture,
    pub data: DataSource,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub pretrain: PretrainStage,
    pub sparsify: SparsifyStage,
    pub prune: PruneConfig,
    pub finetune: FinetuneStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    64
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fresh network for the configured architecture.
    pub fn build_network(&self) -> Result<Network> {
        match self.model {
            Architecture::Lenet300100 => Ok(build_lenet300100(self.seed)),
            Architecture::Lenet5 => Ok(build_lenet5(self.seed)),
            Architecture::Custom => Err(Error::Config("model: custom architectures cannot be built from a config".into())),
        }
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        let net = self.build_network()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be positive".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(format!("optimizer: {e}")))?;
        if let DataSource::Synthetic { train, test, classes } = self.data {
            if train == 0 || test == 0 || classes == 0 || classes > net.num_classes() {
                return Err(Error::Config(format!(
                    "data: synthetic sizes must be positive with at most {} classes",
                    net.num_classes()
                )));
            }
        }
        for (field, objective) in [
            ("pretrain.objective", &self.pretrain.objective),
            ("sparsify.objective", &self.sparsify.objective),
            ("finetune.objective", &self.finetune.objective),
        ] {
            objective
                .resolve(&net)
                .map_err(|e| Error::Config(format!("{field}: {e}")))?;
        }
        if let Some(t) = self
            .finetune
            .objective
            .terms
            .iter()
            .find(|t| t.kind != crate::regularizers::RegularizerKind::L2)
        {
            return Err(Error::Config(format!(
                "finetune.objective: only l2 terms are allowed, found {}",
                t.kind.name()
            )));
        }
        self.prune
            .threshold
            .validate(&net)
            .map_err(|e| Error::Config(format!("prune.threshold: {e}")))?;
        if self.prune.axes.is_empty() {
            return Err(Error::Config("prune.axes: at least one axis is required".into()));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Mnist { dir, train_limit } => {
                let (train, test) = load_mnist_dir(dir)?;
                Ok(match train_limit {
                    Some(n) => (train.head(*n), test),
                    None => (train, test),
                })
            }
            DataSource::Synthetic { train, test, classes } => {
                Ok(synthetic_blobs(train + test, *classes, self.seed)?.split_at(*train))
            }
        }
    }

    fn train_config(&self, epochs: usize, stage_salt: u64) -> TrainConfig {
        TrainConfig::new(epochs, self.batch_size, self.seed.wrapping_add(stage_salt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Sparsify,
    Prune,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Sparsify, Stage::Prune, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sparsify => "sparsify",
            Stage::Prune => "prune",
            Stage::Finetune => "finetune",
        }
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_checkpoint.json", self.name()))
    }

    pub fn report_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_report.json", self.name()))
    }

    pub fn log_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_log.csv", self.name()))
    }
}

/// Network after a stage together with what the stage produced.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub net: Network,
    pub meta: CheckpointMeta,
    pub report: SparsityReport,
    pub log: Option<TrainingLog>,
}

/// A configured experiment with its data loaded.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    /// Directory for stage artifacts; nothing is written when `None`.
    pub output_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.load_data()?;
        let output_dir = config.output_dir.clone();
        Ok(Experiment {
            config,
            train,
            test,
            output_dir,
            verbose: false,
        })
    }

    fn test_accuracy(&self, net: &Network) -> Result<f64> {
        net.accuracy(self.test.images(), self.test.labels(), EVAL_CHUNK)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn finish(
        &self,
        stage: Stage,
        net: Network,
        epochs: usize,
        objective: String,
        baseline: Option<f64>,
        log: Option<TrainingLog>,
    ) -> Result<StageResult> {
        let accuracy = self.test_accuracy(&net)?;
        let baseline = baseline.or(Some(accuracy));
        let meta = CheckpointMeta {
            seed: self.config.seed,
            epoch: epochs,
            accuracy: Some(accuracy),
            stage: stage.name().to_string(),
            objective,
            baseline_accuracy: baseline,
        };
        let report = SparsityReport::new(&net, stage.name(), Some(accuracy), baseline);
        self.log(format!(
            "[{}] test accuracy {:.4}, nonzero {:.3}%, structure {}, flops {:.3}%",
            stage.name(),
            accuracy,
            report.nonzero_percent,
            report.structure_string(),
            report.flops_percent
        ));
        if let Some(dir) = &self.output_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(&net, &meta, &stage.checkpoint_path(dir))?;
            report.save(&stage.report_path(dir))?;
            if let Some(log) = &log {
                log.save_csv(&stage.log_path(dir))?;
            }
            for layer in net.parametric_indices() {
                let path = dir.join(format!("{}_hist_layer{layer}.csv", stage.name()));
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                weight_histogram(&net, layer, HISTOGRAM_BINS)?.write_csv(file)?;
            }
        }
        Ok(StageResult { net, meta, report, log })
    }

    fn train_stage(&self, net: &mut Network, objective: &ObjectiveSpec, config: &TrainConfig) -> Result<TrainingLog> {
        let resolved = objective.resolve(net)?;
        let mut opt = OptimizerState::new(self.config.optimizer);
        train_epochs(net, &self.train, &self.test, &resolved, &mut opt, config)
    }

    /// Trains a dense model from scratch (keeping the best epoch) or loads
    /// the configured checkpoint.
    pub fn pretrain(&self) -> Result<StageResult> {
        let stage = &self.config.pretrain;
        if let Some(path) = &stage.checkpoint {
            let (net, meta) = load_checkpoint(path)?;
            self.check_architecture(&net, path)?;
            let baseline = meta.accuracy;
            return self.finish(Stage::Pretrain, net, meta.epoch, meta.objective, baseline, None);
        }
        let mut net = self.config.build_network()?;
        let mut cfg = self.config.train_config(stage.epochs, 0);
        cfg.keep_best = true;
        cfg.verbose = self.verbose;
        let log = self.train_stage(&mut net, &stage.objective, &cfg)?;
        self.finish(Stage::Pretrain, net, stage.epochs, stage.objective.describe(), None, Some(log))
    }

    /// Trains under the sparsity-inducing objective; the final weights are
    /// kept.
    pub fn sparsify(&self, mut net: Network, baseline: Option<f64>) -> Result<StageResult> {
        let stage = &self.config.sparsify;
        let mut cfg = self.config.train_config(stage.epochs, 1);
        cfg.verbose = self.verbose;
        let log = self.train_stage(&mut net, &stage.objective, &cfg)?;
        self.finish(Stage::Sparsify, net, stage.epochs, stage.objective.describe(), baseline, Some(log))
    }

    pub fn prune(&self, mut net: Network, baseline: Option<f64>) -> Result<StageResult> {
        let thresholds = prune(&mut net, &self.config.prune)?;
        self.log(format!("[prune] thresholds {thresholds:?}"));
        self.finish(Stage::Prune, net, 0, format!("{:?}", self.config.prune.method).to_lowercase(), baseline, None)
    }

    pub fn finetune(&self, mut net: Network, baseline: Option<f64>) -> Result<StageResult> {
        let stage = &self.config.finetune;
        let mut cfg = self.config.train_config(stage.epochs, 2);
        cfg.patience = stage.patience;
        cfg.verbose = self.verbose;
        let log = finetune(&mut net, &self.train, &self.test, &stage.objective, self.config.optimizer, &cfg)?;
        self.finish(Stage::Finetune, net, stage.epochs, stage.objective.describe(), baseline, Some(log))
    }

    /// All four stages in order. The final report is also written as
    /// `report.json`.
    pub fn run(&self) -> Result<Vec<StageResult>> {
        let pre = self.pretrain()?;
        let baseline = pre.meta.baseline_accuracy;
        let sparse = self.sparsify(pre.net.clone(), baseline)?;
        let pruned = self.prune(sparse.net.clone(), baseline)?;
        let tuned = self.finetune(pruned.net.clone(), baseline)?;
        if let Some(dir) = &self.output_dir {
            tuned.report.save(&dir.join("report.json"))?;
        }
        Ok(vec![pre, sparse, pruned, tuned])
    }

    /// Loads a checkpoint written by an earlier stage.
    pub fn load_stage_input(&self, path: &Path) -> Result<(Network, CheckpointMeta)> {
        let (net, meta) = load_checkpoint(path)?;
        self.check_architecture(&net, path)?;
        Ok((net, meta))
    }

    fn check_architecture(&self, net: &Network, path: &Path) -> Result<()> {
        if net.architecture() != self.config.model {
            return Err(Error::Config(format!(
                "{} holds a {:?} network but the config asks for {:?}",
                path.display(),
                net.architecture(),
                self.config.model
            )));
        }
        Ok(())
    }
}

/// Runs every stage and returns the final network and report.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<(Network, SparsityReport)> {
    let experiment = Experiment::new(config.clone())?;
    let mut stages = experiment.run()?;
    let last = stages.pop().expect("four stages");
    Ok((last.net, last.report))
}
