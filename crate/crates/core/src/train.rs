//! Sequential per-video training, checkpoints, and structured logs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, Graph, OptimizerState, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_task, EvalVideo, MetricReport, Task};
use crate::loss::{total_loss, LossConfig};
use crate::model::{derived_rng, Model, ModelConfig, PreparedVideo, RngPurpose};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, DatasetMeta};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue training from an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + DeserializeOwned")]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub epoch: usize,
    pub task: Task,
    pub meta: DatasetMeta,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub run: RunConfig,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    /// Number of log records written so far.
    #[serde(default)]
    pub log_step: u64,
}

impl<T: Scalar + Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self).map_err(|e| Error::contract(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            offset: 0,
            field: "format_version".into(),
            message: e.to_string(),
        })?;
        if probe.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: probe.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut de = serde_json::Deserializer::from_slice(&bytes);
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
            offset: 0,
            field: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }

    /// Rebuilds the model with the saved parameters.
    pub fn model(&self) -> Result<Model<T>> {
        let mut model = Model::new(self.model.clone(), self.task, self.meta.clone(), self.run.seed)?;
        model.params.load_from(&self.params)?;
        Ok(model)
    }
}

/// One line of the training log. `step` is a logical counter, so logs of
/// identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub event: String,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<serde_json::Value>,
}

/// Appends JSON lines to a file, or discards them.
pub struct Logger {
    out: Option<std::io::BufWriter<std::fs::File>>,
    path: PathBuf,
    step: u64,
}

impl Logger {
    pub fn to_file(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: Some(std::io::BufWriter::new(file)),
            path,
            step: 0,
        })
    }

    pub fn discard() -> Self {
        Self {
            out: None,
            path: PathBuf::new(),
            step: 0,
        }
    }

    pub fn start_at(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&mut self, mut record: LogRecord) -> Result<()> {
        record.step = self.step;
        self.step += 1;
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(&record).map_err(|e| Error::contract(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub loss: LossConfig,
    pub run: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub log_step: u64,
}

impl<T: Scalar + Serialize + DeserializeOwned> Trainer<T> {
    /// Fresh model; class counts for the loss come from `train` when the
    /// config does not fix them.
    pub fn new(run: &RunConfig, train: &Dataset) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model.clone(), run.task, train.meta.clone(), run.seed)?;
        let mut loss = run.loss.clone();
        if loss.class_counts.is_empty() {
            loss.class_counts = train.predicate_counts();
        }
        let optimizer = OptimizerState::new(run.optim.adamw(), &model.params);
        Ok(Self {
            model,
            optimizer,
            loss,
            run: run.clone(),
            epoch: 0,
            log_step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let model = ckpt.model()?;
        Ok(Self {
            model,
            optimizer: ckpt.optimizer,
            loss: ckpt.loss,
            run: ckpt.run,
            epoch: ckpt.epoch,
            log_step: ckpt.log_step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            task: self.model.task,
            meta: self.model.meta.clone(),
            model: self.model.config.clone(),
            loss: self.loss.clone(),
            run: self.run.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            log_step: self.log_step,
        }
    }

    /// Loss of one video under the current parameters, without updating them.
    pub fn video_loss(&self, video: &PreparedVideo<T>, rng: &mut impl rand::Rng) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.build_loss(&mut g, video, rng)?;
        Ok(g.value(loss).item().as_f64())
    }

    fn build_loss(&self, g: &mut Graph<T>, video: &PreparedVideo<T>, rng: &mut impl rand::Rng) -> Result<crate::autodiff::Var> {
        let out = self.model.forward(g, video, rng)?;
        let objects = match (self.model.task, out.object_logits) {
            (Task::SgCls, Some(l)) => Some((l, video.labels.as_slice())),
            _ => None,
        };
        let relations = match (&out.scores, &video.pairs) {
            (Some(s), Some(p)) => Some((*s, &p.targets)),
            _ => None,
        };
        total_loss(g, objects, relations, &self.loss)
    }

    /// Forward, backward, clip, and one AdamW update on a single video.
    pub fn step_video(&mut self, video: &PreparedVideo<T>, rng: &mut impl rand::Rng) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let loss = self.build_loss(&mut g, video, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerics(format!("non-finite loss on video {}", video.id)));
        }
        let mut grads = g.backward(loss)?.for_params(&g, &self.model.params);
        let norm = clip_grad_norm(&mut grads, T::lit(self.optimizer.config.max_grad_norm));
        self.optimizer
            .step(&mut self.model.params, &grads)
            .map_err(|e| Error::Numerics(format!("video {}: {e}", video.id)))?;
        Ok((value.as_f64(), norm.as_f64()))
    }

    /// One pass over `videos` in a seed-determined order.
    pub fn train_epoch(&mut self, videos: &[PreparedVideo<T>], log: &mut Logger) -> Result<EpochStats> {
        if videos.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let epoch = self.epoch + 1;
        let seed = self.run.seed;
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut derived_rng(seed, RngPurpose::Shuffle, epoch, 0));
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        for &i in &order {
            let mut rng = derived_rng(seed, RngPurpose::Train, epoch, i);
            let (loss, norm) = self.step_video(&videos[i], &mut rng)?;
            loss_sum += loss;
            norm_sum += norm;
            log.log(LogRecord {
                step: 0,
                event: "video".into(),
                epoch,
                video: Some(videos[i].id.clone()),
                loss: Some(loss),
                grad_norm: Some(norm),
                metric: None,
            })?;
        }
        self.epoch = epoch;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / videos.len() as f64,
            mean_grad_norm: norm_sum / videos.len() as f64,
        };
        log.log(LogRecord {
            step: 0,
            event: "epoch".into(),
            epoch,
            video: None,
            loss: Some(stats.mean_loss),
            grad_norm: Some(stats.mean_grad_norm),
            metric: None,
        })?;
        Ok(stats)
    }

    pub fn evaluate(&self, videos: &[PreparedVideo<T>]) -> Result<(MetricReport, Vec<EvalVideo>)> {
        let preds = self.model.predict_all(videos, self.run.seed)?;
        let options = self.run.eval.options(&self.model.meta.predicate_groups);
        let report = evaluate_task(
            &preds,
            self.model.task,
            self.model.meta.num_predicates,
            &self.run.eval.modes,
            &self.run.eval.k,
            &options,
        )?;
        Ok((report, preds))
    }
}

/// Outcome of [`run_training`].
pub struct TrainOutcome<T: Scalar> {
    pub trainer: Trainer<T>,
    pub epochs: Vec<EpochStats>,
    pub report: Option<MetricReport>,
}

/// Trains up to `run.optim.epochs` epochs (continuing `resume` if given),
/// evaluating on `test` every `eval.eval_every` epochs and at the end. With
/// `out_dir` set, writes `train_log.jsonl` and `checkpoint_epoch_N.json` files.
pub fn run_training<T: Scalar + Serialize + DeserializeOwned>(
    run: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint<T>>,
) -> Result<TrainOutcome<T>> {
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.task != run.task {
                return Err(Error::contract(format!(
                    "checkpoint was trained for {} but the run requests {}",
                    ckpt.task, run.task
                )));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.run.optim.epochs = run.optim.epochs;
            t
        }
        None => Trainer::new(run, train)?,
    };
    let train_videos = trainer.model.prepare_all(train)?;
    let test_videos = match test {
        Some(t) => Some(trainer.model.prepare_all(t)?),
        None => None,
    };

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Logger::to_file(dir.join("train_log.jsonl"), resuming)?
        }
        None => Logger::discard(),
    };
    log.start_at(trainer.log_step);

    let mut epochs = Vec::new();
    let mut report = None;
    let total = trainer.run.optim.epochs;
    while trainer.epoch < total {
        epochs.push(trainer.train_epoch(&train_videos, &mut log)?);
        let every = trainer.run.eval.eval_every;
        let last = trainer.epoch == total;
        if let Some(tv) = &test_videos {
            if last || (every > 0 && trainer.epoch % every == 0) {
                let (r, _) = trainer.evaluate(tv)?;
                log.log(LogRecord {
                    step: 0,
                    event: "eval".into(),
                    epoch: trainer.epoch,
                    video: None,
                    loss: None,
                    grad_norm: None,
                    metric: Some(serde_json::to_value(&r).map_err(|e| Error::contract(e.to_string()))?),
                })?;
                report = Some(r);
            }
        }
        trainer.log_step = log.step();
        if let Some(dir) = out_dir {
            trainer.checkpoint().save(dir.join(format!("checkpoint_epoch_{}.json", trainer.epoch)))?;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        trainer,
        epochs,
        report,
    })
}
