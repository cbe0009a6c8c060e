//! Training loop: AdamW over per-image tapes, summed gradients, step
//! schedule, per-step logs and checkpoints.

mod config;
mod log;
mod optim;

pub use config::{parse_kv, TrainConfig};
pub use log::{parse_log, LogRecord};
pub use optim::{lr_at, AdamW};

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::criterion::{total_loss, LayerLoss};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Mask2Former};
use crate::rng::stream;
use crate::scene::Scene;
use crate::tensor::{write_checkpoint, Checkpoint};

const STREAM_DATA: u64 = 1;
const STREAM_LOSS: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Receives step logs and checkpoints as training proceeds.
pub trait TrainSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()>;
    /// Called after `step` optimizer updates at each decay point and at the
    /// end of training.
    fn checkpoint(&mut self, step: usize, ckpt: &Checkpoint) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {
    fn record(&mut self, _: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _: usize, _: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Keeps logs and checkpoints in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<(usize, Checkpoint)>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push((step, ckpt.clone()));
        Ok(())
    }
}

/// Appends records to `train.log` and writes `step_<n>.ckpt` files.
pub struct DirSink {
    dir: PathBuf,
    log: File,
    echo_every: Option<usize>,
}

impl DirSink {
    pub fn create(dir: impl AsRef<Path>, echo_every: Option<usize>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log = File::create(dir.join("train.log"))?;
        Ok(Self { dir, log, echo_every })
    }

    pub fn checkpoint_path(dir: impl AsRef<Path>, step: usize) -> PathBuf {
        dir.as_ref().join(format!("step_{step}.ckpt"))
    }
}

impl TrainSink for DirSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        writeln!(self.log, "{rec}")?;
        if let Some(n) = self.echo_every {
            if n > 0 && rec.step % n == 0 {
                eprintln!("step {} lr {:e} loss {:.4}", rec.step, rec.lr, rec.loss);
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, ckpt: &Checkpoint) -> Result<()> {
        self.log.flush()?;
        write_checkpoint(Self::checkpoint_path(&self.dir, step), ckpt)
    }
}

/// Visits the dataset in a fresh seeded permutation every epoch.
struct BatchSampler {
    len: usize,
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl BatchSampler {
    fn index(&mut self, i: usize) -> usize {
        let epoch = (i / self.len) as u64;
        if self.epoch != Some(epoch) {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut stream(self.seed, &[STREAM_DATA, epoch]));
            self.epoch = Some(epoch);
        }
        self.order[i % self.len]
    }
}

/// Step boundaries at which checkpoints are emitted.
pub fn checkpoint_steps(cfg: &TrainConfig) -> Vec<usize> {
    let mut out: Vec<usize> = cfg
        .decay_points
        .iter()
        .map(|&f| (f * cfg.steps as f64).floor() as usize)
        .filter(|&s| s > 0 && s < cfg.steps)
        .collect();
    out.push(cfg.steps);
    out.dedup();
    out
}

fn checkpoint_of(model: &Mask2Former, cfg: &TrainConfig, step: usize) -> Checkpoint {
    let extra: Vec<(String, String)> = cfg
        .entries()
        .into_iter()
        .skip(model.config().entries().len())
        .chain([("step".to_string(), step.to_string())])
        .collect();
    model.to_checkpoint(&extra)
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        e => e,
    }
}

/// Training state that can be advanced one step at a time.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub model: Mask2Former,
    opt: AdamW,
    data: &'d [Scene],
    sampler: BatchSampler,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d [Scene]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let model = Mask2Former::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(model.params(), &cfg);
        let sampler = BatchSampler {
            len: data.len(),
            seed: cfg.seed,
            epoch: None,
            order: Vec::new(),
        };
        Ok(Self {
            cfg,
            model,
            opt,
            data,
            sampler,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Runs one optimizer step and returns its log record.
    pub fn advance(&mut self) -> Result<LogRecord> {
        let step = self.step;
        let lr = lr_at(step, &self.cfg);
        let batch = self.cfg.batch_size;
        let loss_cfg = self.cfg.effective_loss();
        let mut grads: Vec<Vec<f64>> = self.model.params().entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        let mut loss_sum = 0.0;
        let mut layer_sums: Vec<Option<LayerLoss>> = Vec::new();
        for b in 0..batch {
            let scene = &self.data[self.sampler.index(step * batch + b)];
            let mut tape = crate::tensor::Tape::new();
            let p = self.model.params().bind(&mut tape)?;
            let image = tape.constant(scene.image.clone())?;
            let mut drop_rng = stream(self.cfg.seed, &[STREAM_DROPOUT, step as u64, b as u64]);
            let mut ctx = ForwardCtx {
                dropout: self.cfg.model.dropout,
                rng: Some(&mut drop_rng),
                fixed_biases: None,
            };
            let out = self.model.forward(&mut tape, &p, image, &mut ctx).map_err(|e| diverged(e, step))?;
            let mut loss_rng = stream(self.cfg.seed, &[STREAM_LOSS, step as u64, b as u64]);
            let loss = total_loss(&mut tape, &out.predictions, &scene.truth, &loss_cfg, &mut loss_rng)
                .map_err(|e| diverged(e, step))?;
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            loss_sum += value;
            if layer_sums.is_empty() {
                layer_sums = vec![None; loss.layers.len()];
            }
            for (acc, l) in layer_sums.iter_mut().zip(&loss.layers) {
                if let Some(l) = l {
                    let a = acc.get_or_insert_with(LayerLoss::default);
                    a.cls += l.cls;
                    a.ce += l.ce;
                    a.dice += l.dice;
                }
            }
            let mut g = tape.backward(loss.total).map_err(|e| diverged(e, step))?;
            let scale = 1.0 / batch as f64;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gv) = g.take(v) {
                    for (a, x) in acc.iter_mut().zip(&gv) {
                        *a += scale * x;
                    }
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        self.opt.step(self.model.params_mut(), &grads, lr);
        self.step += 1;
        let n = batch as f64;
        Ok(LogRecord {
            step,
            lr,
            loss: loss_sum / n,
            layers: layer_sums
                .into_iter()
                .map(|l| {
                    l.map(|l| LayerLoss {
                        cls: l.cls / n,
                        ce: l.ce / n,
                        dice: l.dice / n,
                    })
                })
                .collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint_of(&self.model, &self.cfg, self.step)
    }
}

/// Trains for `cfg.steps` steps, reporting to `sink`.
pub fn train(cfg: &TrainConfig, data: &[Scene], sink: &mut dyn TrainSink) -> Result<Mask2Former> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let marks = checkpoint_steps(cfg);
    if cfg.steps == 0 {
        sink.checkpoint(0, &trainer.checkpoint())?;
    }
    while trainer.step() < cfg.steps {
        let rec = trainer.advance()?;
        sink.record(&rec)?;
        if marks.contains(&trainer.step()) {
            sink.checkpoint(trainer.step(), &trainer.checkpoint())?;
        }
    }
    Ok(trainer.model)
}
