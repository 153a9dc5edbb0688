//! SGD with momentum over two learning-rate groups.

mod augment;
mod checkpoint;

pub use augment::{augment, random_map, SpatialMap};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::loss::DEFAULT_HEM_RADIUS;
use crate::model::MatNet;
use crate::params::{Group, ParamStore};
use crate::rng::{stream, Stream};
use crate::synthdata::Sample;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_encoder_bridge: f64,
    pub lr_decoder: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub hflip: bool,
    /// Rotations are drawn from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub checkpoint_every: usize,
    pub hem_radius: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder_bridge: 1e-4,
            lr_decoder: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 2,
            iterations: 500,
            seed: 0,
            hflip: true,
            max_rotation_deg: 10.0,
            checkpoint_every: 100,
            hem_radius: DEFAULT_HEM_RADIUS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_encoder_bridge, self.lr_decoder];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid("train", format!("learning rates must be positive, got {rates:?}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("train", "momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch size must be positive"));
        }
        if !(0.0..180.0).contains(&self.max_rotation_deg) {
            return Err(Error::invalid("train", format!("rotation range ±{} outside (-180, 180)", self.max_rotation_deg)));
        }
        Ok(())
    }

    pub fn augments(&self) -> bool {
        self.hflip || self.max_rotation_deg > 0.0
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder | Group::Bridge => self.lr_encoder_bridge,
            Group::Decoder => self.lr_decoder,
        }
    }
}

/// `v <- m v + g + wd p`, `p <- p - lr(group) v`.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], velocity: &mut [Tensor], config: &TrainConfig) -> Result<()> {
    if grads.len() != store.len() || velocity.len() != store.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} params, {} grads, {} velocities", store.len(), grads.len(), velocity.len()),
        ));
    }
    for ((entry, g), v) in store.entries_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.shape() != entry.tensor.shape() || v.shape() != entry.tensor.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{}: param {:?}, grad {:?}, velocity {:?}", entry.name, entry.tensor.shape(), g.shape(), v.shape()),
            ));
        }
        let lr = config.lr(entry.group);
        let p = entry.tensor.data_mut();
        for ((p, &g), v) in p.iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = config.momentum * *v + g + config.weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

pub fn zero_velocity(store: &ParamStore) -> Vec<Tensor> {
    store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect()
}

/// Batch-mean loss terms of one iteration (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub ce: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Written every `checkpoint_every` iterations and at the end.
    pub checkpoint: Option<PathBuf>,
    /// Echoed into checkpoints.
    pub config_echo: String,
}

pub fn write_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = String::from("iteration,total,ce,boundary\n");
    for r in trace {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", r.iteration, r.total, r.ce, r.boundary);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Deterministic minibatch order: concatenated shuffles of the sample indices.
struct Order {
    rng: crate::rng::StreamRng,
    pool: Vec<usize>,
    n: usize,
}

impl Order {
    fn next(&mut self) -> usize {
        if self.pool.is_empty() {
            self.pool = (0..self.n).collect();
            self.pool.shuffle(&mut self.rng);
        }
        self.pool.pop().expect("refilled")
    }
}

/// Runs `config.iterations` SGD steps on `samples` and returns the loss trace.
pub fn train(
    samples: &[Sample],
    model: &mut MatNet,
    config: &TrainConfig,
    options: &TrainOptions,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut order = Order {
        rng: stream(config.seed, Stream::DataOrder),
        pool: Vec::new(),
        n: samples.len(),
    };
    let mut aug_rng = stream(config.seed, Stream::Augment);
    let mut velocity = zero_velocity(&model.store);
    let mut trace = Vec::with_capacity(config.iterations);
    let save = |model: &MatNet, iteration: usize| -> Result<()> {
        match &options.checkpoint {
            Some(path) => Checkpoint::from_store(&model.store, iteration as u64, config.seed, options.config_echo.clone()).save(path),
            None => Ok(()),
        }
    };
    for iteration in 1..=config.iterations {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut parts = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let base = &samples[order.next()];
            let sample = if config.augments() {
                augment(base, config.hflip, config.max_rotation_deg, config.hem_radius, &mut aug_rng)?
            } else {
                base.clone()
            };
            parts.push(model.sample_loss(&mut tape, &bound, &sample)?);
        }
        let mut sum = parts[0].total;
        for p in &parts[1..] {
            sum = tape.add(sum, p.total)?;
        }
        let loss = tape.scale(sum, 1.0 / config.batch_size as f64);
        let mean_of = |f: &dyn Fn(&crate::loss::LossParts) -> crate::tensor::Var| {
            parts.iter().map(|p| tape.value(f(p)).data()[0]).sum::<f64>() / parts.len() as f64
        };
        let record = LossRecord {
            iteration,
            total: tape.value(loss).data()[0],
            ce: mean_of(&|p| p.ce),
            boundary: mean_of(&|p| p.boundary),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                value: record.total,
            });
        }
        tape.backward(loss)?;
        let grads = model.store.grads(&tape, &bound);
        drop(tape);
        sgd_step(&mut model.store, &grads, &mut velocity, config)?;
        progress(&record);
        trace.push(record);
        if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 && iteration != config.iterations {
            save(model, iteration)?;
        }
    }
    save(model, config.iterations)?;
    Ok(trace)
}
