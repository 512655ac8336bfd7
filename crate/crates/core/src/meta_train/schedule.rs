use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::episode::{build_episode, DataView};
use super::optim::Sgd;
use super::step::{train_step, LossBreakdown};
use super::{Strategy, TrainConfig};
use crate::datagen::{ClassSplit, FewShotRegistry, Phase};
use crate::detector::checkpoint::Checkpoint;
use crate::detector::{Model, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::rng::rng_for;

const MOMENTUM_PREFIX: &str = "momentum/";

/// Everything a schedule reads.
pub struct TrainData<'a> {
    pub view: DataView<'a>,
    pub split: &'a ClassSplit,
    /// Base-class registry of phase 1.
    pub phase1: &'a FewShotRegistry,
    /// K-shot registry of phase 2.
    pub phase2: &'a FewShotRegistry,
    joint: FewShotRegistry,
    images: BTreeMap<u8, Vec<String>>,
}

impl<'a> TrainData<'a> {
    pub fn new(
        view: DataView<'a>,
        split: &'a ClassSplit,
        phase1: &'a FewShotRegistry,
        phase2: &'a FewShotRegistry,
    ) -> Result<Self> {
        if phase1.phase != Phase::One || phase2.phase != Phase::Two {
            return Err(Error::Registry("registries must be given as (phase 1, phase 2)".into()));
        }
        // base objects of phase 1 plus the novel shots of phase 2
        let mut joint = phase1.clone();
        joint.phase = Phase::Two;
        for (&c, refs) in &phase2.shots_per_class {
            if split.is_novel(c) {
                joint.shots_per_class.insert(c, refs.clone());
            }
        }
        let ids = |r: &FewShotRegistry| r.image_ids().into_iter().map(str::to_string).collect::<Vec<_>>();
        let images = BTreeMap::from([(1, ids(phase1)), (2, ids(phase2)), (3, ids(&joint))]);
        for (key, list) in &images {
            if list.is_empty() {
                return Err(Error::Registry(format!("registry set {key} references no images")));
            }
            for id in list {
                view.sample(id)?;
            }
        }
        Ok(TrainData {
            view,
            split,
            phase1,
            phase2,
            joint,
            images,
        })
    }

    pub fn joint_registry(&self) -> &FewShotRegistry {
        &self.joint
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub phase: Phase,
    pub image_id: String,
    pub c_meta: Vec<usize>,
    pub lr: f32,
    pub losses: LossBreakdown,
}

pub enum Event<'s> {
    Step(&'s LogEntry),
    /// Fired every `checkpoint_every` iterations and once at the end.
    Checkpoint(&'s TrainState),
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub strategy: Strategy,
    pub config: TrainConfig,
    pub model: Model,
    pub opt: Sgd,
    /// Iterations completed.
    pub iter: usize,
    /// Phase-2 total losses, consulted by the plateau rule.
    pub history: Vec<f64>,
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    format: String,
    strategy: Strategy,
    config: TrainConfig,
    spec: ModelSpec,
    iteration: usize,
    history: Vec<f64>,
    converged: bool,
}

impl TrainState {
    pub fn new(config: TrainConfig, strategy: Strategy, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec(strategy, num_classes);
        let model = Model::new(spec, config.seed)?;
        let opt = Sgd::new(config.momentum, config.weight_decay, config.clip_norm);
        Ok(TrainState {
            strategy,
            config,
            model,
            opt,
            iter: 0,
            history: Vec::new(),
            converged: false,
        })
    }

    /// Continues a phase-1 state as a different strategy of the same family
    /// and a different phase-2 shot count.
    pub fn fork(&self, strategy: Strategy, k: usize) -> Result<Self> {
        if self.iter > self.config.phase1_iters {
            return Err(Error::Config(format!("cannot fork a state past phase 1 (iteration {})", self.iter)));
        }
        if strategy.phase1_family() != self.strategy.phase1_family() {
            return Err(Error::Config(format!("{} cannot continue a {} phase 1", strategy, self.strategy)));
        }
        let mut s = self.clone();
        s.strategy = strategy;
        s.config.k = k;
        s.config.validate()?;
        Ok(s)
    }

    /// Iteration at which the schedule ends.
    pub fn end_iter(&self) -> usize {
        let c = &self.config;
        match self.strategy {
            Strategy::FrcnFtFull if self.converged => self.iter,
            Strategy::FrcnFtFull => c.phase1_iters + c.ft_full_max_iters,
            _ => c.phase1_iters + c.phase2_iters,
        }
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.end_iter()
    }

    pub fn phase(&self) -> Phase {
        if self.iter < self.config.phase1_iters {
            Phase::One
        } else {
            Phase::Two
        }
    }

    pub fn lr(&self) -> f32 {
        match self.phase() {
            Phase::One => self.config.lr,
            Phase::Two => self.config.lr * self.config.lr_decay,
        }
    }

    /// Runs one iteration.
    pub fn step(&mut self, data: &TrainData) -> Result<LogEntry> {
        let c = &self.config;
        if data.phase2.k != c.k {
            return Err(Error::Config(format!("registry holds K={} but the run expects K={}", data.phase2.k, c.k)));
        }
        let phase = self.phase();
        let (registry, key, k) = match (self.strategy, phase) {
            (Strategy::FrcnJoint, _) => (&data.joint, 3u8, 0),
            (s, Phase::One) => (data.phase1, 1, if s.is_meta() { c.phase1_shots } else { 0 }),
            (s, Phase::Two) => (data.phase2, 2, if s.is_meta() { c.k } else { 0 }),
        };
        let mut rng = rng_for(c.seed, &[u8::from(phase) as u64, self.iter as u64]);
        let images = &data.images[&key];
        let id = &images[rng.gen_range(0..images.len())];
        let sample = data.view.sample(id)?;
        let ep = build_episode(
            &data.view,
            sample,
            registry,
            data.split,
            k,
            c.scope,
            c.detector.meta_input_size,
            c.meta_mask_channel,
            &mut rng,
        )?;
        let lr = self.lr();
        let opts = c.objective(self.strategy);
        let losses = train_step(&mut self.model, &mut self.opt, &ep, &opts, lr, self.iter, &mut rng)?;
        let entry = LogEntry {
            iter: self.iter,
            phase,
            image_id: id.clone(),
            c_meta: ep.c_meta.clone(),
            lr,
            losses,
        };
        self.iter += 1;
        if phase == Phase::Two {
            self.history.push(losses.total);
            if self.strategy == Strategy::FrcnFtFull {
                self.converged = plateaued(&self.history, c.ft_full_window, c.ft_full_min_improvement);
            }
        }
        Ok(entry)
    }

    /// Steps until `stop_at` (clamped to the schedule end) or completion.
    pub fn run(&mut self, data: &TrainData, stop_at: Option<usize>, on: &mut dyn FnMut(Event) -> Result<()>) -> Result<()> {
        while !self.finished() && stop_at.is_none_or(|s| self.iter < s) {
            let entry = self.step(data)?;
            on(Event::Step(&entry))?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.iter % every == 0 && !self.finished() {
                on(Event::Checkpoint(self))?;
            }
        }
        if self.finished() {
            on(Event::Checkpoint(self))?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let payload = Payload {
            format: "train_state".into(),
            strategy: self.strategy,
            config: self.config.clone(),
            spec: self.model.spec.clone(),
            iteration: self.iter,
            history: self.history.clone(),
            converged: self.converged,
        };
        let mut tensors: BTreeMap<_, _> = self.model.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        for (n, t) in self.opt.velocity.iter() {
            tensors.insert(format!("{MOMENTUM_PREFIX}{n}"), t.clone());
        }
        Ok(Checkpoint {
            payload: serde_json::to_value(payload)?,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let p: Payload = serde_json::from_value(ck.payload.clone())?;
        if p.format != "train_state" {
            return Err(Error::Checkpoint(format!("unexpected checkpoint format {:?}", p.format)));
        }
        let (params, velocity) = split_tensors(ck);
        let mut opt = Sgd::new(p.config.momentum, p.config.weight_decay, p.config.clip_norm);
        opt.velocity = velocity;
        let state = TrainState {
            strategy: p.strategy,
            config: p.config,
            model: Model { spec: p.spec, params },
            opt,
            iter: p.iteration,
            history: p.history,
            converged: p.converged,
        };
        state.check_params()?;
        Ok(state)
    }

    fn check_params(&self) -> Result<()> {
        let fresh = crate::detector::init_params::<f32>(&self.model.spec, 0);
        for (n, t) in fresh.iter() {
            let have = self.model.params.get(n).map_err(|_| Error::Checkpoint(format!("checkpoint lacks tensor {n:?}")))?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {n:?} has shape {:?}, expected {:?}", have.shape(), t.shape())));
            }
        }
        if fresh.len() != self.model.params.len() {
            return Err(Error::Checkpoint("checkpoint holds unexpected tensors".into()));
        }
        Ok(())
    }
}

impl Model {
    /// Parameters and spec of a training checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        Ok(TrainState::from_checkpoint(ck)?.model)
    }
}

fn split_tensors(ck: &Checkpoint) -> (Params<f32>, Params<f32>) {
    let mut params = Params::new();
    let mut velocity = Params::new();
    for (n, t) in &ck.tensors {
        match n.strip_prefix(MOMENTUM_PREFIX) {
            Some(rest) => velocity.insert(rest.to_string(), t.clone()),
            None => params.insert(n.clone(), t.clone()),
        }
    }
    (params, velocity)
}

/// True once the mean loss of the latest full window improved on the one
/// before by less than `min_rel`.
fn plateaued(history: &[f64], window: usize, min_rel: f64) -> bool {
    let n = history.len();
    if n < 2 * window || n % window != 0 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&history[n - 2 * window..n - window]);
    let cur = mean(&history[n - window..]);
    prev - cur < min_rel * prev.abs()
}

/// Trains `strategy` from scratch to completion.
pub fn run_schedule(
    data: &TrainData,
    config: &TrainConfig,
    strategy: Strategy,
    on: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone(), strategy, data.split.num_classes())?;
    state.run(data, None, on)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::plateaued;

    #[test]
    fn plateau_rule() {
        let falling: Vec<f64> = (0..40).map(|i| 10.0 - i as f64 * 0.2).collect();
        assert!(!plateaued(&falling, 10, 0.01));
        let flat = vec![1.0; 20];
        assert!(plateaued(&flat, 10, 0.01));
        assert!(!plateaued(&flat[..15], 10, 0.01));
    }
}
