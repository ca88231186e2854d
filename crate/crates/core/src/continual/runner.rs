use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ContinualModel;
use super::train::{evaluate, pretrain, train_task, ScheduleMode, TrainConfig, TrainLog};
use crate::datagen::TaskSequence;
use crate::error::{Error, Result};
use crate::metrics::{delta_diagnostics, probe_layer_means, AccuracyMatrix, Forgetting, LayerDeltas, LayerMeanProbe};

/// A continual run in progress: everything needed to resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config: TrainConfig,
    pub num_tasks: usize,
    /// The continually trained model; under `stl` the untouched initial model.
    pub model: ContinualModel,
    /// Per-task models under `stl`.
    pub stl_models: BTreeMap<usize, ContinualModel>,
    pub matrix: AccuracyMatrix,
    pub probes_first: Option<Vec<LayerMeanProbe>>,
    pub probes_final: Option<Vec<LayerMeanProbe>>,
    pub logs: Vec<TrainLog>,
    pub pretrain_losses: Vec<f64>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub norm_mode: String,
    pub schedule: String,
    pub acc: f64,
    pub fgt: f64,
    pub fgt_defined: bool,
    pub deltas: Vec<LayerDeltas>,
}

fn check_sequence(seq: &TaskSequence) -> Result<()> {
    if seq.tasks.is_empty() {
        return Err(Error::Data("task sequence is empty".into()));
    }
    for (j, t) in seq.tasks.iter().enumerate() {
        if t.id != j {
            return Err(Error::Data(format!("task at position {j} has id {}", t.id)));
        }
    }
    Ok(())
}

impl RunState {
    /// Builds (and optionally pretrains) the initial model.
    pub fn start(seq: &TaskSequence, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_sequence(seq)?;
        let input = [seq.spec.channels, seq.spec.height, seq.spec.width];
        if config.architecture.input != input {
            return Err(Error::Config(format!(
                "architecture input {:?} does not match the dataset's {input:?}",
                config.architecture.input
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ContinualModel::new(
            config.architecture.clone(),
            config.norm_mode,
            config.momentum,
            config.stab_eps,
            &mut rng,
        )?;
        model.round_to(config.precision);
        let pretrain_losses = if config.pretrain_epochs > 0 {
            let pretext = seq
                .pretext
                .as_ref()
                .ok_or_else(|| Error::Config("pretraining requested but the dataset has no pretext task".into()))?;
            pretrain(&mut model, pretext, &config, &mut rng)?
        } else {
            Vec::new()
        };
        Ok(RunState {
            num_tasks: seq.tasks.len(),
            matrix: AccuracyMatrix::new(seq.tasks.len())?,
            config,
            model,
            stl_models: BTreeMap::new(),
            probes_first: None,
            probes_final: None,
            logs: Vec::new(),
            pretrain_losses,
            rng,
        })
    }

    pub fn completed(&self) -> usize {
        self.logs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.completed() == self.num_tasks
    }

    /// The model that answers for `task`.
    pub fn model_for(&self, task: usize) -> Result<&ContinualModel> {
        if self.config.schedule.mode == ScheduleMode::Stl {
            self.stl_models.get(&task).ok_or(Error::MissingBank(task))
        } else {
            Ok(&self.model)
        }
    }

    /// Trains the next task, then evaluates every task learned so far.
    pub fn step(&mut self, seq: &TaskSequence) -> Result<()> {
        check_sequence(seq)?;
        if seq.tasks.len() != self.num_tasks {
            return Err(Error::Data(format!("run expects {} tasks, sequence has {}", self.num_tasks, seq.tasks.len())));
        }
        let j = self.completed();
        let data = seq.tasks.get(j).ok_or_else(|| Error::Usage("every task has already been trained".into()))?;
        let log = if self.config.schedule.mode == ScheduleMode::Stl {
            let mut fresh = self.model.clone();
            let log = train_task(&mut fresh, data, &self.config, &mut self.rng)?;
            self.stl_models.insert(j, fresh);
            log
        } else {
            train_task(&mut self.model, data, &self.config, &mut self.rng)?
        };
        self.logs.push(log);
        for (i, task) in seq.tasks[..=j].iter().enumerate() {
            let mut x = task.test.x.clone();
            x.round_to(self.config.precision);
            let acc = evaluate(self.model_for(i)?, i, &x, &task.test.y, self.config.eval_moments)?;
            self.matrix.set(i, j, acc)?;
        }
        let first_test = &seq.tasks[0].test.x;
        if j == 0 {
            self.probes_first = Some(probe_layer_means(self.model_for(0)?, 0, first_test)?);
        }
        if j + 1 == self.num_tasks {
            self.probes_final = Some(probe_layer_means(self.model_for(0)?, 0, first_test)?);
        }
        Ok(())
    }

    /// Trains until `tasks` tasks are done (or the sequence ends).
    pub fn run_until(&mut self, seq: &TaskSequence, tasks: usize) -> Result<()> {
        while self.completed() < tasks.min(self.num_tasks) {
            self.step(seq)?;
        }
        Ok(())
    }

    pub fn deltas(&self) -> Result<Vec<LayerDeltas>> {
        match (&self.probes_first, &self.probes_final) {
            (Some(first), Some(last)) => delta_diagnostics(first, last),
            _ => Err(Error::Diagnostic("layer probes are only complete once the run has finished".into())),
        }
    }

    pub fn forgetting(&self) -> Result<Forgetting> {
        self.matrix.fgt()
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let fgt = self.matrix.fgt()?;
        Ok(RunSummary {
            norm_mode: self.config.norm_mode.name().into(),
            schedule: self.config.schedule.mode.name().into(),
            acc: self.matrix.acc()?,
            fgt: fgt.value,
            fgt_defined: fgt.defined,
            deltas: self.deltas()?,
        })
    }
}

/// Trains every task of `seq` in order, evaluating all learned tasks after
/// each one.
pub fn continual_run(seq: &TaskSequence, config: TrainConfig) -> Result<RunState> {
    let mut state = RunState::start(seq, config)?;
    state.run_until(seq, seq.tasks.len())?;
    Ok(state)
}
