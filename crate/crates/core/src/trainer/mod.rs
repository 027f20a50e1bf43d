//! Alternating multi-task training, evaluation and mode comparison.
//!
//! A joint step draws its task from a Bernoulli(`p_seg`) generator owned by
//! the run, pulls the next mini-batch from that task's own cursor and
//! applies one Adam update from that task's loss alone. Cursors walk a fresh
//! permutation on every pass, so a task whose data runs out recycles it.

mod compare;
mod config;
mod data;
mod eval;

pub use compare::{compare_modes, ComparisonReport, ComparisonRow};
pub use config::{LabelSource, TrainConfig, TrainMode};
pub use data::{normalize, Batch, Dataset, Sample, FLOW_RGB_MAX};
pub use eval::{evaluate, predict_frames, EvalOptions, FramePrediction};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::MetricsReport;
use crate::model::{parse_kv, ForwardOptions, Heads, Model, ModelConfig};
use crate::tensorcore::checkpoint::{self, NamedArray};
use crate::tensorcore::{AdamState, Bindings, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Seg,
    Det,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Det => "det",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn heads(self) -> Heads {
        match self {
            Task::Seg => Heads::SEG,
            Task::Det => Heads::DET,
        }
    }
}

/// One optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub task: Task,
    pub loss: f64,
    /// Sum of the per-task exponential averages after this step.
    pub smoothed: f64,
}

/// Loss history as CSV with header `step,epoch,task,loss,smoothed`.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("step,epoch,task,loss,smoothed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step,
            r.epoch,
            r.task.as_str(),
            r.loss,
            r.smoothed
        );
    }
    s
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let bad = |n: usize| Error::Invalid(format!("history line {}: malformed", n + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,epoch,task,loss,smoothed")) => {}
        _ => return Err(Error::Invalid("history: missing header".into())),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n));
            }
            Ok(HistoryRow {
                step: f[0].parse().map_err(|_| bad(n))?,
                epoch: f[1].parse().map_err(|_| bad(n))?,
                task: match f[2] {
                    "seg" => Task::Seg,
                    "det" => Task::Det,
                    _ => return Err(bad(n)),
                },
                loss: f[3].parse().map_err(|_| bad(n))?,
                smoothed: f[4].parse().map_err(|_| bad(n))?,
            })
        })
        .collect()
}

/// SplitMix64 finalizer over `a` and `b`, for deriving independent seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Initialization seed of the `k`-th model a mode trains.
pub fn model_seed(seed: u64, k: usize) -> u64 {
    mix(seed, k as u64)
}

/// Position in a reshuffled walk over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursor {
    pub pass: u64,
    pub pos: usize,
}

fn permutation(seed: u64, task: Task, pass: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, task as u64 + 1), pass));
    order.shuffle(&mut rng);
    order
}

/// Per-step task choice: Bernoulli(`p_seg`) between segmentation and
/// detection when both are enabled, otherwise the single enabled task.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    rng: ChaCha8Rng,
    p_seg: f64,
    seg: bool,
    det: bool,
}

impl TaskSampler {
    pub fn new(seed: u64, p_seg: f64, seg: bool, det: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_seg) {
            return Err(Error::Config(format!("p_seg {p_seg} not in [0, 1]")));
        }
        if !seg && !det {
            return Err(Error::Config("no task enabled".into()));
        }
        Ok(TaskSampler {
            rng: ChaCha8Rng::seed_from_u64(mix(seed, 0x7461_736b)),
            p_seg,
            seg,
            det,
        })
    }

    pub fn draw(&mut self) -> Task {
        match (self.seg, self.det) {
            (true, true) if self.rng.random_bool(self.p_seg) => Task::Seg,
            (true, true) => Task::Det,
            (true, false) => Task::Seg,
            _ => Task::Det,
        }
    }

    /// Tasks with nonzero probability.
    pub fn tasks(&self) -> Vec<Task> {
        match (self.seg, self.det) {
            (true, true) if self.p_seg >= 1.0 => vec![Task::Seg],
            (true, true) if self.p_seg <= 0.0 => vec![Task::Det],
            (true, true) => vec![Task::Seg, Task::Det],
            (true, false) => vec![Task::Seg],
            _ => vec![Task::Det],
        }
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

/// Everything besides weights and optimizer moments needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng_word_pos: u128,
    pub cursors: [Cursor; 2],
    pub ema: [Option<f64>; 2],
    pub history: Vec<HistoryRow>,
    /// Smoothed total loss at the end of each completed epoch.
    pub epoch_smoothed: Vec<f64>,
}

impl RunState {
    fn new() -> Self {
        RunState {
            step: 0,
            epoch: 0,
            rng_word_pos: 0,
            cursors: [Cursor::default(); 2],
            ema: [None; 2],
            history: Vec::new(),
            epoch_smoothed: Vec::new(),
        }
    }

    pub fn smoothed_total(&self) -> Option<f64> {
        match self.ema {
            [None, None] => None,
            [a, b] => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        }
    }

    fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "step = {}", self.step);
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "rng_word_pos = {}", self.rng_word_pos);
        for (t, c) in [Task::Seg, Task::Det].iter().zip(&self.cursors) {
            let _ = writeln!(s, "cursor.{} = {},{}", t.as_str(), c.pass, c.pos);
        }
        for (t, e) in [Task::Seg, Task::Det].iter().zip(&self.ema) {
            let _ = writeln!(s, "ema.{} = {}", t.as_str(), opt(*e));
        }
        let ep: Vec<String> = self.epoch_smoothed.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "epoch_smoothed = {}", ep.join(","));
        s
    }

    fn from_kv(text: &str, history: Vec<HistoryRow>) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Invalid(format!("train state lacks {k}")))
        };
        let bad = |k: &str| Error::Invalid(format!("train state: bad {k}"));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(k));
        let cursor = |k: &str| -> Result<Cursor> {
            let (a, b) = get(k)?.split_once(',').ok_or_else(|| bad(k))?;
            Ok(Cursor {
                pass: a.parse().map_err(|_| bad(k))?,
                pos: b.parse().map_err(|_| bad(k))?,
            })
        };
        let ema = |k: &str| -> Result<Option<f64>> {
            match get(k)? {
                "none" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(k)),
            }
        };
        let ep = get("epoch_smoothed")?;
        let epoch_smoothed = if ep.is_empty() {
            Vec::new()
        } else {
            ep.split(',')
                .map(|v| v.parse().map_err(|_| bad("epoch_smoothed")))
                .collect::<Result<_>>()?
        };
        Ok(RunState {
            step: num("step")?,
            epoch: num("epoch")? as usize,
            rng_word_pos: get("rng_word_pos")?.parse().map_err(|_| bad("rng_word_pos"))?,
            cursors: [cursor("cursor.seg")?, cursor("cursor.det")?],
            ema: [ema("ema.seg")?, ema("ema.det")?],
            history,
            epoch_smoothed,
        })
    }
}

const AUX_TRAIN: &str = "aux/train_config\n";
const AUX_STATE: &str = "aux/state\n";
const AUX_HISTORY: &str = "aux/history\n";
const AUX_ADAM: &str = "aux/adam\n";
const AUX_M: &str = "aux/adam.m/";
const AUX_V: &str = "aux/adam.v/";

fn text_array(prefix: &str, body: &str) -> NamedArray {
    NamedArray {
        name: format!("{prefix}{body}"),
        dims: vec![0],
        data: Vec::new(),
    }
}

/// Trains one model on one dataset. Which tasks run follows the model's
/// heads; with both heads each step draws its task from `p_seg`.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState<f32>,
    pub state: RunState,
    data: &'a Dataset,
    sampler: TaskSampler,
    orders: [(u64, Vec<usize>); 2],
}

impl<'a> Trainer<'a> {
    /// Fresh run. `model_seed` drives weight init; task draws, shuffles and
    /// dropout derive from `config.seed`.
    pub fn new(config: &TrainConfig, model_config: ModelConfig, model_seed: u64, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let model = Model::build(model_config, model_seed)?;
        let adam = AdamState::new(&model.params, config.lr, config.l2);
        Self::assemble(config.clone(), model, adam, RunState::new(), data)
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        adam: AdamState<f32>,
        state: RunState,
        data: &'a Dataset,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invalid(format!(
                "training split {:?} is empty",
                config.train_split
            )));
        }
        let mut sampler = TaskSampler::new(config.seed, config.p_seg, model.config.seg_head, model.config.det_head)?;
        sampler.set_word_pos(state.rng_word_pos);
        let n = data.len();
        let orders = [
            (
                state.cursors[0].pass,
                permutation(config.seed, Task::Seg, state.cursors[0].pass, n),
            ),
            (
                state.cursors[1].pass,
                permutation(config.seed, Task::Det, state.cursors[1].pass, n),
            ),
        ];
        Ok(Trainer {
            config,
            model,
            adam,
            state,
            data,
            sampler,
            orders,
        })
    }

    /// Tasks that can be drawn.
    pub fn tasks(&self) -> Vec<Task> {
        self.sampler.tasks()
    }

    /// One pass over the data per drawable task.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len().div_ceil(self.config.batch_size) * self.tasks().len()) as u64
    }

    fn next_indices(&mut self, task: Task) -> Vec<usize> {
        let n = self.data.len();
        let k = task.index();
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            let c = &mut self.state.cursors[k];
            if c.pos == n {
                c.pass += 1;
                c.pos = 0;
            }
            if self.orders[k].0 != c.pass {
                self.orders[k] = (c.pass, permutation(self.config.seed, task, c.pass, n));
            }
            out.push(self.orders[k].1[c.pos]);
            c.pos += 1;
        }
        out
    }

    /// Draws a task, fetches its batch and applies one update.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let task = self.sampler.draw();
        self.state.rng_word_pos = self.sampler.word_pos();
        let idx = self.next_indices(task);
        let needs_motion = task == Task::Seg && self.model.config.motion_stream;
        let batch = self.data.batch(&idx, needs_motion)?;
        let mut g = Graph::new();
        let mut b = Bindings::default();
        let x = g.leaf(&batch.rgb);
        let m = needs_motion.then(|| g.leaf(&batch.motion));
        let opts = ForwardOptions::training(task.heads(), mix(self.config.seed, self.state.step + 1));
        let fwd = self.model.forward(&mut g, &mut b, x, m, &opts)?;
        let loss = match task {
            Task::Seg => self.model.seg_loss(&mut g, &fwd, &batch.labels)?,
            Task::Det => self.model.det_loss(&mut g, &fwd, &batch.targets)?,
        };
        let value = g.item(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Invalid(format!(
                "{} loss became {value} at step {}",
                task.as_str(),
                self.state.step
            )));
        }
        g.backward(loss)?;
        self.model.params.zero_grad();
        self.model.params.accumulate_grads(&g, &b)?;
        self.adam.step(&mut self.model.params)?;
        self.model.params.zero_grad();

        let a = self.config.ema;
        let e = &mut self.state.ema[task.index()];
        *e = Some(e.map_or(value, |prev| a * prev + (1.0 - a) * value));
        self.state.step += 1;
        let row = HistoryRow {
            step: self.state.step,
            epoch: self.state.epoch + 1,
            task,
            loss: value,
            smoothed: self.state.smoothed_total().unwrap_or(value),
        };
        self.state.history.push(row);
        Ok(row)
    }

    /// Runs steps up to the end of the current epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        let end = (self.state.epoch as u64 + 1) * self.steps_per_epoch();
        while self.state.step < end {
            self.step()?;
        }
        self.state.epoch += 1;
        let s = self.state.smoothed_total().unwrap_or(f64::NAN);
        self.state.epoch_smoothed.push(s);
        Ok(())
    }

    /// Weights followed by run config, state, history and Adam moments.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = self.model.to_arrays();
        out.push(text_array(AUX_TRAIN, &self.config.to_kv()));
        out.push(text_array(AUX_STATE, &self.state.to_kv()));
        out.push(text_array(AUX_HISTORY, &history_csv(&self.state.history)));
        out.push(text_array(
            AUX_ADAM,
            &format!("step_count = {}\n", self.adam.step_count),
        ));
        for (prefix, moments) in [(AUX_M, &self.adam.first_moment), (AUX_V, &self.adam.second_moment)] {
            for (p, m) in self.model.params.iter().zip(moments) {
                out.push(NamedArray {
                    name: format!("{prefix}{}", p.name),
                    dims: vec![m.len()],
                    data: m.clone(),
                });
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_arrays())
    }

    /// Continues a run saved by [`Trainer::save`]. The stored run config is
    /// used except for `epochs`, which comes from `epochs`.
    pub fn from_arrays(arrays: &[NamedArray], epochs: usize, data: &'a Dataset) -> Result<Self> {
        let model = Model::from_arrays(arrays)?;
        let text = |prefix: &str| -> Result<&str> {
            arrays
                .iter()
                .find_map(|a| a.name.strip_prefix(prefix))
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {}", prefix.trim_end())))
        };
        let mut config = TrainConfig::from_kv(text(AUX_TRAIN)?, None)?;
        config.epochs = epochs;
        let history = parse_history_csv(text(AUX_HISTORY)?)?;
        let state = RunState::from_kv(text(AUX_STATE)?, history)?;
        let adam_kv = parse_kv(text(AUX_ADAM)?)?;
        let mut adam = AdamState::new(&model.params, config.lr, config.l2);
        adam.step_count = adam_kv
            .get("step_count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Invalid("checkpoint: bad adam step_count".into()))?;
        let by_name: BTreeMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for (i, p) in model.params.iter().enumerate() {
            for (prefix, moments) in [(AUX_M, &mut adam.first_moment), (AUX_V, &mut adam.second_moment)] {
                let name = format!("{prefix}{}", p.name);
                let a = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))?;
                if a.data.len() != p.tensor.numel() {
                    return Err(Error::shape("checkpoint", format!("{name}: {} values", a.data.len())));
                }
                moments[i].copy_from_slice(&a.data);
            }
        }
        let expected = model.to_arrays().len() + 4 + 2 * model.params.len();
        if arrays.len() != expected {
            return Err(Error::Invalid(format!(
                "checkpoint has {} arrays, a training checkpoint has {expected}",
                arrays.len()
            )));
        }
        Self::assemble(config, model, adam, state, data)
    }

    pub fn load(path: &Path, epochs: usize, data: &'a Dataset) -> Result<Self> {
        Self::from_arrays(&checkpoint::load(path)?, epochs, data)
    }
}

/// History and periodic evaluations of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub history: Vec<HistoryRow>,
    pub epoch_smoothed: Vec<f64>,
    /// `(epoch, report)` at the configured cadence.
    pub evals: Vec<(usize, MetricsReport)>,
}

/// Trained models of one mode (two for `separate_2stream`).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub models: Vec<Model>,
    pub runs: Vec<RunSummary>,
}

impl TrainOutcome {
    pub fn model_refs(&self) -> Vec<&Model> {
        self.models.iter().collect()
    }
}

/// Training and evaluation splits shaped for `config`.
pub fn load_datasets(config: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    let cfgs = config.model_configs()?;
    let train = Dataset::load(&config.data, &config.train_split, config.labels, &cfgs[0])?;
    let eval = if config.eval_every > 0 {
        Some(Dataset::load(
            &config.data,
            &config.eval_split,
            config.labels,
            &cfgs[0],
        )?)
    } else {
        None
    };
    Ok((train, eval))
}

/// Trains every model the mode needs on `data`. `on_epoch` runs after each
/// epoch of each model (for checkpointing or progress output).
pub fn train_on<F>(
    config: &TrainConfig,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Trainer) -> Result<()>,
{
    config.validate()?;
    let mut models = Vec::new();
    let mut runs = Vec::new();
    for (k, mc) in config.model_configs()?.into_iter().enumerate() {
        let mut t = Trainer::new(config, mc, model_seed(config.seed, k), data)?;
        let mut evals = Vec::new();
        while t.state.epoch < config.epochs {
            t.run_epoch()?;
            if let (Some(ev), true) = (eval_data, config.eval_every > 0) {
                if t.state.epoch % config.eval_every == 0 {
                    evals.push((t.state.epoch, evaluate(&[&t.model], ev, &EvalOptions::default())?));
                }
            }
            on_epoch(k, &t)?;
        }
        runs.push(RunSummary {
            history: t.state.history.clone(),
            epoch_smoothed: t.state.epoch_smoothed.clone(),
            evals,
        });
        models.push(t.model);
    }
    Ok(TrainOutcome {
        config: config.clone(),
        models,
        runs,
    })
}

/// Loads the data named by `config` and trains.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let (data, eval_data) = load_datasets(config)?;
    train_on(config, &data, eval_data.as_ref(), |_, _| Ok(()))
}
