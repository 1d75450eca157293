//! Downstream tasks: knowledge mapping, difficulty estimation and student
//! score prediction, each a small head on top of the QuesNet backbone.

pub mod metrics;
mod train;

pub use train::{evaluate_task, finetune_task, prepare_task, EpochRecord, Example, FinetuneOutcome, TaskData};

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Ablation, Config, FinetuneConfig};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::math::{Graph, Init, Linear, LstmCell, ParamId, Var};
use crate::model::QuesNet;
use crate::pretrain::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Knowledge,
    Difficulty,
    Score,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Knowledge, Task::Difficulty, Task::Score];

    pub fn name(self) -> &'static str {
        match self {
            Task::Knowledge => "knowledge",
            Task::Difficulty => "difficulty",
            Task::Score => "score",
        }
    }

    /// Validation metric used for early stopping.
    pub fn primary_metric(self) -> &'static str {
        match self {
            Task::Knowledge => "f1",
            Task::Difficulty => "mae",
            Task::Score => "auc",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Task::Difficulty)
    }

    /// True when `value` is at least as good as `target`.
    pub fn meets(self, value: f64, target: f64) -> bool {
        if self.higher_is_better() {
            value >= target
        } else {
            value <= target
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Task::Knowledge => "task.know",
            Task::Difficulty => "task.diff",
            Task::Score => "task.score",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::validation("task", format!("unknown task `{s}` (knowledge, difficulty, score)")))
    }
}

/// Partition of a 70/10/20 split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Valid,
    Test,
}

/// Deterministic partition of an id under `seed`.
pub fn split_part(id: &str, seed: u64) -> Part {
    let u = (fnv1a(id, seed.wrapping_add(0x5EED)) % 1_000_000) as f64 / 1e6;
    if u < 0.7 {
        Part::Train
    } else if u < 0.8 {
        Part::Valid
    } else {
        Part::Test
    }
}

/// Indices of the examples in each partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskSplit {
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>, seed: u64) -> Self {
        let mut s = TaskSplit::default();
        for (i, id) in ids.into_iter().enumerate() {
            match split_part(id, seed) {
                Part::Train => s.train.push(i),
                Part::Valid => s.valid.push(i),
                Part::Test => s.test.push(i),
            }
        }
        s
    }
}

/// Linear `N → labels` map giving one logit per knowledge label.
#[derive(Clone, Debug)]
pub struct KnowledgeHead {
    pub linear: Linear,
    pub labels: usize,
    pub threshold: f64,
}

impl KnowledgeHead {
    pub fn new(init: &mut Init<'_>, n: usize, labels: usize, threshold: f64) -> Self {
        KnowledgeHead {
            linear: Linear::new(init, Task::Knowledge.prefix(), n, labels),
            labels,
            threshold,
        }
    }

    pub fn logits(&self, g: &mut Graph<'_>, v_s: Var) -> Result<Var> {
        self.linear.forward(g, v_s)
    }

    /// Labels whose probability reaches `threshold`.
    pub fn decide(probs: &[f64], threshold: f64) -> Vec<usize> {
        probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(k, _)| k)
            .collect()
    }
}

/// `N → hidden → 1` with a tanh hidden layer; the logit's sigmoid is the
/// predicted difficulty.
#[derive(Clone, Debug)]
pub struct DifficultyHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl DifficultyHead {
    pub fn new(init: &mut Init<'_>, n: usize, hidden: usize) -> Self {
        let p = Task::Difficulty.prefix();
        DifficultyHead {
            hidden: Linear::new(init, &format!("{p}.l1"), n, hidden),
            out: Linear::new(init, &format!("{p}.l2"), hidden, 1),
        }
    }

    /// `[B × 1]` logits.
    pub fn logits(&self, g: &mut Graph<'_>, v_s: Var) -> Result<Var> {
        let h = self.hidden.forward(g, v_s)?;
        let h = g.tanh(h);
        self.out.forward(g, h)
    }
}

/// Previous-correctness input of the first step.
pub const FIRST_RESPONSE: f64 = 0.5;

/// LSTM over a student's attempts. Step `t` reads `[v^(s)(q_t) ; r_{t−1}]`
/// and predicts the probability that the answer to `q_t` is correct.
#[derive(Clone, Debug)]
pub struct ScoreModel {
    pub cell: LstmCell,
    pub h0: ParamId,
    pub c0: ParamId,
    pub out: Linear,
}

impl ScoreModel {
    pub fn new(init: &mut Init<'_>, n: usize, hidden: usize) -> Self {
        let p = Task::Score.prefix();
        ScoreModel {
            cell: LstmCell::new(init, &format!("{p}.lstm"), n + 1, hidden),
            h0: init.zeros(&format!("{p}.h0"), &[hidden]),
            c0: init.zeros(&format!("{p}.c0"), &[hidden]),
            out: Linear::new(init, &format!("{p}.out"), hidden, 1),
        }
    }

    /// Time-major step inputs `[T·B × (N+1)]` to `[T·B × 1]` logits. Padded
    /// steps keep the previous state.
    pub fn logits(&self, g: &mut Graph<'_>, steps: Var, lengths: &[usize]) -> Result<Var> {
        let batch = lengths.len();
        let rows = g.value(steps).rows();
        if batch == 0 || rows == 0 || rows % batch != 0 {
            return Err(Error::Usage("empty student batch".into()));
        }
        let len = rows / batch;
        let hsz = self.cell.hidden;
        let (wx, wh, b) = (g.param(self.cell.w_x), g.param(self.cell.w_h), g.param(self.cell.bias));
        let xw = g.matmul(steps, wx)?;
        let xw = g.add_row(xw, b)?;
        let (h0, c0) = (g.param(self.h0), g.param(self.c0));
        let h0 = g.repeat_rows(h0, batch)?;
        let c0 = g.repeat_rows(c0, batch)?;
        let mut hc = g.concat_cols(&[h0, c0])?;
        let mut hs = Vec::with_capacity(len);
        for t in 0..len {
            let gx = g.slice_rows(xw, t * batch, (t + 1) * batch)?;
            let h_prev = g.slice_cols(hc, 0, hsz)?;
            let c_prev = g.slice_cols(hc, hsz, 2 * hsz)?;
            let gh = g.matmul(h_prev, wh)?;
            let gates = g.add(gx, gh)?;
            let next = g.lstm_pointwise(gates, c_prev)?;
            let live: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            hc = if live.iter().all(|&m| m) {
                next
            } else {
                g.blend(next, hc, live)?
            };
            hs.push(g.slice_cols(hc, 0, hsz)?);
        }
        let all = g.concat_rows(&hs)?;
        self.out.forward(g, all)
    }
}

#[derive(Clone, Debug)]
pub enum TaskHead {
    Knowledge(KnowledgeHead),
    Difficulty(DifficultyHead),
    Score(ScoreModel),
}

/// A backbone with one task head whose parameters live in the backbone's
/// store under `task.*`.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub task: Task,
    pub backbone: QuesNet,
    pub head: TaskHead,
    pub ablation: Ablation,
}

impl FinetuneModel {
    /// Attaches a freshly initialized head. `labels` is the knowledge label
    /// count and is ignored by the other tasks.
    pub fn new(
        task: Task,
        mut backbone: QuesNet,
        labels: usize,
        cfg: &FinetuneConfig,
        ablation: &Ablation,
        seed: u64,
    ) -> Result<Self> {
        if backbone.store.ids().any(|id| backbone.store.name(id).starts_with("task.")) {
            return Err(Error::Usage("backbone already carries a task head".into()));
        }
        if task == Task::Knowledge && labels == 0 {
            return Err(Error::validation("knowledge", "no knowledge labels"));
        }
        let n = backbone.config.content_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A5C_0000_0000_0001);
        let mut init = Init {
            store: &mut backbone.store,
            rng: &mut rng,
        };
        let head = match task {
            Task::Knowledge => TaskHead::Knowledge(KnowledgeHead::new(&mut init, n, labels, cfg.threshold)),
            Task::Difficulty => TaskHead::Difficulty(DifficultyHead::new(&mut init, n, cfg.difficulty_hidden)),
            Task::Score => TaskHead::Score(ScoreModel::new(&mut init, n, cfg.score_hidden)),
        };
        Ok(FinetuneModel {
            task,
            backbone,
            head,
            ablation: *ablation,
        })
    }

    /// Task stored in a fine-tuned checkpoint, if any.
    pub fn task_of(ck: &Checkpoint) -> Option<Task> {
        Task::ALL.into_iter().find(|t| {
            let p = format!("{}.", t.prefix());
            ck.params.ids().any(|id| ck.params.name(id).starts_with(&p))
        })
    }

    /// Rebuilds a fine-tuned model saved by [`FinetuneModel::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let task = Self::task_of(ck).ok_or_else(|| Error::Checkpoint("checkpoint holds no task head".into()))?;
        let labels = match task {
            Task::Knowledge => {
                let id = ck
                    .params
                    .id("task.know.b")
                    .ok_or_else(|| Error::Checkpoint("parameter task.know.b missing".into()))?;
                ck.params.value(id).numel()
            }
            _ => 0,
        };
        let c = &ck.config;
        let backbone = QuesNet::new(&c.model, ck.vocab.len(), c.train.seed)?;
        let mut m = FinetuneModel::new(task, backbone, labels, &c.finetune, &c.ablation, c.train.seed)?;
        m.backbone.load_params(&ck.params)?;
        Ok(m)
    }

    /// Checkpoint of backbone and head; `config.finetune.threshold` records
    /// the knowledge threshold in use.
    pub fn checkpoint(&self, config: &Config, vocab: &Vocabulary, step: u64) -> Checkpoint {
        let mut config = config.clone();
        config.model = self.backbone.config.clone();
        config.ablation = self.ablation;
        if let TaskHead::Knowledge(h) = &self.head {
            config.finetune.threshold = h.threshold;
        }
        let mut params = self.backbone.store.clone();
        params.zero_grad();
        Checkpoint {
            vocab: vocab.clone(),
            params,
            rng: RngState {
                seed: config.train.seed,
                step,
            },
            config,
        }
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with("task.")
    }
}

/// Task-keyed metric values. Metrics that are undefined for the data (for
/// example PCC of a constant vector) are listed under `undefined` instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub undefined: BTreeMap<String, Vec<String>>,
}

impl MetricReport {
    pub fn insert(&mut self, task: &str, metric: &str, value: Option<f64>) {
        match value {
            Some(v) => {
                self.metrics.entry(task.into()).or_default().insert(metric.into(), v);
            }
            None => self.undefined.entry(task.into()).or_default().push(metric.into()),
        }
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.metrics.get(task)?.get(metric).copied()
    }

    pub fn merge(&mut self, other: MetricReport) {
        for (task, m) in other.metrics {
            self.metrics.entry(task).or_default().extend(m);
        }
        for (task, u) in other.undefined {
            self.undefined.entry(task).or_default().extend(u);
        }
    }

    /// Every value finite, probabilistic metrics in `[0, 1]`, PCC in `[−1, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (task, m) in &self.metrics {
            for (name, &v) in m {
                let ok = match name.as_str() {
                    "pcc" => (-1.0..=1.0).contains(&v),
                    "acc" | "precision" | "recall" | "f1" | "auc" | "doa" | "option_auc" => (0.0..=1.0).contains(&v),
                    _ => v.is_finite(),
                };
                if !ok {
                    return Err(Error::Numerical(format!("{task}.{name} = {v} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            field: "report".into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
