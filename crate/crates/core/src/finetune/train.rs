use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{metric_binary, metric_multilabel, metric_regression};
use super::{FinetuneModel, KnowledgeHead, MetricReport, Task, TaskHead, TaskSplit, FIRST_RESPONSE};
use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, Config};
use crate::corpus::{batch_iter, build_vocabulary, Corpus, EncodedToken, Vocabulary};
use crate::error::{Error, Result};
use crate::math::{sigmoid, Adam, AdamConfig, Graph, Tensor, Var};
use crate::model::{filter_tokens, QuesNet};
use crate::pretrain::step_seed;

const EVAL_BATCH: usize = 64;
const STUDENT_EVAL_BATCH: usize = 16;

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Knowledge { question: usize, labels: Vec<usize> },
    Difficulty { question: usize, value: f64 },
    /// A student's attempts in order: `(question, correct)`.
    Score { steps: Vec<(usize, bool)> },
}

/// Questions after the input-kind filter plus the examples of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: Task,
    /// Filtered tokens per corpus question; `None` when nothing is left.
    pub tokens: Vec<Option<Vec<EncodedToken>>>,
    pub examples: Vec<Example>,
    /// Question ids (knowledge, difficulty) or student ids (score).
    pub example_ids: Vec<String>,
    pub split: TaskSplit,
    /// Knowledge label count; zero for the other tasks.
    pub labels: usize,
}

impl TaskData {
    fn example_len(&self, e: &Example) -> usize {
        match e {
            Example::Knowledge { question, .. } | Example::Difficulty { question, .. } => {
                self.tokens[*question].as_ref().map_or(0, Vec::len)
            }
            Example::Score { steps } => steps.len(),
        }
    }
}

/// Builds the labeled examples of `task` and their 70/10/20 split.
pub fn prepare_task(
    task: Task,
    corpus: &Corpus,
    vocab: &Vocabulary,
    ablation: &Ablation,
    seed: u64,
) -> Result<TaskData> {
    let tokens: Vec<Option<Vec<EncodedToken>>> = corpus
        .questions
        .iter()
        .map(|q| filter_tokens(&vocab.encode(q).tokens, ablation))
        .collect();
    let mut examples = Vec::new();
    let mut ids = Vec::new();
    let mut labels = 0;
    match task {
        Task::Knowledge => {
            for (i, q) in corpus.questions.iter().enumerate() {
                let Some(k) = &q.knowledge else { continue };
                if k.is_empty() {
                    return Err(Error::validation("knowledge", format!("question {} has an empty label set", q.id)));
                }
                if tokens[i].is_none() {
                    continue;
                }
                labels = labels.max(k.iter().max().map_or(0, |m| m + 1));
                let mut k = k.clone();
                k.sort_unstable();
                k.dedup();
                examples.push(Example::Knowledge { question: i, labels: k });
                ids.push(q.id.clone());
            }
        }
        Task::Difficulty => {
            for (i, q) in corpus.questions.iter().enumerate() {
                let Some(d) = q.difficulty else { continue };
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::validation("difficulty", format!("question {} has difficulty {d}", q.id)));
                }
                if tokens[i].is_none() {
                    continue;
                }
                examples.push(Example::Difficulty { question: i, value: d });
                ids.push(q.id.clone());
            }
        }
        Task::Score => {
            let index = corpus.question_index();
            for s in &corpus.students {
                let mut steps = Vec::with_capacity(s.seq.len());
                for (qid, correct) in &s.seq {
                    let &q = index
                        .get(qid.as_str())
                        .ok_or_else(|| Error::validation("students", format!("{} answers unknown question {qid}", s.id)))?;
                    if tokens[q].is_some() {
                        steps.push((q, *correct));
                    }
                }
                if !steps.is_empty() {
                    examples.push(Example::Score { steps });
                    ids.push(s.id.clone());
                }
            }
        }
    }
    if examples.is_empty() {
        let what = match task {
            Task::Knowledge => "no question carries knowledge labels",
            Task::Difficulty => "no question carries a difficulty label",
            Task::Score => "no student records",
        };
        return Err(Error::validation(task.name(), what));
    }
    let split = TaskSplit::from_ids(ids.iter().map(String::as_str), seed);
    for (part, v) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if v.is_empty() {
            return Err(Error::validation(
                "split",
                format!("{} {} examples leave the {part} partition empty", examples.len(), task.name()),
            ));
        }
    }
    Ok(TaskData {
        task,
        tokens,
        examples,
        example_ids: ids,
        split,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation value of the task's primary metric.
    pub valid: f64,
}

pub struct FinetuneOutcome {
    pub model: FinetuneModel,
    pub vocab: Vocabulary,
    /// Test-partition metrics of the restored best model.
    pub report: MetricReport,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// First epoch whose validation metric met `finetune.target`.
    pub epochs_to_target: Option<usize>,
    pub steps: u64,
    pub test_ids: Vec<String>,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, config: &Config) -> Checkpoint {
        self.model.checkpoint(config, &self.vocab, self.steps)
    }
}

/// Fine-tunes `task` from a pre-trained checkpoint, or from a random
/// backbone when `checkpoint` is `None`. Early-stops on the validation
/// metric, restores the best epoch and reports test metrics.
pub fn finetune_task(
    task: Task,
    corpus: &Corpus,
    checkpoint: Option<&Checkpoint>,
    config: &Config,
) -> Result<FinetuneOutcome> {
    let (backbone, vocab) = match checkpoint {
        Some(ck) => (ck.model()?, ck.vocab.clone()),
        None => {
            let vocab = build_vocabulary(corpus, config.embedding.min_count);
            (QuesNet::new(&config.model, vocab.len(), config.train.seed)?, vocab)
        }
    };
    let seed = config.train.seed;
    let data = prepare_task(task, corpus, &vocab, &config.ablation, seed)?;
    let ft = &config.finetune;
    let mut model = FinetuneModel::new(task, backbone, data.labels, ft, &config.ablation, seed)?;
    let trainable: Vec<bool> = model
        .backbone
        .store
        .ids()
        .map(|id| !ft.freeze_backbone || !QuesNet::is_backbone(model.backbone.store.name(id)))
        .collect();
    let mut adam = Adam::new(AdamConfig {
        lr: ft.lr,
        clip_norm: (config.train.clip_norm > 0.0).then_some(config.train.clip_norm),
        ..AdamConfig::default()
    });
    let batch_size = if task == Task::Score { ft.student_batch } else { ft.batch_size };
    let lengths: Vec<usize> = data.split.train.iter().map(|&i| data.example_len(&data.examples[i])).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::math::ParamStore)> = None;
    let mut since_best = 0;
    let mut epochs_to_target = None;
    for epoch in 1..=ft.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in batch_iter(&lengths, batch_size, Some(seed.wrapping_add(epoch as u64))) {
            let items: Vec<usize> = batch.items.iter().map(|&k| data.split.train[k]).collect();
            let (loss, grads) = {
                let mut g = Graph::new(&model.backbone.store);
                if ft.dropout > 0.0 {
                    g = g.training(step_seed(seed, adam.steps()));
                }
                let loss = batch_loss(&mut g, &model, &data, &items, ft.dropout)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    let ids: Vec<&str> = items.iter().map(|&i| data.example_ids[i].as_str()).collect();
                    return Err(Error::Numerical(format!("{task} loss {value} on {ids:?}")));
                }
                (value, g.backward(loss)?)
            };
            model.backbone.store.zero_grad();
            model.backbone.store.accumulate(&grads);
            adam.step_where(&mut model.backbone.store, |id| trainable[id.index()]);
            loss_sum += loss;
            batches += 1;
        }
        let valid = primary(&model, &data, &data.split.valid)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            valid,
        });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => {
                if task.higher_is_better() {
                    valid > *b
                } else {
                    valid < *b
                }
            }
        };
        if improved {
            best = Some((valid, epoch, model.backbone.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(t) = ft.target {
            if task.meets(valid, t) {
                epochs_to_target = Some(epoch);
                break;
            }
        }
        if since_best >= ft.patience {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.backbone.store = store;
            e
        }
        None => 0,
    };
    model.backbone.store.zero_grad();
    if ft.tune_threshold {
        if let Some(t) = tune_threshold(&model, &data)? {
            if let TaskHead::Knowledge(h) = &mut model.head {
                h.threshold = t;
            }
        }
    }
    let report = evaluate_task(&model, &data, &data.split.test)?;
    let test_ids = data.split.test.iter().map(|&i| data.example_ids[i].clone()).collect();
    Ok(FinetuneOutcome {
        model,
        vocab,
        report,
        history,
        best_epoch,
        epochs_to_target,
        steps: adam.steps(),
        test_ids,
    })
}

fn question_seqs<'a>(data: &'a TaskData, items: &[usize]) -> Vec<&'a [EncodedToken]> {
    items
        .iter()
        .map(|&i| match &data.examples[i] {
            Example::Knowledge { question, .. } | Example::Difficulty { question, .. } => {
                data.tokens[*question].as_deref().expect("examples have tokens")
            }
            Example::Score { .. } => unreachable!("question task example"),
        })
        .collect()
}

fn batch_loss(g: &mut Graph<'_>, model: &FinetuneModel, data: &TaskData, items: &[usize], dropout: f64) -> Result<Var> {
    match &model.head {
        TaskHead::Knowledge(h) => {
            let seqs = question_seqs(data, items);
            let rep = model.backbone.represent(g, &seqs, dropout)?;
            let logits = h.logits(g, rep.sentence.vector)?;
            let mut targets = vec![0.0; items.len() * h.labels];
            for (b, &i) in items.iter().enumerate() {
                if let Example::Knowledge { labels, .. } = &data.examples[i] {
                    for &k in labels.iter().filter(|&&k| k < h.labels) {
                        targets[b * h.labels + k] = 1.0;
                    }
                }
            }
            let bce = g.bce_with_logits(logits, targets)?;
            Ok(g.mean(bce))
        }
        TaskHead::Difficulty(h) => {
            let seqs = question_seqs(data, items);
            let rep = model.backbone.represent(g, &seqs, dropout)?;
            let logits = h.logits(g, rep.sentence.vector)?;
            let pred = g.sigmoid(logits);
            let truth: Vec<f64> = items
                .iter()
                .map(|&i| match data.examples[i] {
                    Example::Difficulty { value, .. } => value,
                    _ => unreachable!("difficulty example"),
                })
                .collect();
            g.mse(pred, &Tensor::new(vec![items.len(), 1], truth)?)
        }
        TaskHead::Score(_) => {
            let (logits, labels) = score_logits(g, model, data, items, dropout)?;
            let y = labels.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
            let bce = g.bce_with_logits(logits, y)?;
            Ok(g.mean(bce))
        }
    }
}

/// Logits of every real step of the students `items`, in student-major
/// order, with their outcomes.
fn score_logits(
    g: &mut Graph<'_>,
    model: &FinetuneModel,
    data: &TaskData,
    items: &[usize],
    dropout: f64,
) -> Result<(Var, Vec<bool>)> {
    let TaskHead::Score(head) = &model.head else {
        return Err(Error::Usage("not a score model".into()));
    };
    let students: Vec<&[(usize, bool)]> = items
        .iter()
        .map(|&i| match &data.examples[i] {
            Example::Score { steps } => steps.as_slice(),
            _ => unreachable!("score example"),
        })
        .collect();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &students {
        for &(q, _) in s.iter() {
            let next = rows.len();
            rows.entry(q).or_insert(next);
        }
    }
    let mut order = vec![0; rows.len()];
    for (&q, &r) in &rows {
        order[r] = q;
    }
    let seqs: Vec<&[EncodedToken]> = order
        .iter()
        .map(|&q| data.tokens[q].as_deref().expect("steps have tokens"))
        .collect();
    let rep = model.backbone.represent(g, &seqs, dropout)?;
    let n = model.backbone.config.content_dim();
    let zero = g.input(Tensor::zeros(&[1, n]));
    let batch = students.len();
    let lengths: Vec<usize> = students.iter().map(|s| s.len()).collect();
    let len = *lengths.iter().max().expect("non-empty batch");
    let mut picks = Vec::with_capacity(len * batch);
    let mut prev = Vec::with_capacity(len * batch);
    for t in 0..len {
        for s in &students {
            if t < s.len() {
                picks.push((0, rows[&s[t].0]));
                prev.push(if t == 0 {
                    FIRST_RESPONSE
                } else if s[t - 1].1 {
                    1.0
                } else {
                    0.0
                });
            } else {
                picks.push((1, 0));
                prev.push(0.0);
            }
        }
    }
    let v = g.assemble_rows(&[rep.sentence.vector, zero], picks)?;
    let r = g.input(Tensor::new(vec![len * batch, 1], prev)?);
    let steps = g.concat_cols(&[v, r])?;
    let logits = head.logits(g, steps, &lengths)?;
    let mut real = Vec::new();
    let mut labels = Vec::new();
    for (b, s) in students.iter().enumerate() {
        for (t, &(_, c)) in s.iter().enumerate() {
            real.push(t * batch + b);
            labels.push(c);
        }
    }
    Ok((g.gather_rows(logits, real)?, labels))
}

enum Predictions {
    /// Per-question label probabilities and truth sets.
    Knowledge(Vec<Vec<f64>>, Vec<Vec<usize>>),
    Difficulty(Vec<f64>, Vec<f64>),
    Score(Vec<f64>, Vec<bool>),
}

fn predict(model: &FinetuneModel, data: &TaskData, items: &[usize]) -> Result<Predictions> {
    match &model.head {
        TaskHead::Knowledge(h) => {
            let mut probs = Vec::with_capacity(items.len());
            for chunk in items.chunks(EVAL_BATCH) {
                let mut g = Graph::new(&model.backbone.store);
                let seqs = question_seqs(data, chunk);
                let rep = model.backbone.represent(&mut g, &seqs, 0.0)?;
                let logits = h.logits(&mut g, rep.sentence.vector)?;
                probs.extend(g.value(logits).data().chunks(h.labels).map(|r| r.iter().map(|&z| sigmoid(z)).collect()));
            }
            let truth = items
                .iter()
                .map(|&i| match &data.examples[i] {
                    Example::Knowledge { labels, .. } => labels.clone(),
                    _ => unreachable!("knowledge example"),
                })
                .collect();
            Ok(Predictions::Knowledge(probs, truth))
        }
        TaskHead::Difficulty(h) => {
            let mut preds = Vec::with_capacity(items.len());
            for chunk in items.chunks(EVAL_BATCH) {
                let mut g = Graph::new(&model.backbone.store);
                let seqs = question_seqs(data, chunk);
                let rep = model.backbone.represent(&mut g, &seqs, 0.0)?;
                let logits = h.logits(&mut g, rep.sentence.vector)?;
                preds.extend(g.value(logits).data().iter().map(|&z| sigmoid(z)));
            }
            let truth = items
                .iter()
                .map(|&i| match data.examples[i] {
                    Example::Difficulty { value, .. } => value,
                    _ => unreachable!("difficulty example"),
                })
                .collect();
            Ok(Predictions::Difficulty(preds, truth))
        }
        TaskHead::Score(_) => {
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for chunk in items.chunks(STUDENT_EVAL_BATCH) {
                let mut g = Graph::new(&model.backbone.store);
                let (logits, l) = score_logits(&mut g, model, data, chunk, 0.0)?;
                probs.extend(g.value(logits).data().iter().map(|&z| sigmoid(z)));
                labels.extend(l);
            }
            Ok(Predictions::Score(probs, labels))
        }
    }
}

fn knowledge_report(report: &mut MetricReport, probs: &[Vec<f64>], truth: &[Vec<usize>], threshold: f64) -> Result<()> {
    let preds: Vec<Vec<usize>> = probs.iter().map(|p| KnowledgeHead::decide(p, threshold)).collect();
    let m = metric_multilabel(&preds, truth)?;
    let t = Task::Knowledge.name();
    report.insert(t, "acc", Some(m.acc));
    report.insert(t, "precision", Some(m.precision));
    report.insert(t, "recall", Some(m.recall));
    report.insert(t, "f1", Some(m.f1));
    Ok(())
}

/// Test or validation metrics of the examples `items`.
pub fn evaluate_task(model: &FinetuneModel, data: &TaskData, items: &[usize]) -> Result<MetricReport> {
    if model.task != data.task {
        return Err(Error::validation(
            "task",
            format!("{} model evaluated on {} data", model.task, data.task),
        ));
    }
    if items.is_empty() {
        return Err(Error::validation("split", "no examples to evaluate"));
    }
    let mut report = MetricReport::default();
    match predict(model, data, items)? {
        Predictions::Knowledge(probs, truth) => {
            let threshold = match &model.head {
                TaskHead::Knowledge(h) => h.threshold,
                _ => unreachable!("knowledge head"),
            };
            knowledge_report(&mut report, &probs, &truth, threshold)?;
        }
        Predictions::Difficulty(preds, truth) => {
            let m = metric_regression(&preds, &truth)?;
            let t = Task::Difficulty.name();
            report.insert(t, "mae", Some(m.mae));
            report.insert(t, "rmse", Some(m.rmse));
            report.insert(t, "doa", m.doa);
            report.insert(t, "pcc", m.pcc);
        }
        Predictions::Score(probs, labels) => {
            let m = metric_binary(&probs, &labels)?;
            let t = Task::Score.name();
            report.insert(t, "acc", Some(m.acc));
            report.insert(t, "auc", m.auc);
            report.insert(t, "mae", Some(m.mae));
            report.insert(t, "rmse", Some(m.rmse));
        }
    }
    report.validate()?;
    Ok(report)
}

fn primary(model: &FinetuneModel, data: &TaskData, items: &[usize]) -> Result<f64> {
    let report = evaluate_task(model, data, items)?;
    let task = model.task;
    report.get(task.name(), task.primary_metric()).ok_or_else(|| {
        Error::validation(
            "split",
            format!("validation {} is undefined for this partition", task.primary_metric()),
        )
    })
}

/// Threshold in `{0.05, 0.10, …, 0.95}` maximizing validation F1; ties keep
/// the one closest to 0.5.
fn tune_threshold(model: &FinetuneModel, data: &TaskData) -> Result<Option<f64>> {
    let Predictions::Knowledge(probs, truth) = predict(model, data, &data.split.valid)? else {
        return Ok(None);
    };
    let mut best: Option<(f64, f64)> = None;
    for k in 1..20 {
        let t = k as f64 * 0.05;
        let mut r = MetricReport::default();
        knowledge_report(&mut r, &probs, &truth, t)?;
        let f1 = r.get(Task::Knowledge.name(), "f1").unwrap_or(0.0);
        let better = match best {
            None => true,
            Some((bf, bt)) => f1 > bf || (f1 == bf && (t - 0.5).abs() < (bt - 0.5).abs()),
        };
        if better {
            best = Some((f1, t));
        }
    }
    Ok(best.map(|(_, t)| t))
}
