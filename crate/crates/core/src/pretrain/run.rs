use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{batch_loss, hlm_terms, option_logits, pretrain_step, prepare_items, PretrainItem};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Ablation, Config};
use crate::corpus::{batch_iter, build_vocabulary, Corpus, EncodedQuestion, EncodedToken, Vocabulary};
use crate::error::{Error, Result};
use crate::finetune::metrics::auc_rank;
use crate::math::{sigmoid, Adam, AdamConfig, Graph, ParamStore};
use crate::model::QuesNet;

const EVAL_BATCH: usize = 64;

/// FNV-1a hash of `seed` followed by the bytes of `key`.
pub(crate) fn fnv1a(key: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic hash split: true for roughly `fraction` of ids.
pub fn heldout_split(id: &str, seed: u64, fraction: f64) -> bool {
    (fnv1a(id, seed) % 1_000_000) as f64 / 1e6 < fraction
}

/// Vocabulary, encoded questions and the pre-training train/held-out items.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub encoded: Vec<EncodedQuestion>,
    pub train: Vec<PretrainItem>,
    pub heldout: Vec<PretrainItem>,
}

pub fn prepare_corpus(corpus: &Corpus, config: &Config, vocab: Option<Vocabulary>) -> Result<PreparedCorpus> {
    let vocab = vocab.unwrap_or_else(|| build_vocabulary(corpus, config.embedding.min_count));
    let encoded: Vec<EncodedQuestion> = corpus.questions.iter().map(|q| vocab.encode(q)).collect();
    let items = prepare_items(&encoded, &config.ablation);
    let (heldout, train): (Vec<_>, Vec<_>) = items
        .into_iter()
        .partition(|it| heldout_split(&it.id, config.train.seed, config.train.holdout));
    if train.is_empty() {
        return Err(Error::Usage("no questions left for pre-training".into()));
    }
    Ok(PreparedCorpus {
        vocab,
        encoded,
        train,
        heldout,
    })
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_low: f64,
    pub l_high: f64,
    pub l: f64,
    pub wall_time: f64,
}

/// Held-out quality of a pre-trained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainEval {
    /// Mean cross-entropy of word positions, in nats.
    pub word_cross_entropy: Option<f64>,
    pub word_positions: usize,
    /// Option discrimination AUC (correct vs. incorrect options).
    pub option_auc: Option<f64>,
    pub options: usize,
}

pub struct PretrainOutcome {
    pub model: QuesNet,
    pub history: Vec<MetricsRecord>,
    pub checkpoint: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "pretrain.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains for `config.train.epochs` epochs. With `out_dir`, writes one
/// checkpoint per epoch under `checkpoints/`, the final checkpoint and the
/// metrics file. `embedding` supplies pre-trained `emb.*` parameters.
pub fn pretrain_run(
    data: &PreparedCorpus,
    config: &Config,
    embedding: Option<&ParamStore>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut model = QuesNet::new(&config.model, data.vocab.len(), config.train.seed)?;
    if let Some(emb) = embedding {
        let emb_only = filter_store(emb, |n| n.starts_with("emb."));
        let copied = model.store.copy_matching_from(&emb_only);
        if copied == 0 {
            return Err(Error::Checkpoint("embedding checkpoint holds no matching emb.* parameters".into()));
        }
    }
    let mut adam = Adam::new(AdamConfig {
        lr: config.train.lr,
        clip_norm: (config.train.clip_norm > 0.0).then_some(config.train.clip_norm),
        ..AdamConfig::default()
    });
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(METRICS_FILE);
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let lengths: Vec<usize> = data.train.iter().map(|it| it.tokens.len()).collect();
    let clock = Instant::now();
    let mut history = Vec::new();
    let mut last = None;
    for epoch in 1..=config.train.epochs {
        let shuffle = config.train.seed.wrapping_add(epoch as u64);
        for batch in batch_iter(&lengths, config.train.batch_size, Some(shuffle)) {
            let items: Vec<&PretrainItem> = batch.items.iter().map(|&i| &data.train[i]).collect();
            let parts = pretrain_step(&mut model, &mut adam, &items, &config.ablation, &config.train)?;
            let rec = MetricsRecord {
                step: adam.steps(),
                epoch,
                l_low: parts.l_low,
                l_high: parts.l_high,
                l: parts.l,
                wall_time: clock.elapsed().as_secs_f64(),
            };
            if let Some((f, p)) = metrics.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| Error::io(&*p, e))?;
            }
            history.push(rec);
        }
        if let Some(dir) = out_dir {
            let ck = checkpoint_of(&model, config, &data.vocab, adam.steps());
            let p = dir.join("checkpoints").join(format!("epoch-{epoch:03}.ckpt"));
            ck.save(&p)?;
            last = Some(ck);
        }
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let ck = last.unwrap_or_else(|| checkpoint_of(&model, config, &data.vocab, adam.steps()));
            let p = dir.join(FINAL_CHECKPOINT);
            ck.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(PretrainOutcome {
        model,
        history,
        checkpoint,
    })
}

fn checkpoint_of(model: &QuesNet, config: &Config, vocab: &Vocabulary, step: u64) -> Checkpoint {
    let mut params = model.store.clone();
    params.zero_grad();
    Checkpoint {
        config: config.clone(),
        vocab: vocab.clone(),
        params,
        rng: RngState {
            seed: config.train.seed,
            step,
        },
    }
}

/// Copy of the parameters of `store` whose names pass `keep`.
pub(crate) fn filter_store(store: &ParamStore, keep: impl Fn(&str) -> bool) -> ParamStore {
    let mut out = ParamStore::new();
    for id in store.ids() {
        if keep(store.name(id)) {
            out.add(store.name(id), store.value(id).clone());
        }
    }
    out
}

/// Held-out word cross-entropy and option AUC in evaluation mode.
pub fn evaluate_pretraining(model: &QuesNet, items: &[PretrainItem], ablation: &Ablation) -> Result<PretrainEval> {
    let mut ce_sum = 0.0;
    let mut words = 0;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in items.chunks(EVAL_BATCH) {
        let refs: Vec<&PretrainItem> = chunk.iter().collect();
        let seqs: Vec<&[EncodedToken]> = chunk.iter().map(|it| it.tokens.as_slice()).collect();
        let mut g = Graph::new(&model.store);
        let rep = model.represent(&mut g, &seqs, 0.0)?;
        if ablation.enable_text {
            let terms = hlm_terms(&mut g, model, &rep.state, &seqs)?;
            if let Some((v, owners)) = terms.word {
                ce_sum += g.value(v).sum();
                words += owners.len();
            }
        }
        if let Some(o) = option_logits(&mut g, model, rep.sentence.vector, &refs)? {
            scores.extend(g.value(o.logits).data().iter().map(|&z| sigmoid(z)));
            labels.extend(o.labels);
        }
    }
    Ok(PretrainEval {
        word_cross_entropy: (words > 0).then(|| ce_sum / words as f64),
        word_positions: words,
        option_auc: auc_rank(&scores, &labels),
        options: scores.len(),
    })
}

/// Loss of a fixed batch in evaluation mode (used to verify checkpoints).
pub fn fixed_batch_loss(model: &QuesNet, items: &[&PretrainItem], config: &Config) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let train = crate::config::TrainConfig {
        dropout: 0.0,
        ..config.train.clone()
    };
    Ok(batch_loss(&mut g, model, items, &config.ablation, &train)?.parts.l)
}
