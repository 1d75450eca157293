//! Hierarchical pre-training: the holed language model (low level) and the
//! option-discrimination objective (high level).

mod run;

pub use run::{
    evaluate_pretraining, fixed_batch_loss, heldout_split, prepare_corpus, pretrain_run, MetricsRecord, PreparedCorpus,
    PretrainEval, PretrainOutcome, FINAL_CHECKPOINT, METRICS_FILE,
};
pub(crate) use run::fnv1a;

use crate::config::{Ablation, ModelConfig, TrainConfig};
use crate::corpus::{EncodedOption, EncodedQuestion, EncodedToken, PAD};
use crate::encoder::{BiLstmStack, EncoderState, BACKWARD, FORWARD};
use crate::error::{Error, Result};
use crate::math::{Adam, Graph, Init, Linear, Var};
use crate::model::{filter_tokens, QuesNet};

/// Output modules mapping a hole context `h_¬t` to each input kind.
#[derive(Clone, Debug)]
pub struct HlmHeads {
    /// `2·d_h → |V|` word logits.
    pub word: Linear,
    /// `2·d_h → N_e`, decoded by the image decoder.
    pub image: Linear,
    /// `2·d_h → N_e`, decoded by the meta decoder.
    pub meta: Linear,
}

impl HlmHeads {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig, vocab: usize) -> Self {
        let n = cfg.content_dim();
        HlmHeads {
            word: Linear::new(init, "hlm.word", n, vocab),
            image: Linear::new(init, "hlm.img", n, cfg.embed_dim),
            meta: Linear::new(init, "hlm.meta", n, cfg.embed_dim),
        }
    }
}

/// Option text encoder (one bidirectional LSTM layer over the shared word
/// table) and the discriminator `D([v^(s); v_opt]) → logit`.
#[derive(Clone, Debug)]
pub struct OptionScorer {
    pub encoder: BiLstmStack,
    pub hidden: Linear,
    pub out: Linear,
}

impl OptionScorer {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let n = cfg.content_dim();
        OptionScorer {
            encoder: BiLstmStack::new(init, "opt.enc", cfg.embed_dim, cfg.hidden, 1),
            hidden: Linear::new(init, "disc.l1", 2 * n, cfg.disc_hidden),
            out: Linear::new(init, "disc.l2", cfg.disc_hidden, 1),
        }
    }
}

/// A question ready for pre-training: tokens after the input-kind filter
/// and options with empty texts replaced by a padding word.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainItem {
    pub id: String,
    pub tokens: Vec<EncodedToken>,
    pub options: Vec<EncodedOption>,
}

/// Applies the input-kind filter; questions left without tokens are dropped.
pub fn prepare_items(questions: &[EncodedQuestion], ablation: &Ablation) -> Vec<PretrainItem> {
    questions
        .iter()
        .filter_map(|q| {
            let tokens = filter_tokens(&q.tokens, ablation)?;
            let options = q
                .options
                .iter()
                .map(|o| EncodedOption {
                    words: if o.words.is_empty() { vec![PAD] } else { o.words.clone() },
                    correct: o.correct,
                })
                .collect();
            Some(PretrainItem {
                id: q.id.clone(),
                tokens,
                options,
            })
        })
        .collect()
}

/// Hole contexts for every position, `[T·B × 2·d_h]`: row `t·B + b` is
/// `[→h_{t−1} ; ←h_{t+1}]` from the top layer, with the learned start and
/// end states at the boundaries.
pub fn hlm_context(g: &mut Graph<'_>, model: &QuesNet, state: &EncoderState) -> Result<Var> {
    let (b, len) = (state.batch(), state.max_len);
    let start = model.content.top_initial(g, FORWARD, b)?;
    let end = model.content.top_initial(g, BACKWARD, b)?;
    let (fwd, bwd) = (state.top(FORWARD), state.top(BACKWARD));
    let (left, right) = if len == 1 {
        (start, end)
    } else {
        let shifted = g.slice_rows(fwd, 0, (len - 1) * b)?;
        let left = g.concat_rows(&[start, shifted])?;
        let shifted = g.slice_rows(bwd, b, len * b)?;
        let right = g.concat_rows(&[shifted, end])?;
        (left, right)
    };
    g.concat_cols(&[left, right])
}

/// Hole context of position `t` for every batch element, `[B × 2·d_h]`.
pub fn hlm_context_at(g: &mut Graph<'_>, model: &QuesNet, state: &EncoderState, t: usize) -> Result<Var> {
    if t >= state.max_len {
        return Err(Error::Index(format!("position {t} of {}", state.max_len)));
    }
    let b = state.batch();
    let ctx = hlm_context(g, model, state)?;
    g.slice_rows(ctx, t * b, (t + 1) * b)
}

/// Per-position HLM losses of one batch, grouped by input kind.
#[derive(Clone, Debug, Default)]
pub struct HlmTerms {
    /// `(loss vector, owning batch element)` per kind.
    pub word: Option<(Var, Vec<usize>)>,
    pub image: Option<(Var, Vec<usize>)>,
    pub meta: Option<(Var, Vec<usize>)>,
}

impl HlmTerms {
    pub fn positions(&self) -> usize {
        [&self.word, &self.image, &self.meta]
            .iter()
            .map(|t| t.as_ref().map_or(0, |(_, o)| o.len()))
            .sum()
    }
}

/// Predicts every real position from its hole context: cross-entropy for
/// words and meta categories, mean squared pixel error for images.
pub fn hlm_terms(g: &mut Graph<'_>, model: &QuesNet, state: &EncoderState, seqs: &[&[EncodedToken]]) -> Result<HlmTerms> {
    let b = state.batch();
    let ctx = hlm_context(g, model, state)?;
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    let mut owners = [Vec::new(), Vec::new(), Vec::new()];
    let mut word_targets = Vec::new();
    let mut meta_targets = Vec::new();
    let mut pixels: Vec<f64> = Vec::new();
    for t in 0..state.max_len {
        for (i, s) in seqs.iter().enumerate() {
            let Some(tok) = s.get(t) else { continue };
            let k = match tok {
                EncodedToken::Word(w) => {
                    word_targets.push(*w);
                    0
                }
                EncodedToken::Image(px) => {
                    pixels.extend_from_slice(px);
                    1
                }
                EncodedToken::Meta(c) => {
                    meta_targets.push(*c);
                    2
                }
            };
            rows[k].push(t * b + i);
            owners[k].push(i);
        }
    }
    let mut terms = HlmTerms::default();
    let [wr, ir, mr] = rows;
    let [wo, io, mo] = owners;
    if !wr.is_empty() {
        let h = g.gather_rows(ctx, wr)?;
        let logits = model.hlm.word.forward(g, h)?;
        terms.word = Some((g.cross_entropy_rows(logits, word_targets)?, wo));
    }
    if !ir.is_empty() {
        let n = ir.len();
        let h = g.gather_rows(ctx, ir)?;
        let z = model.hlm.image.forward(g, h)?;
        let recon = model.embedder.image.decode(g, z)?;
        let target = crate::math::Tensor::new(vec![n, model.embedder.image.pixels()], pixels)?;
        terms.image = Some((g.mse_rows(recon, &target)?, io));
    }
    if !mr.is_empty() {
        let h = g.gather_rows(ctx, mr)?;
        let z = model.hlm.meta.forward(g, h)?;
        let logits = model.embedder.meta.decode(g, z)?;
        terms.meta = Some((g.cross_entropy_rows(logits, meta_targets)?, mo));
    }
    Ok(terms)
}

/// Discriminator logits for every option of the batch, `[n_opt × 1]`, with
/// the owning batch element and label of each.
pub struct OptionLogits {
    pub logits: Var,
    pub owners: Vec<usize>,
    pub labels: Vec<bool>,
}

pub fn option_logits(g: &mut Graph<'_>, model: &QuesNet, v_s: Var, items: &[&PretrainItem]) -> Result<Option<OptionLogits>> {
    let mut texts: Vec<&[usize]> = Vec::new();
    let mut owners = Vec::new();
    let mut labels = Vec::new();
    for (i, it) in items.iter().enumerate() {
        for o in &it.options {
            texts.push(&o.words);
            owners.push(i);
            labels.push(o.correct);
        }
    }
    if texts.is_empty() {
        return Ok(None);
    }
    let n = texts.len();
    let lengths: Vec<usize> = texts.iter().map(|t| t.len().max(1)).collect();
    let len = *lengths.iter().max().expect("non-empty");
    let mut ids = Vec::with_capacity(len * n);
    for t in 0..len {
        for w in &texts {
            ids.push(w.get(t).copied().unwrap_or(PAD));
        }
    }
    if let Some(&bad) = ids.iter().find(|&&w| w >= model.vocab_size) {
        return Err(Error::Index(format!("option word id {bad} for vocabulary of {}", model.vocab_size)));
    }
    let table = g.param(model.embedder.word.table);
    let x = g.gather_rows(table, ids)?;
    let state = model.options.encoder.encode(g, x, &lengths, 0.0)?;
    let last: Vec<usize> = lengths.iter().enumerate().map(|(j, &l)| (l - 1) * n + j).collect();
    let fwd = g.gather_rows(state.top(FORWARD), last)?;
    let bwd = g.gather_rows(state.top(BACKWARD), (0..n).collect())?;
    let q = g.gather_rows(v_s, owners.clone())?;
    let input = g.concat_cols(&[q, fwd, bwd])?;
    let h = model.options.hidden.forward(g, input)?;
    let h = g.leaky_relu(h, model.config.leaky_slope);
    let logits = model.options.out.forward(g, h)?;
    Ok(Some(OptionLogits { logits, owners, labels }))
}

/// Mean binary cross-entropy of option logits against correctness labels.
pub fn option_bce(g: &mut Graph<'_>, logits: Var, labels: &[bool]) -> Result<Var> {
    let y: Vec<f64> = labels.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let l = g.bce_with_logits(logits, y)?;
    g.weighted_sum(l, vec![1.0 / labels.len() as f64; labels.len()])
}

/// Values of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_low: f64,
    pub l_high: f64,
    pub l: f64,
}

/// Loss graph of one batch: `L = L_low + L_high` with disabled terms absent.
pub struct BatchLoss {
    pub total: Var,
    pub parts: LossParts,
}

/// `L_low`: mean over real positions (or the per-question sum averaged over
/// the batch with `sum_low_loss`). `L_high`: per-question mean option BCE,
/// averaged over the questions of the batch that have options.
pub fn batch_loss(
    g: &mut Graph<'_>,
    model: &QuesNet,
    items: &[&PretrainItem],
    ablation: &Ablation,
    train: &TrainConfig,
) -> Result<BatchLoss> {
    let seqs: Vec<&[EncodedToken]> = items.iter().map(|it| it.tokens.as_slice()).collect();
    let rep = model.represent(g, &seqs, train.dropout)?;
    let b = items.len() as f64;
    let mut total: Option<Var> = None;
    let mut parts = LossParts::default();
    let mut add = |g: &mut Graph<'_>, v: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
        Ok(())
    };
    if ablation.enable_low {
        let terms = hlm_terms(g, model, &rep.state, &seqs)?;
        let n = terms.positions() as f64;
        let w = if train.sum_low_loss { 1.0 / b } else { 1.0 / n };
        let mut low: Option<Var> = None;
        for (v, owners) in [terms.word, terms.image, terms.meta].into_iter().flatten() {
            let s = g.weighted_sum(v, vec![w; owners.len()])?;
            low = Some(match low {
                Some(l) => g.add(l, s)?,
                None => s,
            });
        }
        if let Some(low) = low {
            parts.l_low = g.value(low).item();
            add(g, low)?;
        }
    }
    if ablation.enable_high {
        if let Some(opt) = option_logits(g, model, rep.sentence.vector, items)? {
            let mut per_q = vec![0usize; items.len()];
            for &o in &opt.owners {
                per_q[o] += 1;
            }
            let y: Vec<f64> = opt.labels.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
            let l = g.bce_with_logits(opt.logits, y)?;
            let with_options = per_q.iter().filter(|&&k| k > 0).count() as f64;
            let w: Vec<f64> = opt.owners.iter().map(|&o| 1.0 / (per_q[o] as f64 * with_options)).collect();
            let high = g.weighted_sum(l, w)?;
            parts.l_high = g.value(high).item();
            add(g, high)?;
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.input(crate::math::Tensor::scalar(0.0)),
    };
    parts.l = g.value(total).item();
    if !parts.l.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (L_low = {}, L_high = {}) on questions {:?}",
            parts.l_low,
            parts.l_high,
            items.iter().map(|it| it.id.as_str()).collect::<Vec<_>>()
        )));
    }
    Ok(BatchLoss { total, parts })
}

/// Per-question HLM loss, summed over positions, in evaluation mode.
pub fn hlm_loss(model: &QuesNet, item: &PretrainItem) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let seqs = [item.tokens.as_slice()];
    let rep = model.represent(&mut g, &seqs, 0.0)?;
    let terms = hlm_terms(&mut g, model, &rep.state, &seqs)?;
    Ok([terms.word, terms.image, terms.meta]
        .into_iter()
        .flatten()
        .map(|(v, _)| g.value(v).sum())
        .sum())
}

/// Per-question mean option BCE in evaluation mode; 0 without options.
pub fn domain_loss(model: &QuesNet, item: &PretrainItem) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let rep = model.represent(&mut g, &[item.tokens.as_slice()], 0.0)?;
    match option_logits(&mut g, model, rep.sentence.vector, &[item])? {
        Some(o) => {
            let l = option_bce(&mut g, o.logits, &o.labels)?;
            Ok(g.value(l).item())
        }
        None => Ok(0.0),
    }
}

/// Seed of the dropout stream for a given optimizer step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// One Adam update on the batch loss; returns its components.
pub fn pretrain_step(
    model: &mut QuesNet,
    adam: &mut Adam,
    items: &[&PretrainItem],
    ablation: &Ablation,
    train: &TrainConfig,
) -> Result<LossParts> {
    let (parts, grads) = {
        let mut g = Graph::new(&model.store);
        if train.dropout > 0.0 {
            g = g.training(step_seed(train.seed, adam.steps()));
        }
        let loss = batch_loss(&mut g, model, items, ablation, train)?;
        (loss.parts, g.backward(loss.total)?)
    };
    model.store.zero_grad();
    model.store.accumulate(&grads);
    adam.step(&mut model.store);
    Ok(parts)
}
