//! Separate pre-training of the embedding modules: skip-gram with negative
//! sampling for words and reconstruction autoencoders for images and meta.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use super::{ImageCoder, MetaCoder};
use crate::config::Config;
use crate::corpus::{EncodedQuestion, EncodedToken};
use crate::error::{Error, Result};
use crate::math::{sigmoid, Adam, AdamConfig, Graph, Linear, ParamId, ParamStore, Tensor};
use crate::model::QuesNet;

#[derive(Clone, Debug, PartialEq)]
pub struct W2vConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Maximal runs of word tokens; images and meta split runs, and each option
/// text is its own run.
fn word_spans(questions: &[EncodedQuestion]) -> Vec<Vec<usize>> {
    let mut spans = Vec::new();
    for q in questions {
        let mut cur = Vec::new();
        for t in &q.tokens {
            match t {
                EncodedToken::Word(w) => cur.push(*w),
                _ => {
                    if !cur.is_empty() {
                        spans.push(std::mem::take(&mut cur));
                    }
                }
            }
        }
        if !cur.is_empty() {
            spans.push(cur);
        }
        for o in &q.options {
            if !o.words.is_empty() {
                spans.push(o.words.clone());
            }
        }
    }
    spans
}

/// Skip-gram with negative sampling; returns the `[vocab × dim]` input
/// vectors. Negatives follow the unigram distribution raised to 3/4 and the
/// learning rate decays linearly to 1e-4 of its start value.
pub fn pretrain_word2vec(questions: &[EncodedQuestion], vocab: usize, cfg: &W2vConfig) -> Result<Tensor> {
    let spans = word_spans(questions);
    let total: usize = spans.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Usage("word2vec needs at least one word token".into()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..vocab * d).map(|_| (rng.random::<f64>() - 0.5) / d as f64).collect();
    let mut output = vec![0.0; vocab * d];

    let mut counts = vec![0f64; vocab];
    for s in &spans {
        for &w in s {
            counts[w] += 1.0;
        }
    }
    let mut cdf: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let mut acc = 0.0;
    for c in cdf.iter_mut() {
        acc += *c;
        *c = acc;
    }
    let sample_negative = |rng: &mut ChaCha8Rng| {
        let u = rng.random::<f64>() * acc;
        cdf.partition_point(|&c| c <= u).min(vocab - 1)
    };

    let steps = (cfg.epochs.max(1) * total) as f64;
    let mut done = 0usize;
    let mut grad = vec![0.0; d];
    for _ in 0..cfg.epochs {
        for span in &spans {
            for (i, &center) in span.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - done as f64 / steps)).max(cfg.lr * 1e-4);
                done += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(span.len());
                for (j, &ctx) in span.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|x| *x = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let n = sample_negative(&mut rng);
                            if n == ctx {
                                continue;
                            }
                            (n, 0.0)
                        };
                        let u = &input[center * d..(center + 1) * d];
                        let v = &mut output[target * d..(target + 1) * d];
                        let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                        let step = lr * (label - sigmoid(dot));
                        for t in 0..d {
                            grad[t] += step * v[t];
                            v[t] += step * u[t];
                        }
                    }
                    for (u, g) in input[center * d..(center + 1) * d].iter_mut().zip(&grad) {
                        *u += g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![vocab, d], input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Epoch losses of an autoencoder run; entry 0 is before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
    /// Reconstruction accuracy on the training set (meta only).
    pub accuracy: Option<f64>,
}

/// Number of leading epochs over which the loss must strictly decrease.
pub const MONOTONE_EPOCHS: usize = 5;

fn linear_ids(l: &Linear) -> [ParamId; 2] {
    [l.w, l.b]
}

impl ImageCoder {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.enc.iter().flat_map(|c| [c.kernel, c.bias]).collect();
        ids.extend(linear_ids(&self.enc_out));
        ids.extend(linear_ids(&self.dec_in));
        ids.extend(self.dec.iter().flat_map(|c| [c.kernel, c.bias]));
        ids
    }

    /// Mean per-image reconstruction MSE over `items`, in evaluation mode.
    pub fn reconstruction_loss(&self, store: &ParamStore, images: &[Vec<f64>], batch: usize) -> Result<f64> {
        let mut total = 0.0;
        for chunk in images.chunks(batch.max(1)) {
            let mut g = Graph::new(store);
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let target = self.stack(&refs)?;
            let x = g.input(target.clone());
            let z = self.encode(&mut g, x)?;
            let y = self.decode(&mut g, z)?;
            let flat = target.reshape(vec![chunk.len(), self.pixels()])?;
            let l = g.mse_rows(y, &flat)?;
            total += g.value(l).sum();
        }
        Ok(total / images.len() as f64)
    }
}

impl MetaCoder {
    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
            .into_iter()
            .flat_map(linear_ids)
            .collect()
    }

    /// Mean cross-entropy and argmax accuracy of reconstructing `categories`.
    pub fn reconstruction(&self, store: &ParamStore, categories: &[usize]) -> Result<(f64, f64)> {
        let mut g = Graph::new(store);
        let x = g.input(self.one_hot(categories)?);
        let z = self.encode(&mut g, x)?;
        let logits = self.decode(&mut g, z)?;
        let l = g.cross_entropy_rows(logits, categories.to_vec())?;
        let k = self.categories;
        let hits = g
            .value(logits)
            .data()
            .chunks(k)
            .zip(categories)
            .filter(|(row, &c)| argmax(row) == c)
            .count();
        let n = categories.len() as f64;
        Ok((g.value(l).sum() / n, hits as f64 / n))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Shared training loop: Adam over `ids`, evaluation after each epoch,
/// parameters restored to the best epoch at the end.
fn train_autoencoder(
    store: &mut ParamStore,
    ids: &[ParamId],
    n: usize,
    cfg: &AeConfig,
    what: &str,
    eval: &dyn Fn(&ParamStore) -> Result<f64>,
    batch_loss: &dyn Fn(&ParamStore, &[usize]) -> Result<crate::math::Gradients>,
) -> Result<(Vec<f64>, usize)> {
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: None,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = vec![eval(store)?];
    let mut best = (losses[0], 0, snapshot(store, ids));
    let train: std::collections::HashSet<ParamId> = ids.iter().copied().collect();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let grads = batch_loss(store, chunk)?;
            store.zero_grad();
            store.accumulate(&grads);
            adam.step_where(store, |id| train.contains(&id));
        }
        let loss = eval(store)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("{what} autoencoder loss became {loss} at epoch {epoch}")));
        }
        if epoch <= MONOTONE_EPOCHS && loss >= losses[epoch - 1] {
            return Err(Error::Numerical(format!(
                "{what} autoencoder loss did not decrease at epoch {epoch}: {:?}",
                [&losses[..], &[loss]].concat()
            )));
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, epoch, snapshot(store, ids));
        }
    }
    for (id, t) in best.2 {
        store.set_value(id, t)?;
    }
    Ok((losses, best.1))
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, Tensor)> {
    ids.iter().map(|&id| (id, store.value(id).clone())).collect()
}

/// Trains the image coder to reconstruct `images` under mean squared error
/// and leaves the best-epoch parameters in `store`.
pub fn pretrain_autoencoder_images(
    coder: &ImageCoder,
    store: &mut ParamStore,
    images: &[Vec<f64>],
    cfg: &AeConfig,
) -> Result<AeReport> {
    if images.is_empty() {
        return Err(Error::Usage("image autoencoder needs at least one image".into()));
    }
    let eval = |s: &ParamStore| coder.reconstruction_loss(s, images, cfg.batch);
    let step = |s: &ParamStore, idx: &[usize]| {
        let mut g = Graph::new(s);
        let refs: Vec<&[f64]> = idx.iter().map(|&i| images[i].as_slice()).collect();
        let target = coder.stack(&refs)?;
        let x = g.input(target.clone());
        let z = coder.encode(&mut g, x)?;
        let y = coder.decode(&mut g, z)?;
        let flat = target.reshape(vec![idx.len(), coder.pixels()])?;
        let rows = g.mse_rows(y, &flat)?;
        let loss = g.weighted_sum(rows, vec![1.0 / idx.len() as f64; idx.len()])?;
        g.backward(loss)
    };
    let (epoch_losses, best_epoch) = train_autoencoder(store, &coder.param_ids(), images.len(), cfg, "image", &eval, &step)?;
    Ok(AeReport {
        epoch_losses,
        best_epoch,
        accuracy: None,
    })
}

/// Trains the meta coder to reconstruct categories under cross-entropy and
/// leaves the best-epoch parameters in `store`.
pub fn pretrain_autoencoder_meta(
    coder: &MetaCoder,
    store: &mut ParamStore,
    categories: &[usize],
    cfg: &AeConfig,
) -> Result<AeReport> {
    if categories.is_empty() {
        return Err(Error::Usage("meta autoencoder needs at least one meta token".into()));
    }
    let eval = |s: &ParamStore| coder.reconstruction(s, categories).map(|r| r.0);
    let step = |s: &ParamStore, idx: &[usize]| {
        let mut g = Graph::new(s);
        let cats: Vec<usize> = idx.iter().map(|&i| categories[i]).collect();
        let x = g.input(coder.one_hot(&cats)?);
        let z = coder.encode(&mut g, x)?;
        let logits = coder.decode(&mut g, z)?;
        let rows = g.cross_entropy_rows(logits, cats)?;
        let loss = g.weighted_sum(rows, vec![1.0 / idx.len() as f64; idx.len()])?;
        g.backward(loss)
    };
    let (epoch_losses, best_epoch) =
        train_autoencoder(store, &coder.param_ids(), categories.len(), cfg, "meta", &eval, &step)?;
    let (_, acc) = coder.reconstruction(store, categories)?;
    Ok(AeReport {
        epoch_losses,
        best_epoch,
        accuracy: Some(acc),
    })
}

/// What the embedding stage trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub word_tokens: usize,
    pub image: Option<AeReport>,
    pub meta: Option<AeReport>,
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let d = t.cols().max(1);
    let rows = t.data().chunks(d);
    let n = rows.len().max(1) as f64;
    rows.map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / n
}

/// Runs every embedding pre-training step for which `questions` holds
/// data, writing the results into `model`'s `emb.*` parameters. The
/// word2vec table is rescaled by one factor to the initializer's mean row
/// norm, which keeps its geometry.
pub fn pretrain_embeddings(model: &mut QuesNet, questions: &[EncodedQuestion], config: &Config) -> Result<EmbeddingReport> {
    let e = &config.embedding;
    let seed = config.train.seed;
    let word_tokens = word_spans(questions).iter().map(Vec::len).sum();
    if word_tokens > 0 {
        let w2v = W2vConfig {
            dim: config.model.embed_dim,
            window: e.window,
            negatives: e.negatives,
            epochs: e.w2v_epochs,
            lr: e.w2v_lr,
            seed,
        };
        let mut table = pretrain_word2vec(questions, model.vocab_size, &w2v)?;
        let scale = mean_row_norm(model.store.value(model.embedder.word.table)) / mean_row_norm(&table);
        if scale.is_finite() {
            table.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        model.store.set_value(model.embedder.word.table, table)?;
    }
    let ae = AeConfig {
        epochs: e.ae_epochs,
        lr: e.ae_lr,
        batch: e.ae_batch,
        seed,
    };
    let mut images = Vec::new();
    let mut categories = Vec::new();
    for t in questions.iter().flat_map(|q| &q.tokens) {
        match t {
            EncodedToken::Image(px) => images.push(px.clone()),
            EncodedToken::Meta(c) => categories.push(*c),
            EncodedToken::Word(_) => {}
        }
    }
    let image = if images.is_empty() {
        None
    } else {
        let coder = model.embedder.image.clone();
        Some(pretrain_autoencoder_images(&coder, &mut model.store, &images, &ae)?)
    };
    let meta = if categories.is_empty() {
        None
    } else {
        let coder = model.embedder.meta.clone();
        Some(pretrain_autoencoder_meta(&coder, &mut model.store, &categories, &ae)?)
    };
    Ok(EmbeddingReport {
        word_tokens,
        image,
        meta,
    })
}
