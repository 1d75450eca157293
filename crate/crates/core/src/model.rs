//! The full QuesNet parameter set and the question representation pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ModelConfig};
use crate::corpus::{EncodedQuestion, EncodedToken};
use crate::embedding::Embedder;
use crate::encoder::{BiLstmStack, EncoderState, Sentence, SentenceLayer};
use crate::error::{Error, Result};
use crate::math::{Graph, Init, ParamStore, Tensor, Var};
use crate::pretrain::{HlmHeads, OptionScorer};

/// Every trainable part of the model plus the store holding the values.
///
/// Construction is deterministic in `(config, vocab_size, seed)`; parameter
/// names and order never depend on data.
#[derive(Clone, Debug)]
pub struct QuesNet {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub content: BiLstmStack,
    pub sentence: SentenceLayer,
    pub hlm: HlmHeads,
    pub options: OptionScorer,
}

/// Representations of one batch.
#[derive(Clone, Debug)]
pub struct Represented {
    pub state: EncoderState,
    pub sentence: Sentence,
}

impl QuesNet {
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::validation("vocabulary", "must not be empty"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let embedder = Embedder::new(&mut init, vocab_size, config);
        let content = BiLstmStack::new(&mut init, "enc", config.embed_dim, config.hidden, config.layers);
        let sentence = SentenceLayer::new(&mut init, "sent", config);
        let hlm = HlmHeads::new(&mut init, config, vocab_size);
        let options = OptionScorer::new(&mut init, config);
        Ok(QuesNet {
            config: config.clone(),
            vocab_size,
            store,
            embedder,
            content,
            sentence,
            hlm,
            options,
        })
    }

    /// Names of the parameters that make up the representation backbone
    /// (embedding, content and sentence layers).
    pub fn is_backbone(name: &str) -> bool {
        name.starts_with("emb.") || name.starts_with("enc.") || name.starts_with("sent.")
    }

    /// Loads every parameter of this model from `params`, matched by name.
    /// Missing names or shape mismatches are checkpoint errors.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            self.store
                .set_value(id, params.value(src).clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    /// Embeds padded sequences into a time-major `[T·B × N_e]` matrix;
    /// padded rows are zero.
    pub fn embed_batch(&self, g: &mut Graph<'_>, seqs: &[&[EncodedToken]]) -> Result<(Var, Vec<usize>)> {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::Usage("cannot represent an empty question".into()));
        }
        let len = *lengths.iter().max().expect("non-empty");
        let batch = seqs.len();
        let mut flat = Vec::with_capacity(lengths.iter().sum());
        let mut offsets = Vec::with_capacity(batch);
        for s in seqs {
            offsets.push(flat.len());
            flat.extend(s.iter());
        }
        let real = self.embedder.embed(g, &flat)?;
        if lengths.iter().all(|&l| l == len) && batch == 1 {
            return Ok((real, lengths));
        }
        let zero = g.input(Tensor::zeros(&[1, self.config.embed_dim]));
        let mut picks = Vec::with_capacity(len * batch);
        for t in 0..len {
            for b in 0..batch {
                picks.push(if t < lengths[b] { (0, offsets[b] + t) } else { (1, 0) });
            }
        }
        Ok((g.assemble_rows(&[real, zero], picks)?, lengths))
    }

    /// Embedding, content and sentence layers over a batch.
    pub fn represent(&self, g: &mut Graph<'_>, seqs: &[&[EncodedToken]], dropout: f64) -> Result<Represented> {
        let (x, lengths) = self.embed_batch(g, seqs)?;
        let state = self.content.encode(g, x, &lengths, dropout)?;
        let sentence = self.sentence.aggregate(g, &state, dropout)?;
        Ok(Represented { state, sentence })
    }

    /// `(v^(i), v^(s))` of one token sequence: `[T × N]` and `[N]`.
    pub fn represent_tokens(&self, tokens: &[EncodedToken]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.store);
        let r = self.represent(&mut g, &[tokens], 0.0)?;
        let vi = g.value(r.state.content).clone();
        let vs = g.value(r.sentence.vector).clone();
        let n = vs.numel();
        Ok((vi, vs.reshape(vec![n])?))
    }

    /// `(v^(i), v^(s))` of a question after the input-kind filter.
    pub fn represent_question(&self, q: &EncodedQuestion, ablation: &Ablation) -> Result<(Tensor, Tensor)> {
        let tokens = filter_tokens(&q.tokens, ablation)
            .ok_or_else(|| Error::Usage(format!("question {} has no enabled tokens", q.id)))?;
        self.represent_tokens(&tokens)
    }
}

/// Drops tokens of disabled input kinds. Returns `None` when nothing remains.
pub fn filter_tokens(tokens: &[EncodedToken], ablation: &Ablation) -> Option<Vec<EncodedToken>> {
    let kept: Vec<EncodedToken> = tokens
        .iter()
        .filter(|t| match t {
            EncodedToken::Word(_) => ablation.enable_text,
            EncodedToken::Image(_) => ablation.enable_image,
            EncodedToken::Meta(_) => ablation.enable_meta,
        })
        .cloned()
        .collect();
    (!kept.is_empty()).then_some(kept)
}
