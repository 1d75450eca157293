//! Embedding layer: word lookup, convolutional image coder and
//! fully-connected meta coder, all mapping into one `N_e`-wide space.

mod pretrain;

pub use pretrain::{
    pretrain_autoencoder_images, pretrain_autoencoder_meta, pretrain_embeddings, pretrain_word2vec, AeConfig, AeReport,
    EmbeddingReport, W2vConfig,
};

use crate::config::ModelConfig;
use crate::corpus::EncodedToken;
use crate::error::{Error, Result};
use crate::math::{Conv, Graph, Init, Linear, ParamId, Tensor, Var};

const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

/// Stride-2 convolution stack, global max-pool and a linear map to `N_e`;
/// the decoder mirrors it with transposed convolutions and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCoder {
    pub enc: Vec<Conv>,
    pub enc_out: Linear,
    pub dec_in: Linear,
    pub dec: Vec<Conv>,
    pub width: usize,
    pub height: usize,
    top_maps: usize,
    bottleneck: (usize, usize),
    slope: f64,
}

impl ImageCoder {
    pub fn new(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) -> Self {
        let k = cfg.conv_kernel;
        let maps = &cfg.feature_maps;
        let mut enc = Vec::with_capacity(maps.len());
        let mut c_in = 1;
        for (i, &m) in maps.iter().enumerate() {
            enc.push(Conv::new(init, &format!("{prefix}.enc{i}"), c_in, m, k));
            c_in = m;
        }
        let top = *maps.last().expect("validated non-empty");
        let enc_out = Linear::new(init, &format!("{prefix}.enc_out"), top, cfg.embed_dim);
        let (bh, bw) = cfg.bottleneck();
        let dec_in = Linear::new(init, &format!("{prefix}.dec_in"), cfg.embed_dim, top * bh * bw);
        let mut dec = Vec::with_capacity(maps.len());
        let mut outs: Vec<usize> = maps.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut c_in = top;
        for (i, &m) in outs.iter().enumerate() {
            dec.push(Conv::new_transposed(init, &format!("{prefix}.dec{i}"), c_in, m, k));
            c_in = m;
        }
        ImageCoder {
            enc,
            enc_out,
            dec_in,
            dec,
            width: cfg.image_width,
            height: cfg.image_height,
            top_maps: top,
            bottleneck: (bh, bw),
            slope: cfg.leaky_slope,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Stacks flattened images into a `[n × 1 × H × W]` tensor.
    pub fn stack(&self, images: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.pixels());
        for img in images {
            if img.len() != self.pixels() {
                return Err(Error::Dimension(format!(
                    "image with {} pixels for a {}×{} coder",
                    img.len(),
                    self.width,
                    self.height
                )));
            }
            data.extend_from_slice(img);
        }
        Tensor::new(vec![images.len(), 1, self.height, self.width], data)
    }

    /// `[n × 1 × H × W] → [n × N_e]`.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.enc {
            h = conv.forward(g, h, STRIDE, PAD)?;
            h = g.leaky_relu(h, self.slope);
        }
        let pooled = g.global_max_pool(h)?;
        self.enc_out.forward(g, pooled)
    }

    /// `[n × N_e] → [n × H·W]` pixel intensities in `(0, 1)`.
    pub fn decode(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let n = g.value(z).rows();
        let h = self.dec_in.forward(g, z)?;
        let h = g.leaky_relu(h, self.slope);
        let (bh, bw) = self.bottleneck;
        let mut h = g.reshape(h, vec![n, self.top_maps, bh, bw])?;
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            h = conv.forward_transposed(g, h, STRIDE, PAD)?;
            h = if i == last { g.sigmoid(h) } else { g.leaky_relu(h, self.slope) };
        }
        g.reshape(h, vec![n, self.pixels()])
    }
}

/// Two fully-connected layers each way between one-hot categories and `N_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaCoder {
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
    pub categories: usize,
}

impl MetaCoder {
    pub fn new(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) -> Self {
        let (k, h, e) = (cfg.meta_categories, cfg.meta_hidden, cfg.embed_dim);
        MetaCoder {
            enc1: Linear::new(init, &format!("{prefix}.enc1"), k, h),
            enc2: Linear::new(init, &format!("{prefix}.enc2"), h, e),
            dec1: Linear::new(init, &format!("{prefix}.dec1"), e, h),
            dec2: Linear::new(init, &format!("{prefix}.dec2"), h, k),
            categories: k,
        }
    }

    pub fn one_hot(&self, categories: &[usize]) -> Result<Tensor> {
        let k = self.categories;
        let mut data = vec![0.0; categories.len() * k];
        for (i, &c) in categories.iter().enumerate() {
            if c >= k {
                return Err(Error::Index(format!("meta category {c} of {k}")));
            }
            data[i * k + c] = 1.0;
        }
        Tensor::new(vec![categories.len(), k], data)
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.enc1.forward(g, x)?;
        let h = g.tanh(h);
        self.enc2.forward(g, h)
    }

    /// Category logits.
    pub fn decode(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let h = self.dec1.forward(g, z)?;
        let h = g.tanh(h);
        self.dec2.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub word: WordEmbedding,
    pub image: ImageCoder,
    pub meta: MetaCoder,
    pub dim: usize,
}

impl Embedder {
    pub fn new(init: &mut Init<'_>, vocab: usize, cfg: &ModelConfig) -> Self {
        let table = init.weight("emb.word", &[vocab, cfg.embed_dim]);
        Embedder {
            word: WordEmbedding {
                table,
                vocab,
                dim: cfg.embed_dim,
            },
            image: ImageCoder::new(init, "emb.img", cfg),
            meta: MetaCoder::new(init, "emb.meta", cfg),
            dim: cfg.embed_dim,
        }
    }

    /// Embeds tokens of any kind into `[n × N_e]`, row `i` for `tokens[i]`.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &[&EncodedToken]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Usage("nothing to embed".into()));
        }
        let mut words = Vec::new();
        let mut images: Vec<&[f64]> = Vec::new();
        let mut metas = Vec::new();
        let mut picks = Vec::with_capacity(tokens.len());
        for t in tokens {
            match t {
                EncodedToken::Word(w) => {
                    if *w >= self.word.vocab {
                        return Err(Error::Index(format!("word id {w} for vocabulary of {}", self.word.vocab)));
                    }
                    picks.push((0, words.len()));
                    words.push(*w);
                }
                EncodedToken::Image(px) => {
                    picks.push((1, images.len()));
                    images.push(px);
                }
                EncodedToken::Meta(c) => {
                    picks.push((2, metas.len()));
                    metas.push(*c);
                }
            }
        }
        let mut sources = Vec::with_capacity(3);
        let mut slot = [usize::MAX; 3];
        if !words.is_empty() {
            let table = g.param(self.word.table);
            slot[0] = sources.len();
            sources.push(g.gather_rows(table, words)?);
        }
        if !images.is_empty() {
            let x = g.input(self.image.stack(&images)?);
            slot[1] = sources.len();
            sources.push(self.image.encode(g, x)?);
        }
        if !metas.is_empty() {
            let x = g.input(self.meta.one_hot(&metas)?);
            slot[2] = sources.len();
            sources.push(self.meta.encode(g, x)?);
        }
        if sources.len() == 1 && picks.iter().enumerate().all(|(i, p)| p.1 == i) {
            return Ok(sources[0]);
        }
        let picks = picks.into_iter().map(|(k, i)| (slot[k], i)).collect();
        g.assemble_rows(&sources, picks)
    }

    /// Embedding of a single token as a length-`N_e` vector.
    pub fn embed_token(&self, g: &mut Graph<'_>, token: &EncodedToken) -> Result<Var> {
        let row = self.embed(g, &[token])?;
        g.reshape(row, vec![self.dim])
    }
}
