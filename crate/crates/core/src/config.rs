//! Run configuration: a TOML file with dot-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding size `N_e`.
    pub embed_dim: usize,
    /// Bi-LSTM hidden size per direction `d_h`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Sinusoidal position-embedding width `N_pe`.
    pub pos_dim: usize,
    pub meta_categories: usize,
    pub meta_hidden: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub feature_maps: Vec<usize>,
    pub conv_kernel: usize,
    pub leaky_slope: f64,
    /// Hidden width of the option discriminator.
    pub disc_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            hidden: 256,
            layers: 4,
            heads: 8,
            pos_dim: 64,
            meta_categories: 10,
            meta_hidden: 256,
            image_width: 32,
            image_height: 32,
            feature_maps: vec![16, 32, 32, 64],
            conv_kernel: 4,
            leaky_slope: 0.01,
            disc_hidden: 256,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Content width `N = 2·d_h`.
    pub fn content_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Attention width `N + N_pe`.
    pub fn attn_dim(&self) -> usize {
        self.content_dim() + self.pos_dim
    }

    /// Spatial size after the stride-2 encoder stack.
    pub fn bottleneck(&self) -> (usize, usize) {
        let f = 1 << self.feature_maps.len();
        (self.image_height / f, self.image_width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model.embed_dim", self.embed_dim),
            ("model.hidden", self.hidden),
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("model.meta_categories", self.meta_categories),
            ("model.meta_hidden", self.meta_hidden),
            ("model.image_width", self.image_width),
            ("model.image_height", self.image_height),
            ("model.disc_hidden", self.disc_hidden),
        ];
        for (f, v) in dims {
            if v == 0 {
                return Err(Error::validation(f, "must be positive"));
            }
        }
        if self.feature_maps.is_empty() || self.feature_maps.contains(&0) {
            return Err(Error::validation("model.feature_maps", "needs positive sizes"));
        }
        if self.conv_kernel != 4 {
            return Err(Error::validation(
                "model.conv_kernel",
                "stride-2 padding-1 layers halve the image only with kernel 4",
            ));
        }
        let f = 1 << self.feature_maps.len();
        if self.image_width % f != 0 || self.image_height % f != 0 {
            return Err(Error::validation(
                "model.image_width",
                format!("image dims must be divisible by {f}"),
            ));
        }
        if self.attn_dim() % self.heads != 0 {
            return Err(Error::validation(
                "model.heads",
                format!("2·hidden + pos_dim = {} not divisible by heads", self.attn_dim()),
            ));
        }
        if self.pos_dim % 2 != 0 {
            return Err(Error::validation("model.pos_dim", "must be even"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::validation("model.ln_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip, `0` disables.
    pub clip_norm: f64,
    /// Sum the low-level loss over positions instead of averaging.
    pub sum_low_loss: bool,
    /// Fraction of questions held out from pre-training for evaluation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            dropout: 0.2,
            clip_norm: 5.0,
            sum_low_loss: false,
            holdout: 0.1,
        }
    }
}

/// Input-kind and objective switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub enable_text: bool,
    pub enable_image: bool,
    pub enable_meta: bool,
    pub enable_low: bool,
    pub enable_high: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            enable_text: true,
            enable_image: true,
            enable_meta: true,
            enable_low: true,
            enable_high: true,
        }
    }
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_text || self.enable_image || self.enable_meta) {
            return Err(Error::validation("ablation", "enable at least one input kind"));
        }
        if !(self.enable_low || self.enable_high) {
            return Err(Error::validation("ablation", "enable at least one objective"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub min_count: usize,
    pub window: usize,
    pub negatives: usize,
    pub w2v_epochs: usize,
    pub w2v_lr: f64,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub ae_batch: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            min_count: 1,
            window: 2,
            negatives: 5,
            w2v_epochs: 5,
            w2v_lr: 0.025,
            ae_epochs: 50,
            ae_lr: 1e-3,
            ae_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Students per batch for score prediction.
    pub student_batch: usize,
    pub freeze_backbone: bool,
    pub threshold: f64,
    pub tune_threshold: bool,
    pub difficulty_hidden: usize,
    pub score_hidden: usize,
    pub dropout: f64,
    /// Stop as soon as the validation metric reaches this value.
    pub target: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            patience: 5,
            lr: 1e-3,
            batch_size: 32,
            student_batch: 8,
            freeze_backbone: false,
            threshold: 0.5,
            tune_threshold: false,
            difficulty_hidden: 64,
            score_hidden: 64,
            dropout: 0.0,
            target: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for relative paths; falls back to `QUESNET_DATA_DIR`, then `.`.
    pub data_dir: Option<PathBuf>,
    /// Corpus file, relative to the data root.
    pub corpus: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and reports.
    pub work_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub embedding: EmbeddingConfig,
    pub finetune: FinetuneConfig,
    pub synthetic: SyntheticSpec,
    pub paths: PathsConfig,
}

pub const DATA_DIR_ENV: &str = "QUESNET_DATA_DIR";

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::validation("config", e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ablation.validate()?;
        self.synthetic.validate()?;
        if !(0.0..1.0).contains(&self.train.dropout) {
            return Err(Error::validation("train.dropout", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.finetune.dropout) {
            return Err(Error::validation("finetune.dropout", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.train.holdout) {
            return Err(Error::validation("train.holdout", "must lie in [0, 1)"));
        }
        for (f, v) in [
            ("train.batch_size", self.train.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
            ("finetune.student_batch", self.finetune.student_batch),
            ("finetune.difficulty_hidden", self.finetune.difficulty_hidden),
            ("finetune.score_hidden", self.finetune.score_hidden),
            ("embedding.ae_batch", self.embedding.ae_batch),
        ] {
            if v == 0 {
                return Err(Error::validation(f, "must be positive"));
            }
        }
        for (f, v) in [
            ("train.lr", self.train.lr),
            ("finetune.lr", self.finetune.lr),
            ("embedding.ae_lr", self.embedding.ae_lr),
            ("embedding.w2v_lr", self.embedding.w2v_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(f, "must be a positive number"));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides; keys are dot paths into the TOML tree
    /// and values are TOML literals (bare words are taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::validation(item.as_str(), "override must look like key=value"))?;
            let key = key.trim();
            set_path(&mut tree, key, parse_literal(raw.trim()))?;
        }
        let text = toml::to_string(&tree).expect("tree serializes");
        let c: Config = toml::from_str(&text).map_err(|e| Error::validation("override", e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Root directory for relative paths.
    pub fn data_root(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root().join(p)
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(self.paths.corpus.as_deref().unwrap_or(Path::new("corpus/corpus.jsonl")))
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(self.paths.work_dir.as_deref().unwrap_or(Path::new("runs")))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::validation(key, "path crosses a non-table value"))?;
        if i + 1 == parts.len() {
            let ok = table.contains_key(*part) || optional_key(&parts);
            if !ok {
                return Err(Error::validation(key, "unknown configuration key"));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::validation(key, "unknown configuration section"))?;
    }
    Ok(())
}

/// Keys of `Option` fields are absent from the serialized tree when unset.
fn optional_key(parts: &[&str]) -> bool {
    matches!(
        parts,
        ["paths", "data_dir" | "corpus" | "work_dir"] | ["finetune", "target"]
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_lossless() {
        let mut c = Config::default();
        c.train.lr = 0.1 + 0.2;
        c.paths.corpus = Some("x/y.jsonl".into());
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_use_dot_paths() {
        let c = Config::default()
            .with_overrides(&[
                "model.hidden=32".into(),
                "ablation.enable_image=false".into(),
                "train.lr=0.01".into(),
                "paths.work_dir=out".into(),
            ])
            .unwrap();
        assert_eq!(c.model.hidden, 32);
        assert!(!c.ablation.enable_image);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.paths.work_dir, Some(PathBuf::from("out")));
        assert!(Config::default().with_overrides(&["model.nope=1".into()]).is_err());
        match Config::default().with_overrides(&["train.dropout=1.5".into()]) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "train.dropout"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heads_must_divide_attention_width() {
        let mut c = Config::default();
        c.model.heads = 7;
        assert!(c.validate().is_err());
    }
}
