use std::collections::HashMap;

use crate::corpus::types::{Corpus, Question, Token};
use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const UNK_WORD: &str = "<unk>";
pub const PAD_WORD: &str = "<pad>";

/// Word ↔ index map. Index 0 is the unknown word and 1 is padding; the rest
/// are ordered by descending frequency, then lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[UNK] != UNK_WORD || words[PAD] != PAD_WORD {
            return Err(Error::validation("vocabulary", "first entries must be <unk>, <pad>"));
        }
        let index: HashMap<String, usize> = words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
        if index.len() != words.len() {
            return Err(Error::validation("vocabulary", "duplicate word"));
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.words).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let words: Vec<String> =
            serde_json::from_str(s).map_err(|e| Error::validation("vocabulary", e.to_string()))?;
        Self::from_words(words)
    }

    /// Maps a question's words (and option words) to indices.
    pub fn encode(&self, q: &Question) -> EncodedQuestion {
        let tokens = q
            .tokens
            .iter()
            .map(|t| match t {
                Token::Word(w) => EncodedToken::Word(self.id(w)),
                Token::Image(img) => EncodedToken::Image(img.pixels.clone()),
                Token::Meta { category, .. } => EncodedToken::Meta(*category),
            })
            .collect();
        EncodedQuestion {
            id: q.id.clone(),
            tokens,
            options: q
                .options
                .iter()
                .map(|o| EncodedOption {
                    words: o.tokens.iter().map(|w| self.id(w)).collect(),
                    correct: o.correct,
                })
                .collect(),
            knowledge: q.knowledge.clone(),
            difficulty: q.difficulty,
        }
    }
}

/// Counts stem and option words and keeps those seen at least `min_count` times.
pub fn build_vocabulary(corpus: &Corpus, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for q in &corpus.questions {
        for w in q.words() {
            *counts.entry(w).or_default() += 1;
        }
        for o in &q.options {
            for w in &o.tokens {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_count.max(1) && w != UNK_WORD && w != PAD_WORD)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut words = vec![UNK_WORD.to_string(), PAD_WORD.to_string()];
    words.extend(kept.into_iter().map(|(w, _)| w.to_string()));
    Vocabulary::from_words(words).expect("specials are unique")
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncodedToken {
    Word(usize),
    Image(Vec<f64>),
    Meta(usize),
}

impl EncodedToken {
    pub fn is_word(&self) -> bool {
        matches!(self, EncodedToken::Word(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedOption {
    pub words: Vec<usize>,
    pub correct: bool,
}

/// A question with words replaced by vocabulary indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuestion {
    pub id: String,
    pub tokens: Vec<EncodedToken>,
    pub options: Vec<EncodedOption>,
    pub knowledge: Option<Vec<usize>>,
    pub difficulty: Option<f64>,
}

impl EncodedQuestion {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::types::Question;

    fn corpus(words: &[&str]) -> Corpus {
        Corpus {
            questions: vec![Question {
                id: "q".into(),
                tokens: words.iter().map(|w| Token::word(*w)).collect(),
                options: vec![],
                knowledge: None,
                difficulty: None,
            }],
            students: vec![],
        }
    }

    #[test]
    fn min_count_filters() {
        let c = corpus(&["a", "a", "b"]);
        assert_eq!(build_vocabulary(&c, 2).words(), &["<unk>", "<pad>", "a"]);
        assert_eq!(build_vocabulary(&c, 1).words(), &["<unk>", "<pad>", "a", "b"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = corpus(&["z", "y", "x", "y"]);
        assert_eq!(build_vocabulary(&c, 1).words(), &["<unk>", "<pad>", "y", "x", "z"]);
    }

    #[test]
    fn json_roundtrip() {
        let v = build_vocabulary(&corpus(&["a", "b"]), 1);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("b"), v.id("b"));
        assert_eq!(back.id("nope"), UNK);
    }
}
