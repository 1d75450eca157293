//! Synthetic question bank with planted, measurable structure.
//!
//! Stems are built from a chain `o_0 e_0 o_1 e_1 … o_k` over an alphabet of
//! `M` content words `c*` and the cue words `cue*`, with one pair word `p*`
//! for every ordered alphabet pair: `e_i` is the pair word indexing
//! `(o_i, o_{i+1})`. Every chain word is therefore fixed by its two
//! neighbors. One or two chain slots hold the stem cues, the others uniform
//! content words. The two difficulty markers `da`/`db` and at most one image
//! are inserted at random gaps; a meta token may lead the sequence.
//!
//! * Option-bearing questions have one correct option sharing a stem cue;
//!   each wrong option carries a cue absent from the stem.
//! * Knowledge labels are `{cue mod n_knowledge}` over the stem cues.
//! * Difficulty is `clip(0.2 + 0.25·#da − 0.1·#db, 0, 1)`.
//! * Students answer correctly with probability
//!   `σ(θ − slope·(difficulty − center))`, `θ ~ N(0, ability_sd²)`.
//!
//! Random draws come from one ChaCha8 stream in this order: image
//! prototypes, question assignment subsets, questions, students.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::io::save_corpus;
use crate::corpus::types::*;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub questions: usize,
    /// Number of distinct word types emitted.
    pub vocab_size: usize,
    /// Chain length range (number of chain words, inclusive).
    pub min_len: usize,
    pub max_len: usize,
    pub image_ratio: f64,
    pub meta_ratio: f64,
    pub option_ratio: f64,
    /// Fraction of questions carrying knowledge and difficulty labels.
    pub label_ratio: f64,
    pub meta_categories: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub image_prototypes: usize,
    pub image_noise: f64,
    pub n_cues: usize,
    pub n_knowledge: usize,
    pub options_per_question: usize,
    pub students: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub ability_sd: f64,
    pub difficulty_slope: f64,
    pub difficulty_center: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            questions: 10_000,
            vocab_size: 200,
            min_len: 9,
            max_len: 21,
            image_ratio: 0.25,
            meta_ratio: 0.72,
            option_ratio: 0.36,
            label_ratio: 0.2,
            meta_categories: 10,
            image_width: 32,
            image_height: 32,
            image_prototypes: 8,
            image_noise: 0.05,
            n_cues: 8,
            n_knowledge: 6,
            options_per_question: 4,
            students: 400,
            min_interactions: 40,
            max_interactions: 80,
            ability_sd: 2.5,
            difficulty_slope: 4.0,
            difficulty_center: 0.35,
        }
    }
}

const DIFF_A: &str = "da";
const DIFF_B: &str = "db";
const BASE_FILLERS: usize = 8;

/// Word-type layout derived from a spec.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub cues: Vec<String>,
    pub fillers: Vec<String>,
    pub content: Vec<String>,
    pub pairs: Vec<String>,
}

impl Lexicon {
    fn new(spec: &SyntheticSpec) -> Self {
        let room = spec.vocab_size - 2 - BASE_FILLERS;
        let k = spec.n_cues;
        let mut m = 1;
        while (m + 1 + k) * (m + 2 + k) <= room {
            m += 1;
        }
        let a = m + k;
        let extra = room - a - a * a;
        Lexicon {
            cues: (0..k).map(|i| format!("cue{i}")).collect(),
            fillers: (0..BASE_FILLERS + extra).map(|i| format!("opt{i}")).collect(),
            content: (0..m).map(|i| format!("c{i}")).collect(),
            pairs: (0..a * a).map(|i| format!("p{i}")).collect(),
        }
    }

    pub fn content_size(&self) -> usize {
        self.content.len()
    }

    /// Chain alphabet size: content words followed by cue words.
    pub fn alphabet_size(&self) -> usize {
        self.content.len() + self.cues.len()
    }

    fn symbol(&self, s: usize) -> &str {
        match s.checked_sub(self.content.len()) {
            Some(c) => &self.cues[c],
            None => &self.content[s],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, r) in [
            ("image_ratio", self.image_ratio),
            ("meta_ratio", self.meta_ratio),
            ("option_ratio", self.option_ratio),
            ("label_ratio", self.label_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation(field, format!("{r} outside [0, 1]")));
            }
        }
        let positive = [
            ("questions", self.questions),
            ("min_len", self.min_len),
            ("meta_categories", self.meta_categories),
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("image_prototypes", self.image_prototypes),
            ("n_knowledge", self.n_knowledge),
            ("options_per_question", self.options_per_question),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.max_len < self.min_len {
            return Err(Error::validation("max_len", "smaller than min_len"));
        }
        if self.n_cues < self.options_per_question + 1 {
            return Err(Error::validation(
                "n_cues",
                format!("need at least options_per_question + 1 = {}", self.options_per_question + 1),
            ));
        }
        let a = self.n_cues + 1;
        let least = 2 + BASE_FILLERS + a + a * a;
        if self.vocab_size < least {
            return Err(Error::validation("vocab_size", format!("need at least {least} word types")));
        }
        if self.students > 0 && (self.min_interactions < 2 || self.max_interactions < self.min_interactions) {
            return Err(Error::validation("min_interactions", "need 2 ≤ min ≤ max"));
        }
        if self.max_interactions > self.questions && self.students > 0 {
            return Err(Error::validation("max_interactions", "exceeds question count"));
        }
        if !(self.image_noise >= 0.0 && self.ability_sd >= 0.0) {
            return Err(Error::validation("image_noise", "noise scales must be non-negative"));
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon::new(self)
    }
}

/// Generator-side ground truth not stored in the corpus file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTruth {
    /// Planted difficulty of every question, labeled or not.
    pub difficulty: Vec<f64>,
    /// Planted knowledge set of every question.
    pub knowledge: Vec<Vec<usize>>,
    /// Response probability of every student interaction.
    pub response_prob: Vec<Vec<f64>>,
    /// AUC of the true response probabilities against the sampled outcomes.
    pub oracle_auc: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub truth: SyntheticTruth,
}

fn prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (w, h) = (spec.image_width, spec.image_height);
    (0..spec.image_prototypes)
        .map(|_| {
            let fx = rng.random_range(0.5..3.0) * 2.0 * PI / w as f64;
            let fy = rng.random_range(0.5..3.0) * 2.0 * PI / h as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let cx = rng.random_range(0.2..0.8) * w as f64;
            let cy = rng.random_range(0.2..0.8) * h as f64;
            let r = rng.random_range(0.15..0.35) * w.min(h) as f64;
            let mut px = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let wave = (fx * x as f64 + fy * y as f64 + phase).sin();
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let disk = if d < r { 0.25 } else { -0.1 };
                    px.push((0.5 + 0.3 * wave + disk).clamp(0.0, 1.0));
                }
            }
            px
        })
        .collect()
}

fn subset(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (ratio * n as f64).round() as usize;
    let mut flags = vec![false; n];
    for i in index::sample(rng, n, k.min(n)) {
        flags[i] = true;
    }
    flags
}

pub fn planted_difficulty(n_a: usize, n_b: usize) -> f64 {
    (0.2 + 0.25 * n_a as f64 - 0.1 * n_b as f64).clamp(0.0, 1.0)
}

/// Generates a corpus deterministically from `spec` and `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let lex = spec.lexicon();
    let m = lex.content_size();
    let a = lex.alphabet_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(spec, &mut rng);
    let n = spec.questions;
    let with_image = subset(n, spec.image_ratio, &mut rng);
    let with_meta = subset(n, spec.meta_ratio, &mut rng);
    let with_options = subset(n, spec.option_ratio, &mut rng);
    let with_labels = subset(n, spec.label_ratio, &mut rng);
    let noise = Normal::new(0.0, spec.image_noise.max(0.0)).expect("finite sd");

    let (lo, hi) = ((spec.min_len + 1).div_ceil(2), (spec.max_len + 1) / 2);
    let (lo, hi) = (lo.max(1), hi.max(lo.max(1)));
    let width = ((n.max(1) - 1).to_string().len()).max(5);

    let mut questions = Vec::with_capacity(n);
    let mut truth_diff = Vec::with_capacity(n);
    let mut truth_know = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("q{i:0width$}");
        let n_o = rng.random_range(lo..=hi);
        let mut os: Vec<usize> = (0..n_o).map(|_| rng.random_range(0..m)).collect();
        let n_stem_cues = rng.random_range(1..=2usize.min(n_o));
        let stem_cues: Vec<usize> = index::sample(&mut rng, spec.n_cues, n_stem_cues).into_vec();
        for (slot, &c) in index::sample(&mut rng, n_o, n_stem_cues).iter().zip(&stem_cues) {
            os[slot] = m + c;
        }
        let mut stem: Vec<Token> = Vec::with_capacity(2 * n_o + 8);
        for j in 0..n_o {
            stem.push(Token::word(lex.symbol(os[j])));
            if j + 1 < n_o {
                stem.push(Token::word(&lex.pairs[os[j] * a + os[j + 1]]));
            }
        }
        let n_a = rng.random_range(0..=2usize);
        let n_b = rng.random_range(0..=2usize);
        let mut inserts: Vec<Token> = (0..n_a).map(|_| Token::word(DIFF_A)).collect();
        inserts.extend((0..n_b).map(|_| Token::word(DIFF_B)));
        if with_image[i] {
            let p = rng.random_range(0..protos.len());
            let pixels = protos[p]
                .iter()
                .map(|v| (((v + noise.sample(&mut rng)).clamp(0.0, 1.0)) * 1000.0).round() / 1000.0)
                .collect();
            inserts.push(Token::Image(Image::new(spec.image_width, spec.image_height, pixels)));
        }
        for tok in inserts {
            let at = rng.random_range(0..=stem.len());
            stem.insert(at, tok);
        }
        if with_meta[i] {
            stem.insert(0, Token::meta(rng.random_range(0..spec.meta_categories)));
        }
        let mut options = Vec::new();
        if with_options[i] {
            let right = stem_cues[rng.random_range(0..stem_cues.len())];
            let mut others: Vec<usize> = (0..spec.n_cues).filter(|c| !stem_cues.contains(c)).collect();
            others.shuffle(&mut rng);
            let mut cues = vec![right];
            cues.extend(others.into_iter().take(spec.options_per_question - 1));
            for (k, &cue) in cues.iter().enumerate() {
                let n_fill = rng.random_range(1..=3usize);
                let mut words: Vec<String> = (0..n_fill)
                    .map(|_| lex.fillers[rng.random_range(0..lex.fillers.len())].clone())
                    .collect();
                let at = rng.random_range(0..=words.len());
                words.insert(at, lex.cues[cue].clone());
                options.push(QuestionOption {
                    tokens: words,
                    correct: k == 0,
                });
            }
            options.shuffle(&mut rng);
        }
        let mut know: Vec<usize> = stem_cues.iter().map(|c| c % spec.n_knowledge).collect();
        know.sort_unstable();
        know.dedup();
        let diff = planted_difficulty(n_a, n_b);
        questions.push(Question {
            id,
            tokens: stem,
            options,
            knowledge: with_labels[i].then(|| know.clone()),
            difficulty: with_labels[i].then_some(diff),
        });
        truth_diff.push(diff);
        truth_know.push(know);
    }

    let mut students = Vec::with_capacity(spec.students);
    let mut probs = Vec::with_capacity(spec.students);
    let ability = Normal::new(0.0, spec.ability_sd).expect("finite sd");
    let sw = (spec.students.max(1) - 1).to_string().len().max(4);
    for s in 0..spec.students {
        let theta = ability.sample(&mut rng);
        let len = rng.random_range(spec.min_interactions..=spec.max_interactions);
        let picks = index::sample(&mut rng, n, len).into_vec();
        let mut seq = Vec::with_capacity(len);
        let mut ps = Vec::with_capacity(len);
        for q in picks {
            let p = crate::math::sigmoid(theta - spec.difficulty_slope * (truth_diff[q] - spec.difficulty_center));
            let correct = rng.random::<f64>() < p;
            seq.push((questions[q].id.clone(), correct));
            ps.push(p);
        }
        students.push(StudentRecord {
            id: format!("s{s:0sw$}"),
            seq,
        });
        probs.push(ps);
    }
    let scores: Vec<f64> = probs.iter().flatten().copied().collect();
    let labels: Vec<bool> = students.iter().flat_map(|s| s.seq.iter().map(|x| x.1)).collect();
    let oracle_auc = crate::finetune::metrics::auc_rank(&scores, &labels).unwrap_or(f64::NAN);
    Ok(SyntheticCorpus {
        corpus: Corpus { questions, students },
        truth: SyntheticTruth {
            difficulty: truth_diff,
            knowledge: truth_know,
            response_prob: probs,
            oracle_auc,
        },
    })
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes `corpus.jsonl`, image side files under `images/` and `truth.json`.
pub fn write_synthetic(out_dir: &Path, generated: &SyntheticCorpus) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_corpus(&generated.corpus, out_dir.join(CORPUS_FILE))?;
    let truth = serde_json::to_string(&generated.truth).expect("truth serializes");
    let p = out_dir.join(TRUTH_FILE);
    fs::write(&p, truth).map_err(|e| Error::io(&p, e))
}

/// Plug-in entropies of the word positions of a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyReport {
    pub unigram: f64,
    /// `H(x_t | x_{t−1}, x_{t+1})` with boundary, image and meta markers
    /// standing in for non-word neighbors.
    pub conditional: f64,
    pub positions: usize,
}

fn neighbor_symbol(tokens: &[Token], t: isize) -> String {
    if t < 0 {
        return "<bos>".into();
    }
    match tokens.get(t as usize) {
        None => "<eos>".into(),
        Some(Token::Word(w)) => w.clone(),
        Some(Token::Image(_)) => "<img>".into(),
        Some(Token::Meta { .. }) => "<meta>".into(),
    }
}

/// Counting oracle: empirical unigram and neighbor-conditional entropy.
pub fn count_entropy(questions: &[Question]) -> EntropyReport {
    let mut unigram: HashMap<&str, usize> = HashMap::new();
    let mut joint: HashMap<(String, &str, String), usize> = HashMap::new();
    let mut context: HashMap<(String, String), usize> = HashMap::new();
    let mut total = 0usize;
    for q in questions {
        for (t, tok) in q.tokens.iter().enumerate() {
            let Token::Word(w) = tok else { continue };
            let l = neighbor_symbol(&q.tokens, t as isize - 1);
            let r = neighbor_symbol(&q.tokens, t as isize + 1);
            *unigram.entry(w).or_default() += 1;
            *context.entry((l.clone(), r.clone())).or_default() += 1;
            *joint.entry((l, w, r)).or_default() += 1;
            total += 1;
        }
    }
    let n = total.max(1) as f64;
    let h_uni = unigram
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    let h_cond = joint
        .iter()
        .map(|((l, _, r), &c)| {
            let ctx = context[&(l.clone(), r.clone())] as f64;
            -(c as f64 / n) * (c as f64 / ctx).ln()
        })
        .sum();
    EntropyReport {
        unigram: h_uni,
        conditional: h_cond,
        positions: total,
    }
}
