use std::path::PathBuf;

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    /// Side-file path relative to the corpus file, kept for serialization.
    pub source: Option<PathBuf>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        Image {
            width,
            height,
            pixels,
            source: None,
        }
    }
}

/// How a meta token was written on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaForm {
    Index,
    /// One-hot vector of the given length.
    OneHot(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Word(String),
    Image(Image),
    Meta { category: usize, form: MetaForm },
}

impl Token {
    pub fn word(w: impl Into<String>) -> Self {
        Token::Word(w.into())
    }

    pub fn meta(category: usize) -> Self {
        Token::Meta {
            category,
            form: MetaForm::Index,
        }
    }

    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Word(_) => TokenKind::Word,
            Token::Image(_) => TokenKind::Image,
            Token::Meta { .. } => TokenKind::Meta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word,
    Image,
    Meta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionOption {
    pub tokens: Vec<String>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: String,
    pub tokens: Vec<Token>,
    pub options: Vec<QuestionOption>,
    pub knowledge: Option<Vec<usize>>,
    pub difficulty: Option<f64>,
}

impl Question {
    pub fn has_meta(&self) -> bool {
        matches!(self.tokens.first(), Some(Token::Meta { .. }))
    }

    pub fn has_image(&self) -> bool {
        self.tokens.iter().any(|t| matches!(t, Token::Image(_)))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().filter_map(|t| match t {
            Token::Word(w) => Some(w.as_str()),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentRecord {
    pub id: String,
    pub seq: Vec<(String, bool)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub questions: Vec<Question>,
    pub students: Vec<StudentRecord>,
}

impl Corpus {
    pub fn question_index(&self) -> std::collections::HashMap<&str, usize> {
        self.questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.as_str(), i))
            .collect()
    }
}
