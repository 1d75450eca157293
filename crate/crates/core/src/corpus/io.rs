//! Line-delimited JSON corpus files and their grayscale image side files.
//!
//! Each line is either a question
//! `{"id", "tokens": [{"w"} | {"img"} | {"meta"}], "options": [{"tokens", "correct"}], "knowledge"?, "difficulty"?}`
//! or a student record `{"id", "seq": [[question_id, 0|1], ...]}`.
//! Image side files hold `"W H"` on the first line followed by `H` rows of
//! `W` reals.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::corpus::types::*;
use crate::error::{Error, Result};

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Reads a corpus file; image paths resolve relative to its directory.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_corpus(&text, &base)
}

/// Parses corpus text; `base` is the directory image paths are relative to.
pub fn parse_corpus(text: &str, base: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut student_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| parse_err(line, "record", e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| parse_err(line, "record", "expected an object"))?;
        if obj.contains_key("seq") {
            corpus.students.push(parse_student(obj, line)?);
            student_lines.push(line);
        } else {
            corpus.questions.push(parse_question(obj, line, base)?);
        }
    }
    let mut ids = HashSet::new();
    for q in &corpus.questions {
        if !ids.insert(q.id.as_str()) {
            return Err(Error::validation("id", format!("duplicate question id {}", q.id)));
        }
    }
    for (s, line) in corpus.students.iter().zip(student_lines) {
        if let Some((qid, _)) = s.seq.iter().find(|(q, _)| !ids.contains(q.as_str())) {
            return Err(parse_err(line, "seq", format!("unknown question id {qid}")));
        }
    }
    Ok(corpus)
}

fn get_str(obj: &Map<String, Value>, key: &str, line: usize) -> Result<String> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| parse_err(line, key, "missing or not a string"))
}

fn parse_question(obj: &Map<String, Value>, line: usize, base: &Path) -> Result<Question> {
    let id = get_str(obj, "id", line)?;
    let items = obj
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(line, "tokens", "missing or not a list"))?;
    let mut tokens = Vec::with_capacity(items.len());
    for item in items {
        tokens.push(parse_token(item, line, base)?);
    }
    for (pos, t) in tokens.iter().enumerate() {
        if matches!(t, Token::Meta { .. }) && pos != 0 {
            return Err(parse_err(line, "meta", "meta token allowed only at position 0"));
        }
    }
    if tokens.iter().all(|t| matches!(t, Token::Meta { .. })) {
        return Err(parse_err(line, "tokens", "needs at least one word or image token"));
    }
    let mut options = Vec::new();
    if let Some(list) = obj.get("options") {
        let list = list
            .as_array()
            .ok_or_else(|| parse_err(line, "options", "not a list"))?;
        for o in list {
            let oo = o
                .as_object()
                .ok_or_else(|| parse_err(line, "options", "option is not an object"))?;
            let toks = oo
                .get("tokens")
                .and_then(Value::as_array)
                .ok_or_else(|| parse_err(line, "options.tokens", "missing or not a list"))?;
            let mut words = Vec::with_capacity(toks.len());
            for t in toks {
                let w = t
                    .get("w")
                    .and_then(Value::as_str)
                    .ok_or_else(|| parse_err(line, "options.tokens", "option tokens must be words"))?;
                words.push(w.to_string());
            }
            let correct = oo
                .get("correct")
                .and_then(Value::as_bool)
                .ok_or_else(|| parse_err(line, "options.correct", "missing or not a boolean"))?;
            options.push(QuestionOption { tokens: words, correct });
        }
        if !options.is_empty() && !options.iter().any(|o| o.correct) {
            return Err(parse_err(line, "options", "no option is marked correct"));
        }
    }
    let knowledge = match obj.get("knowledge") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let list = v
                .as_array()
                .ok_or_else(|| parse_err(line, "knowledge", "not a list"))?;
            let mut ks = Vec::with_capacity(list.len());
            for k in list {
                ks.push(
                    k.as_u64()
                        .ok_or_else(|| parse_err(line, "knowledge", "labels must be non-negative integers"))?
                        as usize,
                );
            }
            Some(ks)
        }
    };
    let difficulty = match obj.get("difficulty") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let d = v
                .as_f64()
                .ok_or_else(|| parse_err(line, "difficulty", "not a number"))?;
            if !(0.0..=1.0).contains(&d) {
                return Err(parse_err(line, "difficulty", format!("{d} outside [0, 1]")));
            }
            Some(d)
        }
    };
    Ok(Question {
        id,
        tokens,
        options,
        knowledge,
        difficulty,
    })
}

fn parse_token(item: &Value, line: usize, base: &Path) -> Result<Token> {
    let obj = item
        .as_object()
        .ok_or_else(|| parse_err(line, "tokens", "token is not an object"))?;
    if let Some(w) = obj.get("w") {
        let w = w.as_str().ok_or_else(|| parse_err(line, "w", "not a string"))?;
        return Ok(Token::Word(w.to_string()));
    }
    if let Some(p) = obj.get("img") {
        let rel = p.as_str().ok_or_else(|| parse_err(line, "img", "not a path string"))?;
        let mut img = load_image(&base.join(rel)).map_err(|e| match e {
            Error::Parse { message, .. } => parse_err(line, "img", format!("{rel}: {message}")),
            other => other,
        })?;
        img.source = Some(PathBuf::from(rel));
        return Ok(Token::Image(img));
    }
    if let Some(m) = obj.get("meta") {
        if let Some(i) = m.as_u64() {
            return Ok(Token::meta(i as usize));
        }
        let list = m
            .as_array()
            .ok_or_else(|| parse_err(line, "meta", "expected an index or a one-hot list"))?;
        let mut hot = None;
        let mut total = 0.0;
        for (i, v) in list.iter().enumerate() {
            let x = v
                .as_f64()
                .ok_or_else(|| parse_err(line, "meta", "entries must be 0 or 1"))?;
            if x != 0.0 && x != 1.0 {
                return Err(parse_err(line, "meta", format!("entry {x} is not 0 or 1")));
            }
            total += x;
            if x == 1.0 {
                hot = Some(i);
            }
        }
        if total != 1.0 {
            return Err(parse_err(line, "meta", format!("one-hot vector sums to {total}, expected 1")));
        }
        return Ok(Token::Meta {
            category: hot.expect("sum is one"),
            form: MetaForm::OneHot(list.len()),
        });
    }
    Err(parse_err(line, "tokens", "token needs one of w, img, meta"))
}

/// Reads an image side file.
pub fn load_image(path: &Path) -> Result<Image> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "img", "empty image file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(1, "img", format!("bad header {header:?}")))?;
    let [w, h] = dims[..] else {
        return Err(parse_err(1, "img", "header must be \"W H\""));
    };
    if w == 0 || h == 0 {
        return Err(parse_err(1, "img", "image dimensions must be positive"));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        let row = lines
            .next()
            .ok_or_else(|| parse_err(r + 2, "img", format!("expected {h} rows")))?;
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(r + 2, "img", "non-numeric pixel"))?;
        if vals.len() != w {
            return Err(parse_err(r + 2, "img", format!("row has {} values, expected {w}", vals.len())));
        }
        if let Some(v) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(parse_err(r + 2, "img", format!("pixel {v} outside [0, 1]")));
        }
        pixels.extend(vals);
    }
    Ok(Image::new(w, h, pixels))
}

pub fn image_to_string(img: &Image) -> String {
    let mut s = format!("{} {}\n", img.width, img.height);
    for row in img.pixels.chunks(img.width) {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v}").expect("writing to a string");
        }
        s.push('\n');
    }
    s
}

/// JSON value of a question record. Images must carry a `source` path.
pub fn question_to_json(q: &Question) -> Value {
    let tokens: Vec<Value> = q
        .tokens
        .iter()
        .map(|t| match t {
            Token::Word(w) => json!({ "w": w }),
            Token::Image(img) => {
                let p = img
                    .source
                    .as_ref()
                    .map(|p| p.to_string_lossy().replace('\\', "/"))
                    .unwrap_or_default();
                json!({ "img": p })
            }
            Token::Meta { category, form } => match form {
                MetaForm::Index => json!({ "meta": category }),
                MetaForm::OneHot(k) => {
                    let v: Vec<u8> = (0..*k).map(|i| u8::from(i == *category)).collect();
                    json!({ "meta": v })
                }
            },
        })
        .collect();
    let options: Vec<Value> = q
        .options
        .iter()
        .map(|o| {
            let toks: Vec<Value> = o.tokens.iter().map(|w| json!({ "w": w })).collect();
            json!({ "tokens": toks, "correct": o.correct })
        })
        .collect();
    let mut obj = Map::new();
    obj.insert("id".into(), json!(q.id));
    obj.insert("tokens".into(), Value::Array(tokens));
    obj.insert("options".into(), Value::Array(options));
    if let Some(k) = &q.knowledge {
        obj.insert("knowledge".into(), json!(k));
    }
    if let Some(d) = q.difficulty {
        obj.insert("difficulty".into(), json!(d));
    }
    Value::Object(obj)
}

pub fn student_to_json(s: &StudentRecord) -> Value {
    let seq: Vec<Value> = s.seq.iter().map(|(q, c)| json!([q, u8::from(*c)])).collect();
    json!({ "id": s.id, "seq": seq })
}

/// Corpus file text: questions first, then student records.
pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for q in &corpus.questions {
        out.push_str(&question_to_json(q).to_string());
        out.push('\n');
    }
    for s in &corpus.students {
        out.push_str(&student_to_json(s).to_string());
        out.push('\n');
    }
    out
}

/// Writes the corpus file and every image side file. Images without a
/// source path are assigned `images/<question id>_<position>.txt`.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut owned = corpus.clone();
    for q in &mut owned.questions {
        let qid = q.id.clone();
        for (pos, t) in q.tokens.iter_mut().enumerate() {
            if let Token::Image(img) = t {
                let rel = img
                    .source
                    .get_or_insert_with(|| PathBuf::from(format!("images/{qid}_{pos}.txt")))
                    .clone();
                let full = base.join(&rel);
                if let Some(dir) = full.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                fs::write(&full, image_to_string(img)).map_err(|e| Error::io(&full, e))?;
            }
        }
    }
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    }
    fs::write(path, corpus_to_string(&owned)).map_err(|e| Error::io(path, e))
}

fn parse_student(obj: &Map<String, Value>, line: usize) -> Result<StudentRecord> {
    let id = get_str(obj, "id", line)?;
    let seq = obj
        .get("seq")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(line, "seq", "not a list"))?;
    let mut out = Vec::with_capacity(seq.len());
    for step in seq {
        let pair = step
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| parse_err(line, "seq", "steps must be [question_id, 0|1]"))?;
        let q = pair[0]
            .as_str()
            .ok_or_else(|| parse_err(line, "seq", "question id must be a string"))?;
        let c = match pair[1].as_u64() {
            Some(0) => false,
            Some(1) => true,
            _ => return Err(parse_err(line, "seq", "correctness must be 0 or 1")),
        };
        out.push((q.to_string(), c));
    }
    if out.len() < 2 {
        return Err(parse_err(line, "seq", "a student record needs at least 2 interactions"));
    }
    Ok(StudentRecord { id, seq: out })
}
