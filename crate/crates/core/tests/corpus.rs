use std::fs;

use proptest::prelude::*;
use quesnet::corpus::*;
use quesnet::Error;
use serde_json::Value;

fn small_spec(questions: usize) -> SyntheticSpec {
    SyntheticSpec {
        questions,
        students: 20,
        min_interactions: 5,
        max_interactions: 10,
        image_width: 8,
        image_height: 8,
        ..SyntheticSpec::default()
    }
}

#[test]
fn loads_text_and_image_questions() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("img")).unwrap();
    fs::write(dir.path().join("img/a.txt"), "3 2\n0 0.5 1\n0.25 0.75 0.125\n").unwrap();
    let text = concat!(
        r#"{"id":"q1","tokens":[{"w":"x"},{"w":"y"}],"options":[]}"#,
        "\n",
        r#"{"id":"q2","tokens":[{"meta":[0,1,0]},{"w":"x"},{"img":"img/a.txt"}],"options":[{"tokens":[{"w":"k"}],"correct":true}],"knowledge":[1],"difficulty":0.4}"#,
        "\n"
    );
    let path = dir.path().join("c.jsonl");
    fs::write(&path, text).unwrap();
    let c = load_corpus(&path).unwrap();
    assert_eq!(c.questions.len(), 2);
    let Token::Image(img) = &c.questions[1].tokens[2] else { panic!() };
    assert_eq!((img.width, img.height), (3, 2));
    assert_eq!(img.pixels, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]);
    assert!(matches!(c.questions[1].tokens[0], Token::Meta { category: 1, .. }));

    let out = dir.path().join("out.jsonl");
    save_corpus(&c, &out).unwrap();
    let a: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let b: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(a, b);
}

#[test]
fn empty_file_is_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.jsonl");
    fs::write(&p, "").unwrap();
    assert_eq!(load_corpus(&p).unwrap(), Corpus::default());
    assert!(matches!(load_corpus(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn schema_violations_cite_line_and_field() {
    let base = std::path::Path::new(".");
    let bad_meta = concat!(
        r#"{"id":"a","tokens":[{"w":"x"}]}"#,
        "\n",
        r#"{"id":"b","tokens":[{"meta":[1,1,0]},{"w":"x"}]}"#
    );
    match parse_corpus(bad_meta, base) {
        Err(Error::Parse { line: 2, field, .. }) => assert_eq!(field, "meta"),
        other => panic!("{other:?}"),
    }
    let cases = [
        (r#"{"id":"a","tokens":[{"w":"x"},{"meta":1}]}"#, "meta"),
        (r#"{"id":"a","tokens":[{"meta":1}]}"#, "tokens"),
        (r#"{"id":"a","tokens":[{"w":"x"}],"difficulty":1.5}"#, "difficulty"),
        (r#"{"id":"a","tokens":[{"w":"x"}],"options":[{"tokens":[{"w":"o"}],"correct":false}]}"#, "options"),
        (r#"{"tokens":[{"w":"x"}]}"#, "id"),
        (r#"{"id":"s","seq":[["a",1]]}"#, "seq"),
    ];
    for (line, want) in cases {
        match parse_corpus(line, base) {
            Err(Error::Parse { line: 1, field, .. }) => assert_eq!(field, want, "{line}"),
            other => panic!("{line}: {other:?}"),
        }
    }
    let unknown = "{\"id\":\"a\",\"tokens\":[{\"w\":\"x\"}]}\n{\"id\":\"s\",\"seq\":[[\"a\",1],[\"zz\",0]]}";
    assert!(matches!(parse_corpus(unknown, base), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn vocabulary_is_deterministic_across_loads() {
    let g = generate_synthetic(&small_spec(200), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &g).unwrap();
    let a = load_corpus(dir.path().join("corpus.jsonl")).unwrap();
    let b = load_corpus(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(build_vocabulary(&a, 1), build_vocabulary(&b, 1));
    let mut stripped = a.clone();
    for q in &mut stripped.questions {
        for t in &mut q.tokens {
            if let Token::Image(img) = t {
                img.source = None;
            }
        }
    }
    assert_eq!(stripped, g.corpus);
}

#[test]
fn generator_is_byte_deterministic() {
    let spec = small_spec(300);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synthetic(d1.path(), &generate_synthetic(&spec, 11).unwrap()).unwrap();
    write_synthetic(d2.path(), &generate_synthetic(&spec, 11).unwrap()).unwrap();
    let read = |d: &std::path::Path| {
        let mut files: Vec<_> = walk(d);
        files.sort();
        files
            .into_iter()
            .map(|p| (p.strip_prefix(d).unwrap().to_path_buf(), fs::read(&p).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(read(d1.path()), read(d2.path()));
    let d3 = tempfile::tempdir().unwrap();
    write_synthetic(d3.path(), &generate_synthetic(&spec, 12).unwrap()).unwrap();
    assert_ne!(read(d1.path()), read(d3.path()));
}

fn walk(d: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn realized_ratios_match_spec() {
    let spec = SyntheticSpec {
        image_width: 4,
        image_height: 4,
        students: 0,
        ..SyntheticSpec::default()
    };
    let g = generate_synthetic(&spec, 3).unwrap();
    let n = g.corpus.questions.len() as f64;
    let ratio = |f: &dyn Fn(&Question) -> bool| g.corpus.questions.iter().filter(|q| f(q)).count() as f64 / n;
    assert!((ratio(&|q| q.has_image()) - 0.25).abs() <= 0.02);
    assert!((ratio(&|q| q.has_meta()) - 0.72).abs() <= 0.02);
    assert!((ratio(&|q| !q.options.is_empty()) - 0.36).abs() <= 0.02);
}

#[test]
fn planted_grammar_separates_unigram_and_conditional_entropy() {
    let g = generate_synthetic(&small_spec(10_000), 5).unwrap();
    let e = count_entropy(&g.corpus.questions);
    assert!(e.unigram >= e.conditional + 0.5, "{e:?}");
}

#[test]
fn invalid_ratio_names_field() {
    let spec = SyntheticSpec {
        image_ratio: 1.5,
        ..SyntheticSpec::default()
    };
    match generate_synthetic(&spec, 0) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "image_ratio"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn students_follow_logistic_difficulty_model() {
    let g = generate_synthetic(&small_spec(500), 8).unwrap();
    let idx = g.corpus.question_index();
    for (s, probs) in g.corpus.students.iter().zip(&g.truth.response_prob) {
        assert!(s.seq.len() >= 5 && s.seq.len() <= 10);
        assert_eq!(s.seq.len(), probs.len());
        assert!(s.seq.iter().all(|(q, _)| idx.contains_key(q.as_str())));
    }
    assert!(g.truth.oracle_auc > 0.8 && g.truth.oracle_auc < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn exactly_one_option_shares_a_stem_cue(seed in 0u64..1_000) {
        let g = generate_synthetic(&small_spec(60), seed).unwrap();
        for q in &g.corpus.questions {
            if q.options.is_empty() {
                continue;
            }
            let cues: Vec<&str> = q.words().filter(|w| w.starts_with("cue")).collect();
            let sharing: Vec<bool> = q
                .options
                .iter()
                .map(|o| o.tokens.iter().any(|w| cues.contains(&w.as_str())))
                .collect();
            prop_assert_eq!(sharing.iter().filter(|s| **s).count(), 1);
            let correct = q.options.iter().position(|o| o.correct).unwrap();
            prop_assert!(sharing[correct]);
            let know = q.knowledge.clone().unwrap_or_default();
            prop_assert!(know.iter().all(|k| *k < 6));
        }
    }

    #[test]
    fn serialize_load_roundtrip(seed in 0u64..1_000) {
        let g = generate_synthetic(&small_spec(25), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&g.corpus, &p).unwrap();
        let first = fs::read_to_string(&p).unwrap();
        let loaded = load_corpus(&p).unwrap();
        let q = dir.path().join("again.jsonl");
        save_corpus(&loaded, &q).unwrap();
        prop_assert_eq!(first, fs::read_to_string(&q).unwrap());
    }
}
