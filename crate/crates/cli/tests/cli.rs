use std::path::Path;
use std::process::{Command, Output};

use quesnet::checkpoint::Checkpoint;
use quesnet::corpus::load_corpus;
use quesnet::finetune::MetricReport;

const TINY: &str = r#"
[model]
embed_dim = 8
hidden = 8
layers = 1
heads = 2
pos_dim = 4
meta_hidden = 8
image_width = 8
image_height = 8
feature_maps = [4, 8]

[train]
epochs = 1
batch_size = 16

[embedding]
ae_epochs = 6
w2v_epochs = 1

[finetune]
epochs = 2

[synthetic]
questions = 300
image_width = 8
image_height = 8
label_ratio = 1.0
students = 30
min_interactions = 10
max_interactions = 20
"#;

fn quesnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quesnet"))
        .args(args)
        .env("QUESNET_DATA_DIR", dir)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = quesnet(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    dir
}

#[test]
fn default_corpus_matches_its_ratios_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-corpus", "--out", "a", "--seed", "3"]);
    ok(dir.path(), &["gen-corpus", "--out", "b", "--seed", "3"]);
    let a = std::fs::read(dir.path().join("a/corpus.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/corpus.jsonl")).unwrap());
    let corpus = load_corpus(dir.path().join("a/corpus.jsonl")).unwrap();
    let n = corpus.questions.len() as f64;
    let frac = |f: &dyn Fn(&quesnet::corpus::Question) -> bool| corpus.questions.iter().filter(|q| f(q)).count() as f64 / n;
    assert!((frac(&|q| q.has_image()) - 0.25).abs() <= 0.02);
    assert!((frac(&|q| q.has_meta()) - 0.72).abs() <= 0.02);
    assert!((frac(&|q| !q.options.is_empty()) - 0.36).abs() <= 0.02);
}

#[test]
fn invalid_ratio_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.toml"), "image_ratio = 1.5\n").unwrap();
    let out = quesnet(dir.path(), &["gen-corpus", "--spec", "spec.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("image_ratio"));
    let out = quesnet(dir.path(), &["--set", "synthetic.image_ratio=1.5", "gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = quesnet(dir.path(), &["--set", "model.nope=1", "gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_prior_stages_exit_with_3() {
    let dir = tiny_dir();
    let c = ["--config", "cfg.toml"];
    let out = quesnet(dir.path(), &[&c[..], &["pretrain-emb"]].concat());
    assert_eq!(out.status.code(), Some(3));
    ok(dir.path(), &[&c[..], &["gen-corpus"]].concat());
    let out = quesnet(dir.path(), &[&c[..], &["pretrain"]].concat());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("emb.ckpt"));
    let out = quesnet(dir.path(), &[&c[..], &["finetune", "--task", "knowledge"]].concat());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.ckpt"));
}

#[test]
fn diverging_pretraining_exits_with_4() {
    let dir = tiny_dir();
    let c = ["--config", "cfg.toml"];
    ok(dir.path(), &[&c[..], &["gen-corpus"]].concat());
    let out = quesnet(
        dir.path(),
        &[&c[..], &["--set", "train.lr=1e200", "--set", "train.batch_size=4", "pretrain", "--no-emb-pretrain"]].concat(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tiny_dir();
    let p = dir.path();
    let c = ["--config", "cfg.toml"];
    ok(p, &[&c[..], &["gen-corpus"]].concat());
    ok(p, &[&c[..], &["pretrain-emb"]].concat());
    ok(p, &[&c[..], &["pretrain"]].concat());
    let first = std::fs::read(p.join("runs/pretrain/pretrain.ckpt")).unwrap();
    ok(p, &[&c[..], &["pretrain"]].concat());
    assert_eq!(first, std::fs::read(p.join("runs/pretrain/pretrain.ckpt")).unwrap());
    assert!(p.join("runs/pretrain/metrics.jsonl").exists());
    assert!(p.join("runs/pretrain/checkpoints/epoch-001.ckpt").exists());

    for task in ["knowledge", "difficulty", "score"] {
        ok(p, &[&c[..], &["finetune", "--task", task]].concat());
        let report = std::fs::read_to_string(p.join(format!("runs/finetune/{task}/report.json"))).unwrap();
        let report = MetricReport::from_json(&report).unwrap();
        report.validate().unwrap();
        assert!(report.metrics.contains_key(task));
        let a = ok(p, &[&c[..], &["eval", "--task", task]].concat()).stdout;
        let b = ok(p, &[&c[..], &["eval", "--task", task]].concat()).stdout;
        assert_eq!(a, b);
        assert_eq!(MetricReport::from_json(&String::from_utf8(a).unwrap()).unwrap(), report);
    }
    let out = ok(p, &[&c[..], &["eval"]].concat());
    assert!(String::from_utf8_lossy(&out.stdout).contains("word_cross_entropy"));
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let dir = tiny_dir();
    let p = dir.path();
    let c = ["--config", "cfg.toml"];
    ok(p, &[&c[..], &["gen-corpus"]].concat());
    ok(p, &[&c[..], &["--enable-image=false", "pretrain", "--no-emb-pretrain"]].concat());
    let ck = Checkpoint::load(&p.join("runs/pretrain/pretrain.ckpt")).unwrap();
    assert!(!ck.config.ablation.enable_image);
    assert!(ck.config.ablation.enable_text && ck.config.ablation.enable_meta);
    ok(
        p,
        &[&c[..], &["--enable-image=false", "--freeze-backbone=true", "finetune", "--task", "difficulty"]].concat(),
    );
    let ft = Checkpoint::load(&p.join("runs/finetune/difficulty/finetune.ckpt")).unwrap();
    assert!(!ft.config.ablation.enable_image);
    assert!(ft.config.finetune.freeze_backbone);
}
