mod common;

use quesnet::config::{Ablation, Config, ModelConfig};
use quesnet::corpus::{build_vocabulary, generate_synthetic, Corpus, SyntheticCorpus, SyntheticSpec};
use quesnet::finetune::*;
use quesnet::math::{grad_check_params, Graph, Tensor};
use quesnet::model::QuesNet;
use quesnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_corpus(questions: usize, seed: u64) -> SyntheticCorpus {
    let spec = SyntheticSpec {
        questions,
        label_ratio: 1.0,
        image_width: 8,
        image_height: 8,
        students: 60,
        min_interactions: 20,
        max_interactions: 30,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn small_config() -> Config {
    let mut c = Config::default();
    c.model = ModelConfig {
        embed_dim: 16,
        hidden: 16,
        layers: 1,
        heads: 2,
        pos_dim: 8,
        meta_hidden: 8,
        image_width: 8,
        image_height: 8,
        feature_maps: vec![4, 8],
        ..ModelConfig::default()
    };
    c.finetune.epochs = 3;
    c.finetune.lr = 3e-3;
    c.finetune.difficulty_hidden = 8;
    c.finetune.score_hidden = 8;
    c.train.seed = 5;
    c
}

#[test]
fn splits_are_deterministic_and_roughly_70_10_20() {
    let ids: Vec<String> = (0..5000).map(|i| format!("q{i:05}")).collect();
    let a = TaskSplit::from_ids(ids.iter().map(String::as_str), 3);
    let b = TaskSplit::from_ids(ids.iter().map(String::as_str), 3);
    assert_eq!(a, b);
    let frac = |v: &Vec<usize>| v.len() as f64 / 5000.0;
    assert!((frac(&a.train) - 0.7).abs() < 0.03);
    assert!((frac(&a.valid) - 0.1).abs() < 0.03);
    assert!((frac(&a.test) - 0.2).abs() < 0.03);
    assert_eq!(a.train.len() + a.valid.len() + a.test.len(), 5000);
    assert_ne!(a, TaskSplit::from_ids(ids.iter().map(String::as_str), 4));
}

#[test]
fn task_names_parse() {
    for t in Task::ALL {
        assert_eq!(t.name().parse::<Task>().unwrap(), t);
    }
    assert!(matches!("grade".parse::<Task>(), Err(Error::Validation { .. })));
}

#[test]
fn tasks_without_labels_are_rejected() {
    let mut data = small_corpus(200, 1).corpus;
    for q in &mut data.questions {
        q.knowledge = None;
        q.difficulty = None;
    }
    data.students.clear();
    let vocab = build_vocabulary(&data, 1);
    for task in Task::ALL {
        let r = prepare_task(task, &data, &vocab, &Ablation::default(), 0);
        assert!(matches!(r, Err(Error::Validation { .. })), "{task}");
    }
    data.questions[0].difficulty = Some(1.5);
    let r = prepare_task(Task::Difficulty, &data, &vocab, &Ablation::default(), 0);
    assert!(matches!(r, Err(Error::Validation { .. })));
}

#[test]
fn heads_produce_probabilities_of_the_right_shape() {
    let cfg = small_config();
    let data = small_corpus(200, 2).corpus;
    let vocab = build_vocabulary(&data, 1);
    for task in Task::ALL {
        let td = prepare_task(task, &data, &vocab, &Ablation::default(), 0).unwrap();
        let backbone = QuesNet::new(&cfg.model, vocab.len(), 0).unwrap();
        let m = FinetuneModel::new(task, backbone, td.labels, &cfg.finetune, &Ablation::default(), 0).unwrap();
        let report = evaluate_task(&m, &td, &td.split.test).unwrap();
        report.validate().unwrap();
        let names: Vec<&str> = match task {
            Task::Knowledge => vec!["acc", "f1", "precision", "recall"],
            Task::Difficulty => vec!["mae", "rmse"],
            Task::Score => vec!["acc", "auc", "mae", "rmse"],
        };
        for n in names {
            assert!(report.get(task.name(), n).is_some(), "{task}.{n}");
        }
        if let TaskHead::Knowledge(h) = &m.head {
            assert_eq!(h.labels, 6);
        }
    }
}

#[test]
fn score_model_steps_only_see_the_past() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let backbone = QuesNet::new(&cfg.model, 10, 0).unwrap();
    let m = FinetuneModel::new(Task::Score, backbone, 0, &cfg.finetune, &Ablation::default(), 1).unwrap();
    let TaskHead::Score(head) = &m.head else { unreachable!() };
    let width = cfg.model.content_dim() + 1;
    let base: Vec<f64> = (0..6 * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |x: Vec<f64>| {
        let mut g = Graph::new(&m.backbone.store);
        let steps = g.input(Tensor::new(vec![6, width], x).unwrap());
        let l = head.logits(&mut g, steps, &[6]).unwrap();
        g.value(l).data().to_vec()
    };
    let a = run(base.clone());
    let mut changed = base;
    for v in &mut changed[4 * width..5 * width] {
        *v += 1.0;
    }
    let b = run(changed);
    assert_eq!(a[..4], b[..4]);
    assert_ne!(a[4], b[4]);
}

#[test]
fn score_head_gradient_check() {
    let cfg = small_config();
    let backbone = QuesNet::new(&cfg.model, 10, 0).unwrap();
    let mut m = FinetuneModel::new(Task::Score, backbone, 0, &cfg.finetune, &Ablation::default(), 2).unwrap();
    let TaskHead::Score(head) = m.head.clone() else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let width = cfg.model.content_dim() + 1;
    let x: Vec<f64> = (0..8 * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..8).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let mut store = std::mem::take(&mut m.backbone.store);
    let check = grad_check_params(
        &mut store,
        |g| {
            let steps = g.input(Tensor::new(vec![8, width], x.clone())?);
            let l = head.logits(g, steps, &[4, 2])?;
            let b = g.bce_with_logits(l, y.clone())?;
            Ok(g.sum(b))
        },
        1e-5,
    )
    .unwrap();
    assert!(check.max_error() < 1e-4, "{:?}", check.worst());
}

fn run(task: Task, corpus: &Corpus, cfg: &Config) -> FinetuneOutcome {
    finetune_task(task, corpus, None, cfg).unwrap()
}

#[test]
fn fine_tuning_is_deterministic_and_checkpoints_roundtrip() {
    let data = small_corpus(300, 6).corpus;
    let cfg = small_config();
    let before = data.clone();
    let a = run(Task::Knowledge, &data, &cfg);
    let b = run(Task::Knowledge, &data, &cfg);
    assert_eq!(data, before);
    assert_eq!(a.report, b.report);
    assert_eq!(a.history, b.history);
    let ca = a.checkpoint(&cfg).to_bytes();
    assert_eq!(ca, b.checkpoint(&cfg).to_bytes());

    let ck = quesnet::checkpoint::Checkpoint::from_bytes(&ca).unwrap();
    assert_eq!(FinetuneModel::task_of(&ck), Some(Task::Knowledge));
    let m = FinetuneModel::from_checkpoint(&ck).unwrap();
    assert!(m.backbone.store.same_values(&a.model.backbone.store));
    let td = prepare_task(Task::Knowledge, &data, &ck.vocab, &ck.config.ablation, cfg.train.seed).unwrap();
    assert_eq!(evaluate_task(&m, &td, &td.split.test).unwrap(), a.report);
    assert_eq!(a.test_ids.len(), td.split.test.len());
}

#[test]
fn knowledge_mapping_learns_the_cue_labels() {
    let data = small_corpus(800, 7).corpus;
    let mut cfg = small_config();
    cfg.finetune.epochs = 30;
    cfg.finetune.target = Some(0.95);
    let out = run(Task::Knowledge, &data, &cfg);
    let f1 = out.report.get("knowledge", "f1").unwrap();
    assert!(f1 > 0.8, "test F1 {f1}, history {:?}", out.history);
}

#[test]
fn difficulty_and_score_train_end_to_end() {
    let data = small_corpus(400, 8).corpus;
    let mut cfg = small_config();
    cfg.finetune.epochs = 2;
    for task in [Task::Difficulty, Task::Score] {
        let out = run(task, &data, &cfg);
        out.report.validate().unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
    }
}

#[test]
fn frozen_backbone_only_updates_the_head() {
    let data = small_corpus(200, 9).corpus;
    let mut cfg = small_config();
    cfg.finetune.epochs = 1;
    cfg.finetune.freeze_backbone = true;
    let out = run(Task::Difficulty, &data, &cfg);
    let vocab = build_vocabulary(&data, 1);
    let fresh = QuesNet::new(&cfg.model, vocab.len(), cfg.train.seed).unwrap();
    let store = &out.model.backbone.store;
    let mut head_moved = false;
    for id in store.ids() {
        let name = store.name(id);
        match fresh.store.id(name) {
            Some(f) => assert_eq!(store.value(id), fresh.store.value(f), "{name} changed"),
            None => head_moved |= name.starts_with("task."),
        }
    }
    assert!(head_moved);
}

#[test]
fn text_only_ablation_ignores_images_and_meta() {
    let data = small_corpus(200, 10).corpus;
    let vocab = build_vocabulary(&data, 1);
    let text = Ablation {
        enable_image: false,
        enable_meta: false,
        ..Ablation::default()
    };
    let td = prepare_task(Task::Knowledge, &data, &vocab, &text, 0).unwrap();
    for t in td.tokens.iter().flatten() {
        assert!(t.iter().all(|x| x.is_word()));
    }
}

#[test]
fn reports_roundtrip_through_json() {
    let mut r = MetricReport::default();
    r.insert("difficulty", "mae", Some(0.05));
    r.insert("difficulty", "pcc", None);
    r.insert("knowledge", "f1", Some(0.97));
    let back = MetricReport::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.undefined["difficulty"], vec!["pcc".to_string()]);
    r.insert("score", "auc", Some(1.5));
    assert!(matches!(r.validate(), Err(Error::Numerical(_))));
}
