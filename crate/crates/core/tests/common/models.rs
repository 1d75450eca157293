//! Tiny model configurations and random questions shared by tests.

use quesnet::config::{Ablation, ModelConfig, TrainConfig};
use quesnet::corpus::{EncodedOption, EncodedToken};
use quesnet::math::{grad_check_params, Graph, ParamCheck, ParamStore, Tensor};
use quesnet::model::QuesNet;
use quesnet::pretrain::{batch_loss, hlm_context_at, PretrainItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 9;
pub const CATEGORIES: usize = 3;
pub const SIDE: usize = 4;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        hidden: 5,
        layers: 2,
        heads: 2,
        pos_dim: 4,
        meta_categories: CATEGORIES,
        meta_hidden: 4,
        image_width: SIDE,
        image_height: SIDE,
        feature_maps: vec![2, 2],
        leaky_slope: 0.1,
        disc_hidden: 3,
        ..ModelConfig::default()
    }
}

/// Adds `U(−scale, scale)` noise to every parameter so no bias or initial
/// state sits at an exact zero.
pub fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let mut v = store.value(id).clone();
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-scale..scale));
        store.set_value(id, v).unwrap();
    }
}

pub fn tiny_model(seed: u64) -> QuesNet {
    let mut m = QuesNet::new(&tiny_config(), VOCAB, seed).unwrap();
    perturb(&mut m.store, seed ^ 0x5eed, 0.1);
    m
}

pub fn random_word(rng: &mut ChaCha8Rng) -> EncodedToken {
    EncodedToken::Word(rng.random_range(0..VOCAB))
}

pub fn random_image(rng: &mut ChaCha8Rng) -> EncodedToken {
    EncodedToken::Image((0..SIDE * SIDE).map(|_| rng.random::<f64>()).collect())
}

/// Meta at position 0, then words with one image somewhere inside.
pub fn mixed_tokens(len: usize, rng: &mut ChaCha8Rng) -> Vec<EncodedToken> {
    let mut t = vec![EncodedToken::Meta(rng.random_range(0..CATEGORIES))];
    t.extend((1..len).map(|_| random_word(rng)));
    if len > 2 {
        let at = rng.random_range(1..len);
        t[at] = random_image(rng);
    }
    t
}

pub fn item(id: &str, tokens: Vec<EncodedToken>, options: &[(&[usize], bool)]) -> PretrainItem {
    PretrainItem {
        id: id.to_string(),
        tokens,
        options: options
            .iter()
            .map(|(w, c)| EncodedOption {
                words: w.to_vec(),
                correct: *c,
            })
            .collect(),
    }
}

/// Finite-difference check of the joint pre-training loss over every
/// parameter of a tiny model, on a batch mixing all token kinds.
pub fn joint_loss_check(seed: u64) -> ParamCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = tiny_model(seed);
    let items = vec![
        item("a", mixed_tokens(4, &mut rng), &[(&[2, 3], true), (&[4], false)]),
        item("b", mixed_tokens(3, &mut rng), &[]),
        item("c", vec![random_word(&mut rng), random_word(&mut rng)], &[(&[5, 6, 7], false), (&[8], true)]),
    ];
    let ablation = Ablation::default();
    let train = TrainConfig {
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut store = std::mem::take(&mut model.store);
    let check = grad_check_params(
        &mut store,
        |g| {
            let refs: Vec<&PretrainItem> = items.iter().collect();
            Ok(batch_loss(g, &model, &refs, &ablation, &train)?.total)
        },
        1e-5,
    )
    .unwrap();
    model.store = store;
    check
}

/// Word logits, image reconstruction and meta logits predicted at `t`.
pub fn predictions_at(model: &QuesNet, tokens: &[EncodedToken], t: usize) -> (Tensor, Tensor, Tensor, Tensor) {
    let mut g = Graph::new(&model.store);
    let r = model.represent(&mut g, &[tokens], 0.0).unwrap();
    let ctx = hlm_context_at(&mut g, model, &r.state, t).unwrap();
    let w = model.hlm.word.forward(&mut g, ctx).unwrap();
    let zi = model.hlm.image.forward(&mut g, ctx).unwrap();
    let img = model.embedder.image.decode(&mut g, zi).unwrap();
    let zm = model.hlm.meta.forward(&mut g, ctx).unwrap();
    let meta = model.embedder.meta.decode(&mut g, zm).unwrap();
    let sm = g.softmax(w);
    (
        g.value(ctx).clone(),
        g.value(sm).clone(),
        g.value(img).clone(),
        g.value(meta).clone(),
    )
}
