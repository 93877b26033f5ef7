mod common;

use common::*;
use hgda::corpus::{extract_entities, Corpus, Split};
use hgda::eval::{adapt, evaluate, run_protocol, span_metrics, target_vocabularies, AdaptationConfig};
use hgda::params::ParamGroup;
use hgda::rng::RngKey;
use hgda::synth::{generate, SynthConfig};
use hgda::vocab::{CharVocab, TagVocab, Vocab, Vocabularies};
use hgda::ModelParams;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn f1_matches_independent_reimplementation() {
    let kinds = ["A", "B", "C"];
    for i in 0..2000u64 {
        let mut rng = RngKey::new(8).index(i).stream();
        let n = rng.gen_range(1..=5);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n {
            let len = rng.gen_range(0..=8);
            let g = repair(&random_tags(&mut rng, len, &kinds));
            let p = repair(&random_tags(&mut rng, len, &kinds));
            let gs = extract_entities(&g).unwrap();
            let ps = extract_entities(&p).unwrap();
            assert_eq!(gs, naive_spans(&g));
            assert_eq!(ps, naive_spans(&p));
            gold.push(gs);
            pred.push(ps);
        }
        let m = span_metrics(&gold, &pred);
        assert_eq!((m.precision, m.recall, m.f1), naive_prf(&gold, &pred), "case {i}");
        assert!((0.0..=1.0).contains(&m.f1));
    }
}

struct Fixture {
    vocabs: Vocabularies,
    model: ModelParams,
    train: Corpus,
    test: Corpus,
}

/// A clearly separable single-type corpus and a randomly initialised model.
fn fixture(train_size: usize) -> Fixture {
    let cfg = SynthConfig {
        train: train_size,
        dev: 5,
        test: 40,
        entity_offset: 1.0,
        noise: 0.1,
        ..SynthConfig::default()
    };
    let suite = generate(&cfg).unwrap();
    let t = suite.corpora.len() - 1;
    let train = suite.corpus(t, Split::Train);
    let test = suite.corpus(t, Split::Test);
    let words = || {
        train
            .sentences
            .iter()
            .chain(&test.sentences)
            .flat_map(|s| s.tokens.iter().map(String::as_str))
    };
    let vocabs = Vocabularies {
        tokens: Vocab::build(words()),
        chars: CharVocab::build(words()),
        tags: TagVocab::from_types(["Disease"]),
    };
    let mut table = hgda::embeddings::EmbeddingTable::new(cfg.embedding_dim);
    for (w, v) in &suite.embeddings {
        table.insert(w.clone(), v.clone()).unwrap();
    }
    let enc = hgda::encoder::EncoderConfig {
        embedding_dim: cfg.embedding_dim,
        hidden_size: 16,
        ..Default::default()
    };
    let model = ModelParams::init(&enc, &vocabs, 3, Some(&table), &mut RngKey::new(1).stream()).unwrap();
    Fixture {
        vocabs,
        model,
        train,
        test,
    }
}

fn quick() -> AdaptationConfig {
    AdaptationConfig {
        repeats: 3,
        adapt_steps: 30,
        adapt_lr: Some(0.05),
        ..AdaptationConfig::default()
    }
}

#[test]
fn evaluation_is_permutation_invariant() {
    let f = fixture(20);
    let tv = target_vocabularies(&f.vocabs, &f.train, &f.test);
    let enc: Vec<_> = f.train.sentences.iter().map(|s| tv.encode(s).unwrap()).collect();
    let model = adapt(&f.model, &enc, &tv.tags, &quick(), RngKey::new(3)).unwrap();
    let a = evaluate(&model, &tv, &f.test.sentences).unwrap();
    let mut shuffled = f.test.sentences.clone();
    shuffled.shuffle(&mut RngKey::new(4).stream());
    assert_eq!(a, evaluate(&model, &tv, &shuffled).unwrap());
}

#[test]
fn zero_steps_keeps_the_encoder_and_drops_the_domain_head() {
    let f = fixture(20);
    let tv = target_vocabularies(&f.vocabs, &f.train, &f.test);
    let enc: Vec<_> = f.train.sentences.iter().map(|s| tv.encode(s).unwrap()).collect();
    let cfg = AdaptationConfig {
        adapt_steps: 0,
        ..quick()
    };
    let m = adapt(&f.model, &enc, &tv.tags, &cfg, RngKey::new(3)).unwrap();
    assert!(m.theta.bitwise_eq(&f.model.theta));
    assert!(m.omega.is_none());
    assert_eq!(m.phi.num_tags(), 3);
}

#[test]
fn adaptation_is_deterministic() {
    let f = fixture(20);
    let tv = target_vocabularies(&f.vocabs, &f.train, &f.test);
    let enc: Vec<_> = f.train.sentences.iter().map(|s| tv.encode(s).unwrap()).collect();
    let a = adapt(&f.model, &enc, &tv.tags, &quick(), RngKey::new(3)).unwrap();
    let b = adapt(&f.model, &enc, &tv.tags, &quick(), RngKey::new(3)).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn overfits_a_separable_training_set() {
    let f = fixture(20);
    let tv = target_vocabularies(&f.vocabs, &f.train, &f.test);
    let enc: Vec<_> = f.train.sentences.iter().map(|s| tv.encode(s).unwrap()).collect();
    let cfg = AdaptationConfig {
        adapt_steps: 300,
        adapt_lr: Some(0.1),
        dropout: 0.0,
        ..AdaptationConfig::default()
    };
    let m = adapt(&f.model, &enc, &tv.tags, &cfg, RngKey::new(3)).unwrap();
    let train_f1 = evaluate(&m, &tv, &f.train.sentences).unwrap().f1;
    assert_eq!(train_f1, 1.0);
}

#[test]
fn protocol_edge_cases() {
    let f = fixture(20);
    let one = run_protocol(
        &f.model,
        &f.vocabs,
        &f.train,
        &f.test,
        5,
        &AdaptationConfig { repeats: 1, ..quick() },
        1,
        "m",
    )
    .unwrap();
    assert_eq!(one.repeats.len(), 1);
    assert_eq!(one.mean_f1, one.repeats[0].f1);
    assert_eq!(one.mean_precision, one.repeats[0].precision);

    // every repeat draws the whole train split
    let all = run_protocol(&f.model, &f.vocabs, &f.train, &f.test, 20, &quick(), 1, "m").unwrap();
    assert!(all
        .repeats
        .iter()
        .all(|r| r.f1 == all.repeats[0].f1 && r.episode == all.repeats[0].episode));

    let csv = all.to_csv();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(csv.lines().last().unwrap().starts_with("m,disease,20,mean,"));
}

#[test]
fn leaked_episode_is_rejected() {
    let f = fixture(20);
    let mut test = f.test.clone();
    test.sentences.push(f.train.sentences[0].clone());
    let err = run_protocol(&f.model, &f.vocabs, &f.train, &test, 20, &quick(), 1, "m").unwrap_err();
    assert!(matches!(err, hgda::Error::TargetLeakage { .. }), "{err}");
}
