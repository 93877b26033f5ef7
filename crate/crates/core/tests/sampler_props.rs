mod common;

use common::*;
use hgda::corpus::{Corpus, Sentence, Split};
use hgda::rng::RngKey;
use hgda::sampler::{make_target_episode, sample_batch, SamplerConfig, SamplingMode};
use hgda::Error;

#[test]
fn thousand_draws() {
    println!("{}", check_sampler(1000, 17).unwrap());
}

#[test]
fn domain_weights_are_respected() {
    let pool = property_pool();
    let cfg = SamplerConfig {
        domain_weights: Some(vec![0.0, 1.0, 0.0]),
        ..SamplerConfig::default()
    };
    let tasks = sample_batch(&pool, &cfg, 200, RngKey::new(1)).unwrap();
    assert!(tasks.iter().all(|t| t.domain == 1));
}

#[test]
fn uniform_domain_choice_covers_all_domains() {
    let pool = property_pool();
    let tasks = sample_batch(&pool, &SamplerConfig::default(), 600, RngKey::new(2)).unwrap();
    for d in 0..3 {
        let n = tasks.iter().filter(|t| t.domain == d).count();
        assert!((150..250).contains(&n), "domain {d}: {n}");
    }
}

#[test]
fn different_keys_give_different_batches() {
    let pool = property_pool();
    let cfg = SamplerConfig::default();
    assert_ne!(
        sample_batch(&pool, &cfg, 20, RngKey::new(1)).unwrap(),
        sample_batch(&pool, &cfg, 20, RngKey::new(2)).unwrap()
    );
}

#[test]
fn ne_constrained_needs_enough_entity_sentences() {
    let pool = property_pool();
    let cfg = SamplerConfig {
        k: 7,
        mode: SamplingMode::NeConstrained,
        ..SamplerConfig::default()
    };
    assert!(matches!(pool.validate(&cfg), Err(Error::NoEntitySentences { .. })));
}

fn corpus(n: usize) -> Corpus {
    let sentences = (0..n)
        .map(|i| Sentence::new(vec![format!("t{i}")], vec!["O".into()], 0).unwrap())
        .collect();
    Corpus::new("c", 0, Split::Train, sentences)
}

#[test]
fn target_episodes() {
    let c = corpus(30);
    let a = make_target_episode(&c, 10, 3, 9).unwrap();
    assert_eq!(a, make_target_episode(&c, 10, 3, 9).unwrap());
    assert_ne!(a.indices, make_target_episode(&c, 10, 4, 9).unwrap().indices);
    assert_eq!(a.indices.len(), 10);
    assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    // the whole pool when size equals its length
    assert_eq!(
        make_target_episode(&c, 30, 0, 1).unwrap().indices,
        (0..30).collect::<Vec<_>>()
    );
    assert!(matches!(
        make_target_episode(&c, 31, 0, 1),
        Err(Error::InsufficientSentences { .. })
    ));
}
