mod common;

use common::*;
use hgda::crf::{log_partition, marginals, nll, viterbi, viterbi_masked, TransitionMask};
use hgda::rng::RngKey;
use hgda::vocab::TagVocab;

#[test]
fn crf_matches_enumeration() {
    let summary = check_crf_oracle(500, 11).unwrap();
    println!("{summary}");
}

#[test]
fn masked_viterbi_is_the_best_valid_path() {
    let tags = TagVocab::from_types(["A", "B"]);
    let mask = TransitionMask::iob2(&tags);
    for i in 0..200 {
        let mut rng = RngKey::new(5).index(i).stream();
        let len = 1 + (i as usize % 4);
        let params = random_crf(&mut rng, 1, tags.len());
        let scores = random_matrix(&mut rng, len, tags.len(), 3.0);
        let path = viterbi_masked(&scores, &params, Some(&mask)).unwrap();
        let best = all_paths(len, tags.len())
            .into_iter()
            .filter(|p| mask.start[p[0]] && p.windows(2).all(|w| mask.allowed[w[0]][w[1]]))
            .map(|p| (hgda::crf::path_score(&scores, &p, &params).unwrap(), p))
            .fold(None, |acc: Option<(f64, Vec<usize>)>, (s, p)| match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, p)),
            })
            .unwrap();
        assert_eq!(path, best.1, "instance {i}");
        let labels: Vec<&str> = path.iter().map(|&t| tags.tag(t)).collect();
        hgda::corpus::extract_entities(&labels).expect("decoded path is valid IOB2");
    }
}

#[test]
fn single_tag_and_single_token() {
    let mut rng = RngKey::new(2).stream();
    let params = random_crf(&mut rng, 1, 1);
    let scores = random_matrix(&mut rng, 3, 1, 1.0);
    let z = log_partition(&scores, &params).unwrap();
    assert!((z - enumerate(&scores, &params).log_z).abs() < 1e-12);
    assert!(nll(&scores, &[0, 0, 0], &params).unwrap().0.abs() < 1e-12);
    assert_eq!(viterbi(&scores, &params).unwrap(), vec![0, 0, 0]);
}

#[test]
fn marginals_match_enumeration() {
    for i in 0..200 {
        let mut rng = RngKey::new(8).index(i).stream();
        let len = 1 + (i as usize % 4);
        let tags = 1 + (i as usize / 4 % 4);
        let params = random_crf(&mut rng, 1, tags);
        let scores = random_matrix(&mut rng, len, tags, 2.0);
        let p = marginals(&scores, &params).unwrap();
        let z = enumerate(&scores, &params).log_z;
        let mut want = vec![vec![0.0; tags]; len];
        for path in all_paths(len, tags) {
            let w = (hgda::crf::path_score(&scores, &path, &params).unwrap() - z).exp();
            for (t, &y) in path.iter().enumerate() {
                want[t][y] += w;
            }
        }
        for (t, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                assert!(
                    (p.get(t, j) - w).abs() < 1e-12,
                    "instance {i} ({t},{j}): {} vs {w}",
                    p.get(t, j)
                );
            }
        }
    }
}
