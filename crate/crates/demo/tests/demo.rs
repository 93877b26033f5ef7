use hgda_demo::{crf_explore, hardness, sample_episodes};
use serde_json::{json, Value};

fn call(f: fn(&str) -> String, req: Value) -> Value {
    serde_json::from_str(&f(&req.to_string())).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn crf_marginals_and_paths() {
    // tags: O, B-Dis, I-Dis; I-Dis scores highest at position 0
    let r = call(
        crf_explore,
        json!({
            "types": ["Dis"],
            "tokens": ["acute", "renal", "failure"],
            "emissions": [[0.0, 1.0, 3.0], [0.0, 0.5, 2.0], [1.0, 0.0, 0.2]],
        }),
    );
    assert!(r.get("error").is_none(), "{r}");
    assert_eq!(r["tags"], json!(["O", "B-Dis", "I-Dis"]));
    for row in r["marginals"].as_array().unwrap() {
        let s: f64 = floats(row).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(r["viterbi"]["tags"], json!(["I-Dis", "I-Dis", "O"]));
    assert_eq!(r["viterbi"]["entities"], json!([]));
    assert_eq!(r["viterbi_iob2"]["tags"], json!(["B-Dis", "I-Dis", "O"]));
    assert_eq!(r["viterbi_iob2"]["entities"], json!([[0, 2, "Dis"]]));
    let p = r["viterbi"]["probability"].as_f64().unwrap();
    let q = r["viterbi_iob2"]["probability"].as_f64().unwrap();
    assert!(q < p && p < 1.0);
}

#[test]
fn crf_transitions_change_the_decode() {
    let base = json!({"types": ["A"], "emissions": [[1.0, 0.0, 0.0], [0.0, 0.0, 0.9]]});
    let free = call(crf_explore, base.clone());
    let mut req = base;
    // forbid-ish O -> I-A, favour B-A -> I-A
    req["transitions"] = json!([[0.0, 0.0, -5.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]]);
    let tied = call(crf_explore, req);
    assert_eq!(free["viterbi"]["tags"], json!(["O", "I-A"]));
    assert_eq!(tied["viterbi"]["tags"], json!(["B-A", "I-A"]));
}

#[test]
fn crf_bad_requests() {
    let wrong = call(crf_explore, json!({"types": ["A"], "emissions": [[1.0, 2.0]]}));
    assert!(wrong["error"].as_str().unwrap().contains("1 x 3"), "{wrong}");
    let empty = call(crf_explore, json!({"types": [], "emissions": []}));
    assert!(empty.get("error").is_some());
    let tokens = call(
        crf_explore,
        json!({"types": [], "tokens": ["a", "b"], "emissions": [[0.0]]}),
    );
    assert!(tokens.get("error").is_some());
    let garbage: Value = serde_json::from_str(&crf_explore("{not json")).unwrap();
    assert!(garbage["error"].as_str().unwrap().starts_with("bad request"));
}

#[test]
fn hardness_weights() {
    let r = call(hardness, json!({"lab": [2.0, 1.0, 1.0]}));
    assert_eq!(floats(&r["gamma_theta"]), vec![0.5, 0.25, 0.25]);
    assert_eq!(floats(&r["gamma_phi"]), vec![0.5, 0.25, 0.25]);
    let third = 1.0 / 3.0;
    assert_eq!(floats(&r["gamma_omega"]), vec![third; 3]);

    let r = call(hardness, json!({"lab": [1.0, 1.0], "cls": [3.0, 1.0], "lambda": 0.5}));
    assert_eq!(floats(&r["total"]), vec![2.5, 1.5]);
    assert_eq!(floats(&r["gamma_omega"]), vec![0.75, 0.25]);

    assert!(call(hardness, json!({"lab": [1.0], "cls": [1.0, 2.0]}))
        .get("error")
        .is_some());
    assert!(call(hardness, json!({"lab": [-1.0, 1.0]})).get("error").is_some());
    assert!(call(hardness, json!({"lab": []})).get("error").is_some());
}

fn sample_req(mode: &str) -> Value {
    json!({
        "domains": [
            {"name": "gene", "sentences": 40, "entity_rate": 0.8},
            {"name": "species", "sentences": 40, "entity_rate": 0.15},
        ],
        "k": 5,
        "mode": mode,
        "count": 50,
        "seed": 3,
    })
}

#[test]
fn episodes_respect_the_sampling_mode() {
    let r = call(sample_episodes, sample_req("ne_constrained"));
    assert_eq!(r["support_entity_share"], json!(1.0));
    let counts = r["per_domain"].as_array().unwrap();
    assert_eq!(counts.iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 50);
    for ep in r["episodes"].as_array().unwrap() {
        let s = ep["support"].as_array().unwrap();
        let q = ep["query"].as_array().unwrap();
        assert_eq!((s.len(), q.len()), (5, 5));
        let mut idx: Vec<u64> = s.iter().chain(q).map(|p| p["index"].as_u64().unwrap()).collect();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 10);
    }
    let u = call(sample_episodes, sample_req("uniform"));
    assert!(u["support_entity_share"].as_f64().unwrap() < 1.0);
    assert_eq!(u, call(sample_episodes, sample_req("uniform")));
}

#[test]
fn episode_errors() {
    let mut req = sample_req("uniform");
    req["k"] = json!(30);
    let r = call(sample_episodes, req);
    assert!(r["error"].as_str().unwrap().contains("need 60"), "{r}");

    let mut req = sample_req("ne_constrained");
    req["domains"][1]["entity_rate"] = json!(0.05);
    assert!(call(sample_episodes, req).get("error").is_some());

    let mut req = sample_req("uniform");
    req["domains"][0]["entity_rate"] = json!(1.5);
    assert!(call(sample_episodes, req).get("error").is_some());
}
