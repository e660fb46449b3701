use std::fs::File;
use std::io::BufReader;

use convqg_core::metrics::{
    bleu, cider_per_instance, evaluate, meteor_lite, parse_preferences, preference_histogram, rouge_l, Choice,
    EvalCorpus, EvalInstance,
};
use proptest::prelude::*;
use serde::Deserialize;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

#[derive(Deserialize)]
struct OracleInstance {
    candidate: String,
    references: Vec<String>,
}

/// Values from an independent brute-force implementation (`fixtures/make_metrics_oracle.py`).
#[derive(Deserialize)]
struct Oracle {
    instances: Vec<OracleInstance>,
    bleu: Vec<f64>,
    rouge_l: Vec<f64>,
    meteor_lite: Vec<f64>,
    cider: Vec<f64>,
}

fn oracle() -> Oracle {
    let f = File::open(format!("{FIXTURES}/metrics_oracle.json")).unwrap();
    serde_json::from_reader(f).unwrap()
}

fn corpus_of(pairs: &[(&str, &[&str])]) -> EvalCorpus {
    EvalCorpus::new(
        pairs
            .iter()
            .enumerate()
            .map(|(i, (c, r))| EvalInstance {
                id: i.to_string(),
                candidate: c.to_string(),
                references: r.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn oracle_corpus(o: &Oracle) -> EvalCorpus {
    EvalCorpus::new(
        o.instances
            .iter()
            .enumerate()
            .map(|(i, x)| EvalInstance { id: i.to_string(), candidate: x.candidate.clone(), references: x.references.clone() })
            .collect(),
    )
    .unwrap()
}

fn single(i: &EvalInstance) -> EvalCorpus {
    EvalCorpus::new(vec![i.clone()]).unwrap()
}

#[test]
fn agrees_with_the_brute_force_oracle() {
    let o = oracle();
    assert_eq!(o.instances.len(), 20);
    let c = oracle_corpus(&o);
    for n in 1..=4 {
        assert!((bleu(&c, n).unwrap() - o.bleu[n - 1]).abs() < 1e-9, "BLEU-{n}");
    }
    for (k, inst) in c.instances().iter().enumerate() {
        assert!((rouge_l(&single(inst)).unwrap() - o.rouge_l[k]).abs() < 1e-9, "ROUGE-L #{k}");
        assert!((meteor_lite(&single(inst)).unwrap() - o.meteor_lite[k]).abs() < 1e-9, "METEOR #{k}");
    }
    let cider = cider_per_instance(&c).unwrap();
    for (k, (x, y)) in cider.iter().zip(&o.cider).enumerate() {
        assert!((x - y).abs() < 1e-9, "CIDEr #{k}: {x} vs {y}");
    }
    let report = evaluate(&c).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((report.rouge_l - mean(&o.rouge_l)).abs() < 1e-9);
    assert!((report.meteor_lite - mean(&o.meteor_lite)).abs() < 1e-9);
    assert!((report.cider - mean(&o.cider)).abs() < 1e-9);
}

#[test]
fn hand_computed_values() {
    let b = bleu(&corpus_of(&[("the cat", &["the cat sat"])]), 1).unwrap();
    assert!((b - 0.60653).abs() < 1e-5);
    let r = rouge_l(&corpus_of(&[("a b c", &["a c d"])])).unwrap();
    assert!((r - 0.6667).abs() < 1e-4);
    let m = meteor_lite(&corpus_of(&[("a b c", &["a b c"])])).unwrap();
    assert!((m - 0.98148).abs() < 1e-5);
    assert_eq!(meteor_lite(&corpus_of(&[("b a", &["a b"])])).unwrap(), 0.5);
}

#[test]
fn punctuation_and_case_do_not_matter() {
    let a = evaluate(&corpus_of(&[("What is the cup used for?", &["what is the cup used for"]), ("x y", &["y z"])])).unwrap();
    let b = evaluate(&corpus_of(&[("what is the cup used for", &["What is the cup used for ?"]), ("x y", &["y z"])])).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn identical_candidates_score_one(words in prop::collection::vec("[a-z]{1,6}", 4..9)) {
        let s = words.join(" ");
        let c = corpus_of(&[(&s, &[&s])]);
        for n in 1..=4 {
            prop_assert!((bleu(&c, n).unwrap() - 1.0).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_range(
        cand in prop::collection::vec("[a-d]", 1..7),
        refr in prop::collection::vec("[a-d]", 1..7),
    ) {
        let (c, r) = (cand.join(" "), refr.join(" "));
        let corpus = corpus_of(&[(&c, &[&r]), ("z", &["z"])]);
        let rep = evaluate(&corpus).unwrap();
        for v in [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rouge_l, rep.meteor_lite] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        prop_assert!(rep.cider >= 0.0 && rep.cider <= 10.0 + 1e-9);
    }
}

fn records(name: &str) -> Vec<convqg_core::metrics::PreferenceRecord> {
    parse_preferences(BufReader::new(File::open(format!("{FIXTURES}/{name}")).unwrap())).unwrap()
}

#[test]
fn preference_totals_are_exact() {
    let recs = records("preferences_500.jsonl");
    assert_eq!(recs.len(), 500);
    let h = preference_histogram(&recs, 5).unwrap();
    assert_eq!((h.totals.n_a, h.totals.n_b, h.totals.n_similar), (236, 183, 81));
    let summed: usize = h.bins.iter().map(|b| b.total()).sum();
    assert_eq!(summed, 500);
    assert_eq!(h.bins.iter().map(|b| b.n_a).sum::<usize>(), 236);
    for b in &h.bins {
        let p = b.proportions();
        if b.total() > 0 {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_pairs_land_in_the_top_bin() {
    let recs = records("preferences_identical.jsonl");
    for bins in [1, 4, 10] {
        let h = preference_histogram(&recs, bins).unwrap();
        assert_eq!(h.bins[bins - 1].total(), recs.len());
        assert_eq!(h.bins[bins - 1].bin_high, 1.0);
    }
}

#[test]
fn malformed_preference_lines_report_their_number() {
    let text = "{\"question_a\":\"a b\",\"question_b\":\"a c\",\"choice\":\"A\"}\n\n{\"question_a\":\"x\",\"choice\":\"B\"}\n";
    let err = parse_preferences(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
    let bad = "{\"question_a\":\"?!\",\"question_b\":\"a\",\"choice\":\"Similar\"}\n";
    assert!(parse_preferences(bad.as_bytes()).is_err());
    let ok = parse_preferences("{\"question_a\":\"a\",\"question_b\":\"a\",\"choice\":\"Similar\"}".as_bytes()).unwrap();
    assert_eq!(ok[0].choice, Choice::Similar);
}
