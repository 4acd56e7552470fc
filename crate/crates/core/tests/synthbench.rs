//! Synthetic benchmark: generation, persistence, analytic baselines and
//! the evaluation harness.

mod common;

use common::hypergeometric_recall;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sevit::synthbench::{
    bucket_label, evaluate, expected_uniform_recall, generate_dataset, hit_probability,
    ConstantAnswerer, GenConfig, OracleAnswerer, RestrictedOracle, SyntheticDataset, BUCKETS,
};
use sevit::vocab::{Vocab, CLASS_WORDS};
use sevit::Error;

fn config(lengths: Vec<usize>, test: usize) -> GenConfig {
    GenConfig {
        lengths,
        train_per_length: 100,
        val_per_length: 2,
        test_per_length: test,
        ..GenConfig::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_replays_bytes_and_round_trips() {
    let cfg = config(vec![20, 60], 5);
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        root.path().join("a"),
        root.path().join("b"),
        root.path().join("c"),
    );
    generate_dataset(&cfg, 7).unwrap().save(&a).unwrap();
    generate_dataset(&cfg, 7).unwrap().save(&b).unwrap();
    generate_dataset(&cfg, 8).unwrap().save(&c).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
    let loaded = SyntheticDataset::load(&a).unwrap();
    assert!(
        loaded == generate_dataset(&cfg, 7).unwrap(),
        "loaded dataset differs from the generated one"
    );
}

#[test]
fn load_rejects_out_of_range_planted_frames() {
    let cfg = config(vec![20], 2);
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 1).unwrap().save(dir.path()).unwrap();
    let qa = dir.path().join("test").join("qa.jsonl");
    let text = std::fs::read_to_string(&qa).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    v["relevant_frames"] = serde_json::json!([999]);
    lines[0] = v.to_string();
    std::fs::write(&qa, lines.join("\n") + "\n").unwrap();
    let err = SyntheticDataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(err.to_string().contains("relevant frame 999 out of range"));
}

#[test]
fn labels_are_balanced_so_majority_is_near_chance() {
    let ds = generate_dataset(&config(vec![20, 60, 180, 400], 50), 3).unwrap();
    let majority = ds.majority_answer();
    let vocab = Vocab::default();
    let answerer = ConstantAnswerer {
        token: vocab.id(&majority),
    };
    let m = evaluate(&answerer, &ds.test, 10, &[], 1).unwrap();
    assert!((m.accuracy - 0.25).abs() <= 0.05, "{}", m.accuracy);
    assert!(CLASS_WORDS[..4].contains(&majority.as_str()));
}

#[test]
fn oracle_is_perfect_and_recall_is_one() {
    let ds = generate_dataset(&config(vec![20, 60, 180, 400], 10), 4).unwrap();
    let oracle = OracleAnswerer {
        prototypes: &ds.prototypes,
        vocab: Vocab::default(),
    };
    let m = evaluate(&oracle, &ds.test, 10, &[1, 2, 5], 1).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.recall, 1.0);
    assert!(m
        .cells
        .iter()
        .all(|c| c.count == 0 || (c.accuracy == 1.0 && c.recall == 1.0)));
}

#[test]
fn without_planted_frames_nothing_beats_chance() {
    let cfg = GenConfig {
        planted: 0,
        ..config(vec![20, 60], 50)
    };
    let ds = generate_dataset(&cfg, 5).unwrap();
    assert!(ds.test.qa.iter().all(|q| q.relevant_frames.is_empty()));
    let oracle = RestrictedOracle {
        prototypes: &ds.prototypes,
        vocab: Vocab::default(),
        seed: 1,
    };
    let m = evaluate(&oracle, &ds.test, 10, &[], 1).unwrap();
    assert_eq!(m.accuracy, 0.0);
    let majority = ConstantAnswerer {
        token: Vocab::default().id(&ds.majority_answer()),
    };
    assert!(evaluate(&majority, &ds.test, 10, &[], 1).unwrap().accuracy <= 0.25 + 0.1);
}

#[test]
fn hit_probability_matches_monte_carlo() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for &(n, m, k) in &[
        (20usize, 3usize, 1usize),
        (60, 3, 5),
        (180, 3, 10),
        (400, 3, 10),
        (10, 3, 8),
    ] {
        let trials = 20_000;
        let mut hits = 0;
        for _ in 0..trials {
            let planted = rand::seq::index::sample(&mut r, n, m).into_vec();
            let chosen = rand::seq::index::sample(&mut r, n, k).into_vec();
            hits += usize::from(chosen.iter().any(|c| planted.contains(c)));
        }
        let emp = hits as f64 / trials as f64;
        let p = hit_probability(n, m, k);
        assert!((emp - p).abs() < 0.015, "n={n} k={k}: {emp} vs {p}");
        let exact = 1.0
            - (0..k)
                .map(|i| (n - m - i) as f64 / (n - i) as f64)
                .product::<f64>();
        assert!((p - exact).abs() < 1e-12);
    }
    assert_eq!(hit_probability(5, 0, 3), 0.0);
    assert_eq!(hit_probability(5, 3, 5), 1.0);
}

#[test]
fn closed_form_uniform_recall_equals_hypergeometric_mean() {
    for n in [1usize, 7, 20, 60, 180, 400] {
        for m in 1..=3.min(n) {
            for k in [1usize, 2, 5, 10] {
                let a = expected_uniform_recall(n, m, k);
                let b = hypergeometric_recall(n, m, k);
                assert!((a - b).abs() < 1e-12, "n={n} m={m} k={k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn restricted_oracle_degrades_with_length() {
    let ds = generate_dataset(&config(vec![20, 60, 180, 400], 100), 7).unwrap();
    let oracle = RestrictedOracle {
        prototypes: &ds.prototypes,
        vocab: Vocab::default(),
        seed: 2,
    };
    let m = evaluate(&oracle, &ds.test, 5, &[], 1).unwrap();
    let accs: Vec<f64> = m.buckets.iter().map(|b| b.accuracy).collect();
    assert!(accs.windows(2).all(|w| w[0] >= w[1]), "{accs:?}");
    // Accuracy equals the hit probability up to sampling noise.
    for (b, &n) in m.buckets.iter().zip(&[20usize, 60, 180, 400]) {
        assert!(
            (b.accuracy - hit_probability(n, 3, 5)).abs() < 0.12,
            "{} {}",
            b.bucket,
            b.accuracy
        );
    }
}

#[test]
fn bucket_counts_add_up_and_threads_do_not_matter() {
    let ds = generate_dataset(&config(vec![20, 60, 180, 400], 7), 8).unwrap();
    let oracle = RestrictedOracle {
        prototypes: &ds.prototypes,
        vocab: Vocab::default(),
        seed: 3,
    };
    let one = evaluate(&oracle, &ds.test, 10, &[1, 2, 5], 1).unwrap();
    let four = evaluate(&oracle, &ds.test, 10, &[1, 2, 5], 4).unwrap();
    assert_eq!(one, four);
    assert_eq!(
        one.buckets.iter().map(|b| b.count).sum::<usize>(),
        ds.test.len()
    );
    assert_eq!(one.cells.len(), BUCKETS.len() * 4);
    let labels: Vec<String> = (0..BUCKETS.len()).map(bucket_label).collect();
    assert_eq!(labels, ["<=20", "21-60", "61-180", "181-400"]);
    assert_eq!(
        one.accuracy_by_k.iter().map(|p| p.0).collect::<Vec<_>>(),
        vec![1, 2, 5, 10]
    );
}

#[test]
fn planted_frames_align_with_their_class() {
    let ds = generate_dataset(&config(vec![60], 20), 9).unwrap();
    let dim = ds.config.feature_dim;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for qa in &ds.test.qa {
        let video = ds.test.video(qa).unwrap();
        let class = CLASS_WORDS.iter().position(|w| *w == qa.answer).unwrap();
        for &f in &qa.relevant_frames {
            let row = video.row(f, dim);
            assert!(dot(row, &ds.prototypes.topic) > 1.0);
            assert!(dot(row, &ds.prototypes.classes[class]) > 0.5);
        }
    }
}

#[test]
fn invalid_generation_configs_are_rejected() {
    for cfg in [
        GenConfig {
            classes: 0,
            ..GenConfig::default()
        },
        GenConfig {
            classes: 9,
            ..GenConfig::default()
        },
        GenConfig {
            feature_dim: 4,
            ..GenConfig::default()
        },
        GenConfig {
            lengths: vec![401],
            ..GenConfig::default()
        },
        GenConfig {
            lengths: vec![3],
            planted: 3,
            ..GenConfig::default()
        },
    ] {
        assert!(generate_dataset(&cfg, 0).is_err(), "{cfg:?}");
    }
}
