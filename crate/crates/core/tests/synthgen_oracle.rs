//! Straight-line scalar re-implementation of the generative rule, used as an
//! oracle for the vectorized generator.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use psdn_core::data::{load_manifest, Split};
use psdn_core::seed::rng_for;
use psdn_core::synthgen::{generate_dataset, speakers_in, DatasetCounts, Generator, GeneratorConfig, Timbre};
use rand_distr::{Distribution, StandardNormal};

const NOISE_TAG: u64 = 7;

fn scalar_mel(g: &Generator, content: &[usize], accent: usize, timbre: &Timbre, noise_seed: Option<u64>) -> Vec<Vec<f64>> {
    let acc = g.accent(accent);
    let sigma = g.config().noise_sigma;
    let mut rng = noise_seed.map(|s| rng_for(&[s, NOISE_TAG]));
    let mut out = Vec::new();
    for (t, &s) in content.iter().enumerate() {
        let e = g.symbol_vector(s);
        let b = 0.3 * (2.0 * PI * t as f64 / acc.period + acc.phase).sin();
        let mut row = Vec::with_capacity(80);
        for k in 0..80 {
            let mut ae = 0.0;
            for j in 0..80 {
                ae += acc.mixing.get(k, j) * e[j];
            }
            row.push(timbre.gain[k] * (ae + b * acc.direction[k]) + timbre.bias[k]);
        }
        if let Some(rng) = rng.as_mut() {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        out.push(row);
    }
    out
}

fn scalar_bnf(g: &Generator, content: &[usize], accent: usize) -> Vec<Vec<f64>> {
    let alpha = g.config().bnf_accent_leakage;
    let acc = g.accent(accent);
    let p = g.projection();
    content
        .iter()
        .map(|&s| {
            let e = g.symbol_vector(s);
            let pre: Vec<f64> = (0..80)
                .map(|k| {
                    let mut me = 0.0;
                    for j in 0..80 {
                        let eye = if k == j { 1.0 } else { 0.0 };
                        me += (acc.mixing.get(k, j) - eye) * e[j];
                    }
                    e[k] + alpha * me
                })
                .collect();
            (0..p.rows()).map(|r| (0..80).map(|k| p.get(r, k) * pre[k]).sum()).collect()
        })
        .collect()
}

fn max_gap(m: &psdn_core::Matrix, rows: &[Vec<f64>]) -> f64 {
    assert_eq!(m.rows(), rows.len());
    let mut gap: f64 = 0.0;
    for (r, row) in rows.iter().enumerate() {
        assert_eq!(m.cols(), row.len());
        for (c, v) in row.iter().enumerate() {
            gap = gap.max((m.get(r, c) - v).abs());
        }
    }
    gap
}

#[test]
fn first_seed7_utterance_matches_the_scalar_rule() {
    let g = Generator::new(&GeneratorConfig::default()).unwrap();
    let utt = g.sample_utterance(1, 1, 0).unwrap();
    let f = utt.factors.as_ref().unwrap();
    let mel = scalar_mel(&g, &f.content_seq, 1, &f.timbre, Some(f.noise_seed));
    assert!(max_gap(&utt.mel, &mel) < 1e-12);
    assert!(max_gap(&utt.bnf, &scalar_bnf(&g, &f.content_seq, 1)) < 1e-12);
}

#[test]
fn swap_to_speaker_three_matches_the_scalar_rule() {
    let g = Generator::new(&GeneratorConfig::default()).unwrap();
    let utt = g.sample_utterance(1, 1, 0).unwrap();
    let f = utt.factors.as_ref().unwrap();
    let swapped = g.timbre_swap(&utt, 3).unwrap();
    let spk = &g.speaker(3).unwrap().timbre;
    let oracle = scalar_mel(&g, &f.content_seq, 1, spk, Some(g.swap_noise_seed(f, 3)));
    assert!(max_gap(&swapped, &oracle) < 1e-12);
    let clean = scalar_mel(&g, &f.content_seq, 1, spk, None);
    let resid: Vec<f64> = (0..swapped.rows())
        .flat_map(|r| (0..80).map(move |c| (r, c)))
        .map(|(r, c)| swapped.get(r, c) - clean[r][c])
        .collect();
    let std = (resid.iter().map(|x| x * x).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((std / 0.01 - 1.0).abs() < 0.1, "noise std {std}");
}

#[test]
fn oracle_conversion_is_the_scalar_rule_in_the_new_accent() {
    let g = Generator::new(&GeneratorConfig::default()).unwrap();
    let utt = g.sample_utterance(3, 17, 5).unwrap();
    let f = utt.factors.as_ref().unwrap();
    let conv = g.oracle_convert(&utt, 0).unwrap();
    assert!(max_gap(&conv, &scalar_mel(&g, &f.content_seq, 0, &f.timbre, None)) < 1e-12);
}

#[test]
fn dataset_splits_have_disjoint_speakers_and_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let counts = DatasetCounts {
        train_target: 64,
        train_other: 64,
        valid_target: 0,
        valid_other: 0,
        test_other: 16,
    };
    let cfg = GeneratorConfig { bnf_dim: 16, ..GeneratorConfig::default() };
    let manifest = generate_dataset(&cfg, &counts, dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 144);
    let train = speakers_in(&manifest, Split::Train);
    let test = speakers_in(&manifest, Split::Test);
    assert!(train.is_disjoint(&test));
    assert!(!test.is_empty());
    let reloaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reloaded, manifest);
    let target: BTreeSet<_> = manifest.entries.iter().filter(|e| e.accent_label == 0).map(|e| e.speaker_id.clone()).collect();
    assert_eq!(target.len(), 1);
}

#[test]
fn same_seed_generation_is_byte_identical() {
    let counts = DatasetCounts {
        train_target: 12,
        train_other: 16,
        valid_target: 0,
        valid_other: 0,
        test_other: 4,
    };
    let cfg = GeneratorConfig { bnf_dim: 8, ..GeneratorConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&cfg, &counts, a.path()).unwrap();
    generate_dataset(&cfg, &counts, b.path()).unwrap();
    let read_all = |d: &std::path::Path| {
        let mut files: Vec<_> = walk(d).into_iter().map(|p| (p.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
        files.sort();
        files
    };
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

fn walk(d: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_factors_respect_the_config(seed in 0u64..1_000_000, utt in 0u64..10_000, pick in 0usize..33) {
        let cfg = GeneratorConfig { master_seed: seed, bnf_dim: 8, ..GeneratorConfig::default() };
        let g = Generator::new(&cfg).unwrap();
        let spk = &g.speakers()[pick];
        let u = g.sample_utterance(spk.accent, spk.index, utt).unwrap();
        let f = u.factors.as_ref().unwrap();
        prop_assert!((40..=120).contains(&f.content_seq.len()));
        let mut runs = Vec::new();
        let mut len = 1;
        for w in f.content_seq.windows(2) {
            if w[0] == w[1] { len += 1 } else { runs.push(len); len = 1 }
        }
        runs.push(len);
        for &r in &runs {
            prop_assert!((4..=8).contains(&r));
        }
        prop_assert!(f.timbre.gain.iter().all(|&x| x > 0.0));
        prop_assert!(u.mel.is_finite() && u.bnf.is_finite());
        let again = g.sample_utterance(spk.accent, spk.index, utt).unwrap();
        prop_assert!(again.mel.bits_eq(&u.mel));
    }

    #[test]
    fn speaker_differences_are_channel_affine(seed in 0u64..1000, a in 0usize..5, s1 in 0usize..33, s2 in 0usize..33) {
        let cfg = GeneratorConfig { master_seed: seed, bnf_dim: 8, ..GeneratorConfig::default() };
        let g = Generator::new(&cfg).unwrap();
        let content = g.sample_content(seed);
        let (t1, t2) = (&g.speakers()[s1].timbre, &g.speakers()[s2].timbre);
        let m1 = g.render(&content, a, Some(t1), None).unwrap();
        let m2 = g.render(&content, a, Some(t2), None).unwrap();
        for k in 0..80 {
            let ratio = t2.gain[k] / t1.gain[k];
            for r in 0..content.len() {
                let predicted = (m1.get(r, k) - t1.bias[k]) * ratio + t2.bias[k];
                prop_assert!((predicted - m2.get(r, k)).abs() < 1e-9);
            }
        }
    }
}
