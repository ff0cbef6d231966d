//! Acceptance criteria, one line per criterion.
//!
//! Contract criteria (1-5, 10, 11 and the surrogate validity gates) fail the
//! target. The trained comparisons (6-9) are empirical: they print an honest
//! PASS or FAIL and only fail the target when `PSDN_ACCEPTANCE_STRICT=1`.
//! `PSDN_ACCEPTANCE_STEPS` overrides the training budget of those runs.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use psdn_core::content::GRL_LAMBDA;
use psdn_core::eval::{
    conversion_fidelity, convert_test_set, evaluate, probe_raw_bnf, reference_classifier, test_utterances,
    write_report, EvalOptions, EvalReport, ReferenceClassifier,
};
use psdn_core::nn::{Graph, Mode};
use psdn_core::psdn::{Model, ModelConfig, Streams, Variant, AUX_DIM};
use psdn_core::seed::rng_for;
use psdn_core::synthgen::{generate_dataset, GeneratorConfig, MANIFEST_FILE};
use psdn_core::timbre::{AugmentedUtterance, TimbreConfig};
use psdn_core::training::{batch_loss, make_batches, train, Checkpoint, TrainConfig};
use psdn_core::{Dataset, Matrix, Utterance};
use rand::Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 3] = [0, 1, 2];
const DEFAULT_STEPS: usize = 3000;

const PROBE_MARGIN: f64 = 0.05;
const RAW_BNF_GATE: f64 = 0.9;
const WIN_RATE_MIN: f64 = 0.8;
const UNTRAINED_WIN_RATE: [f64; 2] = [0.35, 0.65];
const ACCENTEDNESS_MARGIN: f64 = 0.15;
const AUGMENTATION_MARGIN: f64 = 0.20;
const FD_TOLERANCE: f64 = 1e-4;

struct Line {
    id: &'static str,
    name: &'static str,
    pass: bool,
    fatal: bool,
    detail: String,
}

impl Line {
    fn contract(id: &'static str, name: &'static str, pass: bool, detail: String) -> Self {
        Self { id, name, pass, fatal: true, detail }
    }

    fn empirical(id: &'static str, name: &'static str, pass: bool, detail: String) -> Self {
        Self { id, name, pass, fatal: false, detail }
    }

    fn print(&self) {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let kind = if self.fatal { "" } else { " [empirical]" };
        println!("{verdict} {:>4} {}{kind}: {}", self.id, self.name, self.detail);
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_all(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn grl_contract() -> Line {
    let mut rng = rng_for(&[0xACC, 1]);
    let n = 4096;
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let up: Vec<f64> = (0..n).map(|_| 1e3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut g = Graph::training();
    let a = g.variable(Matrix::from_vec(1, n, x));
    let y = g.grl(a, GRL_LAMBDA);
    let forward = g.value(y).bits_eq(g.value(a));
    let got = g.backward_with(y, Matrix::from_vec(1, n, up.clone())).get(a);
    let mismatches = got
        .data()
        .iter()
        .zip(&up)
        .filter(|(v, u)| v.to_bits() != (-(GRL_LAMBDA * **u)).to_bits())
        .count();
    Line::contract(
        "1",
        "GRL contract",
        forward && mismatches == 0,
        format!("λ = {GRL_LAMBDA}, {n} entries, {mismatches} bitwise mismatches, forward identity {forward}"),
    )
}

fn finite_differences() -> Line {
    let errs: Vec<f64> = [Variant::Psdn, Variant::GrlOnlyBaseline]
        .into_iter()
        .map(|v| common::full_network_gradient_error(v, 6, 30, 1e-5, 11))
        .collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Line::contract(
        "2",
        "full-network finite differences",
        worst < FD_TOLERANCE,
        format!("H = 8, T = 6, 30 parameters, h = 1e-5: max relative error psdn {:.2e}, baseline {:.2e} (< {FD_TOLERANCE:e})", errs[0], errs[1]),
    )
}

fn routing() -> Line {
    let g = common::tiny_generator();
    let utts: Vec<Utterance> = (0..4).map(|i| common::short_utterance(&g, 1 + 8 * i, 40 + i as u64, 24)).collect();
    let items: Vec<_> = utts.iter().map(AugmentedUtterance::unchanged).collect();
    let mut details = Vec::new();
    let mut pass = true;
    for (variant, prefix) in [(Variant::Psdn, "psdn.target."), (Variant::GrlOnlyBaseline, "baseline.dec_target.")] {
        let model = Model::build(&ModelConfig::tiny(common::TINY_BNF), variant, 3).unwrap();
        let loss = batch_loss(&model, &items, 4, GRL_LAMBDA, Mode::Train).unwrap();
        let grads = loss.graph.backward(loss.total);
        let (mut nonzero_target, mut nonzero_other) = (0usize, 0usize);
        for (id, grad) in loss.graph.param_grads(&grads) {
            let nz = grad.data().iter().filter(|&&v| v != 0.0).count();
            if model.store.name(id).starts_with(prefix) {
                nonzero_target += nz;
            } else {
                nonzero_other += nz;
            }
        }
        pass &= nonzero_target == 0 && nonzero_other > 0;
        details.push(format!("{}: {nonzero_target} nonzero under {prefix} ({nonzero_other} elsewhere)", variant.name()));
    }
    Line::contract("3", "routing invariants", pass, details.join("; "))
}

fn batch_composition(ds: &Dataset) -> Line {
    let (mut batches, mut good) = (0usize, 0usize);
    for batch_size in [2, 8, 16, 32] {
        for seed in 0..5 {
            let mut it = make_batches(&ds.manifest, batch_size, seed).unwrap();
            for _ in 0..3 * it.epoch_len() {
                let b = it.next().unwrap();
                let t = b.iter().filter(|&&i| ds.manifest.entries[i].accent_label == 0).count();
                batches += 1;
                good += usize::from(b.len() == batch_size && t == batch_size / 2);
            }
        }
    }
    Line::contract(
        "4",
        "batch composition",
        good == batches,
        format!("{good}/{batches} batches hold exactly batch_size/2 target items (sizes 2, 8, 16, 32; 5 seeds)"),
    )
}

fn paper_shapes() -> Line {
    let model = Model::build(&ModelConfig::paper(256), Variant::Psdn, 0).unwrap();
    let t = 40;
    let bnf = Matrix::from_fn(t, 256, |r, c| ((r * 7 + c) as f64 * 0.01).sin());
    let mel = Matrix::from_fn(t, 80, |r, c| ((r + 3 * c) as f64 * 0.02).cos());
    let content = model.encode_content(&bnf).unwrap().shape();
    let timbre = model.encode_timbre(&mel).unwrap().shape();
    let tokens = model.store.value(model.timbre.tokens()).shape();
    let Streams::Psdn { target, aux_encoder, aux } = &model.streams else { unreachable!() };
    let mut g = Graph::inference();
    let m = g.constant(mel);
    let fa = aux_encoder.forward(&mut g, &model.store, m).unwrap();
    let aux_shape = g.shape(fa);
    let depths = (target.depth(), aux.depth());
    let pass = content == (t, 512) && timbre == (1, 256) && tokens == (20, 256) && aux_shape == (t, AUX_DIM) && depths == (3, 3);
    Line::contract(
        "5",
        "paper-width shapes",
        pass,
        format!(
            "content {content:?}, timbre {timbre:?} from tokens {tokens:?}, aux {aux_shape:?}, decoder blocks target {} aux {}",
            depths.0, depths.1
        ),
    )
}

fn acceptance_model(bnf_dim: usize) -> ModelConfig {
    let mut m = ModelConfig::desk(bnf_dim, 32);
    m.timbre = TimbreConfig { conv_channels: vec![8, 16, 32, 64], gru_hidden: 64, tokens: 20, token_dim: 64 };
    m.aux_channels = vec![32, 32, 32, AUX_DIM];
    m
}

fn train_config(ds: &Dataset, variant: Variant, augmentation: bool, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        augmentation,
        batch_size: 8,
        steps,
        seed,
        model: Some(acceptance_model(ds.bnf_dim())),
        ..TrainConfig::default()
    }
}

struct Trained {
    psdn: Vec<EvalReport>,
    baseline: Vec<EvalReport>,
    no_aug: Vec<EvalReport>,
    psdn_models: Vec<Model>,
    baseline_models: Vec<Model>,
}

fn train_all(ds: &Dataset, reference: &ReferenceClassifier, steps: usize) -> Trained {
    let mut out = Trained { psdn: vec![], baseline: vec![], no_aug: vec![], psdn_models: vec![], baseline_models: vec![] };
    for seed in SEEDS {
        let opts = EvalOptions { seed, ..EvalOptions::default() };
        for (variant, augmentation) in [(Variant::Psdn, true), (Variant::GrlOnlyBaseline, true), (Variant::Psdn, false)] {
            let t = Instant::now();
            let model = train(&train_config(ds, variant, augmentation, steps, seed), ds, None).unwrap().model;
            let report = evaluate(&model, steps, ds, reference, &opts).unwrap();
            eprintln!(
                "  seed {seed} {} augmentation {augmentation}: {:.0}s, probe {:.3}, win {:.3}, accented {:.3}, gain error {:.3}",
                variant.name(),
                t.elapsed().as_secs_f64(),
                report.probe_accent_accuracy_on_content,
                report.conversion_win_rate,
                report.accentedness_rate,
                report.timbre_gain_error
            );
            match (variant, augmentation) {
                (Variant::Psdn, true) => {
                    out.psdn.push(report);
                    out.psdn_models.push(model);
                }
                (Variant::GrlOnlyBaseline, _) => {
                    out.baseline.push(report);
                    out.baseline_models.push(model);
                }
                _ => out.no_aug.push(report),
            }
        }
    }
    out
}

fn field(reports: &[EvalReport], f: fn(&EvalReport) -> f64) -> Vec<f64> {
    reports.iter().map(f).collect()
}

/// Win rate of freshly initialised models on utterances of the held-out speakers.
fn untrained_win_rate(ds: &Dataset) -> Vec<f64> {
    let g = ds.generator().unwrap();
    let heldout: Vec<_> = g.speakers().iter().filter(|s| s.heldout).collect();
    let utts: Vec<Utterance> = (0..100)
        .map(|i| {
            let s = heldout[i % heldout.len()];
            g.sample_utterance(s.accent, s.index, 700_000 + i as u64).unwrap()
        })
        .collect();
    let refs: Vec<&Utterance> = utts.iter().collect();
    SEEDS
        .iter()
        .map(|&seed| {
            let model = Model::build(&acceptance_model(ds.bnf_dim()), Variant::Psdn, seed).unwrap();
            let converted = convert_test_set(&model, &refs).unwrap();
            conversion_fidelity(&converted, &refs, g, 0, seed).unwrap().win_rate
        })
        .collect()
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn determinism() -> Line {
    let cfg = GeneratorConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        generate_dataset(&cfg, &cfg.counts, &d.path().join("data")).unwrap();
    }
    let data_a = dir_bytes(&a.path().join("data"));
    let data_same = data_a == dir_bytes(&b.path().join("data"));
    let ds = Dataset::load(&a.path().join("data").join(MANIFEST_FILE)).unwrap();
    let mut opts = EvalOptions::default();
    opts.probe.steps = 200;
    let reference = reference_classifier(&ds, &opts).unwrap();

    let steps = 20;
    let (mut runs_same, mut reports_same, mut roundtrip) = (true, true, true);
    for variant in [Variant::Psdn, Variant::GrlOnlyBaseline] {
        let cfg = train_config(&ds, variant, true, steps, 5);
        let mut outs = Vec::new();
        for d in [&a, &b] {
            let run = d.path().join(variant.name());
            let model = train(&cfg, &ds, Some(&run)).unwrap().model;
            let report = evaluate(&model, steps, &ds, &reference, &opts).unwrap();
            write_report(&run.join("report.json"), &report).unwrap();
            outs.push((run, model));
        }
        let files: Vec<_> = outs.iter().map(|(run, _)| dir_bytes(run)).collect();
        runs_same &= files[0].iter().filter(|(n, _)| n != "report.json").eq(files[1].iter().filter(|(n, _)| n != "report.json"));
        let report_bytes: Vec<_> = outs.iter().map(|(run, _)| fs::read(run.join("report.json")).unwrap()).collect();
        reports_same &= report_bytes[0] == report_bytes[1];

        let (run, model) = &outs[0];
        let loaded = Checkpoint::load(run).unwrap().model;
        for u in test_utterances(&ds) {
            roundtrip &= model.convert(u).unwrap().bits_eq(&loaded.convert(u).unwrap());
        }
    }
    Line::contract(
        "10",
        "determinism and serialization",
        data_same && runs_same && reports_same && roundtrip,
        format!(
            "datasets identical {data_same} ({} files), checkpoints identical {runs_same}, reports identical {reports_same}, round-trip bit-exact {roundtrip}",
            data_a.len()
        ),
    )
}

fn purity(models: &[&Model], ds: &Dataset) -> Line {
    let (mut aux, mut total) = (0usize, 0usize);
    for model in models {
        model.store.reset_reads();
        for u in test_utterances(ds) {
            model.convert(u).unwrap();
        }
        aux += model.auxiliary_prefixes().iter().map(|p| model.store.reads_under(p)).sum::<usize>();
        total += model.store.ids().map(|id| model.store.reads(id)).sum::<usize>();
    }
    Line::contract(
        "11",
        "inference purity",
        aux == 0 && total > 0,
        format!("{} trained models converting the test set: {aux} auxiliary-stream reads of {total}", models.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let steps = std::env::var("PSDN_ACCEPTANCE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_STEPS);
    let strict = std::env::var("PSDN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let mut lines = Vec::new();
    let emit = |line: Line, lines: &mut Vec<Line>| {
        line.print();
        lines.push(line);
    };

    emit(grl_contract(), &mut lines);
    emit(finite_differences(), &mut lines);
    emit(routing(), &mut lines);
    let (_dir, ds) = common::default_dataset();
    emit(batch_composition(&ds), &mut lines);
    emit(paper_shapes(), &mut lines);

    let opts = EvalOptions::default();
    let reference = reference_classifier(&ds, &opts).unwrap();
    let gate_ref = reference.heldout_accuracy >= psdn_core::eval::REFERENCE_MIN_ACCURACY;
    emit(
        Line::contract("8a", "reference classifier validity gate", gate_ref, format!("held-out accuracy {:.3} (≥ 0.95)", reference.heldout_accuracy)),
        &mut lines,
    );
    let raw = probe_raw_bnf(&ds, &opts.probe).unwrap();
    emit(
        Line::contract("6a", "raw BNF probe validity gate", raw.accuracy > RAW_BNF_GATE, format!("held-out accuracy {:.3} (> {RAW_BNF_GATE})", raw.accuracy)),
        &mut lines,
    );
    let untrained = untrained_win_rate(&ds);
    let u = mean(&untrained);
    emit(
        Line::contract(
            "7a",
            "untrained win-rate calibration",
            (UNTRAINED_WIN_RATE[0]..=UNTRAINED_WIN_RATE[1]).contains(&u),
            format!("mean {u:.3} over seeds {} on 100 held-out-speaker utterances (within [0.35, 0.65])", fmt_all(&untrained)),
        ),
        &mut lines,
    );

    eprintln!("training {} runs of {steps} steps", 3 * SEEDS.len());
    let trained = train_all(&ds, &reference, steps);
    let probe = |r: &EvalReport| r.probe_accent_accuracy_on_content;
    let (pp, pb) = (field(&trained.psdn, probe), field(&trained.baseline, probe));
    let margin = mean(&pb) - mean(&pp);
    emit(
        Line::empirical(
            "6",
            "disentanglement ordering",
            margin >= PROBE_MARGIN && mean(&pb) < raw.accuracy && mean(&pp) < raw.accuracy,
            format!(
                "probe psdn {:.3} {} vs baseline {:.3} {}, margin {margin:.3} (≥ {PROBE_MARGIN}); raw BNF {:.3}",
                mean(&pp),
                fmt_all(&pp),
                mean(&pb),
                fmt_all(&pb),
                raw.accuracy
            ),
        ),
        &mut lines,
    );
    let win = |r: &EvalReport| r.conversion_win_rate;
    let (wp, wb) = (field(&trained.psdn, win), field(&trained.baseline, win));
    emit(
        Line::empirical(
            "7",
            "conversion fidelity",
            mean(&wp) >= WIN_RATE_MIN && mean(&wp) > mean(&wb),
            format!("win rate psdn {:.3} {} (≥ {WIN_RATE_MIN}) vs baseline {:.3} {}, strict ordering required", mean(&wp), fmt_all(&wp), mean(&wb), fmt_all(&wb)),
        ),
        &mut lines,
    );
    let acc = |r: &EvalReport| r.accentedness_rate;
    let (ap, ab) = (field(&trained.psdn, acc), field(&trained.baseline, acc));
    let gap = mean(&ap) - mean(&ab);
    emit(
        Line::empirical(
            "8",
            "accentedness surrogate",
            gap >= ACCENTEDNESS_MARGIN,
            format!("target-accent rate psdn {:.3} {} vs baseline {:.3} {}, gap {gap:.3} (≥ {ACCENTEDNESS_MARGIN})", mean(&ap), fmt_all(&ap), mean(&ab), fmt_all(&ab)),
        ),
        &mut lines,
    );
    let gain = |r: &EvalReport| r.timbre_gain_error;
    let (ga, gn) = (field(&trained.psdn, gain), field(&trained.no_aug, gain));
    let rel = (mean(&gn) - mean(&ga)) / mean(&gn);
    emit(
        Line::empirical(
            "9",
            "speaker-augmentation ablation",
            rel >= AUGMENTATION_MARGIN,
            format!("gain error with {:.3} {} vs without {:.3} {}, relative margin {rel:.3} (≥ {AUGMENTATION_MARGIN})", mean(&ga), fmt_all(&ga), mean(&gn), fmt_all(&gn)),
        ),
        &mut lines,
    );

    emit(determinism(), &mut lines);
    let models: Vec<&Model> = trained.psdn_models.iter().chain(&trained.baseline_models).collect();
    emit(purity(&models, &ds), &mut lines);

    let contract_failures = lines.iter().filter(|l| l.fatal && !l.pass).count();
    let empirical: Vec<_> = lines.iter().filter(|l| !l.fatal).collect();
    let empirical_pass = empirical.iter().filter(|l| l.pass).count();
    println!(
        "acceptance: {} contract failures, {empirical_pass}/{} empirical criteria met, {steps} steps per run, {:.0}s",
        contract_failures,
        empirical.len(),
        start.elapsed().as_secs_f64()
    );
    if contract_failures > 0 || (strict && empirical_pass < empirical.len()) {
        std::process::exit(1);
    }
}
