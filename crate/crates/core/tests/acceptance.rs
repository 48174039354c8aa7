//! Acceptance checks. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line even when all of them pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use microattn::data::{synth_dataset, ImageSource, Manifest, Sample, SynthConfig};
use microattn::eval::{folds_hde, folds_loso, ConfusionMatrix};
use microattn::experiment::{run_experiment, ExperimentConfig, ExperimentOutput, Pretraining, Protocol};
use microattn::model::{block_forward, load_checkpoint, param_grad_check, save_checkpoint, BlockParams, BlockVars};
use microattn::tensor::{grad_check_many, Tape, Tensor, Var, DEFAULT_EPS};
use microattn::training::{lr_at, sgd_step, OptimState, StagePreset};
use microattn::{BlockSpec, InputShape, LoadMode, Model, NetworkSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = run();
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = out.pass && in_time;
    println!(
        "criterion {id} [{}] {name}: {} ({:.2?}, budget {:.0?})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took,
        budget
    );
    pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Valid spec with 1 to 3 blocks, mixed strides and unequal `c2`.
fn random_spec(r: &mut ChaCha8Rng) -> NetworkSpec {
    loop {
        let stem_pool = r.gen_range(1..=2);
        let size = stem_pool * r.gen_range(3..=7);
        let input = InputShape { channels: r.gen_range(1..=3), height: size, width: size };
        let mut cin = input.channels;
        let blocks = (0..r.gen_range(1..=3))
            .map(|_| {
                let c1 = r.gen_range(1..=4);
                let b = BlockSpec { cin, c1, c2: r.gen_range(1..=4), c3: c1, stride: r.gen_range(1..=2) };
                cin = c1;
                b
            })
            .collect();
        let spec = NetworkSpec { input, stem_pool, blocks, num_classes: r.gen_range(2..=5), attention: false };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

fn input_for(spec: &NetworkSpec, n: usize, r: &mut ChaCha8Rng) -> Tensor {
    let InputShape { channels, height, width } = spec.input;
    Tensor::uniform(&[n, channels, height, width], -2.0, 2.0, r).unwrap()
}

fn bind_block(tape: &mut Tape, p: &BlockParams, w_star: Option<&Tensor>) -> BlockVars {
    BlockVars {
        shortcut_w: tape.leaf(p.shortcut_w.clone()),
        shortcut_b: tape.leaf(p.shortcut_b.clone()),
        conv1_w: tape.leaf(p.conv1_w.clone()),
        conv1_b: tape.leaf(p.conv1_b.clone()),
        conv2_w: tape.leaf(p.conv2_w.clone()),
        conv2_b: tape.leaf(p.conv2_b.clone()),
        attention_w: w_star.map(|w| tape.leaf(w.clone())),
    }
}

// 1 -----------------------------------------------------------------------

/// Row percentages of the pooled composite-database confusion matrix and
/// the class totals per row: happiness, surprise, anger, disgust, sadness.
const ROW_PERCENT: [[f64; 5]; 5] = [
    [81.63, 12.24, 6.12, 0.0, 0.0],
    [17.86, 53.57, 10.71, 7.14, 10.71],
    [2.52, 0.0, 94.12, 1.68, 1.68],
    [17.65, 0.0, 35.29, 47.06, 0.0],
    [4.35, 8.70, 43.47, 0.0, 43.48],
];
const ROW_TOTALS: [u64; 5] = [49, 28, 119, 34, 23];

fn metrics_oracle() -> Outcome {
    let mut counts = vec![vec![0u64; 5]; 5];
    let mut rows_ok = true;
    for (i, (row, &total)) in ROW_PERCENT.iter().zip(&ROW_TOTALS).enumerate() {
        for (j, &pct) in row.iter().enumerate() {
            counts[i][j] = (pct * total as f64 / 100.0).round() as u64;
        }
        rows_ok &= counts[i].iter().sum::<u64>() == total;
    }
    let names: Vec<String> = (0..5).map(|i| format!("class{i}")).collect();
    let cm = ConfusionMatrix::from_counts(&names, counts).unwrap();
    let (war, uar, f1) = (cm.war().unwrap(), cm.uar().unwrap(), cm.macro_f1().unwrap());
    Outcome {
        pass: rows_ok && (war - 0.763).abs() <= 0.0005 && (f1 - 0.668).abs() <= 0.001 && (uar - 0.640).abs() <= 0.001,
        detail: format!(
            "WAR {war:.6} (0.763 +- 0.0005), macro-F1 {f1:.6} (0.668 +- 0.001), UAR {uar:.6} (0.640 +- 0.001), rows sum to totals: {rows_ok}"
        ),
    }
}

// 2 -----------------------------------------------------------------------

fn zero_attention_identity() -> Outcome {
    let mut r = rng(2);
    let mut blocks_checked = 0;
    let mut mismatches = Vec::new();
    for k in 0..20 {
        let spec = random_spec(&mut r);
        let plain = Model::build(&spec, r.gen()).unwrap();
        let mut x = input_for(&spec, 2, &mut r);
        if spec.stem_pool > 1 {
            let mut t = Tape::new();
            let v = t.leaf(x);
            let p = t.avg_pool(v, spec.stem_pool).unwrap();
            x = t.value(p).clone();
        }
        for (b, (p, bs)) in plain.blocks().iter().zip(&spec.blocks).enumerate() {
            let c = bs.concat_channels();
            let zero = Tensor::zeros(&[c, c, 1, 1]).unwrap();
            let run = |w: Option<&Tensor>| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let vars = bind_block(&mut t, p, w);
                let out = block_forward(&mut t, xv, &vars, bs.stride).unwrap();
                t.value(out.output).clone()
            };
            let (with, without) = (run(Some(&zero)), run(None));
            if bits(&with) != bits(&without) {
                mismatches.push(format!("spec {k} block {b}"));
            }
            blocks_checked += 1;
            x = without;
        }
        let upgraded = Model::upgraded_from(&plain).unwrap();
        let probe = input_for(&spec, 3, &mut r);
        if bits(&upgraded.forward(&probe).unwrap()) != bits(&plain.forward(&probe).unwrap()) {
            mismatches.push(format!("spec {k} network"));
        }
    }

    // checkpoint round trip through the upgrade path
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::uniform(InputShape { channels: 3, height: 16, width: 16 }, 2, 3, 6, 5).plain();
    let plain = Model::build(&spec, 77).unwrap();
    let path = dir.path().join("plain.ckpt");
    save_checkpoint(&plain, &path).unwrap();
    let loaded = load_checkpoint(&path, &spec.with_attention(), LoadMode::Upgrade).unwrap();
    let mut identical = 0;
    for _ in 0..10 {
        let x = input_for(&spec, 1, &mut r);
        if bits(&loaded.forward(&x).unwrap()) == bits(&plain.forward(&x).unwrap()) {
            identical += 1;
        }
    }
    Outcome {
        pass: mismatches.is_empty() && identical == 10,
        detail: format!(
            "{blocks_checked} blocks over 20 random specs bit-identical except {mismatches:?}; upgrade-loaded logits identical on {identical}/10 inputs"
        ),
    }
}

// 3 -----------------------------------------------------------------------

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r).unwrap()
}

/// Values at least 0.1 away from the ReLU kink.
fn off_kink(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let t = uniform(shape, r);
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

type ScalarFn = Box<dyn Fn(&mut Tape, &[Var]) -> microattn::Result<Var>>;

/// `sum(y * w)` with a fixed random weighting `w` of `y`'s shape.
fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> microattn::Result<Var> {
    let wv = t.leaf(w.clone());
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn primitive_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, ScalarFn, Vec<Tensor>)> {
    let w44 = uniform(&[2, 3, 4, 4], r);
    let w33 = uniform(&[2, 3, 3, 3], r);
    let w_concat = uniform(&[2, 5, 3, 3], r);
    let w_mean = uniform(&[2, 1, 3, 3], r);
    let w_pool = uniform(&[2, 3, 2, 2], r);
    let w_lin = uniform(&[2, 4], r);
    let (a, b, c) = (w44.clone(), w33.clone(), w_concat.clone());
    let (d, e, f, g) = (w_mean.clone(), w_pool.clone(), w_lin.clone(), w44.clone());
    let h = w44.clone();
    vec![
        (
            "conv2d s1 p1",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted(t, y, &a)
            }) as ScalarFn,
            vec![uniform(&[2, 2, 4, 4], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r)],
        ),
        (
            "conv2d s2 p1",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted(t, y, &b)
            }),
            vec![uniform(&[2, 2, 5, 5], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r)],
        ),
        (
            "concat",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.channel_concat(&[v[0], v[1]])?;
                weighted(t, y, &c)
            }),
            vec![uniform(&[2, 2, 3, 3], r), uniform(&[2, 3, 3, 3], r)],
        ),
        (
            "channel_mean",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.channel_mean(v[0])?;
                weighted(t, y, &d)
            }),
            vec![uniform(&[2, 4, 3, 3], r)],
        ),
        (
            "add (broadcast)",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }),
            vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 1, 4, 4], r)],
        ),
        (
            "mul (broadcast)",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y, &g)
            }),
            vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 1, 4, 4], r)],
        ),
        (
            "add_scalar",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add_scalar(v[0], 1.0);
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }),
            vec![uniform(&[2, 1, 3, 3], r)],
        ),
        (
            "relu",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0]);
                weighted(t, y, &h)
            }),
            vec![off_kink(&[2, 3, 4, 4], r)],
        ),
        (
            "avg_pool",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.avg_pool(v[0], 2)?;
                weighted(t, y, &e)
            }),
            vec![uniform(&[2, 3, 4, 4], r)],
        ),
        (
            "global_avg_pool + linear",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let p = t.global_avg_pool(v[0])?;
                let y = t.linear(p, v[1], v[2])?;
                weighted(t, y, &f)
            }),
            vec![uniform(&[2, 3, 4, 4], r), uniform(&[4, 3], r), uniform(&[4], r)],
        ),
        (
            "softmax_cross_entropy",
            Box::new(|t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &[2, 0, 4])),
            vec![uniform(&[3, 5], r)],
        ),
    ]
}

fn gradient_correctness() -> Outcome {
    let mut r = rng(3);
    let mut worst_op = ("", 0.0f64);
    for (name, f, inputs) in primitive_cases(&mut r) {
        let checks = grad_check_many(f, &inputs, DEFAULT_EPS).unwrap();
        for c in checks {
            if c.max_rel_error > worst_op.1 {
                worst_op = (name, c.max_rel_error);
            }
        }
    }

    let spec = NetworkSpec::uniform(InputShape { channels: 3, height: 8, width: 8 }, 1, 2, 4, 5);
    let mut model = Model::build(&spec, 31).unwrap();
    model.randomize_attention(0.5, &mut r).unwrap();
    let x = uniform(&[2, 3, 8, 8], &mut r);
    let table = param_grad_check(&model, &x, &[1, 3], DEFAULT_EPS, None).unwrap();
    let (worst_name, worst) = table
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(n, c)| (n.as_str(), *c))
        .unwrap();
    // smallest relative error resolvable at that entry when the loss is one f64
    let mut tape = microattn::tensor::Tape::new();
    let vars = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let logits = model.forward_on(&mut tape, &vars, xv).unwrap().logits;
    let loss = tape.softmax_cross_entropy(logits, &[1, 3]).unwrap();
    let loss = tape.value(loss).data()[0];
    let ulp = f64::from_bits(loss.to_bits() + 1) - loss;
    let floor = ulp / (2.0 * DEFAULT_EPS) / worst.analytic.abs().max(1e-8);
    Outcome {
        pass: worst.max_rel_error < 1e-4 && worst_op.1 < 1e-6 && table.len() == 16,
        detail: format!(
            "network max rel error {:.2e} at `{worst_name}` (analytic {:.6e}, numeric {:.6e}, one-ulp loss resolution there {floor:.1e}) over {} tensors (< 1e-4); primitive ops max {:.2e} at `{}` (< 1e-6)",
            worst.max_rel_error,
            worst.analytic,
            worst.numeric,
            table.len(),
            worst_op.1,
            worst_op.0
        ),
    }
}

// 4 -----------------------------------------------------------------------

fn parameter_accounting() -> Outcome {
    let mut r = rng(4);
    let mut failures = 0;
    for _ in 0..50 {
        let spec = random_spec(&mut r).with_attention();
        let expected: usize = spec.blocks.iter().map(|b| (b.c1 + b.c2 + b.c3).pow(2)).sum();
        let attn = Model::build(&spec, 1).unwrap().count_params();
        let plain = Model::build(&spec.plain(), 1).unwrap().count_params();
        if attn.attention != expected || attn.total() - plain.total() != expected || plain.attention != 0 {
            failures += 1;
        }
    }
    Outcome { pass: failures == 0, detail: format!("50 random specs, {failures} with overhead != sum of (c1+c2+c3)^2") }
}

// 5 -----------------------------------------------------------------------

fn manifest_strategy() -> impl Strategy<Value = Manifest> {
    prop::collection::vec((0usize..50, 0usize..3), 2..200).prop_map(|rows| Manifest {
        samples: rows
            .iter()
            .enumerate()
            .map(|(i, &(subject, db))| Sample {
                image: ImageSource::Path(PathBuf::from(format!("{i}.png"))),
                subject: format!("db{db}-s{subject}"),
                database: format!("db{db}"),
                label: "x".into(),
                apex: None,
                clip_len: None,
                signal_quadrant: None,
            })
            .collect(),
        class_names: vec!["x".into()],
        notes: vec![],
    })
}

fn check_splitters(m: &Manifest) -> Result<(), TestCaseError> {
    let subjects: BTreeSet<&str> = m.samples.iter().map(|s| s.subject.as_str()).collect();
    match folds_loso(m) {
        Err(_) => prop_assert_eq!(subjects.len(), 1),
        Ok(f) => {
            prop_assert_eq!(f.folds.len(), subjects.len());
            let mut seen = vec![0; m.len()];
            for fold in &f.folds {
                let test_subjects: BTreeSet<&str> = fold.test.iter().map(|&i| m.samples[i].subject.as_str()).collect();
                prop_assert_eq!(test_subjects.len(), 1);
                prop_assert!(fold.train.iter().all(|&i| !test_subjects.contains(m.samples[i].subject.as_str())));
                prop_assert_eq!(fold.train.len() + fold.test.len(), m.len());
                fold.test.iter().for_each(|&i| seen[i] += 1);
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
        }
    }
    let mut per_db: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &m.samples {
        *per_db.entry(&s.database).or_default() += 1;
    }
    match folds_hde(m, "db0", "db1") {
        Err(_) => prop_assert!(!per_db.contains_key("db0") || !per_db.contains_key("db1")),
        Ok(f) => {
            prop_assert_eq!(f.folds.len(), 2);
            for (fold, (train_db, test_db)) in f.folds.iter().zip([("db0", "db1"), ("db1", "db0")]) {
                prop_assert!(fold.train.iter().all(|&i| m.samples[i].database == train_db));
                prop_assert!(fold.test.iter().all(|&i| m.samples[i].database == test_db));
                prop_assert_eq!(fold.train.len(), per_db[train_db]);
                prop_assert_eq!(fold.test.len(), per_db[test_db]);
            }
            prop_assert_eq!(f.warnings.len(), usize::from(per_db.contains_key("db2")));
        }
    }
    Ok(())
}

fn protocol_splitters() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 200, failure_persistence: None, ..Config::default() });
    match runner.run(&manifest_strategy(), |m| check_splitters(&m)) {
        Ok(()) => Outcome { pass: true, detail: "200 generated manifests: LOSO partitions without subject leakage, HDE partitions by database".into() },
        Err(e) => Outcome { pass: false, detail: format!("counterexample: {e}") },
    }
}

// 6 -----------------------------------------------------------------------

fn schedule_and_optimizer() -> Outcome {
    let s = StagePreset::pretrain().schedule();
    let lrs: Vec<f64> = [0, 19, 20, 39, 40].iter().map(|&e| lr_at(&s, e)).collect();
    let schedule_ok = lrs[0] == 0.01 && lrs[1] == 0.01 && (lrs[2] - 0.001).abs() < 1e-18 && lrs[3] == lrs[2] && lrs[4] < lrs[3];

    let mut p = Tensor::scalar(1.0);
    let mut state = OptimState::zeros_like([&p]);
    let mut trace = vec![1.0];
    for _ in 0..2 {
        sgd_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state, 0.1, 0.9, 0.0).unwrap();
        trace.push(p.data()[0]);
    }
    let sgd_ok = trace == [1.0, 0.9, 0.71];
    Outcome {
        pass: schedule_ok && sgd_ok,
        detail: format!("pretrain lr at epochs 0/19/20/39/40 = {lrs:?}; SGD p trace {trace:?} (expected [1, 0.9, 0.71])"),
    }
}

// 7, 8 ----------------------------------------------------------------------

/// Synthetic LOSO run: plain pre-training on a separate 20-subject set, then
/// per-fold attention upgrade and fine-tuning on 6 subjects x 20 samples.
fn synthetic_loso(out: &Path) -> ExperimentOutput {
    let micro = synth_dataset(&SynthConfig::new(5, 6, 4, 32, 7)).unwrap();
    let macro_set =
        synth_dataset(&SynthConfig { database: "macro".into(), ..SynthConfig::new(5, 20, 2, 32, 1007) }).unwrap();
    let cfg = ExperimentConfig {
        spec: NetworkSpec::uniform(InputShape { channels: 3, height: 32, width: 32 }, 2, 4, 8, 5),
        pretrain: Some(Pretraining {
            train: &macro_set,
            preset: StagePreset { grad_clip: Some(1.0), ..StagePreset::pretrain().with_epochs(40) },
        }),
        init_checkpoint: None,
        finetune: StagePreset { grad_clip: Some(1.0), ..StagePreset::loso().for_input(32).with_epochs(20) },
        seed: 42,
    };
    run_experiment(&Protocol::Loso, &micro, &cfg, out).unwrap()
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn main() {
    let mut all = true;
    all &= report(1, "metrics oracle", Duration::from_secs(1), metrics_oracle);
    all &= report(2, "zero-attention identity", Duration::from_secs(10), zero_attention_identity);
    all &= report(3, "gradient correctness", Duration::from_secs(120), gradient_correctness);
    all &= report(4, "parameter accounting", Duration::from_secs(1), parameter_accounting);
    all &= report(5, "protocol splitters", Duration::from_secs(10), protocol_splitters);
    all &= report(6, "schedule and optimizer", Duration::from_secs(1), schedule_and_optimizer);

    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("run1"), dir.path().join("run2"));
    let mut output = None;
    all &= report(7, "end-to-end synthetic LOSO", Duration::from_secs(15 * 60), || {
        let out = synthetic_loso(&first);
        let war = out.report.metrics.war;
        let localized = out.localized_fraction().unwrap_or(0.0);
        let detail = format!(
            "pooled LOSO accuracy {war:.4} (>= 0.90) over {} folds, localization score > 1 for {localized:.4} of correct samples (>= 0.80)",
            out.report.folds.len()
        );
        output = Some(out);
        Outcome { pass: war >= 0.90 && localized >= 0.80, detail }
    });
    all &= report(8, "determinism", Duration::from_secs(15 * 60), || {
        let again = synthetic_loso(&second);
        let (a, b) = (files_under(&first), files_under(&second));
        let differing: Vec<String> =
            a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
        let same_names = a.keys().eq(b.keys());
        Outcome {
            pass: differing.is_empty() && same_names && output.as_ref() == Some(&again),
            detail: format!("{} files compared across two runs, differing: {differing:?}", a.len()),
        }
    });

    if !all {
        eprintln!("acceptance: at least one criterion failed");
        std::process::exit(1);
    }
}
