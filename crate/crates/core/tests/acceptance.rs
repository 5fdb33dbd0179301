//! Acceptance suite. Runs every criterion in sequence (so the timings are not
//! skewed by parallel tests), prints one PASS/FAIL line each, and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use swa_core::trainer::{
    normalized_preactivations, recompute_bn_statistics, run_protocol, run_protocol_seeds, Matrix, Mode, ModelSpec,
    Parameters, ProtocolReport, TrainConfig,
};
use swa_core::{
    cyclical_cosine_lr, read_checkpoint, write_checkpoint, Checkpoint, CosineCycleSpec, DType, Error, NamedTensor,
    RunningAverage, SkipPolicy, TensorData,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!(
            "panicked: {}",
            e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()).unwrap_or("?")
        ),
    });
    let elapsed = start.elapsed();
    let pass = outcome.pass && elapsed < budget;
    println!(
        "criterion {id} [{name}]: {} ({}; {:.2}s of {}s budget)",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// 1. cosine schedule against its closed form

fn scheduler_oracle() -> Outcome {
    let mut r = common::rng(1);
    let (mut worst, mut endpoint_misses, mut period_misses) = (0.0f64, 0, 0);
    for _ in 0..10_000 {
        let lr_max = 10f64.powf(r.random_range(-5.0..0.0));
        let lr_min = lr_max * r.random_range(0.0..=1.0f64).max(1e-6);
        let period = r.random_range(2u32..5000);
        let cycles = r.random_range(1u32..6);
        let spec = CosineCycleSpec { lr_max, lr_min, cycle_len_iters: period, num_cycles: cycles };
        let t = r.random_range(0..period);
        let want = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * f64::from(t) / f64::from(period - 1)).cos());
        let got = cyclical_cosine_lr(&spec, u64::from(t)).unwrap();
        worst = worst.max((got - want).abs() / want);

        let last = u64::from(period - 1);
        if cyclical_cosine_lr(&spec, 0).unwrap() != lr_max || cyclical_cosine_lr(&spec, last).unwrap() != lr_min {
            endpoint_misses += 1;
        }
        let c = u64::from(r.random_range(0..cycles));
        if cyclical_cosine_lr(&spec, u64::from(t) + c * u64::from(period)).unwrap() != got {
            period_misses += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-12 && endpoint_misses == 0 && period_misses == 0,
        detail: format!(
            "10000 tuples, max rel err {worst:.2e}, endpoint misses {endpoint_misses}, periodicity misses {period_misses}"
        ),
    }
}

// 2. streaming average of 48 checkpoints against sum-then-divide

fn averaging_oracle() -> Outcome {
    let mut r = common::rng(2);
    let layout: Vec<(&str, Vec<usize>)> = vec![
        ("layer0.weight", vec![64, 32]),
        ("layer0.bias", vec![64]),
        ("layer1.weight", vec![10, 64]),
        ("layer1.bn.running_var", vec![10]),
        ("step", vec![]),
    ];
    let ckpts: Vec<Checkpoint> = (0..48)
        .map(|_| {
            Checkpoint::from_tensors(layout.iter().map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
                NamedTensor::from_f64(*name, shape.clone(), data).unwrap()
            }))
            .unwrap()
        })
        .collect();
    let oracle: BTreeMap<&str, Vec<f64>> = layout
        .iter()
        .map(|(name, _)| {
            let n = ckpts[0].get(name).unwrap().numel();
            let mut sum = vec![0.0; n];
            for c in &ckpts {
                for (s, v) in sum.iter_mut().zip(c.get(name).unwrap().to_f64_vec()) {
                    *s += v;
                }
            }
            (*name, sum.iter().map(|s| s / 48.0).collect())
        })
        .collect();

    let (mut worst_norm, mut worst_elem) = (0.0f64, 0.0f64);
    let mut order: Vec<usize> = (0..48).collect();
    for _ in 0..20 {
        order.shuffle(&mut r);
        let mut acc = RunningAverage::init(&ckpts[order[0]], &SkipPolicy::none());
        for &i in &order[1..] {
            acc.update(&ckpts[i]).unwrap();
        }
        let avg = acc.finalize(DType::F64);
        for (name, want) in &oracle {
            let got = avg.get(name).unwrap().to_f64_vec();
            worst_norm = worst_norm.max(common::norm_rel_diff(&got, want));
            worst_elem = worst_elem.max(common::max_rel_diff(&got, want));
        }
    }
    Outcome {
        pass: worst_norm <= 1e-12,
        detail: format!(
            "48 checkpoints x 20 permutations, max per-tensor rel err {worst_norm:.2e} (max elementwise {worst_elem:.2e})"
        ),
    }
}

// 3. analytic gradients against central differences

fn gradient_check() -> Outcome {
    let models: Vec<(Vec<usize>, bool, usize, usize)> = vec![
        (vec![8], false, 2, 2),
        (vec![8], true, 2, 2),
        (vec![6, 5], true, 3, 4),
        (vec![7, 4], false, 4, 3),
        (vec![5, 5, 5], true, 2, 3),
        (vec![10], true, 5, 5),
    ];
    let mut worst = 0.0f64;
    for (i, (hidden, bn, input_dim, output_dim)) in models.iter().enumerate() {
        let spec = ModelSpec {
            input_dim: *input_dim,
            hidden_dims: hidden.clone(),
            output_dim: *output_dim,
            use_batchnorm: *bn,
            ..ModelSpec::default()
        };
        let seed = 100 + i as u64;
        let p = common::random_params(&spec, seed);
        let mut r = common::rng(seed);
        let x = common::random_matrix(&mut r, 16, *input_dim);
        let y = common::random_labels(&mut r, 16, *output_dim);
        worst = worst.max(common::max_gradient_error(&p, &x, &y, 1e-6, 1e-3));
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("{} models (3 with BN), eps 1e-6, max rel err {worst:.2e}", models.len()),
    }
}

// 4. checkpoint file roundtrip and corrupted fixtures

fn random_bits_checkpoint(r: &mut impl Rng, i: usize) -> Checkpoint {
    let mut c = Checkpoint::new();
    let n = match i {
        0 => 0,
        _ => r.random_range(1..6),
    };
    for k in 0..n {
        let shape: Vec<usize> = match (i, k) {
            (1, _) => vec![],
            _ => (0..r.random_range(0..4)).map(|_| r.random_range(0..5)).collect(),
        };
        let numel: usize = shape.iter().product();
        let data = if r.random_bool(0.5) {
            TensorData::F64((0..numel).map(|_| f64::from_bits(r.random())).collect())
        } else {
            TensorData::F32((0..numel).map(|_| f32::from_bits(r.random())).collect())
        };
        c.insert(NamedTensor::new(format!("p{k}/{}", r.random::<u16>()), shape, data).unwrap()).unwrap();
    }
    if r.random_bool(0.3) {
        c.set_metadata("epoch", r.random::<u8>().to_string());
    }
    c
}

fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

fn corrupted_fixtures() -> Vec<(&'static str, Vec<u8>)> {
    let entry = |dtype: &str, shape: &str, offsets: &str| {
        format!(r#"{{"w":{{"dtype":"{dtype}","shape":{shape},"data_offsets":{offsets}}}}}"#)
    };
    let mut huge = raw_file("{}", &[]);
    huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    let mut long = raw_file("{}", &[]);
    long[..8].copy_from_slice(&100u64.to_le_bytes());
    let mut non_utf8 = raw_file("{\"\u{0}\":1}", &[]);
    non_utf8[10] = 0xff;
    vec![
        ("empty file", vec![]),
        ("short length prefix", vec![1, 2, 3]),
        ("header longer than file", long),
        ("header length u64::MAX", huge),
        ("invalid UTF-8", non_utf8),
        ("truncated JSON", raw_file(r#"{"w": {"dtype""#, &[])),
        ("JSON array", raw_file("[1, 2]", &[])),
        ("missing offsets", raw_file(r#"{"w":{"dtype":"F64","shape":[1]}}"#, &[0; 8])),
        ("unknown dtype", raw_file(&entry("BF16", "[1]", "[0,2]"), &[0; 2])),
        ("offsets past end", raw_file(&entry("F64", "[1]", "[0,16]"), &[0; 8])),
        ("reversed offsets", raw_file(&entry("F64", "[0]", "[8,0]"), &[0; 8])),
        ("shape/length mismatch", raw_file(&entry("F64", "[2]", "[0,8]"), &[0; 8])),
        ("negative extent", raw_file(&entry("F64", "[-1]", "[0,8]"), &[0; 8])),
        ("overflowing shape", raw_file(&entry("F64", "[4294967296,4294967296,4294967296]", "[0,8]"), &[0; 8])),
        (
            "overlapping ranges",
            raw_file(
                r#"{"a":{"dtype":"F64","shape":[2],"data_offsets":[0,16]},"b":{"dtype":"F64","shape":[1],"data_offsets":[8,16]}}"#,
                &[0; 16],
            ),
        ),
        ("gap before tensor", raw_file(&entry("F64", "[1]", "[8,16]"), &[0; 16])),
        ("trailing bytes", raw_file(&entry("F64", "[1]", "[0,8]"), &[0; 12])),
        ("non-string metadata", raw_file(r#"{"__metadata__":{"epoch":3}}"#, &[])),
        ("empty tensor name", raw_file(r#"{"":{"dtype":"F64","shape":[],"data_offsets":[0,8]}}"#, &[0; 8])),
    ]
}

fn checkpoint_format() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = common::rng(4);
    let (mut mismatches, mut empty_ckpts, mut scalars, mut zero_extent) = (0, 0, 0, 0);
    for i in 0..1000 {
        let c = random_bits_checkpoint(&mut r, i);
        empty_ckpts += usize::from(c.is_empty());
        scalars += c.tensors().filter(|t| t.shape().is_empty()).count();
        zero_extent += c.tensors().filter(|t| t.numel() == 0).count();
        let path = dir.path().join(format!("{i}.ckpt"));
        write_checkpoint(&c, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        if !back.bits_eq(&c) || back.metadata() != c.metadata() || back.to_bytes() != fs::read(&path).unwrap() {
            mismatches += 1;
        }
    }

    let fixtures = corrupted_fixtures();
    let mut wrong: Vec<&str> = Vec::new();
    for (name, bytes) in &fixtures {
        let structured = matches!(
            catch_unwind(|| Checkpoint::from_bytes(bytes)),
            Ok(Err(Error::Structural(_) | Error::HeaderParse { .. } | Error::UnsupportedDtype(_)))
        );
        if !structured {
            wrong.push(name);
        }
    }

    // random header mutations of a valid file must never panic
    let valid = random_bits_checkpoint(&mut r, 2).to_bytes();
    let header_end = 8 + u64::from_le_bytes(valid[..8].try_into().unwrap()) as usize;
    let mut panics = 0;
    for _ in 0..2000 {
        let mut bytes = valid.clone();
        let pos = r.random_range(0..header_end);
        bytes[pos] = r.random();
        if catch_unwind(|| Checkpoint::from_bytes(&bytes)).is_err() {
            panics += 1;
        }
    }

    Outcome {
        pass: mismatches == 0 && empty_ckpts > 0 && scalars > 0 && zero_extent > 0 && wrong.is_empty() && panics == 0,
        detail: format!(
            "1000 roundtrips ({empty_ckpts} empty, {scalars} scalar tensors, {zero_extent} zero-extent tensors), \
             {mismatches} mismatches; {}/{} corrupted fixtures rejected structurally{}; {panics} panics in 2000 mutations",
            fixtures.len() - wrong.len(),
            fixtures.len(),
            if wrong.is_empty() { String::new() } else { format!(" (not: {})", wrong.join(", ")) }
        ),
    }
}

// 5 and 6. the 20-seed protocol experiment

fn blobs_config(out: &Path) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.toml");
    let mut cfg = TrainConfig::from_file(path).unwrap();
    cfg.checkpoint_dir = out.to_path_buf();
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn protocol_effect(reports: &[ProtocolReport]) -> Outcome {
    let fin_loss = median(reports.iter().map(|r| r.final_epoch().val_loss).collect());
    let fin_acc = median(reports.iter().map(|r| r.final_epoch().val_acc).collect());
    let swa_loss = median(reports.iter().map(|r| r.swa_full().val_loss).collect());
    let swa_acc = median(reports.iter().map(|r| r.swa_full().val_acc).collect());
    let plain = |f: fn(&swa_core::trainer::ReportRow) -> f64| {
        median(reports.iter().map(|r| f(r.row(&format!("swa_1-{}", r.swa_epochs)).unwrap())).collect())
    };
    let in_band = (0.80..=0.95).contains(&fin_acc);
    Outcome {
        pass: in_band && swa_loss <= fin_loss && swa_acc >= fin_acc,
        detail: format!(
            "{} seeds, median val loss final {fin_loss:.5} vs {} {swa_loss:.5}, median acc final {fin_acc:.4} vs {swa_acc:.4}; \
             without BN recompute loss {:.5} acc {:.4}",
            reports.len(),
            reports[0].swa_full().model,
            plain(|r| r.val_loss),
            plain(|r| r.val_acc),
        ),
    }
}

fn flatness(reports: &[ProtocolReport], radius: f64, dirs: usize) -> Outcome {
    let wins = reports
        .iter()
        .filter(|r| r.swa_full().sharpness.unwrap() < r.mean_epoch_sharpness().unwrap())
        .count();
    let ratio = median(
        reports
            .iter()
            .map(|r| r.swa_full().sharpness.unwrap() / r.mean_epoch_sharpness().unwrap())
            .collect(),
    );
    Outcome {
        pass: dirs == 32 && wins >= 15,
        detail: format!(
            "radius {radius}, {dirs} directions: SWA sharper-than-mean in {} seeds, flatter in {wins}/{}; median ratio {ratio:.3}",
            reports.len() - wins,
            reports.len()
        ),
    }
}

// 7. BN recompute exactness

fn bn_exactness(trained: &Path, cfg: &TrainConfig) -> Outcome {
    let spec = ModelSpec { bn_eps: 0.0, ..cfg.model.clone() };
    let train_x = cfg.dataset.generate(spec.input_dim, spec.output_dim).unwrap().train.x;
    let mut cases: Vec<(String, Parameters, Matrix)> = vec![(
        "trained SWA model".into(),
        Parameters::from_checkpoint(&spec, &read_checkpoint(trained).unwrap()).unwrap(),
        train_x,
    )];
    for seed in 0..3 {
        let s = ModelSpec { input_dim: 4, hidden_dims: vec![16, 8], output_dim: 3, use_batchnorm: true, bn_eps: 0.0, ..spec.clone() };
        let mut r = common::rng(70 + seed);
        let mut x = common::random_matrix(&mut r, 5000, 4);
        // offset and scale so the raw statistics are far from standard
        x.data.iter_mut().for_each(|v| *v = 300.0 + 40.0 * *v);
        cases.push((format!("random model {seed}"), common::random_params(&s, seed), x));
    }
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for (_, p, x) in &cases {
        let q = recompute_bn_statistics(p, x).unwrap();
        let xhat = &normalized_preactivations(&q, x, Mode::Eval).unwrap()[0];
        let (mean, var) = xhat.column_stats();
        for (m, v) in mean.iter().zip(&var) {
            worst_mean = worst_mean.max(m.abs());
            // a dead feature has zero variance and normalizes to 0
            if *v != 0.0 {
                worst_var = worst_var.max((v - 1.0).abs());
            }
        }
    }
    Outcome {
        pass: worst_mean <= 1e-9 && worst_var <= 1e-9,
        detail: format!(
            "{} models, first-layer max |mean| {worst_mean:.2e}, max |var - 1| {worst_var:.2e}",
            cases.len()
        ),
    }
}

// 8. determinism

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
    }
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_protocol(&blobs_config(a.path()).with_seed(7)).unwrap();
    let rb = run_protocol(&blobs_config(b.path()).with_seed(7)).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let checkpoints = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    Outcome {
        pass: fa.len() == fb.len() && differing.is_empty() && ra.rows == rb.rows && checkpoints > 0,
        detail: format!(
            "{} files ({checkpoints} checkpoints, metrics.csv, report.csv), {} differ",
            fa.len(),
            differing.len()
        ),
    }
}

fn main() {
    let mut results = vec![
        check(1, "scheduler oracle", secs(1), scheduler_oracle),
        check(2, "averaging oracle", secs(5), averaging_oracle),
        check(3, "gradient check", secs(30), gradient_check),
        check(4, "checkpoint format", secs(10), checkpoint_format),
    ];

    let exp = tempfile::tempdir().unwrap();
    let cfg = blobs_config(exp.path());
    let seeds: Vec<u64> = (0..20).collect();
    let start = Instant::now();
    let reports = run_protocol_seeds(&cfg, &seeds);
    let experiment_time = start.elapsed();
    match &reports {
        Ok(reports) => {
            // the experiment has already run; the budgets cover its wall time
            results.push(check(5, "protocol effect", secs(300).saturating_sub(experiment_time), || protocol_effect(reports)));
            results.push(check(6, "flatness", secs(180).saturating_sub(experiment_time), || {
                flatness(reports, cfg.protocol.probe_radius, cfg.protocol.probe_dirs)
            }));
        }
        Err(e) => {
            for (id, name) in [(5, "protocol effect"), (6, "flatness")] {
                results.push(check(id, name, secs(1), || Outcome { pass: false, detail: format!("experiment failed: {e}") }));
            }
        }
    }
    println!("  (20-seed experiment wall time {:.1}s)", experiment_time.as_secs_f64());

    let trained = exp.path().join("seed_0").join(format!("swa_1-{}.ckpt", cfg.swa_epochs));
    results.push(check(7, "BN recompute exactness", secs(5), || bn_exactness(&trained, &cfg)));
    results.push(check(8, "determinism", secs(120), determinism));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
