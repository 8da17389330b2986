//! Acceptance checks, one PASS/FAIL line each.
//!
//! Every expected value comes from an oracle written here, independent of
//! the library code path it checks. Run with
//! `cargo test -p sae-sensitivity --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sae_sensitivity::aggregation::{build_frequency_weighting, weighted_mean};
use sae_sensitivity::examples::{ActivatingExample, ExampleSet, ExampleSource, FilterVerdict};
use sae_sensitivity::fixture::{self, FeatureKind, FeatureSpec};
use sae_sensitivity::generation::{parse_samples, ScriptedReply};
use sae_sensitivity::linalg::Matrix;
use sae_sensitivity::overlap::{lcs_prefix, lcs_tokens};
use sae_sensitivity::pipeline::{files, read_jsonl, Overrides, RunConfig, Runner};
use sae_sensitivity::prompt::{build_prompt, RequestParams, SAMPLE_SEPARATOR};
use sae_sensitivity::sae::{SaeModel, Variant};
use sae_sensitivity::scoring::{position_stratified_rates, score_feature, PositionBucket, SensitivityRecord};
use sae_sensitivity::stats::spearman;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("synthetic end-to-end oracle", Box::new(|| end_to_end(work.path()))),
        ("encoder equivalence", Box::new(encoder_equivalence)),
        ("filtering semantics", Box::new(|| filtering(work.path()))),
        ("lcs oracle", Box::new(lcs_oracle)),
        ("spearman", Box::new(spearman_closed_form)),
        ("frequency weighting", Box::new(frequency_weighting)),
        ("prompt golden file", Box::new(prompt_golden)),
        ("determinism", Box::new(|| determinism(work.path()))),
        ("position invariance", Box::new(position_invariance)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Fixture runs

fn fixture_config(dir: &Path, overrides: &Overrides) -> Result<RunConfig, String> {
    let path = fixture::write_fixture(dir).map_err(err)?;
    let mut config = RunConfig::load(&path).map_err(err)?;
    config.apply(overrides);
    Ok(config)
}

fn full_run(dir: &Path) -> Result<(RunConfig, Duration), String> {
    let config = fixture_config(dir, &Overrides::default())?;
    let started = Instant::now();
    let outcome = Runner::new(config.clone()).map_err(err)?.run_all().map_err(err)?;
    ensure!(!outcome.partial, "fixture run reported partial success: {:?}", outcome.notes);
    Ok((config, started.elapsed()))
}

/// Samples of the reply the scripted generator settles on, with markers
/// stripped by plain string replacement.
fn scripted_samples(word: &str) -> Vec<String> {
    let rules = fixture::script_rules();
    let rule = &rules[word];
    let ScriptedReply::Text(text) = rule.replies.last().expect("reply") else {
        panic!("fixture replies are text");
    };
    text.split(SAMPLE_SEPARATOR)
        .map(|s| s.trim().replace("{{", "").replace("}}", ""))
        .collect()
}

/// Ground-truth verdict from the corpus itself: sequences containing an
/// activation, and whether each example window still activates.
struct VerdictOracle {
    occurrences: usize,
    window_rate: Option<f64>,
}

fn verdict_oracle(spec: &FeatureSpec, examples: Option<&ExampleSet>) -> VerdictOracle {
    let occurrences = fixture::corpus_text().lines().filter(|doc| spec.fires_on(doc)).count();
    let window_rate = examples.filter(|s| !s.is_empty()).map(|set| {
        let hits = set.examples().filter(|ex| spec.fires_on(&ex.text())).count();
        hits as f64 / set.len() as f64
    });
    VerdictOracle {
        occurrences,
        window_rate,
    }
}

fn end_to_end(work: &Path) -> Outcome {
    let (config, elapsed) = full_run(&work.join("e2e"))?;
    ensure!(elapsed < Duration::from_secs(60), "run took {elapsed:?}");
    let specs = fixture::feature_specs();
    let mut compared = 0;
    for sae in &config.saes {
        let dir = config.sae_dir(&sae.id);
        let verdicts: Vec<FilterVerdict> = read_jsonl(&dir.join(files::VERDICTS)).map_err(err)?;
        let records: Vec<SensitivityRecord> = read_jsonl(&dir.join(files::SENSITIVITY)).map_err(err)?;
        let by_id: BTreeMap<u32, &SensitivityRecord> = records.iter().map(|r| (r.feature_id, r)).collect();
        let passed: Vec<u32> = verdicts.iter().filter(|v| v.passed).map(|v| v.feature_id).collect();
        let scored: Vec<u32> = by_id.keys().copied().collect();
        ensure!(passed == scored, "{}: scored {scored:?} but passed {passed:?}", sae.id);
        for spec in specs.iter().filter(|s| passed.contains(&s.id)) {
            let samples = scripted_samples(spec.word);
            let hits = samples.iter().filter(|s| spec.fires_on(s)).count();
            let record = by_id[&spec.id];
            ensure!(
                record.n_samples == samples.len() && record.n_activating == hits,
                "{} feature {}: pipeline {}/{} vs oracle {hits}/{}",
                sae.id,
                spec.id,
                record.n_activating,
                record.n_samples,
                samples.len()
            );
            ensure!(
                record.sensitivity == hits as f64 / samples.len() as f64,
                "{} feature {}: sensitivity {}",
                sae.id,
                spec.id,
                record.sensitivity
            );
            compared += 1;
        }
    }
    ensure!(compared >= 20, "only {compared} features compared");
    Ok(format!("{compared} feature sensitivities equal the oracle exactly; run took {elapsed:.2?}"))
}

fn filtering(work: &Path) -> Outcome {
    let specs = fixture::feature_specs();
    let mut pass_counts = Vec::new();
    let mut agreed = 0;
    for cutoff in [0.8, 0.9, 0.95] {
        let overrides = Overrides {
            cutoff_truncation: Some(cutoff),
            ..Overrides::default()
        };
        let config = fixture_config(&work.join(format!("filter-{cutoff}")), &overrides)?;
        Runner::new(config.clone()).map_err(err)?.collect().map_err(err)?;
        let mut passes = 0;
        for sae in &config.saes {
            let dir = config.sae_dir(&sae.id);
            let verdicts: Vec<FilterVerdict> = read_jsonl(&dir.join(files::VERDICTS)).map_err(err)?;
            let sets: BTreeMap<u32, ExampleSet> = read_jsonl::<ExampleSet>(&dir.join(files::EXAMPLES))
                .map_err(err)?
                .into_iter()
                .map(|s| (s.feature_id, s))
                .collect();
            ensure!(verdicts.len() == specs.len(), "{} verdicts for {} features", verdicts.len(), specs.len());
            for v in &verdicts {
                let spec = &specs[v.feature_id as usize];
                let oracle = verdict_oracle(spec, sets.get(&v.feature_id));
                let expected = oracle.occurrences >= 15 && oracle.window_rate.is_some_and(|r| r >= cutoff);
                ensure!(
                    v.occurrence_count == oracle.occurrences,
                    "feature {}: count {} vs oracle {}",
                    v.feature_id,
                    v.occurrence_count,
                    oracle.occurrences
                );
                ensure!(
                    v.passed == expected,
                    "cutoff {cutoff} feature {}: passed={} but oracle says {expected} (rate {:?})",
                    v.feature_id,
                    v.passed,
                    oracle.window_rate
                );
                let by_kind = match spec.kind {
                    FeatureKind::Lexical => Some(true),
                    FeatureKind::Rare { .. } | FeatureKind::Contextual { .. } | FeatureKind::Absent => Some(false),
                    FeatureKind::MostlyNear { .. } => None,
                };
                if let Some(k) = by_kind {
                    ensure!(v.passed == k, "feature {} ({:?}) passed={}", v.feature_id, spec.kind, v.passed);
                }
                passes += usize::from(v.passed);
                agreed += 1;
            }
        }
        pass_counts.push((cutoff, passes));
    }
    ensure!(
        pass_counts.windows(2).all(|w| w[1].1 <= w[0].1),
        "pass counts not monotone: {pass_counts:?}"
    );
    ensure!(
        pass_counts[0].1 > pass_counts[2].1,
        "fixture does not exercise the cutoff: {pass_counts:?}"
    );
    Ok(format!("{agreed}/{agreed} verdicts agree; passes by cutoff {pass_counts:?}"))
}

fn determinism(work: &Path) -> Outcome {
    let (a, _) = full_run(&work.join("det-a"))?;
    let (b, _) = full_run(&work.join("det-b"))?;
    let fa = tree(&a.out_dir())?;
    let fb = tree(&b.out_dir())?;
    ensure!(
        fa.keys().eq(fb.keys()),
        "file sets differ: {:?} vs {:?}",
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &fa {
        ensure!(bytes == &fb[name], "{} differs", name.display());
    }
    Ok(format!("{} artifact files byte-identical across two runs", fa.len()))
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).map_err(err)?.to_path_buf();
                out.insert(rel, fs::read(&path).map_err(err)?);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Encoder

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_model(rng: &mut ChaCha8Rng, variant: Variant) -> SaeModel {
    let m = rng.random_range(1..48);
    let d = rng.random_range(1..24);
    let w_enc = Matrix::from_vec(m, d, random_vec(rng, m * d, -1.0, 1.0)).unwrap();
    let w_dec = Matrix::from_vec(m, d, random_vec(rng, m * d, -1.0, 1.0)).unwrap();
    let mut model = SaeModel::relu(w_enc, random_vec(rng, m, -0.5, 0.5), w_dec, random_vec(rng, d, -0.3, 0.3))
        .with_variant(variant);
    model.subtract_decoder_bias = rng.random_bool(0.5);
    match variant {
        Variant::Jumprelu => model = model.with_theta(random_vec(rng, m, 0.0, 0.6)),
        Variant::Topk | Variant::MatryoshkaTopk => model = model.with_k(rng.random_range(1..=m)),
        Variant::Batchtopk if rng.random_bool(0.5) => model = model.with_theta(random_vec(rng, m, 0.0, 0.6)),
        Variant::Batchtopk => model = model.with_k(rng.random_range(1..=m)),
        Variant::Gated => model = model.with_magnitude(random_vec(rng, m, -0.5, 0.5), random_vec(rng, m, -0.5, 0.5)),
        Variant::Relu | Variant::PAnneal => {}
    }
    model.validate().expect("valid random model");
    model
}

/// Dense reference: explicit loops over every feature and input dimension.
fn dense_encode(model: &SaeModel, x: &Matrix) -> Vec<Vec<f64>> {
    let (m, d) = (model.width, model.d_model);
    let mut out = Vec::new();
    for t in 0..x.rows() {
        let mut xin = vec![0f64; d];
        for j in 0..d {
            xin[j] = f64::from(x.get(t, j));
            if model.subtract_decoder_bias {
                xin[j] = f64::from(x.get(t, j) - model.b_dec[j]);
            }
        }
        let mut wx = vec![0f64; m];
        let mut pre = vec![0f64; m];
        for i in 0..m {
            for j in 0..d {
                wx[i] += xin[j] * f64::from(model.w_enc.get(i, j));
            }
            pre[i] = wx[i] + f64::from(model.b_enc[i]);
        }
        let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
        let top_k = |k: usize| {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
            let mut row = vec![0f64; m];
            for &i in &order[..k] {
                row[i] = relu(pre[i]);
            }
            row
        };
        let threshold = |theta: &[f32]| {
            (0..m)
                .map(|i| if pre[i] > f64::from(theta[i]) { relu(pre[i]) } else { 0.0 })
                .collect::<Vec<f64>>()
        };
        let row = match model.variant {
            Variant::Relu | Variant::PAnneal => pre.iter().map(|&v| relu(v)).collect(),
            Variant::Jumprelu => threshold(model.theta.as_ref().unwrap()),
            Variant::Topk | Variant::MatryoshkaTopk => top_k(model.k.unwrap()),
            Variant::Batchtopk => match &model.theta {
                Some(theta) => threshold(theta),
                None => top_k(model.k.unwrap()),
            },
            Variant::Gated => {
                let r = model.r_mag.as_ref().unwrap();
                let b = model.b_mag.as_ref().unwrap();
                (0..m)
                    .map(|i| {
                        if pre[i] > 0.0 {
                            relu(f64::from(r[i]).exp() * wx[i] + f64::from(b[i]))
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };
        out.push(row);
    }
    out
}

fn encoder_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0f64;
    let mut per_variant = BTreeMap::new();
    for pair in 0..1000 {
        let variant = Variant::ALL[pair % Variant::ALL.len()];
        let model = random_model(&mut rng, variant);
        let rows = rng.random_range(1..5);
        let x = Matrix::from_vec(rows, model.d_model, random_vec(&mut rng, rows * model.d_model, -2.0, 2.0)).unwrap();
        let got = model.encode(&x).map_err(err)?;
        let want = dense_encode(&model, &x);
        for (t, row) in want.iter().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                let dev = (f64::from(got.get(t, i)) - w).abs();
                worst = worst.max(dev);
                ensure!(dev <= 1e-5, "{variant} pair {pair}: feature {i} got {} want {w}", got.get(t, i));
            }
        }
        *per_variant.entry(variant.as_str()).or_insert(0) += 1;
    }
    Ok(format!("1000 pairs over {} variants, max |dev| {worst:.2e}", per_variant.len()))
}

// ---------------------------------------------------------------------------
// LCS

/// Full-table longest-common-substring DP.
fn lcs_table(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    let mut best = 0;
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            if a[i - 1] == b[j - 1] {
                t[i][j] = t[i - 1][j - 1] + 1;
                best = best.max(t[i][j]);
            }
        }
    }
    best
}

/// Longest common run whose end in `a` is at index `<= last`, found by
/// extending backwards from every pair of end positions.
fn lcs_ending_oracle(a: &[u32], last: usize, b: &[u32]) -> usize {
    let mut best = 0;
    for i in 0..=last {
        for j in 0..b.len() {
            let mut n = 0;
            while n <= i && n <= j && a[i - n] == b[j - n] {
                n += 1;
            }
            best = best.max(n);
        }
    }
    best
}

fn lcs_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut longest = 0;
    for pair in 0..10_000 {
        let alphabet = [2u32, 4, 16, 1000][pair % 4];
        let a: Vec<u32> = (0..rng.random_range(1..=150)).map(|_| rng.random_range(0..alphabet)).collect();
        let b: Vec<u32> = (0..rng.random_range(1..=150)).map(|_| rng.random_range(0..alphabet)).collect();
        let want = lcs_table(&a, &b);
        let got = lcs_tokens(&a, &b);
        ensure!(got == want, "pair {pair}: lcs {got} vs oracle {want}");
        let last = rng.random_range(0..a.len());
        let got = lcs_prefix(&a, last, &b);
        let want = lcs_ending_oracle(&a, last, &b);
        ensure!(got == want, "pair {pair}: ending variant {got} vs oracle {want}");
        longest = longest.max(want);
    }
    Ok(format!("10000 pairs agree in both variants (longest match {longest})"))
}

// ---------------------------------------------------------------------------
// Spearman

/// Closed-form rank correlation with tie corrections.
fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> (Vec<f64>, f64) {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut ties = 0.0;
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            let t = (j - i + 1) as f64;
            ties += (t * t * t - t) / 12.0;
            i = j + 1;
        }
        (r, ties)
    }
    let n = x.len() as f64;
    let (rx, tx) = ranks(x);
    let (ry, ty) = ranks(y);
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    let sx = (n * n * n - n) / 12.0 - tx;
    let sy = (n * n * n - n) / 12.0 - ty;
    (sx + sy - d2) / (2.0 * (sx * sy).sqrt())
}

fn spearman_closed_form() -> Outcome {
    let exact = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).map_err(err)?;
    ensure!(exact == 0.6, "x=[1,2,3,4], y=[2,1,4,3] gave {exact:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0f64;
    let mut tested = 0;
    while tested < 100 {
        let n = rng.random_range(3..60);
        let range = rng.random_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..range))).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..range))).collect();
        if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
            continue;
        }
        let dev = (spearman(&x, &y).map_err(err)? - spearman_oracle(&x, &y)).abs();
        worst = worst.max(dev);
        ensure!(dev <= 1e-12, "vector {tested}: deviation {dev:e}");
        tested += 1;
    }
    Ok(format!("exact 0.6 case holds; 100 tied integer vectors, max |dev| {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Frequency weighting

fn log_bin(f: f64, min: f64, max: f64, n_bins: usize) -> usize {
    let pos = (f.ln() - min.ln()) / (max.ln() - min.ln()) * n_bins as f64;
    (pos.floor().max(0.0) as usize).min(n_bins - 1)
}

fn frequency_weighting() -> Outcome {
    const BINS: usize = 20;
    let (lo, hi) = (1e-5f64, 1e-1f64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes: [(&str, f64); 3] = [("uniform", 1.0), ("rare-heavy", 2.0), ("common-heavy", 0.5)];
    let mut freqs: BTreeMap<String, BTreeMap<u32, f64>> = BTreeMap::new();
    for (i, (name, power)) in shapes.iter().enumerate() {
        let n = 2000 + 500 * i as u32;
        let mut m = BTreeMap::new();
        m.insert(0, lo);
        m.insert(1, hi);
        for f in 2..n {
            let u: f64 = rng.random::<f64>().powf(*power);
            m.insert(f, (lo.ln() + u * (hi.ln() - lo.ln())).exp());
        }
        freqs.insert(name.to_string(), m);
    }
    let w = build_frequency_weighting(&freqs, BINS).map_err(err)?;

    let histogram = |m: &BTreeMap<u32, f64>| {
        let mut h = vec![0.0; BINS];
        for &f in m.values() {
            h[log_bin(f, lo, hi, BINS)] += 1.0 / m.len() as f64;
        }
        h
    };
    let hists: Vec<Vec<f64>> = freqs.values().map(histogram).collect();
    ensure!(hists[0] != hists[1] && hists[1] != hists[2], "histograms are not distinct");
    let target: Vec<f64> = (0..BINS).map(|b| hists.iter().map(|h| h[b]).sum::<f64>() / 3.0).collect();
    let mut worst = 0f64;
    for (sae, m) in &freqs {
        let weights = &w.per_sae[sae].weights;
        ensure!(w.per_sae[sae].uncovered_target_mass == 0.0, "{sae} leaves bins uncovered");
        let mut mass = vec![0.0; BINS];
        for (id, &f) in m {
            mass[log_bin(f, lo, hi, BINS)] += weights[id] / m.len() as f64;
        }
        for b in 0..BINS {
            let dev = (mass[b] - target[b]).abs();
            worst = worst.max(dev);
            ensure!(dev <= 1e-9, "{sae} bin {b}: weighted mass {} vs target {}", mass[b], target[b]);
        }
    }

    // Identical histograms: every weight is one and weighted means are
    // unchanged.
    let same: BTreeMap<String, BTreeMap<u32, f64>> =
        ["a", "b", "c"].iter().map(|s| (s.to_string(), freqs["uniform"].clone())).collect();
    let ones = build_frequency_weighting(&same, BINS).map_err(err)?;
    let values: Vec<f64> = (0..freqs["uniform"].len()).map(|_| rng.random::<f64>()).collect();
    let plain = values.iter().sum::<f64>() / values.len() as f64;
    for (sae, sw) in &ones.per_sae {
        ensure!(sw.weights.values().all(|&x| x == 1.0), "{sae}: weights not all one");
        let pairs: Vec<(f64, f64)> = values.iter().zip(sw.weights.values()).map(|(&v, &w)| (v, w)).collect();
        let weighted = weighted_mean(&pairs).ok_or("no weighted mean")?;
        ensure!(weighted == plain, "{sae}: weighted mean {weighted} vs mean {plain}");
    }
    Ok(format!("3 SAEs match target within {worst:.1e}; all-ones case leaves the mean unchanged"))
}

// ---------------------------------------------------------------------------
// Prompt

fn example(texts: &[&str], spans: Vec<(usize, usize)>) -> ActivatingExample {
    ActivatingExample {
        tokens: (0..texts.len() as u32).collect(),
        texts: texts.iter().map(|s| s.to_string()).collect(),
        marker_spans: spans,
        peak_activation: 1.0,
        peak_index: 0,
        source: ExampleSource {
            sequence_index: 0,
            sequence_ref: "doc@0".into(),
            token_index: 0,
        },
    }
}

fn golden(name: &str) -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn prompt_golden() -> Outcome {
    let set = ExampleSet {
        schema: "example_set/1".into(),
        feature_id: 7,
        top_examples: vec![
            example(
                &["count", "();", "\n", "static", " const", " char*", " resource", "_", "to", "_cstring", "(const",
                  " char*", " resource"],
                vec![(6, 7), (7, 8), (12, 13)],
            ),
            example(
                &["\n", "\n", "What", " is", " the", " Java", " equivalent", " of", " JavaScript's", " resource",
                  " folder?", "\n", "\n", "My", " Wicket", " web", " application", " contains"],
                vec![(9, 10)],
            ),
        ],
        sampled_examples: vec![example(
            &["side-effect:", " since", " the", " check", " isn't", " so", " resource", "\n", "intensive,", " you",
              " can", " set", " {the}", " time", " between", " checks"],
            vec![(6, 7)],
        )],
        held_out: Some(example(&[" never", " shown"], vec![(0, 1)])),
        occurrence_count: 16,
        active_tokens: 20,
        scanned_tokens: 1000,
    };
    let bundle = build_prompt(&set, 11, &RequestParams::default());
    let system = golden("prompt_system.txt")?;
    let user = golden("prompt_user.txt")?;
    ensure!(bundle.system_text == system.trim_end_matches('\n'), "system prompt differs from golden file");
    ensure!(bundle.user_text == user, "user prompt differs from golden file:\n{}", bundle.user_text);
    ensure!(!bundle.user_text.contains("never shown"), "held-out example leaked into the prompt");

    let transcript = golden("assistant_transcript.txt")?;
    let tokenizer = fixture::tokenizer();
    let samples = parse_samples(&transcript, &tokenizer).map_err(err)?;
    ensure!(samples.len() >= 3, "parsed {} samples", samples.len());
    let expected: [(&str, &[(usize, usize)]); 3] = [
        (
            "void free resourceMemory(void* ptr);\nstatic const char* load_ resourcePath(const char* resource);",
            &[(9, 18), (61, 70), (86, 95)],
        ),
        (
            "How to configure the  resource directory in a Python Flask application?\nI'm trying to serve static files from the",
            &[(21, 30)],
        ),
        (
            "warning: avoid heavy computation in the resource allocation phase, it may slow down startup.",
            &[(39, 48)],
        ),
    ];
    for (i, (clean, spans)) in expected.iter().enumerate() {
        let s = &samples[i];
        ensure!(s.clean_text == *clean, "sample {i} text {:?}", s.clean_text);
        ensure!(s.target_spans == *spans, "sample {i} spans {:?}", s.target_spans);
        for &(a, b) in *spans {
            ensure!(&clean[a..b] == " resource", "sample {i} span {a}..{b} covers {:?}", &clean[a..b]);
        }
    }
    Ok(format!("prompt byte-identical to golden; transcript parsed into {} samples with exact spans", samples.len()))
}

// ---------------------------------------------------------------------------
// Position invariance

fn position_invariance() -> Outcome {
    let tok = fixture::tokenizer();
    let backend = fixture::backend(&tok);
    let model = fixture::relu_sae(&tok, &backend);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fillers: Vec<&str> = fixture::FILLERS.to_vec();
    let positions = [0usize, 1, 3, 5, 6, 8, 10, 11, 14, 20];
    let mut records = Vec::new();
    for spec in fixture::feature_specs().iter().filter(|s| s.kind == FeatureKind::Lexical) {
        let mut texts = Vec::new();
        for &p in &positions {
            for hit in [true, false] {
                let mut words: Vec<String> =
                    (0..24).map(|_| fillers[rng.random_range(0..fillers.len())].to_string()).collect();
                let target = if hit { spec.word } else { fillers[rng.random_range(0..fillers.len())] };
                words[p] = format!("{{{{{target}}}}}");
                texts.push(words.join(" "));
            }
        }
        let samples = parse_samples(&texts.join(SAMPLE_SEPARATOR), &tok).map_err(err)?;
        for (s, &p) in samples.chunks(2).zip(&positions) {
            ensure!(
                s.iter().all(|x| x.first_target_token_index == Some(p)),
                "parser placed a target away from position {p}"
            );
        }
        records.push(score_feature(&model, &backend, &tok, spec.id, &samples).map_err(err)?);
    }
    let rates = position_stratified_rates(&records);
    let marked: Vec<_> = rates.iter().filter(|r| r.bucket != PositionBucket::Unmarked).collect();
    let first = marked[0].rate;
    ensure!(first.is_some(), "bucket {} empty", marked[0].bucket);
    for r in &marked {
        ensure!(r.rate == first, "bucket {} rate {:?} vs {:?}", r.bucket, r.rate, first);
    }
    ensure!(first == Some(0.5), "rate {first:?} differs from the constructed 0.5");
    let summary: Vec<String> = marked.iter().map(|r| format!("{}={}/{}", r.bucket, r.n_activating, r.n_samples)).collect();
    Ok(format!("all buckets equal: {}", summary.join(" ")))
}
