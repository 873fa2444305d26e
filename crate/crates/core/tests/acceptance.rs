//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line straight to stdout so it shows even under capture.
//!
//! Criteria run one at a time behind a lock so each timer measures only its
//! own work. Training-trend criteria (6, 7, 8) share one set of runs at
//! reduced width (d_m = 64, context 64) and are charged for them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde_json::{json, Value};

use d2dmoe::checkpoint::load_checkpoint;
use d2dmoe::clustering::{
    balanced_kmeans, kmeans_objective, reconstruct_check, slice_ffn, split_ffn, ExpertPartition,
};
use d2dmoe::cost::{dynk_flops, ffn_flops, flops_ratio, CostParams, CostReport};
use d2dmoe::data::{gen_dataset, Dataset, Task};
use d2dmoe::gradcheck;
use d2dmoe::harness::{
    compare_methods, interpolate, prepare_data, run_granularity, run_pipeline, CompareOutput,
    ExperimentSpec, RunOptions,
};
use d2dmoe::mha::{all_projection_sites, capture_site_inputs, plant_exact};
use d2dmoe::model::{
    forward, Activation, Capture, DenseModel, FfnKind, ProjSlot, Site, TokenBatch,
    TransformerConfig,
};
use d2dmoe::moe::{convert_model, SiteConversion};
use d2dmoe::optim::AdamConfig;
use d2dmoe::rng;
use d2dmoe::routing::{
    default_router_hidden, dynamic_k_gate, expert_activation_sums, labels_from_sums,
    router_targets, train_router, GatePolicy, Router, RouterDataset, RouterOutput,
    RouterTrainConfig,
};
use d2dmoe::tensor::Tensor;
use d2dmoe::train::{evaluate, train, validation_batches, TrainConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn verdict(id: u32, name: &str, elapsed: Duration, budget: Duration, pass: bool, detail: String) {
    let in_time = elapsed <= budget;
    let ok = pass && in_time;
    let line = format!(
        "criterion {id:>2} {} {name} ({:.1}s of {}s): {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(
        in_time,
        "criterion {id} exceeded its {}s budget",
        budget.as_secs()
    );
    assert!(pass, "criterion {id} failed: {detail}");
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn random_batch(seed: u64, batch: usize, seq: usize, vocab: usize) -> TokenBatch {
    let mut r = rng::stream(seed, "acceptance-batch");
    let ids: Vec<usize> = (0..batch * seq).map(|_| r.random_range(0..vocab)).collect();
    TokenBatch::new(batch, seq, ids.clone(), ids).unwrap()
}

fn random_partition(hidden: usize, n: usize, seed: u64) -> ExpertPartition {
    let mut assignment: Vec<usize> = (0..hidden).map(|i| i % n).collect();
    assignment.shuffle(&mut rng::stream(seed, "acceptance-partition"));
    ExpertPartition::new(n, assignment).unwrap()
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_exactness() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut notes = Vec::new();
    // Dense and all-experts MoE agree end to end and per layer.
    let (mut worst_logit, mut worst_layer) = (0.0f32, 0.0f32);
    for i in 0..10u64 {
        let mut c = TransformerConfig::desk_lm();
        c.ffn_kind = if i % 2 == 0 {
            FfnKind::Standard
        } else {
            FfnKind::Gated
        };
        c.activation = if i % 4 < 2 {
            Activation::Gelu
        } else {
            Activation::Relu
        };
        let m = DenseModel::build(c, 100 + i).unwrap();
        let n = [4, 8, 16, 32][i as usize % 4];
        let sites: Vec<SiteConversion> = (0..m.num_layers())
            .map(|l| SiteConversion {
                site: Site::ffn(l),
                partition: random_partition(m.config.hidden_dim(), n, i * 10 + l as u64),
                router: None,
            })
            .collect();
        let moe = convert_model(&m, sites, GatePolicy::DynamicK { tau: 0.0 }).unwrap();
        let b = random_batch(i, 2, m.config.context_length, m.config.vocab_size);
        let ffn_sites: Vec<Site> = (0..m.num_layers()).map(Site::ffn).collect();
        let (x, tr, _) = forward(&m, &b, &Capture::io_at(ffn_sites.iter().copied())).unwrap();
        let (y, _, _) = forward(&moe, &b, &Capture::none()).unwrap();
        worst_logit = worst_logit.max(x.max_abs_diff(&y));
        for &s in &ffn_sites {
            let layer = moe.moe_layer(s).unwrap();
            let err = reconstruct_check(
                m.ffn(s.layer).unwrap(),
                m.config.activation,
                &layer.slices,
                tr.input(s).unwrap(),
            )
            .unwrap();
            worst_layer = worst_layer.max(err);
        }
    }
    let equiv = worst_logit < 1e-4 && worst_layer < 1e-5;
    notes.push(format!(
        "logits max|Δ| {worst_logit:.2e}, per-layer max|Δ| {worst_layer:.2e}"
    ));

    // Closed-form ratio against the direct cost quotient on a 200-point grid.
    let mut r = rng::stream(1, "acceptance-flops-grid");
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let d_m = [32u64, 64, 128, 256, 768][r.random_range(0..5)];
        let e = [1u64, 2, 4, 8][r.random_range(0..4)];
        let divisors: Vec<u64> = (1..=e * d_m).filter(|n| (e * d_m) % n == 0).collect();
        let n = divisors[r.random_range(0..divisors.len())];
        let d_h = r.random_range(1..=256u64);
        let mut p = CostParams::new(d_m, e, n, d_h).unwrap();
        p.gated = r.random_bool(0.5);
        let k = r.random_range(0.0..=n as f64);
        let direct = dynk_flops(&p, k) / ffn_flops(&p) as f64;
        worst_rel = worst_rel.max((direct - flops_ratio(&p, k)).abs() / direct);
    }
    let spot = flops_ratio(&CostParams::new(64, 4, 16, 8).unwrap(), 4.0);
    let flops_ok = worst_rel <= 1e-12 && spot == 0.26953125;
    notes.push(format!("ratio rel err {worst_rel:.1e}, spot {spot}"));

    // Gate properties on 10^4 random score vectors.
    let mut violations = 0usize;
    let mut r = rng::stream(2, "acceptance-gates");
    for _ in 0..10_000 {
        let n = r.random_range(1..=64);
        let s: Vec<f32> = (0..n)
            .map(|_| {
                if r.random_bool(0.2) {
                    0.0
                } else {
                    r.random_range(0.0..5.0)
                }
            })
            .collect();
        let (a, b) = (r.random_range(0.0..=1.0), r.random_range(0.0..=1.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ml, mh) = (dynamic_k_gate(&s, lo).mask, dynamic_k_gate(&s, hi).mask);
        violations += ml.iter().zip(&mh).filter(|(l, h)| **h && !**l).count();
        // Powers of two rescale f32 exactly.
        let c = 2f32.powi(r.random_range(-10..10));
        let scaled: Vec<f32> = s.iter().map(|v| v * c).collect();
        violations += (dynamic_k_gate(&scaled, hi).mask != mh) as usize;
        let max = s.iter().cloned().fold(0.0f32, f32::max);
        violations += s
            .iter()
            .zip(&mh)
            .filter(|(v, m)| **v == max && !**m)
            .count();
    }
    notes.push(format!("gate violations {violations}"));
    verdict(
        1,
        "exactness",
        t0.elapsed(),
        mins(1),
        equiv && flops_ok && violations == 0,
        notes.join("; "),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_gradients() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..20 {
        for c in gradcheck::suite(seed).unwrap() {
            let w = worst.entry(c.name).or_insert(0.0);
            *w = w.max(c.error);
        }
    }
    let (name, err) = worst
        .iter()
        .fold(("", 0.0f64), |a, (n, e)| if *e > a.1 { (n, *e) } else { a });
    let pass = worst.values().all(|e| *e < 1e-5);
    verdict(
        2,
        "gradients",
        t0.elapsed(),
        mins(2),
        pass,
        format!("{} cases x 20 seeds, worst {name} {err:.2e}", worst.len()),
    );
}

// ---------------------------------------------------------------- criterion 3

fn brute_best(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    // The three balanced 2-partitions of four points.
    [[0, 0, 1, 1], [0, 1, 0, 1], [0, 1, 1, 0]]
        .iter()
        .map(|a| (a.to_vec(), kmeans_objective(points, a, 2)))
        .fold(
            (Vec::new(), f64::INFINITY),
            |b, x| if x.1 < b.1 { x } else { b },
        )
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn criterion_03_clustering() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut ok = true;
    // Each balanced partition of four points is made the unique optimum in turn.
    for pairing in [[0usize, 0, 1, 1], [0, 1, 0, 1], [0, 1, 1, 0]] {
        let mut seen = [0usize; 2];
        let pts: Vec<Vec<f64>> = pairing
            .iter()
            .map(|&c| {
                seen[c] += 1;
                vec![10.0 * c as f64, 0.1 * seen[c] as f64]
            })
            .collect();
        let t = Tensor::<f64>::from_rows(&pts).unwrap();
        let res = balanced_kmeans(&t, 2, 7, 20).unwrap();
        let (best, obj) = brute_best(&pts);
        ok &= same_partition(&best, &pairing) && same_partition(&res.assignment, &pairing);
        ok &= (res.objective - obj).abs() <= 1e-12;
    }
    // Exact balance on random instances.
    let mut unbalanced = 0;
    let mut r = rng::stream(3, "acceptance-kmeans");
    for i in 0..100u64 {
        let n = r.random_range(1..=8);
        let size = r.random_range(1..=8);
        let d = r.random_range(1..=6);
        let pts: Tensor<f64> = rng::normal_tensor(&mut r, &[n * size, d], 1.0).cast();
        let res = balanced_kmeans(&pts, n, i, 20).unwrap();
        let mut counts = vec![0; n];
        res.assignment.iter().for_each(|&a| counts[a] += 1);
        unbalanced += counts.iter().any(|&c| c != size) as usize;
    }
    // No single cross-cluster swap improves the objective.
    let mut improvable = 0;
    for (i, (m, n)) in [(8, 2), (12, 3), (16, 4), (24, 4), (32, 2), (32, 4), (32, 8)]
        .into_iter()
        .enumerate()
    {
        let pts: Tensor<f64> =
            rng::normal_tensor(&mut rng::stream(i as u64, "acceptance-swap"), &[m, 3], 1.0).cast();
        let rows: Vec<Vec<f64>> = (0..m).map(|r| pts.row(r).to_vec()).collect();
        let res = balanced_kmeans(&pts, n, i as u64, 30).unwrap();
        let base = kmeans_objective(&rows, &res.assignment, n);
        for a in 0..m {
            for b in a + 1..m {
                if res.assignment[a] == res.assignment[b] {
                    continue;
                }
                let mut s = res.assignment.clone();
                s.swap(a, b);
                improvable +=
                    (kmeans_objective(&rows, &s, n) < base - 1e-9 * base.max(1.0)) as usize;
            }
        }
    }
    let pass = ok && unbalanced == 0 && improvable == 0;
    verdict(3,
        "clustering",
        t0.elapsed(),
        mins(2),
        pass,
        format!("brute-force optima matched: {ok}; unbalanced {unbalanced}/100; improving swaps {improvable}"),
    )
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_router_fidelity() {
    let _serial = serial();
    let t0 = Instant::now();
    let (d, n, tokens, steps) = (64, 16, 16384, 20_000);
    let inputs = rng::normal_tensor(
        &mut rng::stream(4, "acceptance-router-x"),
        &[tokens, d],
        1.0,
    );
    // Expert norms are positive and rarely near zero; an output offset of about
    // four logit deviations keeps the teacher in that regime instead of folding
    // at |0|. The student is wider than the teacher: a same-width ReLU student
    // stalls in spurious minima.
    let mut teacher = Router::init(d, default_router_hidden(d), n, RouterOutput::Abs, 41);
    teacher.bo.data_mut().iter_mut().for_each(|b| *b += 4.0);
    let targets = teacher.forward(&inputs).unwrap();
    let cfg = RouterTrainConfig {
        hidden: Some(32),
        steps,
        batch_size: 256,
        opt: AdamConfig::new(3e-3).cosine(steps),
    };
    let data = RouterDataset::new(inputs.clone(), targets.clone()).unwrap();
    let (_, rep) = train_router(&data, &cfg, 5).unwrap();
    let fit = rep.val_loss / rep.target_variance;
    // Permuting targets across tokens leaves nothing to learn.
    let mut perm: Vec<usize> = (0..tokens).collect();
    perm.shuffle(&mut rng::stream(4, "acceptance-router-perm"));
    let shuffled = RouterDataset::new(inputs, targets.select_rows(&perm).unwrap()).unwrap();
    let (_, ctl) = train_router(&shuffled, &cfg, 5).unwrap();
    let control = ctl.val_loss / ctl.target_variance;
    verdict(
        4,
        "router fidelity",
        t0.elapsed(),
        mins(5),
        fit < 1e-3 && control > 0.8,
        format!("planted val mse/var {fit:.2e}; shuffled control {control:.3}"),
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_massive_activations() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut c = TransformerConfig::desk_lm();
    c.model_dim = 64;
    c.context_length = 64;
    let data = gen_dataset(Task::ByteLm, 100_000, 5).unwrap();
    let mut m = DenseModel::build(c, 5).unwrap();
    train(&mut m, &data, &TrainConfig::new(200, 16, 3e-3), None, 5).unwrap();
    let batches = validation_batches(&m, &data, 16, None, 4).unwrap();
    let site = Site::ffn(1);
    let z = capture_site_inputs(&m, &[site], &batches)
        .unwrap()
        .remove(0);
    let act = m.config.activation;
    let ffn = m.ffn(1).unwrap().clone();
    let n = 32;
    let (partition, clean) = split_ffn(&ffn, n, 5).unwrap();
    // Typical magnitude: mean |post-activation| over the clean batch.
    let (_, post, _) = ffn.hidden_parts(act, &z).unwrap();
    let typical = post.data().iter().map(|v| v.abs() as f64).sum::<f64>() / post.numel() as f64;
    let channel = partition.experts()[0][0];
    let mut spiked = ffn.clone();
    spiked.b1.data_mut()[channel] += (1000.0 * typical) as f32;
    let outlier = slice_ffn(&spiked, &partition).unwrap();

    let frac_below = |slices| -> f64 {
        let l = labels_from_sums(&expert_activation_sums(slices, act, &z).unwrap()).labels;
        l.data().iter().filter(|&&v| v < 0.01).count() as f64 / l.numel() as f64
    };
    let (before, after) = (frac_below(&clean), frac_below(&outlier));
    let (t_clean, t_spiked) = (
        router_targets(&clean, act, &z).unwrap(),
        router_targets(&outlier, act, &z).unwrap(),
    );
    let mut worst = 0.0f64;
    for r in 0..z.rows() {
        for e in 1..n {
            let (a, b) = (t_clean.row(r)[e] as f64, t_spiked.row(r)[e] as f64);
            worst = worst.max((a - b).abs() / a.abs().max(1e-12));
        }
    }
    verdict(5,
        "massive activations",
        t0.elapsed(),
        mins(5),
        after > 0.9 && worst < 0.01,
        format!(
            "labels < 0.01: {:.1}% clean -> {:.1}% with outlier; non-outlier regression targets max rel change {worst:.1e}",
            100.0 * before,
            100.0 * after
        ),
    );
}

// ------------------------------------------------------------ criteria 6-8

const TREND_SEEDS: [u64; 3] = [1, 2, 3];

/// Dense at low tau: sparsified models recover most of their loss between
/// tau = 0.05 and tau = 0.01.
const TAU_GRID: [f64; 30] = [
    0.0, 0.0025, 0.005, 0.0075, 0.01, 0.0125, 0.015, 0.0175, 0.02, 0.025, 0.03, 0.035, 0.04, 0.05,
    0.06, 0.07, 0.085, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
];

fn cosine(steps: usize, lr: f64) -> Value {
    json!({"lr": lr, "schedule": {"kind": "cosine", "total_steps": steps, "final_frac": 0.1}})
}

fn method_stages(alpha: f64) -> Value {
    json!([
        {"stage": "sparsify", "train": {"steps": 1200, "batch_size": 16, "opt": cosine(1200, 1e-3)}, "sparsity": {"alpha": alpha}},
        {"stage": "cluster", "n_experts": 16},
        {"stage": "train_routers", "router": {"steps": 600, "batch_size": 128, "opt": cosine(600, 3e-3)}, "sample_batches": 16}
    ])
}

/// Byte-LM compare spec: one dense base, then alpha = 0 against alpha = 0.02.
fn trend_spec(seed: u64) -> Value {
    json!({
        "name": "trend",
        "task": "byte_lm",
        "data": {"size": 200000},
        "model": {"vocab_size": 256, "context_length": 64, "num_layers": 2, "model_dim": 64, "num_heads": 4,
                  "expansion_factor": 4, "ffn_kind": "standard", "activation": "gelu", "task_head": {"kind": "lm"}},
        "seed": seed,
        "stages": [{"stage": "train", "train": {"steps": 1200, "batch_size": 16, "opt": cosine(1200, 3e-3)}}],
        "methods": [
            {"name": "a0", "stages": method_stages(0.0)},
            {"name": "a02", "stages": method_stages(0.02)}
        ],
        "grid": {"tau": TAU_GRID,
                 "k": [1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16]},
        "eval": {"batch_size": 16, "batches": 8}
    })
}

struct TrendRuns {
    compare: Vec<Vec<CostReport>>,
    granularity: Vec<Vec<CostReport>>,
    compare_time: Duration,
    granularity_time: Duration,
}

/// Granularity study on the alpha > 0 method's sparsified model.
fn granularity_of(seed: u64, out: &Path) -> Vec<CostReport> {
    let mut v = trend_spec(seed);
    let mut stages = v["stages"].as_array().unwrap().clone();
    stages.extend(method_stages(0.02).as_array().unwrap().iter().cloned());
    v["stages"] = Value::Array(stages);
    v["methods"] = json!([]);
    v["grid"]["k"] = json!([]);
    v["granularity"] = json!([4, 16, 64]);
    let spec = ExperimentSpec::from_json(&v.to_string()).unwrap();
    let data = prepare_data(&spec, None).unwrap();
    let pre = load_checkpoint(&out.join("methods/01_a02/stages/01_sparsify.ckpt")).unwrap();
    run_granularity(&spec, &data, &pre, 2).unwrap()
}

fn trend_runs() -> &'static TrendRuns {
    static RUNS: OnceLock<TrendRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (mut compare, mut granularity) = (Vec::new(), Vec::new());
        let (mut compare_time, mut granularity_time) = (Duration::ZERO, Duration::ZERO);
        for seed in TREND_SEEDS {
            let dir = tempfile::tempdir().unwrap();
            let t = Instant::now();
            let spec = ExperimentSpec::from_json(&trend_spec(seed).to_string()).unwrap();
            let CompareOutput { rows, .. } =
                compare_methods(&spec, dir.path(), &RunOptions::default()).unwrap();
            compare_time += t.elapsed();
            compare.push(rows);
            let t = Instant::now();
            granularity.push(granularity_of(seed, dir.path()));
            granularity_time += t.elapsed();
        }
        TrendRuns {
            compare,
            granularity,
            compare_time,
            granularity_time,
        }
    })
}

/// Loss of `method` at cost `x`, read off its curve by linear interpolation.
fn loss_at(rows: &[CostReport], method: &str, x: f64, axis: fn(&CostReport) -> f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (axis(r), r.metric))
        .collect();
    interpolate(&pts, x)
}

fn majority(wins: usize) -> bool {
    2 * wins > TREND_SEEDS.len()
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

#[test]
fn criterion_06_sparsification_trend() {
    let _serial = serial();
    let runs = trend_runs();
    let t0 = Instant::now();
    let mut wins = 0;
    let mut notes = Vec::new();
    for (seed, rows) in TREND_SEEDS.iter().zip(&runs.compare) {
        let mut all = true;
        let mut cells = Vec::new();
        for b in [0.4, 0.5, 0.6] {
            let sparse = loss_at(rows, "a02-dynk", b, |r| r.moe_site_frac);
            let plain = loss_at(rows, "a0-dynk", b, |r| r.moe_site_frac);
            all &= matches!((sparse, plain), (Some(s), Some(p)) if s < p);
            cells.push(format!("{b}: {} vs {}", fmt_loss(sparse), fmt_loss(plain)));
        }
        wins += all as usize;
        notes.push(format!("seed {seed} [{}]", cells.join(", ")));
    }
    verdict(
        6,
        "sparsification trend",
        runs.compare_time + t0.elapsed(),
        mins(30),
        majority(wins),
        format!(
            "alpha 0.02 below alpha 0 at every budget in {wins}/3 seeds; {}",
            notes.join("; ")
        ),
    );
}

#[test]
fn criterion_07_dynamic_vs_static_k() {
    let _serial = serial();
    let runs = trend_runs();
    let t0 = Instant::now();
    let mut wins = 0;
    let mut notes = Vec::new();
    for (seed, rows) in TREND_SEEDS.iter().zip(&runs.compare) {
        let mut all = true;
        let mut cells = Vec::new();
        for f in [0.25, 0.5, 0.75] {
            let dynk = loss_at(rows, "a02-dynk", f, |r| r.mean_executed_frac);
            let topk = loss_at(rows, "a02-topk", f, |r| r.mean_executed_frac);
            all &= matches!((dynk, topk), (Some(d), Some(t)) if d <= t);
            cells.push(format!("{f}: {} vs {}", fmt_loss(dynk), fmt_loss(topk)));
        }
        wins += all as usize;
        notes.push(format!("seed {seed} [{}]", cells.join(", ")));
    }
    verdict(
        7,
        "dynamic-k vs top-k",
        runs.compare_time + t0.elapsed(),
        mins(30),
        majority(wins),
        format!(
            "dynamic-k at or below top-k at every executed fraction in {wins}/3 seeds; {}",
            notes.join("; ")
        ),
    );
}

#[test]
fn criterion_08_granularity() {
    let _serial = serial();
    let runs = trend_runs();
    let t0 = Instant::now();
    // Analytic: at d_m = 64, e = 4 the router term grows with n, so size-1
    // experts pay more than size-4 experts at every executed fraction.
    let d_h = default_router_hidden(64) as u64;
    let p4 = CostParams::new(64, 4, 64, d_h).unwrap();
    let p1 = CostParams::new(64, 4, 256, d_h).unwrap();
    let router_growth = p1.router_flops() as f64 / p4.router_flops() as f64;
    let costlier = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .all(|&f| flops_ratio(&p1, f * 256.0) > flops_ratio(&p4, f * 64.0));
    let analytic = router_growth >= 2.0 && costlier;

    let mut wins = 0;
    let mut notes = Vec::new();
    for (seed, rows) in TREND_SEEDS.iter().zip(&runs.granularity) {
        let mut all = true;
        let mut cells = Vec::new();
        for b in [0.3, 0.4, 0.5] {
            let coarse = loss_at(rows, "n4-dynk", b, |r| r.moe_site_frac);
            for fine in ["n16-dynk", "n64-dynk"] {
                let l = loss_at(rows, fine, b, |r| r.moe_site_frac);
                // A coarse curve that cannot reach the budget is dominated by any that can.
                all &= match (l, coarse) {
                    (Some(l), Some(c)) => l <= c,
                    (Some(_), None) => true,
                    _ => false,
                };
            }
            cells.push(format!(
                "{b}: n4 {} n16 {} n64 {}",
                fmt_loss(coarse),
                fmt_loss(loss_at(rows, "n16-dynk", b, |r| r.moe_site_frac)),
                fmt_loss(loss_at(rows, "n64-dynk", b, |r| r.moe_site_frac))
            ));
        }
        wins += all as usize;
        notes.push(format!("seed {seed} [{}]", cells.join(", ")));
    }
    verdict(
        8,
        "granularity",
        runs.compare_time + runs.granularity_time + t0.elapsed(),
        mins(30),
        analytic && majority(wins),
        format!(
            "size-1 router cost {router_growth:.2}x size-4, costlier at matched fraction: {costlier}; \
             sizes 16 and 4 dominate size 64 in {wins}/3 seeds; {}",
            notes.join("; ")
        ),
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_09_mha_replacement() {
    let _serial = serial();
    let t0 = Instant::now();
    let spec = ExperimentSpec::from_json(
        &json!({
            "name": "mha",
            "task": "toy_classify",
            "data": {"size": 6000},
            "model": {"vocab_size": 256, "context_length": 32, "num_layers": 2, "model_dim": 64, "num_heads": 4,
                      "expansion_factor": 4, "ffn_kind": "standard", "activation": "gelu",
                      "task_head": {"kind": "classifier", "num_classes": 6}},
            "seed": 1,
            "stages": [
                {"stage": "train", "train": {"steps": 1500, "batch_size": 32, "opt": cosine(1500, 3e-3)}},
                {"stage": "replace_mha", "distill": {"steps": 1500, "batch_size": 256, "opt": cosine(1500, 3e-3)},
                 "sample_batches": 32, "recovery": {"steps": 169, "batch_size": 32, "opt": {"lr": 5e-4}}},
                {"stage": "cluster", "n_experts": 8, "projection_experts": 4}
            ],
            "eval": {"batch_size": 64, "batches": 20}
        })
        .to_string(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&spec, dir.path(), &RunOptions::default()).unwrap();
    let data: Dataset = prepare_data(&spec, None).unwrap();
    let (dense, replaced) = (&out.stage_inputs[1], &out.stage_inputs[2]);
    let batches = validation_batches(dense, &data, 64, None, 20).unwrap();
    let acc = |m: &DenseModel| evaluate(m, &batches).unwrap().accuracy.unwrap();
    let (acc_dense, acc_replaced) = (acc(dense), acc(replaced));
    let close = (acc_dense - acc_replaced).abs() <= 0.02;

    let sites = all_projection_sites(dense);
    let planted = plant_exact(dense, &sites).unwrap();
    let bitwise = batches.iter().all(|b| {
        let (x, _, _) = forward(dense, b, &Capture::none()).unwrap();
        let (y, _, _) = forward(&planted, b, &Capture::none()).unwrap();
        x.data()
            .iter()
            .zip(y.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });

    let inputs = capture_site_inputs(replaced, &sites, &batches[..4]).unwrap();
    let mut worst = 0.0f32;
    for (s, z) in sites.iter().zip(&inputs) {
        let ProjSlot::Replaced(mlp) = replaced.blocks[s.layer].proj(s.kind) else {
            panic!("{s} not replaced")
        };
        let layer = out
            .model
            .moe_layer(*s)
            .unwrap_or_else(|| panic!("{s} not converted"));
        worst = worst
            .max(reconstruct_check(&mlp.as_ffn(), Activation::Relu, &layer.slices, z).unwrap());
    }
    verdict(
        9,
        "mha replacement",
        t0.elapsed(),
        mins(20),
        close && bitwise && worst < 1e-5,
        format!(
            "accuracy dense {:.2}% vs replaced+recovery {:.2}%; planted logits bitwise: {bitwise}; \
             {} replaced sites reconstruct max|Δ| {worst:.2e}",
            100.0 * acc_dense,
            100.0 * acc_replaced,
            sites.len()
        ),
    );
}

// --------------------------------------------------------------- criterion 10

fn files_with(dir: &Path, exts: &[&str], out: &mut BTreeMap<String, Vec<u8>>, root: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_with(&p, exts, out, root);
        } else if p.extension().is_some_and(|x| exts.iter().any(|e| x == *e)) {
            out.insert(
                p.strip_prefix(root).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            );
        }
    }
}

#[test]
fn criterion_10_determinism() {
    let _serial = serial();
    let t0 = Instant::now();
    let spec = ExperimentSpec::from_json(
        &json!({
            "name": "determinism",
            "task": "byte_lm",
            "data": {"size": 30000},
            "model": {"vocab_size": 256, "context_length": 32, "num_layers": 2, "model_dim": 32, "num_heads": 2,
                      "expansion_factor": 4, "ffn_kind": "standard", "activation": "gelu", "task_head": {"kind": "lm"}},
            "seed": 10,
            "stages": [
                {"stage": "train", "train": {"steps": 40, "batch_size": 8, "opt": {"lr": 0.003}}},
                {"stage": "sparsify", "train": {"steps": 20, "batch_size": 8, "opt": {"lr": 0.001}}, "sparsity": {"alpha": 0.01}},
                {"stage": "replace_mha", "sites": ["q.0", "v.1"], "distill": {"steps": 40, "batch_size": 64, "opt": {"lr": 0.003}}, "sample_batches": 2},
                {"stage": "cluster", "n_experts": 8, "projection_experts": 4},
                {"stage": "train_routers", "router": {"steps": 40, "batch_size": 64, "opt": {"lr": 0.003}}, "sample_batches": 2}
            ],
            "grid": {"tau": [0.0, 0.25, 0.5, 1.0], "k": [1, 4]},
            "eval": {"batch_size": 8, "batches": 2},
            "granularity": [4, 16]
        })
        .to_string(),
    )
    .unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut outs = Vec::new();
    for dir in [a.path(), b.path()] {
        pool.install(|| run_pipeline(&spec, dir, &RunOptions::default()))
            .unwrap();
        let mut files = BTreeMap::new();
        files_with(dir, &["ckpt", "csv"], &mut files, dir);
        outs.push(files);
    }
    let differing: Vec<&String> = outs[0]
        .keys()
        .filter(|k| outs[1].get(*k) != outs[0].get(*k))
        .collect();
    let same_set = outs[0].keys().eq(outs[1].keys());
    verdict(
        10,
        "determinism",
        t0.elapsed(),
        mins(10),
        same_set && differing.is_empty() && outs[0].len() > 5,
        format!(
            "{} checkpoints/CSVs compared, {} differ",
            outs[0].len(),
            differing.len()
        ),
    );
}
