//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nextloc::backbone::{load_checkpoint, save_checkpoint, train, CityView, ModelState, Schedule};
use nextloc::geo::{
    fit_norm_stats, from_mercator, geodesic_distance, scale_corrected_distance, to_mercator, GeoPoint, MercatorPoint,
    MAX_LAT_DEG,
};
use nextloc::harness::config::{Ablation, ExperimentConfig, RetrievalSpace};
use nextloc::harness::report::RunReport;
use nextloc::harness::run::{
    build_model, load_datasets, predict_pairs, predict_split, run_gradcheck, run_supervised, zero_shot_report,
    zero_shot_view,
};
use nextloc::harness::synth::{clone_city, random_permutation, AffineTransform, SynthCitySpec};
use nextloc::ingest::formats::read_pings;
use nextloc::ingest::{extract_staypoints_by_user, CityDataset, SplitPart, StaypointParams, TrajectoryPair, WindowSpec};
use nextloc::retrieve::{brute_force_topk, LocationIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [7, 8, 9];
const ABLATIONS: [Ablation; 5] =
    [Ablation::NoPoi, Ablation::NoTime, Ablation::NoDuration, Ablation::HistoryOnly, Ablation::CurrentOnly];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn bench_config() -> ExperimentConfig {
    ExperimentConfig::from_file(&fixture("toybench.toml")).expect("toybench config")
}

fn projection_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p = GeoPoint { lon: rng.random_range(-180.0..180.0), lat: rng.random_range(-MAX_LAT_DEG..MAX_LAT_DEG) };
        let back = from_mercator(to_mercator(p).unwrap());
        worst = worst.max((back.lon - p.lon).abs()).max((back.lat - p.lat).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(worst < 1e-9 && secs < 1.0, format!("max error {worst:.2e} deg in {secs:.3} s"))
}

fn mercator_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut within, mut total) = (0usize, 0usize);
    while total < 1000 {
        let a = GeoPoint { lon: rng.random_range(-180.0..180.0), lat: rng.random_range(-44.9..44.9) };
        let b = GeoPoint {
            lon: (a.lon + rng.random_range(-0.12..0.12)).clamp(-180.0, 180.0),
            lat: (a.lat + rng.random_range(-0.09..0.09)).clamp(-44.99, 44.99),
        };
        let h = geodesic_distance(a, b);
        if h > 10_000.0 || h == 0.0 {
            continue;
        }
        total += 1;
        let m = scale_corrected_distance(a, b).unwrap();
        if ((m - h) / h).abs() <= 0.01 {
            within += 1;
        }
    }
    let frac = within as f64 / total as f64;
    outcome(frac >= 0.999, format!("{within}/{total} pairs within 1%"))
}

fn kd_tree_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // integer coordinates make equal distances common
    let pts: Vec<(u32, MercatorPoint)> = (0..1000u32)
        .map(|i| (i, MercatorPoint::new(rng.random_range(0..60) as f64, rng.random_range(0..60) as f64)))
        .collect();
    let pts: Vec<(u32, MercatorPoint)> = {
        let mut seen = std::collections::HashSet::new();
        let mut uniq = Vec::new();
        for (i, p) in pts {
            if seen.insert((p.x as i64, p.y as i64)) {
                uniq.push((i, p));
            }
        }
        uniq
    };
    let started = Instant::now();
    let index = LocationIndex::from_points(pts.iter().copied()).unwrap();
    let mut agree = 0;
    let mut total = 0;
    for _ in 0..1000 {
        let q = MercatorPoint::new(rng.random_range(-5..65) as f64, rng.random_range(-5..65) as f64);
        for k in [1, 5, 10] {
            total += 1;
            if index.query_topk(q, k).unwrap().ids() == brute_force_topk(&pts, q, k) {
                agree += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(agree == total && secs < 5.0, format!("{agree}/{total} queries agree over {} points in {secs:.2} s", pts.len()))
}

fn toy_city_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = SynthCitySpec { name: "toy".into(), grid_rows: 4, grid_cols: 4, n_agents: 20, n_days: 21, ..SynthCitySpec::toybench() };
    cfg.window = WindowSpec { history_len: 6, current_len: 2, stride: 1 };
    cfg
}

fn gradient_contract() -> Outcome {
    let cfg = toy_city_config();
    let started = Instant::now();
    let ds = load_datasets(&cfg).unwrap();
    let r = run_gradcheck(&cfg, &ds, 2).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        r.passed() && r.frozen_tensors > 0 && secs < 60.0,
        format!(
            "{} entries, max rel err {:.2e}, {} frozen tensors all zero: {}, {secs:.1} s",
            r.entries.len(),
            r.max_rel_err,
            r.frozen_tensors,
            r.frozen_nonzero.is_empty()
        ),
    )
}

fn freeze_contract() -> Outcome {
    let mut cfg = toy_city_config();
    cfg.train = Schedule { batch_size: 16, max_steps: 200, max_epochs: 1000, patience: 1000, ..Schedule::default() };
    let ds = load_datasets(&cfg).unwrap();
    let mut state = build_model(&cfg, &ds).unwrap();
    let frozen = state.store.frozen_digest();
    let trainable = state.store.digest_where(|e| e.trainable);
    let view = CityView::native(&ds[0], &state.config.poi);
    let out = train(&mut state, &[view], &cfg.train, 1).unwrap();
    let same = state.store.frozen_digest() == frozen;
    let moved = state.store.digest_where(|e| e.trainable) != trainable;
    outcome(
        same && moved && out.steps == 200,
        format!("{} steps, frozen hash unchanged: {same}, trainable changed: {moved}", out.steps),
    )
}

fn normalization_stats(ds: &CityDataset) -> Outcome {
    let coords = ds.split_coordinates(SplitPart::Train);
    let stats = fit_norm_stats(&coords).unwrap();
    let n = coords.len() as f64;
    let norm: Vec<[f64; 2]> = coords.iter().map(|c| stats.normalize(*c)).collect();
    let mut worst: f64 = 0.0;
    for axis in 0..2 {
        let mean = norm.iter().map(|v| v[axis]).sum::<f64>() / n;
        let std = (norm.iter().map(|v| (v[axis] - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    outcome(worst < 1e-9 && stats == ds.norm_stats, format!("{} records, worst deviation {worst:.2e}", coords.len()))
}

fn zero_shot_equivariance(state: &ModelState, ds: &CityDataset) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.nxll");
    save_checkpoint(&path, state, &ds.locations_digest()).unwrap();
    let ckpt = load_checkpoint(&path, None, false).unwrap();
    let fixed = &ckpt.state;
    let mut cfg = bench_config();
    cfg.eval.retrieval_space = RetrievalSpace::Normalized;
    let perm = random_permutation(ds, 11);
    let t = AffineTransform { scale_x: 3.7, scale_y: 0.4, shift_x: 1e6, shift_y: -5e5 };
    let clone = clone_city(ds, &t, &perm).unwrap();
    let ranked = |city: &CityDataset| {
        let (view, _, _) = zero_shot_view(&cfg, fixed, city).unwrap();
        predict_split(&cfg, fixed, &view, SplitPart::Test, 10).unwrap().ranked_ids()
    };
    let original = ranked(ds);
    let cloned = ranked(&clone);
    let mapped: Vec<Vec<u32>> = original.iter().map(|r| r.iter().map(|id| perm[id]).collect()).collect();
    let same_seq = mapped == cloned;
    let a = zero_shot_report(&cfg, fixed, ds).unwrap();
    let b = zero_shot_report(&cfg, fixed, &clone).unwrap();
    let bits = |r: &RunReport| r.cities[0].splits[0].hits.iter().map(|h| h.hit.to_bits()).collect::<Vec<_>>();
    let same_hits = bits(&a) == bits(&b);
    let diffs = mapped.iter().zip(&cloned).filter(|(x, y)| x != y).count();
    outcome(
        same_seq && same_hits && a.weights_digest == b.weights_digest,
        format!("{} queries, {diffs} differing sequences, Hit@k bitwise equal: {same_hits}", original.len()),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn learnability(base: &[RunReport]) -> Outcome {
    let model: Vec<f64> = base.iter().map(|r| r.hit("test", 5).unwrap()).collect();
    let baseline: Vec<f64> = base.iter().map(|r| r.baseline_hit(5).unwrap()).collect();
    let slowest = base.iter().map(|r| r.wall_time_s).fold(0.0, f64::max);
    let gap = mean(&model) - mean(&baseline);
    outcome(
        gap >= 0.15 && slowest <= 600.0,
        format!(
            "mean Hit@5 {:.4} vs baseline {:.4} (+{:.1} pp), slowest run {slowest:.0} s",
            mean(&model),
            mean(&baseline),
            100.0 * gap
        ),
    )
}

fn ablation_direction(suites: &[Vec<(String, RunReport)>]) -> Outcome {
    let hit5 = |name: &str| -> f64 {
        mean(&suites.iter().map(|s| s.iter().find(|(n, _)| n == name).unwrap().1.hit("test", 5).unwrap()).collect::<Vec<_>>())
    };
    let full = hit5("base");
    let mut parts = vec![format!("full {full:.4}")];
    let mut pass = true;
    for a in ABLATIONS {
        let h = hit5(a.name());
        pass &= full >= h;
        parts.push(format!("{} {h:.4}", a.name()));
    }
    outcome(pass, parts.join(", "))
}

fn nesting(reports: &[&RunReport]) -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    for r in reports {
        for c in &r.cities {
            for hits in c.splits.iter().map(|s| &s.hits).chain([&c.baseline]) {
                checked += 1;
                let at = |k| hits.iter().find(|h| h.k == k).map(|h| h.hit).unwrap();
                if !(at(1) <= at(5) && at(5) <= at(10)) || r.validate().is_err() {
                    bad += 1;
                }
            }
        }
    }
    outcome(bad == 0 && checked > 0, format!("{checked} Hit@k lists, {bad} violations"))
}

fn structured_output(state: &ModelState, ds: &CityDataset) -> Outcome {
    let view = CityView::native(ds, &state.config.poi);
    let index = LocationIndex::build(&ds.locations).unwrap();
    let pairs: Vec<&TrajectoryPair> = ds.pairs.iter().take(10_000).collect();
    let coords = predict_pairs(state, &view, &pairs, 256, 1).unwrap();
    let mut bad = 0;
    for c in &coords {
        let ok = match index.query_topk(*c, 10) {
            Ok(p) => {
                let ids = p.ids();
                let mut uniq = ids.clone();
                uniq.sort_unstable();
                uniq.dedup();
                ids.len() == 10 && uniq.len() == 10 && p.topk.windows(2).all(|w| w[0].1 <= w[1].1)
            }
            Err(_) => false,
        };
        bad += usize::from(!ok);
    }
    outcome(
        coords.len() == 10_000 && bad == 0 && index.len() >= 10,
        format!("{} queries against {} candidates, {bad} malformed", coords.len(), index.len()),
    )
}

fn staypoint_golden() -> Outcome {
    let pings = read_pings(&fixture("staypoints_12_pings.csv")).unwrap();
    let n_pings = pings.len();
    let out = extract_staypoints_by_user(pings, &StaypointParams::default());
    let got = &out["walker"].staypoints;
    let text = std::fs::read_to_string(fixture("staypoints_12_expected.csv")).unwrap();
    let body = text.lines().skip(1).collect::<Vec<_>>().join("\n");
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let expected: Vec<(i64, i64, f64, f64, usize)> = reader.deserialize().map(|r| r.unwrap()).collect();
    let matches = got.len() == expected.len()
        && got.iter().zip(&expected).all(|(s, e)| {
            s.arrive_ts == e.0
                && s.duration_s == e.1
                && (s.centroid.lon - e.2).abs() < 1e-9
                && (s.centroid.lat - e.3).abs() < 1e-9
                && s.n_pings == e.4
        });
    outcome(
        n_pings == 12 && matches && out["walker"].rejected == 0,
        format!("{n_pings} pings -> {} staypoints, expected {}", got.len(), expected.len()),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {name:<26} {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "projection round-trip", projection_round_trip());
    report(2, "mercator local fidelity", mercator_fidelity());
    report(3, "kd-tree exactness", kd_tree_exactness());
    report(4, "gradient contract", gradient_contract());
    report(5, "freeze contract", freeze_contract());

    let cfg = bench_config();
    let ds = load_datasets(&cfg).unwrap().remove(0);
    report(6, "normalization statistics", normalization_stats(&ds));

    let mut suites = Vec::new();
    let mut reference: Option<ModelState> = None;
    for seed in SEEDS {
        let mut c = cfg.clone();
        c.seed = seed;
        let base = run_supervised(&c, std::slice::from_ref(&ds)).unwrap();
        let mut suite = vec![("base".to_string(), base.report)];
        for a in ABLATIONS {
            let r = run_supervised(&c.with_ablation(a), std::slice::from_ref(&ds)).unwrap();
            suite.push((a.name().to_string(), r.report));
        }
        for (name, r) in &suite {
            println!("  seed {seed} {name:<13} test Hit@5 {:.4} ({:.0} s)", r.hit("test", 5).unwrap(), r.wall_time_s);
        }
        suites.push(suite);
        reference.get_or_insert(base.state);
    }
    let state = reference.unwrap();
    report(7, "zero-shot equivariance", zero_shot_equivariance(&state, &ds));
    let base: Vec<RunReport> = suites.iter().map(|s| s[0].1.clone()).collect();
    report(8, "synthetic learnability", learnability(&base));
    report(9, "ablation direction", ablation_direction(&suites));
    let all: Vec<&RunReport> = suites.iter().flatten().map(|(_, r)| r).collect();
    report(10, "hit@k nesting", nesting(&all));
    report(11, "structured output", structured_output(&state, &ds));
    report(12, "staypoint golden", staypoint_golden());

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!("acceptance: {}/{} passed in {:.0} s", results.len() - failed.len(), results.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
