//! Release gate: one test per headline requirement, each printing a single
//! pass/fail line with the measured numbers (visible under --nocapture).

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use sarcd_core::clustering::{self, FcmParams, Level, VoteThresholds};
use sarcd_core::imaging::LabelMap;
use sarcd_core::lrsd::{self, LrsdParams};
use sarcd_core::metrics;
use sarcd_core::pcanet::{self, PcaNetParams, TrainPatch};
use sarcd_core::pipeline::{self, PipelineConfig};
use sarcd_core::synthgen::{self, Change, Rect, SceneSpec};

fn gate(ok: bool, line: &str) {
    println!("[{}] {line}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "{line}");
}

// ---------------------------------------------------------------- filters

fn random_patches(count: usize, k: usize, seed: u64) -> Vec<TrainPatch<f64>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = Array1::from_shape_fn(k * k, |_| rng.random_range(0.0..10.0));
            let b = Array1::from_shape_fn(k * k, |_| rng.random_range(0.0..10.0));
            TrainPatch::from_vectors(a.view(), b.view(), k).unwrap()
        })
        .collect()
}

/// Covariance of every mean-removed sliding window, assembled densely.
fn window_gram(maps: &[Array2<f64>], side: usize) -> nalgebra::DMatrix<f64> {
    let d = side * side;
    let mut g = nalgebra::DMatrix::<f64>::zeros(d, d);
    for m in maps {
        let (h, w) = m.dim();
        for r0 in 0..=(h - side) {
            for c0 in 0..=(w - side) {
                let mut y = nalgebra::DVector::<f64>::zeros(d);
                for r in 0..side {
                    for c in 0..side {
                        y[r * side + c] = m[[r0 + r, c0 + c]];
                    }
                }
                let mean = y.sum() / d as f64;
                y.add_scalar_mut(-mean);
                g += &y * y.transpose();
            }
        }
    }
    g
}

/// Worst |dot| deviation from 1 between each filter and the matching
/// eigenvector of the dense gram (unit vectors, so sign cancels in |dot|).
fn bank_vs_gram(bank: &pcanet::FilterBank<f64>, g: &nalgebra::DMatrix<f64>) -> f64 {
    let d = bank.side * bank.side;
    let se = g.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());
    let mut worst = 0.0f64;
    for (j, f) in bank.filters.iter().enumerate() {
        let mut dot = 0.0;
        for i in 0..d {
            dot += f[[i / bank.side, i % bank.side]] * se.eigenvectors[(i, order[j])];
        }
        worst = worst.max((dot.abs() - 1.0).abs());
    }
    worst
}

#[test]
fn filter_banks_match_dense_eigendecomposition() {
    let mut worst = 0.0f64;
    let mut slowest = 0.0f64;
    for seed in [3u64, 17, 2026] {
        let started = Instant::now();
        let patches = random_patches(30, 7, seed);
        let p = PcaNetParams::new(7, 5);
        let w1 = pcanet::learn_stage1(&patches, &p).unwrap();

        let maps: Vec<Array2<f64>> = patches.iter().map(|q| q.data.clone()).collect();
        worst = worst.max(bank_vs_gram(&w1, &window_gram(&maps, 5)));

        let responses: Vec<Array2<f64>> = patches
            .iter()
            .flat_map(|q| w1.filters.iter().map(|f| pcanet::convolve_same(&q.data, f)))
            .collect();
        let w2 = pcanet::learn_stage2(&patches, &w1, &p).unwrap();
        worst = worst.max(bank_vs_gram(&w2, &window_gram(&responses, 5)));
        slowest = slowest.max(started.elapsed().as_secs_f64());
    }
    gate(
        worst < 1e-8 && slowest < 5.0,
        &format!("filter banks match dense eigendecomposition: worst dev {worst:.2e}, slowest seed {slowest:.2}s (need <1e-8, <5s)"),
    );
}

// ----------------------------------------------------- proximal operators

fn frob(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_matrix(rng: &mut StdRng, m: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| rng.random_range(-2.0..2.0))
}

/// Nuclear-norm prox from nalgebra's SVD with hand-shrunk singular values.
fn svt_oracle(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    let (m, n) = x.dim();
    let dm = nalgebra::DMatrix::from_fn(m, n, |r, c| x[[r, c]]);
    let svd = dm.svd(true, true);
    let s = nalgebra::DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values.iter().map(|&v| (v - tau).max(0.0)),
    );
    let y = svd.u.unwrap() * nalgebra::DMatrix::from_diagonal(&s) * svd.v_t.unwrap();
    Array2::from_shape_fn((m, n), |(r, c)| y[(r, c)])
}

fn col_shrink_oracle(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut y = x.clone();
    for mut col in y.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > tau { (norm - tau) / norm } else { 0.0 };
        col.mapv_inplace(|v| v * scale);
    }
    y
}

#[test]
fn shrinkage_operators_match_closed_forms_and_are_non_expansive() {
    let mut rng = StdRng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_matrix(&mut rng, 5, 5);
        let tau = rng.random_range(0.1..2.0);
        worst = worst.max(frob(&(&lrsd::svt(&x, tau) - &svt_oracle(&x, tau))));
        worst = worst.max(frob(&(&lrsd::col_shrink(&x, tau) - &col_shrink_oracle(&x, tau))));
        let entry = x.mapv(|v| v.signum() * (v.abs() - tau).max(0.0));
        worst = worst.max(frob(&(&lrsd::entry_shrink(&x, tau) - &entry)));
    }

    // prox maps of convex functions never expand distances
    let mut expansion = 0.0f64;
    for _ in 0..100 {
        let x = random_matrix(&mut rng, 5, 5);
        let y = random_matrix(&mut rng, 5, 5);
        let tau = rng.random_range(0.1..2.0);
        let gap = frob(&(&x - &y));
        for (px, py) in [
            (lrsd::svt(&x, tau), lrsd::svt(&y, tau)),
            (lrsd::col_shrink(&x, tau), lrsd::col_shrink(&y, tau)),
            (lrsd::entry_shrink(&x, tau), lrsd::entry_shrink(&y, tau)),
        ] {
            expansion = expansion.max(frob(&(&px - &py)) - gap);
        }
    }
    gate(
        worst < 1e-10 && expansion < 1e-12,
        &format!("shrinkage operators: worst closed-form dev {worst:.2e} (need <1e-10), worst expansion {expansion:.2e}"),
    );
}

// -------------------------------------------------------------- recovery

#[test]
fn planted_rank_one_matrix_separates_from_spikes() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(77);
    let (m, n) = (9, 200);
    let row = Array1::from_shape_fn(m, |_| rng.random_range(0.5..1.5));
    let scale = Array1::from_shape_fn(n, |_| rng.random_range(2.0..6.0));
    let clean = Array2::from_shape_fn((m, n), |(r, c)| row[r] * scale[c]);

    let mut phi = clean.clone();
    let mut spiked = Vec::new();
    while spiked.len() < m * n / 100 {
        let at = (rng.random_range(0..m), rng.random_range(0..n));
        if !spiked.contains(&at) {
            phi[[at.0, at.1]] += 8.0;
            spiked.push(at);
        }
    }

    let params = LrsdParams { lambda: 0.99, ..LrsdParams::default() };
    let res = lrsd::solve(&phi, &params).unwrap();
    let rel = frob(&(&res.low_rank - &clean)) / frob(&clean);
    let hits = spiked.iter().filter(|&&(r, c)| res.sparse[[r, c]] > 4.0).count();
    let secs = started.elapsed().as_secs_f64();
    gate(
        rel < 1e-3 && hits * 10 >= spiked.len() * 9 && res.iterations < 500 && secs < 10.0,
        &format!(
            "planted rank-1 recovery: rel err {rel:.2e} (need <1e-3), {hits}/{} spikes found (need 90%), {} iterations (need <500), {secs:.2}s (need <10)",
            spiked.len(),
            res.iterations
        ),
    );
}

// ------------------------------------------------------------ clustering

/// Best crisp 3-partition of sorted 1-D data by exhaustive split search.
fn exhaustive_three_partition(sorted: &[f64]) -> (usize, usize) {
    let cost = |slice: &[f64]| {
        let mean = slice.iter().sum::<f64>() / slice.len() as f64;
        slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
    };
    let n = sorted.len();
    let mut best = (1, 2);
    let mut best_cost = f64::INFINITY;
    for i in 1..n - 1 {
        for j in i + 1..n {
            let c = cost(&sorted[..i]) + cost(&sorted[i..j]) + cost(&sorted[j..]);
            if c < best_cost {
                best_cost = c;
                best = (i, j);
            }
        }
    }
    best
}

#[test]
fn fcm_recovers_planted_groups_and_descends() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut values = Vec::new();
    for center in [0.0, 0.5, 1.0] {
        for _ in 0..20 {
            values.push(center + rng.random_range(-0.02..0.02));
        }
    }
    let x = Array2::from_shape_fn((values.len(), 1), |(r, _)| values[r]);

    let params = FcmParams { clusters: 3, fuzzifier: 2.0, tol: 1e-9, max_iter: 300, seed: 4 };
    let result = clustering::fcm(x.view(), &params).unwrap();

    // the crisp optimum splits sorted data contiguously; compare labels
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let (i, j) = exhaustive_three_partition(&sorted);
    let mut want = vec![Level::Low; values.len()];
    for (rank, &idx) in order.iter().enumerate() {
        want[idx] = if rank < i {
            Level::Low
        } else if rank < j {
            Level::Mid
        } else {
            Level::High
        };
    }
    let labels_match = result.hard_levels() == want;

    let objectives = &result.objective;
    let descending =
        objectives.len() >= 2 && objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    gate(
        labels_match && descending,
        &format!(
            "fcm: hard labels {} exhaustive-partition oracle, objective trace {} (first {:.4}, last {:.4})",
            if labels_match { "match" } else { "MISS" },
            if descending { "non-increasing" } else { "INCREASES" },
            objectives[0],
            objectives[objectives.len() - 1]
        ),
    );
}

#[test]
fn voting_thresholds_hold_at_the_boundaries() {
    let th = VoteThresholds::default();
    let cases = [
        (vec![Level::High, Level::High, Level::High, Level::High, Level::Low], Level::High, "4 changed + 1 unchanged = 0.8"),
        (vec![Level::Mid, Level::Mid], Level::Mid, "both intermediate = 0.5"),
        (vec![Level::High, Level::High, Level::Low, Level::Low, Level::Low], Level::Low, "2 changed + 3 unchanged = 0.4"),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (levels, want, label) in &cases {
        let got = clustering::vote(levels, &th).unwrap();
        if got != *want {
            ok = false;
        }
        detail.push_str(&format!("{label} -> {got:?}; "));
    }
    // order inside a superpixel is immaterial
    let mut shuffled = cases[0].0.clone();
    shuffled.reverse();
    ok &= clustering::vote(&shuffled, &th).unwrap() == Level::High;
    gate(ok, &format!("voting boundaries: {detail}"));
}

// --------------------------------------------------------------- metrics

/// Truth with the first `changed` pixels flagged, prediction with `missed`
/// of them dropped and `false_alarms` extra pixels raised.
fn confusion_maps(
    total: usize,
    changed: usize,
    missed: usize,
    false_alarms: usize,
) -> (LabelMap, LabelMap) {
    let mut truth = vec![0u32; total];
    truth[..changed].fill(1);
    let mut pred = truth.clone();
    pred[..missed].fill(0);
    pred[changed..changed + false_alarms].fill(1);
    let w = 100;
    (
        LabelMap::from_raw(w, total / w, truth).unwrap(),
        LabelMap::from_raw(w, total / w, pred).unwrap(),
    )
}

#[test]
fn metric_rates_match_direct_arithmetic() {
    let (truth, pred) = confusion_maps(10_000, 1_000, 100, 90);
    let report = metrics::evaluate(&truth, &pred).unwrap();

    let pf = 90.0 / 9_000.0;
    let pm = 100.0 / 1_000.0;
    let pcc = 1.0 - (90.0 + 100.0) / 10_000.0;
    let tol = 1e-4; // 0.01 percentage points
    let close = (report.false_alarm_rate.unwrap() - pf).abs() < tol
        && (report.missed_rate.unwrap() - pm).abs() < tol
        && (report.correct_classification - pcc).abs() < tol;

    let perfect = metrics::evaluate(&truth, &truth).unwrap();
    let ideal = (perfect.correct_classification - 1.0).abs() < 1e-12
        && (perfect.kappa.unwrap() - 1.0).abs() < 1e-12;
    gate(
        close && ideal,
        &format!(
            "metrics: Pf {:.2}% Pm {:.2}% PCC {:.2}% vs hand 1.00/10.00/98.10 (tol 0.01pp); perfect map PCC=KC=100%: {ideal}",
            100.0 * report.false_alarm_rate.unwrap(),
            100.0 * report.missed_rate.unwrap(),
            100.0 * report.correct_classification
        ),
    );
}

// ------------------------------------------------------------ end to end

fn benchmark_scene(spike_fraction: f64) -> SceneSpec {
    SceneSpec {
        width: 256,
        height: 256,
        looks: 4.0,
        background_amplitude: 50.0,
        regions: vec![],
        changes: vec![Change {
            rect: Rect { x: 104, y: 104, width: 40, height: 40 },
            amplitude_delta: 900.0,
        }],
        spike_fraction,
        seed: 101,
    }
}

fn subset_of(inner: &LabelMap, outer: &LabelMap) -> bool {
    (0..inner.height()).all(|r| {
        (0..inner.width()).all(|c| inner.get(r, c) == 0 || outer.get(r, c) == 1)
    })
}

#[test]
fn benchmark_scene_with_a_real_change_is_detected_single_threaded() {
    let spec = benchmark_scene(0.0);
    let (i1, i2, truth) = synthgen::generate::<f64>(&spec).unwrap();
    let cfg = PipelineConfig::defaults(spec.width, spec.height).unwrap();

    let started = Instant::now();
    let out = pipeline::with_thread_cap(Some(1), || pipeline::run_full(&i1, &i2, &cfg))
        .unwrap()
        .unwrap();
    let secs = started.elapsed().as_secs_f64();

    let report = metrics::evaluate(&truth, &out.final_map).unwrap();
    let pcc = 100.0 * report.correct_classification;
    let pm = 100.0 * report.missed_rate.unwrap();
    gate(
        pcc >= 95.0 && pm <= 25.0 && secs < 120.0,
        &format!("real-change scene: PCC {pcc:.2}% (need >=95), Pm {pm:.2}% (need <=25), {secs:.1}s single-threaded (need <120)"),
    );
}

#[test]
fn benchmark_scene_with_outliers_halves_the_false_alarms() {
    let spec = benchmark_scene(0.02);
    let (i1, i2, truth) = synthgen::generate::<f64>(&spec).unwrap();
    let cfg = PipelineConfig::defaults(spec.width, spec.height).unwrap();
    let out = pipeline::run_full(&i1, &i2, &cfg).unwrap();

    let coarse = metrics::evaluate(&truth, &out.phase1.map).unwrap();
    let fine = metrics::evaluate(&truth, &out.final_map).unwrap();
    let pf1 = coarse.false_alarm_rate.unwrap();
    let pf2 = fine.false_alarm_rate.unwrap();
    gate(
        pf1 > 0.0 && pf2 < pf1 && pf2 <= 0.5 * pf1,
        &format!(
            "false-change suppression: phase-1 Pf {:.2}% -> final Pf {:.2}% ({:.0}% of it, need <=50% and strictly less)",
            100.0 * pf1,
            100.0 * pf2,
            100.0 * pf2 / pf1
        ),
    );
}

fn small_scene(spike_fraction: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        width: 96,
        height: 96,
        looks: 4.0,
        background_amplitude: 50.0,
        regions: vec![],
        changes: vec![Change {
            rect: Rect { x: 30, y: 30, width: 20, height: 20 },
            amplitude_delta: 900.0,
        }],
        spike_fraction,
        seed,
    }
}

#[test]
fn refinement_never_adds_pixels_outside_the_coarse_map() {
    let mut ok = true;
    let mut detail = String::new();
    for (spikes, seed) in [(0.0, 5u64), (0.02, 6)] {
        let spec = small_scene(spikes, seed);
        let (i1, i2, _) = synthgen::generate::<f64>(&spec).unwrap();
        let cfg = PipelineConfig::defaults(spec.width, spec.height).unwrap();
        let out = pipeline::run_full(&i1, &i2, &cfg).unwrap();
        let contained = subset_of(&out.final_map, &out.phase1.map);
        ok &= contained;
        detail.push_str(&format!(
            "spikes {spikes}: {} of {} final pixels inside coarse map; ",
            out.final_map.count_of(1),
            out.phase1.map.count_of(1),
        ));
        if !contained {
            detail.push_str("VIOLATED; ");
        }
    }
    gate(ok, &format!("monotone refinement: {detail}"));
}

#[test]
fn identical_runs_produce_bit_identical_maps() {
    let spec = small_scene(0.02, 12);
    let (i1, i2, _) = synthgen::generate::<f64>(&spec).unwrap();
    let cfg = PipelineConfig::defaults(spec.width, spec.height).unwrap();

    let a = pipeline::run_full(&i1, &i2, &cfg).unwrap();
    let b = pipeline::run_full(&i1, &i2, &cfg).unwrap();
    let same_final = a.final_map.data() == b.final_map.data();
    let same_coarse = a.phase1.map.data() == b.phase1.map.data();
    gate(
        same_final && same_coarse,
        &format!(
            "determinism: repeated runs agree on coarse ({}) and final ({}) maps",
            same_coarse, same_final
        ),
    );
}
