use std::sync::OnceLock;

use capfade::eval::{calibration_score, score_cell, summarize, CellScore, ObservedTruth};
use capfade::features::time_below;
use capfade::gpr::{matern52, GpModel, Hyperparams, Prediction, Standardization};
use capfade::ingest::{clean_population, CellRecord, DerivedSample, RawSample};
use capfade::selection::{abs_pearson, greedy_select, similarity_from_columns};
use capfade::synthgen::{generate_population, SynthSpec};
use capfade::trajectory::{integrate, knee_point, KneeOutcome};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn small_population() -> &'static [CellRecord] {
    static POP: OnceLock<Vec<CellRecord>> = OnceLock::new();
    POP.get_or_init(|| {
        let spec = SynthSpec {
            n_cells: 8,
            ..SynthSpec::default()
        };
        generate_population(&spec).unwrap().0
    })
}

fn hyper(d: usize) -> impl Strategy<Value = Hyperparams> {
    (0.2..3.0f64, prop::collection::vec(0.2..4.0f64, d), 0.01..0.5f64)
        .prop_map(|(f, l, n)| Hyperparams::new(f, l, n).unwrap())
}

/// (x row-major, y, hyperparameters, query) with width `d`.
fn gp_problem(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Hyperparams, Vec<f64>)> {
    (2usize..12).prop_flat_map(move |n| {
        (
            prop::collection::vec(-3.0..3.0f64, n * d),
            prop::collection::vec(-1.0..1.0f64, n),
            hyper(d),
            prop::collection::vec(-4.0..4.0f64, d),
        )
    })
}

/// Strictly increasing times with arbitrary values.
fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0.1..5.0f64, n - 1), prop::collection::vec(-2.0..2.0f64, n)).prop_map(|(steps, v)| {
            let mut t = vec![0.0];
            for s in steps {
                t.push(t.last().unwrap() + s);
            }
            (t, v)
        })
    })
}

fn bilinear(n: usize, frac: f64, early: f64, late: f64, wiggle: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let b = frac * (n - 1) as f64;
    let q = times
        .iter()
        .zip(wiggle.iter().cycle())
        .map(|(&t, w)| {
            let base = if t <= b { 1.0 - early * t } else { 1.0 - early * b - late * (t - b) };
            base + w
        })
        .collect();
    (times, q)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn kernel_matrix_is_symmetric_psd((x, _y, h, _q) in gp_problem(3)) {
        let rows: Vec<&[f64]> = x.chunks(3).collect();
        let n = rows.len();
        let k = DMatrix::from_fn(n, n, |i, j| matern52(rows[i], rows[j], &h));
        prop_assert_eq!(&k, &k.transpose());
        let min = SymmetricEigen::new(k.clone()).eigenvalues.min();
        prop_assert!(min >= -1e-10 * k.trace(), "min eigenvalue {}", min);
        let noiseless = Hyperparams::new(h.sigma_f, h.length_scales.clone(), 1e-6).unwrap();
        prop_assert!(GpModel::condition(&x, 3, &vec![0.0; n], noiseless).is_ok());
    }

    #[test]
    fn posterior_variance_below_prior((x, y, h, q) in gp_problem(2)) {
        let m = GpModel::condition(&x, 2, &y, h.clone()).unwrap();
        let p = m.predict(&q).unwrap();
        prop_assert!(p.sd * p.sd <= h.sigma_f.powi(2) + h.sigma_n.powi(2) + 1e-9);
    }

    #[test]
    fn predictions_ignore_row_order((x, y, h, q) in gp_problem(2), rot in 0usize..11) {
        let n = y.len();
        let r = rot % n;
        let perm: Vec<usize> = (0..n).rev().map(|i| (i + r) % n).collect();
        let xp: Vec<f64> = perm.iter().flat_map(|&i| x[2 * i..2 * i + 2].to_vec()).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = GpModel::condition(&x, 2, &y, h.clone()).unwrap().predict(&q).unwrap();
        let b = GpModel::condition(&xp, 2, &yp, h).unwrap().predict(&q).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-8 && (a.sd - b.sd).abs() < 1e-8);
    }

    #[test]
    fn standardization_absorbs_affine_inputs(
        (x, y, h, q) in gp_problem(2),
        col in 0usize..2,
        scale in prop_oneof![-50.0..-0.02f64, 0.02..50.0f64],
        shift in -100.0..100.0f64,
    ) {
        let names = vec!["a".to_string(), "b".to_string()];
        let m = GpModel::condition_with(&x, 2, &y, names.clone(), h.clone(), Standardization::fit(&x, 2, &y)).unwrap();
        let mut x2 = x.clone();
        for row in x2.chunks_mut(2) {
            row[col] = scale * row[col] + shift;
        }
        let mut q2 = q.clone();
        q2[col] = scale * q2[col] + shift;
        let m2 = GpModel::condition_with(&x2, 2, &y, names, h, Standardization::fit(&x2, 2, &y)).unwrap();
        let (a, b) = (m.predict(&q).unwrap(), m2.predict(&q2).unwrap());
        prop_assert!((a.mean - b.mean).abs() < 1e-8, "{} vs {}", a.mean, b.mean);
        prop_assert!((a.sd - b.sd).abs() < 1e-8);
    }

    #[test]
    fn pearson_is_affine_invariant(
        xy in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..60),
        a in prop_oneof![-20.0..-0.05f64, 0.05..20.0f64],
        b in -50.0..50.0f64,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let base = abs_pearson(&x, &y).unwrap();
        let z: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let moved = abs_pearson(&z, &y).unwrap();
        match (base, moved) {
            (Some(p), Some(r)) => prop_assert!((p - r).abs() < 1e-12, "{} vs {}", p, r),
            (None, None) => {}
            other => prop_assert!(false, "definedness changed: {:?}", other),
        }
    }

    #[test]
    fn greedy_selection_postconditions(
        cols in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 25), 2..8),
        mix in prop::collection::vec(-1.0..1.0f64, 8),
        k in 1usize..8,
        threshold in 0.3..0.95f64,
    ) {
        let q = cols.len();
        // target and a few near-twins so redundancy actually triggers
        let mut columns = cols.clone();
        columns[q - 1] = cols[0].iter().zip(&cols[q - 1]).map(|(a, b)| a + 0.2 * b).collect();
        let target: Vec<f64> = (0..25).map(|i| columns.iter().zip(&mix).map(|(c, w)| c[i] * w).sum()).collect();
        let labels: Vec<String> = (0..q).map(|i| format!("f{i}")).collect();
        let sim = similarity_from_columns(&labels, &columns, &target).unwrap();
        let k = k.min(q);
        let a = greedy_select(&sim, k, threshold).unwrap();
        prop_assert_eq!(&a, &greedy_select(&sim, k, threshold).unwrap());
        prop_assert!(a.selected.len() <= k);
        for (i, &f) in a.selected.iter().enumerate() {
            for &g in &a.selected[i + 1..] {
                prop_assert!(sim.get(f, g).unwrap() < threshold);
            }
        }
        let all = greedy_select(&sim, q, 1.0).unwrap();
        let mut expected: Vec<usize> = (0..q).filter(|&i| sim.to_target(i).is_some()).collect();
        expected.sort_by(|&i, &j| sim.to_target(j).unwrap().total_cmp(&sim.to_target(i).unwrap()).then(i.cmp(&j)));
        prop_assert_eq!(all.selected, expected);
    }

    #[test]
    fn occupancy_is_invariant_to_refinement((t, v) in series(), levels in prop::collection::vec(-2.5..2.5f64, 1..5)) {
        let (t0, t1) = (t[0] + 0.3, *t.last().unwrap() - 0.2);
        prop_assume!(t1 > t0);
        let mut tr = Vec::new();
        let mut vr = Vec::new();
        for i in 0..t.len() - 1 {
            tr.push(t[i]);
            vr.push(v[i]);
            for s in [0.25, 0.5, 0.75] {
                tr.push(t[i] + s * (t[i + 1] - t[i]));
                vr.push(v[i] + s * (v[i + 1] - v[i]));
            }
        }
        tr.push(*t.last().unwrap());
        vr.push(*v.last().unwrap());
        let mut a = vec![0.0; levels.len()];
        let mut b = vec![0.0; levels.len()];
        time_below(&t, &v, t0, t1, &levels, &mut a);
        time_below(&tr, &vr, t0, t1, &levels, &mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() / (t1 - t0) < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn ranges_partition_the_window((t, v) in series(), mut p in prop::collection::vec(-2.2..2.2f64, 4)) {
        p.sort_by(f64::total_cmp);
        let (t0, t1) = (t[0], *t.last().unwrap());
        let mut below = vec![0.0; 4];
        time_below(&t, &v, t0, t1, &p, &mut below);
        let dur = t1 - t0;
        let ranges: f64 = (0..3).map(|i| (below[i + 1] - below[i]) / dur).sum();
        prop_assert!(ranges <= 1.0 + 1e-12);
        // brute-force occupancy of [p1, p4) on a fine grid of the interpolant
        let m = 20_000;
        let mut inside = 0usize;
        for s in 0..m {
            let tau = t0 + (s as f64 + 0.5) / m as f64 * dur;
            let i = t.partition_point(|&x| x <= tau).clamp(1, t.len() - 1) - 1;
            let val = v[i] + (v[i + 1] - v[i]) * (tau - t[i]) / (t[i + 1] - t[i]);
            if val >= p[0] && val < p[3] {
                inside += 1;
            }
        }
        let outside = 1.0 - inside as f64 / m as f64;
        prop_assert!((ranges - (1.0 - outside)).abs() < 3e-3, "{} vs {}", ranges, 1.0 - outside);
    }

    #[test]
    fn abs_power_matches_product(i in -10.0..10.0f64, v in 0.1..5.0f64) {
        let d = DerivedSample::from_raw(&RawSample { t: 0.0, current: i, voltage: v, temperature: 25.0 });
        prop_assert_eq!(d.abs_power, (v * i).abs());
        prop_assert_eq!(d.power, v * i);
        prop_assert_eq!(d.abs_current, i.abs());
    }

    #[test]
    fn knee_sits_between_windows_and_ignores_units(
        n in 30usize..120,
        frac in 0.4..0.8f64,
        early in 0.0005..0.004f64,
        late in 0.01..0.08f64,
        wiggle in prop::collection::vec(-2e-4..2e-4f64, 7),
        ts in 0.01..1e5f64,
        t0 in -1e3..1e3f64,
        qs in 0.1..10.0f64,
        q0 in -5.0..5.0f64,
    ) {
        let (times, q) = bilinear(n, frac, early, late, &wiggle);
        let n_early = (0.3 * n as f64).ceil() as usize;
        let n_late = (0.1 * n as f64).ceil() as usize;
        if let KneeOutcome::Knee(k) = knee_point(&times, &q, 0.3, 0.1).unwrap() {
            prop_assert!(k.knee_index >= n_early && k.knee_index < n - n_late);
            prop_assert!(k.knee_time > times[n_early - 1] && k.knee_time < times[n - n_late]);
            let t2: Vec<f64> = times.iter().map(|t| ts * t + t0).collect();
            let q2: Vec<f64> = q.iter().map(|v| qs * v + q0).collect();
            match knee_point(&t2, &q2, 0.3, 0.1).unwrap() {
                KneeOutcome::Knee(k2) => {
                    prop_assert_eq!(k.knee_index, k2.knee_index);
                    for j in 0..2 {
                        prop_assert!((k.knee_normalized[j] - k2.knee_normalized[j]).abs() < 1e-9);
                    }
                }
                other => prop_assert!(false, "rescaling lost the knee: {:?}", other),
            }
        }
    }

    #[test]
    fn integration_is_linear(
        steps in prop::collection::vec((-0.02..0.01f64, -0.02..0.01f64, 0.0..0.01f64), 1..40),
        q0 in 0.5..1.5f64,
    ) {
        let times: Vec<f64> = (0..=steps.len()).map(|i| i as f64 * 43_200.0).collect();
        let pa: Vec<Prediction> = steps.iter().map(|s| Prediction { mean: s.0, sd: s.2 }).collect();
        let pb: Vec<Prediction> = steps.iter().map(|s| Prediction { mean: s.1, sd: s.2 }).collect();
        let pab: Vec<Prediction> = steps.iter().map(|s| Prediction { mean: s.0 + s.1, sd: s.2 }).collect();
        let a = integrate("c", &times, q0, &pa).unwrap();
        let b = integrate("c", &times, q0, &pb).unwrap();
        let ab = integrate("c", &times, q0, &pab).unwrap();
        for i in 0..times.len() {
            prop_assert!((ab.q_pred[i] - (a.q_pred[i] + b.q_pred[i] - q0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_is_translation_consistent(
        steps in prop::collection::vec((-0.02..0.0f64, 0.0..0.005f64, -0.01..0.01f64), 2..40),
        shift in -0.3..0.3f64,
    ) {
        let times: Vec<f64> = (0..=steps.len()).map(|i| i as f64 * 43_200.0).collect();
        let preds: Vec<Prediction> = steps.iter().map(|s| Prediction { mean: s.0, sd: s.1 }).collect();
        let mut obs = vec![1.0];
        for s in &steps {
            obs.push(obs.last().unwrap() + s.0 + s.2);
        }
        let score = |offset: f64| {
            let traj = integrate("c", &times, 1.0 + offset, &preds).unwrap();
            let truth = ObservedTruth { q: obs.iter().map(|q| q + offset).collect(), eol: None, knee: None };
            score_cell(&traj, &truth, 1.1).unwrap()
        };
        let (a, b) = (score(0.0), score(shift));
        prop_assert!((a.rmse_q - b.rmse_q).abs() < 1e-9);
        prop_assert!((a.rmse_dq - b.rmse_dq).abs() < 1e-9);
    }

    #[test]
    fn calibration_grows_with_sd(
        steps in prop::collection::vec((-0.02..0.0f64, 0.0001..0.005f64, -0.01..0.01f64), 2..40),
        inflate in 1.0..5.0f64,
    ) {
        let times: Vec<f64> = (0..=steps.len()).map(|i| i as f64 * 43_200.0).collect();
        let mut obs = vec![1.0];
        for s in &steps {
            obs.push(obs.last().unwrap() + s.0 + s.2);
        }
        let truth = ObservedTruth { q: obs, eol: None, knee: None };
        let score = |f: f64| {
            let preds: Vec<Prediction> = steps.iter().map(|s| Prediction { mean: s.0, sd: s.1 * f }).collect();
            score_cell(&integrate("c", &times, 1.0, &preds).unwrap(), &truth, 1.1).unwrap()
        };
        let (a, b) = (score(1.0), score(inflate));
        prop_assert!(b.calibration_hits >= a.calibration_hits);
        prop_assert!(calibration_score(&[b]).unwrap() >= calibration_score(&[a]).unwrap());
    }

    #[test]
    fn summaries_ignore_score_order(
        values in prop::collection::vec((0.0..5.0f64, prop::option::of(-20.0..20.0f64), prop::option::of(-20.0..20.0f64), 0usize..10), 1..30),
        seed in any::<u64>(),
    ) {
        let scores: Vec<CellScore> = values
            .iter()
            .enumerate()
            .map(|(i, &(rmse, eol, knee, hits))| CellScore {
                setting: "s".into(),
                repeat: 0,
                cell_id: format!("c{i}"),
                rmse_q: rmse,
                rmse_dq: rmse / 10.0,
                pe_eol: eol,
                pe_knee: knee,
                abs_err_eol_days: eol.map(f64::abs),
                abs_err_knee_days: knee.map(f64::abs),
                eol_pred_days: None,
                eol_obs_days: None,
                knee_pred_days: None,
                knee_obs_days: None,
                calibration_hits: hits,
                calibration_total: 10,
            })
            .collect();
        let mut shuffled = scores.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let (a, b) = (summarize(&scores, 1).unwrap(), summarize(&shuffled, 1).unwrap());
        prop_assert_eq!(a.n_cells, b.n_cells);
        prop_assert_eq!(a.calibration, b.calibration);
        for name in capfade::eval::TrialSummary::METRICS {
            match (a.metric(name), b.metric(name)) {
                (Some(x), Some(y)) => {
                    prop_assert_eq!(x.median, y.median);
                    prop_assert_eq!(x.p95, y.p95);
                    prop_assert_eq!(x.n, y.n);
                    prop_assert!((x.mean - y.mean).abs() <= 1e-12 * x.mean.abs().max(1.0));
                }
                (None, None) => {}
                other => prop_assert!(false, "{}: {:?}", name, other),
            }
        }
    }

    #[test]
    fn cleaning_is_idempotent(lo in 5.0..25.0f64, width in 0.0..30.0f64, drop in prop::option::of(0usize..8)) {
        let cells = small_population().to_vec();
        let excluded: Vec<String> = drop.map(|i| cells[i].cell_id.clone()).into_iter().collect();
        if let Ok(once) = clean_population(cells, lo, lo + width, &excluded) {
            let twice = clean_population(once.clone(), lo, lo + width, &excluded).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
