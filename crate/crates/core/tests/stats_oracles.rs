use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;

use medpipe::segdb::Registry;
use medpipe::stats::{
    average_ranks, evaluate_cohort, run_statistics, spearman, spearman_with, t_test_independent, t_two_sided_p,
    EvalConfig, SpearmanMethod, TTestVariant,
};
use medpipe::volume::{write_nifti, DataType, VolumeGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, 1e-15, 50)
}

/// Two-sided Student t tail probability from the angular form of the density:
/// with t = sqrt(df)·tan θ, P(|T| > t) is the share of ∫cos^(df-1)θ dθ above atan(t/√df).
fn t_tail_oracle(t: f64, df: f64) -> f64 {
    let f = |th: f64| th.cos().powf(df - 1.0);
    let lo = (t.abs() / df.sqrt()).atan();
    integrate(&f, lo, FRAC_PI_2) / integrate(&f, 0.0, FRAC_PI_2)
}

#[test]
fn t_tail_matches_numeric_oracle() {
    for df in [1.0, 2.0, 2.5, 4.0, 7.3, 12.0, 30.0] {
        for t in [0.0, 0.1, 0.5, 1.0, 1.224744871391589, 2.0, 3.5, 8.0] {
            let got = t_two_sided_p(t, df);
            let want = t_tail_oracle(t, df);
            assert!((got - want).abs() < 1e-9, "t={t} df={df}: {got} vs {want}");
            assert_eq!(got, t_two_sided_p(-t, df));
        }
    }
}

#[test]
fn pooled_matches_closed_form() {
    let (a, b) = ([1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0]);
    let r = t_test_independent(&a, &b, TTestVariant::Pooled).unwrap();
    // means 2.5 and 4, sums of squares 5 and 8, pooled variance 13/5
    let se = (13.0f64 / 5.0 * (1.0 / 4.0 + 1.0 / 3.0)).sqrt();
    assert!((r.t - (-1.5 / se)).abs() < 1e-12);
    assert_eq!(r.df, 5.0);
    assert!((r.p - t_tail_oracle(r.t, 5.0)).abs() < 1e-9);
}

#[test]
fn welch_df_is_satterthwaite() {
    let (a, b) = ([1.0, 2.0, 3.0, 4.0, 10.0], [2.0, 2.5, 3.0]);
    let r = t_test_independent(&a, &b, TTestVariant::Welch).unwrap();
    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (va, vb) = (var(&a) / 5.0, var(&b) / 3.0);
    let df = (va + vb).powi(2) / (va * va / 4.0 + vb * vb / 2.0);
    assert!((r.df - df).abs() < 1e-12);
    assert!((r.p - t_tail_oracle(r.t, df)).abs() < 1e-9);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Averages each element's 1-based position over every ordering that sorts the data.
fn enumerated_ranks(xs: &[f64]) -> Vec<f64> {
    let mut sum = vec![0.0; xs.len()];
    let mut count = 0.0;
    for order in permutations(xs.len()) {
        if order.windows(2).all(|w| xs[w[0]] <= xs[w[1]]) {
            for (pos, &i) in order.iter().enumerate() {
                sum[i] += (pos + 1) as f64;
            }
            count += 1.0;
        }
    }
    sum.into_iter().map(|s| s / count).collect()
}

#[test]
fn ranks_match_enumeration() {
    for n in 1..=6usize {
        for code in 0..3usize.pow(n as u32) {
            let xs: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
            let want = enumerated_ranks(&xs);
            let got = average_ranks(&xs);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{xs:?}: {got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn exact_spearman_counts_permutations() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 1.0, 4.0, 3.0, 5.0];
    let r = spearman_with(&x, &y, SpearmanMethod::Exact).unwrap();
    let d2 = |p: &[usize]| p.iter().enumerate().map(|(i, &v)| ((i as f64) - v as f64).powi(2)).sum::<f64>();
    let observed = d2(&[1, 0, 3, 2, 4]);
    let perms = permutations(5);
    let rho = |d: f64| 1.0 - 6.0 * d / (5.0 * 24.0);
    let at_least = perms.iter().filter(|p| rho(d2(p)).abs() >= rho(observed).abs() - 1e-12).count();
    assert!((r.p - at_least as f64 / 120.0).abs() < 1e-12);
    assert!((r.rho - rho(observed)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
        scale in 0.1f64..5.0,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let base = spearman(&x, &y).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| (v / 50.0).powi(3) * scale + scale).collect();
        let gy: Vec<f64> = y.iter().map(|v| -(v / 25.0).exp()).collect();
        let moved = spearman(&fx, &y).unwrap();
        prop_assert!((moved.rho - base.rho).abs() < 1e-12);
        let flipped = spearman(&x, &gy).unwrap();
        prop_assert!((flipped.rho + base.rho).abs() < 1e-12);
    }

    #[test]
    fn welch_is_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 2..12),
        b in prop::collection::vec(-10.0f64..10.0, 2..12),
    ) {
        let (Ok(ab), Ok(ba)) = (
            t_test_independent(&a, &b, TTestVariant::Welch),
            t_test_independent(&b, &a, TTestVariant::Welch),
        ) else { return Ok(()) };
        prop_assert!((ab.t + ba.t).abs() < 1e-9 * (1.0 + ab.t.abs()));
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }
}

const LOBES: [(i64, &str, usize); 5] = [
    (1, "LEFT_UPPER_LUNG_LOBE", 0),
    (2, "LEFT_LOWER_LUNG_LOBE", 0),
    (3, "RIGHT_UPPER_LUNG_LOBE", 1),
    (4, "RIGHT_MIDDLE_LUNG_LOBE", 1),
    (5, "RIGHT_LOWER_LUNG_LOBE", 1),
];

#[test]
fn cohort_merges_lobes_and_feeds_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, refs) = (tmp.path().join("pred"), tmp.path().join("ref"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut expected = BTreeMap::new();
    let mut clinical = String::from("case_id,age,sex\n");
    for case in 0..6 {
        let p: Vec<f64> = (0..512).map(|_| rng.gen_range(0..6) as f64).collect();
        let r: Vec<f64> = (0..512).map(|_| rng.gen_range(0..3) as f64).collect();
        for (lung, label) in [(0usize, 1.0), (1, 2.0)] {
            let in_pred = |v: f64| LOBES.iter().any(|&(l, _, side)| side == lung && l as f64 == v);
            let a = p.iter().filter(|v| in_pred(**v)).count();
            let b = r.iter().filter(|v| **v == label).count();
            let both = p.iter().zip(&r).filter(|(x, y)| in_pred(**x) && **y == label).count();
            expected.insert((format!("c{case}"), lung), 2.0 * both as f64 / (a + b) as f64);
        }
        write_nifti(&VolumeGrid::from_voxels([8, 8, 8], DataType::U8, p).unwrap(), &pred.join(format!("c{case}.nii.gz"))).unwrap();
        write_nifti(&VolumeGrid::from_voxels([8, 8, 8], DataType::U8, r).unwrap(), &refs.join(format!("c{case}.nii.gz"))).unwrap();
        clinical.push_str(&format!("c{case},{},{}\n", 50 + 3 * case, if case % 2 == 0 { "F" } else { "M" }));
    }
    fs::write(tmp.path().join("clinical.csv"), clinical).unwrap();
    let mut cfg = String::from("model: lobes\nreference_labels: {1: LEFT_LUNG, 2: RIGHT_LUNG}\nprediction_labels:\n");
    for (l, id, _) in LOBES {
        cfg.push_str(&format!("  {l}: {id}\n"));
    }
    cfg.push_str("aggregation:\n");
    for (_, id, side) in LOBES {
        cfg.push_str(&format!("  {id}: {}\n", ["LEFT_LUNG", "RIGHT_LUNG"][side]));
    }
    cfg.push_str("comparisons: [{grouping: segment_id, group1: LEFT_LUNG, group2: RIGHT_LUNG}, {grouping: sex, group1: F, group2: M}]\ncorrelations: [age]\n");
    let cfg = EvalConfig::from_yaml(&cfg).unwrap();
    let eval = evaluate_cohort(&pred, &refs, Some(&tmp.path().join("clinical.csv")), &cfg, &Registry::bundled()).unwrap();
    assert_eq!(eval.rows.len(), 12);
    for row in &eval.rows {
        let lung = usize::from(row.segment_id == "RIGHT_LUNG");
        assert_eq!(row.dice, expected[&(row.case_id.clone(), lung)], "{row:?}");
    }
    let (tests, cors) = run_statistics(&eval.rows, &cfg.comparisons, &cfg.correlations, cfg.variant);
    assert_eq!(tests.len(), 2);
    assert_eq!(tests[0].grouping, "segment_id:LEFT_LUNG-RIGHT_LUNG");
    assert_eq!((tests[0].n1, tests[0].n2), (6, 6));
    assert_eq!(cors.len(), 1);
    assert_eq!(cors[0].n, 12);
}
