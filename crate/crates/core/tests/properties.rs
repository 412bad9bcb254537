use frm_core::fit::{adaptive_fit, pair_score_table, FitConfig};
use frm_core::kernels::{aitchison_distance, mww_indicator, Kernel};
use frm_core::model::{
    encode_pair_onehot, mean_and_gradient, onehot_len, FrmModel, Link, PairTransform, SubjectRecord, WorkingVariance,
};
use frm_core::ustat::{
    accumulate_scores, enumerate_pairs, hajek_scores, pair_count, projection_variance, ustatistic_mean, Exec, PairData,
    PairIndex, PairScoreTable,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn scalar_subjects(ys: &[f64]) -> Vec<SubjectRecord> {
    ys.iter().enumerate().map(|(i, y)| SubjectRecord::new(i.to_string(), vec![*y], vec![]).unwrap()).collect()
}

fn composition(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..10.0, m)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_enumeration_is_lexicographic_bijection(n in 2usize..60) {
        let pairs = enumerate_pairs(n).unwrap();
        prop_assert_eq!(pairs.len(), pair_count(n));
        for (k, p) in pairs.iter().enumerate() {
            prop_assert!(p.i1 < p.i2 && p.i2 < n);
            prop_assert_eq!(p.linear(n), k);
            prop_assert_eq!(PairIndex::from_linear(k, n), *p);
        }
        prop_assert!(pairs.windows(2).all(|w| (w[0].i1, w[0].i2) < (w[1].i1, w[1].i2)));
    }

    #[test]
    fn link_derivatives_match_central_differences(eta in -8.0f64..8.0) {
        for link in [Link::Identity, Link::Exp, Link::Expit, Link::ProbitComplement] {
            let h = 1e-5;
            let (_, d) = link.eval(eta).unwrap();
            let fd = (link.mean(eta + h).unwrap() - link.mean(eta - h).unwrap()) / (2.0 * h);
            prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(1e-3), "{link:?} at {eta}: {d} vs {fd}");
        }
    }

    #[test]
    fn link_ranges(eta in -30.0f64..30.0) {
        prop_assert!(Link::Exp.mean(eta).unwrap() > 0.0);
        for link in [Link::Expit, Link::ProbitComplement] {
            let h = link.mean(eta).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn mean_and_gradient_is_pure(x in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-1.0f64..1.0, 4)) {
        let m = FrmModel::new(Link::Expit, true, 3, WorkingVariance::Bernoulli);
        let a = mean_and_gradient(&m, &x, &b).unwrap();
        let c = mean_and_gradient(&m, &x, &b).unwrap();
        prop_assert_eq!(a.0.to_bits(), c.0.to_bits());
        prop_assert_eq!(a.1, c.1);
    }

    #[test]
    fn onehot_counts_match_combinatorics(levels in prop::collection::vec(1usize..=4, 2..30)) {
        let k = 4;
        let mut counts = vec![0usize; onehot_len(k)];
        for p in enumerate_pairs(levels.len()).unwrap() {
            let e = encode_pair_onehot(levels[p.i1], levels[p.i2], k).unwrap();
            prop_assert_eq!(e.iter().filter(|v| **v == 1.0).count(), 1);
            counts[e.iter().position(|v| *v == 1.0).unwrap()] += 1;
        }
        let per: Vec<usize> = (1..=k).map(|l| levels.iter().filter(|v| **v == l).count()).collect();
        let mut slot = 0;
        for a in 0..k {
            for b in a..k {
                let expected = if a == b { per[a] * per[a].saturating_sub(1) / 2 } else { per[a] * per[b] };
                prop_assert_eq!(counts[slot], expected);
                slot += 1;
            }
        }
    }

    #[test]
    fn pair_transform_symmetry(x1 in prop::collection::vec(-5.0f64..5.0, 3), x2 in prop::collection::vec(-5.0f64..5.0, 3)) {
        prop_assert_eq!(PairTransform::Sum.eval(&x1, &x2).unwrap(), PairTransform::Sum.eval(&x2, &x1).unwrap());
        let d12 = PairTransform::Difference.eval(&x1, &x2).unwrap();
        let d21 = PairTransform::Difference.eval(&x2, &x1).unwrap();
        prop_assert!(d12.iter().zip(&d21).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn aitchison_metric_axioms(a in composition(5), b in composition(5), c in composition(5), s in 0.01f64..100.0) {
        let ab = aitchison_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, aitchison_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(aitchison_distance(&a, &a).unwrap(), 0.0);
        let ac = aitchison_distance(&a, &c).unwrap();
        let bc = aitchison_distance(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-10);
        let scaled: Vec<f64> = b.iter().map(|v| v * s).collect();
        prop_assert!((aitchison_distance(&a, &scaled).unwrap() - ab).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn mww_complementarity(a in -3i32..3, b in -3i32..3) {
        let (a, b) = (a as f64, b as f64);
        let total = mww_indicator(a, b) + mww_indicator(b, a);
        prop_assert_eq!(total, if a == b { 2.0 } else { 1.0 });
    }

    #[test]
    fn ustatistic_permutation_invariant(ys in prop::collection::vec(-100.0f64..100.0, 2..40), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..ys.len()).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<f64> = perm.iter().map(|&i| ys[i]).collect();
        let a = ustatistic_mean(&Kernel::SqHalfDiff, &scalar_subjects(&ys), Exec::serial()).unwrap()[0];
        let b = ustatistic_mean(&Kernel::SqHalfDiff, &scalar_subjects(&shuffled), Exec::serial()).unwrap()[0];
        prop_assert!(rel(a, b) <= 1e-12);
    }

    #[test]
    fn hajek_double_counting(n in 2usize..40, q in 1usize..3, seed in any::<u32>()) {
        // small integers keep every sum exact
        let scores: Vec<f64> = (0..pair_count(n) * q).map(|k| ((k as u64 * 2654435761 + seed as u64) % 17) as f64 - 8.0).collect();
        let m = accumulate_scores(n, q, Exec::parallel(), false, None, |k, _, out| {
            out.copy_from_slice(&scores[k * q..(k + 1) * q]);
            Ok(())
        })
        .unwrap();
        for a in 0..q {
            let pair_sum: f64 = (0..pair_count(n)).map(|k| scores[k * q + a]).sum();
            let subject_sum: f64 = (0..n).map(|j| m.subject_sums[j * q + a]).sum();
            prop_assert_eq!(subject_sum, 2.0 * pair_sum);
            prop_assert_eq!(m.sum[a], pair_sum);
        }
    }

    #[test]
    fn projection_variance_is_psd(n in 2usize..30, vals in prop::collection::vec(-10.0f64..10.0, 90)) {
        let v = DMatrix::from_fn(n, 3, |j, a| vals[(j * 3 + a) % vals.len()] + j as f64 * 0.1);
        let s = projection_variance(&v);
        prop_assert!(s.clone().symmetric_eigenvalues().iter().all(|e| *e >= -1e-12 * s.trace().max(1e-300)));
        prop_assert_eq!(s.clone(), s.transpose());
    }

    #[test]
    fn binary_dump_roundtrip(n in 2usize..20, q in 1usize..4) {
        let scores: Vec<f64> = (0..pair_count(n) * q).map(|k| (k as f64).sin() * 1e3).collect();
        let table = PairScoreTable::new(n, q, scores).unwrap();
        let mut buf = Vec::new();
        table.write_binary(&mut buf).unwrap();
        prop_assert_eq!(PairScoreTable::read_binary(&buf[..]).unwrap(), table);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn parallel_matches_serial(n in 50usize..180, seed in any::<u32>()) {
        let scores: Vec<f64> = (0..pair_count(n) * 2).map(|k| ((k as f64 + seed as f64) * 0.37).sin()).collect();
        let table = PairScoreTable::new(n, 2, scores).unwrap();
        let serial = hajek_scores(&table, Exec::serial()).unwrap();
        prop_assert_eq!(&hajek_scores(&table, Exec::parallel()).unwrap(), &serial);
        let tree = hajek_scores(&table, Exec::tree()).unwrap();
        for (a, b) in tree.iter().zip(serial.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn reweighting_invariance(seed in 0u64..1000, c in 0.01f64..100.0) {
        let subjects = frm_core::simulate::gen_linear_exogenous(25, seed, &Default::default()).unwrap();
        let data = PairData::from_subjects(&subjects, &Kernel::Difference, PairTransform::Difference).unwrap();
        let cfg = FitConfig::default();
        let base = FrmModel::new(Link::Identity, false, 1, WorkingVariance::Constant(1.0));
        let a = adaptive_fit(&base, &data, &cfg).unwrap();
        let fixed: std::sync::Arc<[f64]> = (0..data.n_pairs()).map(|k| 1.0 + (k % 3) as f64).collect();
        let w1 = base.with_variance(WorkingVariance::UserFixed(fixed.clone()));
        let w2 = base.with_variance(WorkingVariance::UserFixed(fixed).scaled(c));
        let (f1, f2) = (adaptive_fit(&w1, &data, &cfg).unwrap(), adaptive_fit(&w2, &data, &cfg).unwrap());
        prop_assert!(rel(f1.beta[0], f2.beta[0]) <= 1e-10);
        prop_assert!(rel(f1.cov[(0, 0)], f2.cov[(0, 0)]) <= 1e-10);
        prop_assert!(a.cov[(0, 0)] >= 0.0);
    }

    #[test]
    fn streaming_sandwich_matches_materialized(seed in 0u64..1000) {
        let data = frm_core::simulate::gen_nb_scenario(30, seed, &Default::default()).unwrap();
        let model = FrmModel::new(Link::Exp, true, 1, WorkingVariance::Poisson);
        let fit = adaptive_fit(&model, &data, &FitConfig { exec: Exec::serial(), ..FitConfig::default() }).unwrap();
        let table = pair_score_table(&model, &data, &fit.beta).unwrap();
        let sigma = projection_variance(&hajek_scores(&table, Exec::serial()).unwrap());
        prop_assert_eq!(sigma, fit.sigma_u);
    }
}
