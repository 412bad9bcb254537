//! Hand-computed and frozen reference values.

use approx::assert_relative_eq;
use frm_core::kernels::{
    aitchison_distance, apply_pseudocount, icc_pair_kernel, mww_indicator, Kernel, PseudocountPolicy,
};
use frm_core::model::{
    encode_pair_onehot, icc_mean_map, mean_and_gradient, std_normal_cdf, FrmModel, Link, PairTransform, SubjectRecord,
    WorkingVariance,
};
use frm_core::simulate::{gen_icc_ratings, gen_mww_probit, gen_nb_scenario, sample_nb, IccParams, MwwParams, NbParams};
use frm_core::ustat::{
    enumerate_pairs, hajek_scores, projection_variance, ustatistic_mean, Exec, PairData, PairIndex, PairScoreTable,
};
use frm_core::FrmError;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn subjects(ys: &[f64]) -> Vec<SubjectRecord> {
    ys.iter().enumerate().map(|(i, y)| SubjectRecord::new(format!("s{i}"), vec![*y], vec![]).unwrap()).collect()
}

#[test]
fn onehot_examples() {
    assert_eq!(encode_pair_onehot(1, 2, 2).unwrap(), vec![0.0, 1.0, 0.0]);
    assert_eq!(encode_pair_onehot(1, 1, 3).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(encode_pair_onehot(3, 2, 3).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    assert!(encode_pair_onehot(4, 1, 3).is_err());
}

#[test]
fn pair_covariate_examples() {
    assert_eq!(PairTransform::Sum.eval(&[0.2], &[0.5]).unwrap(), vec![0.7]);
    assert_eq!(PairTransform::Difference.eval(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), vec![0.0, 0.0]);
    assert_eq!(
        PairTransform::OneHot(2).eval(&[2.0], &[1.0]).unwrap(),
        PairTransform::OneHot(2).eval(&[1.0], &[2.0]).unwrap()
    );
    assert_eq!(PairTransform::Concatenate.eval(&[1.0], &[2.0]).unwrap(), vec![1.0, 2.0]);
    assert!(PairTransform::Sum.eval(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn mean_and_gradient_examples() {
    let m = FrmModel::new(Link::Exp, true, 1, WorkingVariance::Poisson);
    let (h, d) = mean_and_gradient(&m, &[1.0], &[3.0, 3.0]).unwrap();
    assert_relative_eq!(h, 403.428_793_492_735_1, max_relative = 1e-15);
    assert_relative_eq!(d[1], h, max_relative = 1e-15);
    let m = FrmModel::new(Link::Expit, false, 2, WorkingVariance::Bernoulli);
    let (h, d) = mean_and_gradient(&m, &[2.0, -4.0], &[0.0, 0.0]).unwrap();
    assert_eq!((h, d), (0.5, vec![0.5, -1.0]));
    let m = FrmModel::new(Link::ProbitComplement, false, 1, WorkingVariance::Bernoulli);
    assert_eq!(mean_and_gradient(&m, &[0.0], &[1.0]).unwrap().0, 0.5);
    let m = FrmModel::new(Link::Exp, false, 1, WorkingVariance::Poisson);
    assert!(matches!(mean_and_gradient(&m, &[1.0], &[701.0]), Err(FrmError::LinkOverflow { .. })));
}

#[test]
fn normal_cdf_tail_accuracy() {
    assert_relative_eq!(std_normal_cdf(-1.0), 0.158_655_253_931_457_05, max_relative = 1e-14);
    assert_relative_eq!(std_normal_cdf(-5.0), 2.866_515_718_791_939e-7, max_relative = 1e-13);
    assert_relative_eq!(std_normal_cdf(-10.0), 7.619_853_024_160_527e-24, max_relative = 1e-12);
}

#[test]
fn icc_mean_map_examples() {
    let (h, _) = icc_mean_map(2.0, 0.0, 4).unwrap();
    assert_eq!(h, [0.5, 2.0]);
    let (h, _) = icc_mean_map(1.7, 1.0, 5).unwrap();
    assert_relative_eq!(h[0], 1.7, max_relative = 1e-15);
    let (h, _) = icc_mean_map(1.0, 0.5, 3).unwrap();
    assert_relative_eq!(h[0], 2.0 / 3.0, max_relative = 1e-15);
    assert!(icc_mean_map(0.0, 0.5, 3).is_err());
}

#[test]
fn kernel_examples() {
    assert_relative_eq!(
        aitchison_distance(&[0.5, 0.5], &[0.8, 0.2]).unwrap(),
        0.980_258_143_468_547,
        max_relative = 1e-12
    );
    let a = [0.1, 0.3, 0.6];
    let b = [0.2, 0.2, 0.6];
    let scaled: Vec<f64> = b.iter().map(|v| v * 7.5).collect();
    assert_relative_eq!(
        aitchison_distance(&a, &b).unwrap(),
        aitchison_distance(&a, &scaled).unwrap(),
        max_relative = 1e-12
    );
    let c = apply_pseudocount(&[0.0, 1.0, 1.0], PseudocountPolicy::HalfMinPositive).unwrap();
    assert_relative_eq!(c.values()[2], 0.4, max_relative = 1e-15);
    assert!(apply_pseudocount(&[0.0, 0.0, 0.0], PseudocountPolicy::HalfMinPositive).is_err());
    assert_eq!((mww_indicator(1.0, 2.0), mww_indicator(2.0, 1.0), mww_indicator(3.0, 3.0)), (1.0, 0.0, 1.0));
    assert_eq!(icc_pair_kernel(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), [0.5, 1.0]);
}

#[test]
fn enumeration_examples() {
    let p = enumerate_pairs(3).unwrap();
    assert_eq!(p, vec![PairIndex { i1: 0, i2: 1 }, PairIndex { i1: 0, i2: 2 }, PairIndex { i1: 1, i2: 2 }]);
    assert_eq!(enumerate_pairs(100).unwrap().len(), 4950);
    assert!(enumerate_pairs(1).is_err());
}

#[test]
fn ustatistic_examples() {
    let data = subjects(&[1.0, 2.0, 3.0]);
    assert_eq!(ustatistic_mean(&Kernel::SqHalfDiff, &data, Exec::serial()).unwrap(), vec![1.0]);
    let mean_kernel = Kernel::Custom(frm_core::kernels::CustomKernel {
        func: std::sync::Arc::new(|a, b| Ok(vec![(a[0] + b[0]) / 2.0])),
        output_dim: 1,
        symmetric: true,
    });
    let data = subjects(&[1.0, 4.0, 2.0, 9.0]);
    assert_relative_eq!(ustatistic_mean(&mean_kernel, &data, Exec::serial()).unwrap()[0], 4.0, max_relative = 1e-15);
}

#[test]
fn kernel_failure_names_pair() {
    let data = subjects(&[1.0, 2.0, 3.0]);
    let failing = Kernel::Custom(frm_core::kernels::CustomKernel {
        func: std::sync::Arc::new(|a, b| {
            if a[0] == 2.0 && b[0] == 3.0 {
                Err(FrmError::Input("boom".into()))
            } else {
                Ok(vec![0.0])
            }
        }),
        output_dim: 1,
        symmetric: true,
    });
    match ustatistic_mean(&failing, &data, Exec::serial()) {
        Err(FrmError::PairEvaluation { pair, .. }) => assert_eq!(pair, PairIndex { i1: 1, i2: 2 }),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn hajek_and_projection_examples() {
    let t = PairScoreTable::new(3, 1, vec![1.0, 10.0, 100.0]).unwrap();
    let h = hajek_scores(&t, Exec::serial()).unwrap();
    assert_eq!(h.as_slice(), &[11.0, 101.0, 110.0]);
    let v = DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 0.0]);
    assert_relative_eq!(projection_variance(&v)[(0, 0)], 2.0 / 3.0, max_relative = 1e-15);
    assert!(PairScoreTable::new(3, 1, vec![1.0, 2.0]).is_err());
}

#[test]
fn nb_sampler_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mu, tau) = (403.428_793_492_735_1, 10.0);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_nb(&mut rng, mu, tau).unwrap()).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let true_var = mu * (1.0 + mu / tau);
    assert!((mean - mu).abs() < 0.01 * mu);
    assert!((mean - mu).abs() < 3.0 * (true_var / n).sqrt());
    // variance of the sample variance is dominated by the fourth moment; 3% is about 3 SE here
    assert!((var - true_var).abs() < 0.03 * true_var, "{var} vs {true_var}");
}

#[test]
fn mww_generator_matches_probit() {
    // 10^5 independent pairs of subjects at fixed covariate difference 0.5
    let mut hits = 0usize;
    let trials = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    use rand_distr::{Distribution, Normal};
    let e = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
    for _ in 0..trials {
        let y1 = 0.5 + e.sample(&mut rng);
        let y2 = e.sample(&mut rng);
        if y1 <= y2 {
            hits += 1;
        }
    }
    let p = std_normal_cdf(-0.5);
    let frac = hits as f64 / trials as f64;
    assert!((frac - p).abs() < 3.0 * (p * (1.0 - p) / trials as f64).sqrt());
    // the generator itself: beta = 0 gives no covariate effect
    let s = gen_mww_probit(2000, 3, &MwwParams { beta: 0.0 }).unwrap();
    let ys: Vec<f64> = s.iter().map(|r| r.y[0]).collect();
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() as f64 - 1.0);
    assert!((v - 0.5).abs() < 3.0 * 0.5 * (2.0 / 1999.0f64).sqrt());
}

#[test]
fn icc_generator_pair_means() {
    let params = IccParams::default();
    let ds = gen_icc_ratings(600, 4, &params).unwrap();
    let data = PairData::responses_only(&ds.subjects, &Kernel::IccPair(4)).unwrap();
    let total = data.n_pairs() as f64;
    let f1 = (0..data.n_pairs()).map(|k| data.response(k)[0]).sum::<f64>() / total;
    let f2 = (0..data.n_pairs()).map(|k| data.response(k)[1]).sum::<f64>() / total;
    let tau2 = params.sigma_b2 + params.sigma_bg2 + params.sigma_e2;
    let (h, _) = icc_mean_map(tau2, params.true_rho(), 4).unwrap();
    assert!((f1 - h[0]).abs() < 0.15 * h[0], "{f1} vs {}", h[0]);
    assert!((f2 - h[1]).abs() < 0.1 * h[1], "{f2} vs {}", h[1]);
}

#[test]
fn nb_generator_frozen() {
    let data = gen_nb_scenario(5, 42, &NbParams::default()).unwrap();
    let again = gen_nb_scenario(5, 42, &NbParams::default()).unwrap();
    assert_eq!(data.f, again.f);
    assert_eq!(data.f, vec![1933.0, 1002.0, 1369.0, 432.0, 944.0, 1872.0, 655.0, 547.0, 87.0, 446.0]);
}

#[test]
fn nb_adaptive_fit_frozen() {
    use frm_core::fit::{adaptive_fit, FitConfig};
    let data = gen_nb_scenario(100, 1, &NbParams::default()).unwrap();
    let model = FrmModel::new(Link::Exp, true, 1, WorkingVariance::NegBinomial(1.0));
    let fit = adaptive_fit(&model, &data, &FitConfig::default()).unwrap();
    assert_relative_eq!(fit.beta[0], 3.015_208_087_798_958, max_relative = 1e-9);
    assert_relative_eq!(fit.beta[1], 2.982_938_208_753_512, max_relative = 1e-9);
    assert_relative_eq!(fit.nuisance.unwrap(), 10.680_092_820_553_782, max_relative = 1e-6);
    assert_relative_eq!(fit.cov[(1, 1)], 1.243_207_059_035_628_7e-4, max_relative = 1e-6);
    assert_relative_eq!(fit.cov[(0, 1)], -1.270_036_075_172_750_3e-4, max_relative = 1e-6);
}
