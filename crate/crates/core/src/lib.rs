//! Functional response models (FRM) for between-subject attributes.
//!
//! A pairwise response `f(Y_i, Y_j)` is modeled through
//! `E[f | X] = h(X; beta)` and fitted with a U-statistics-based generalized
//! estimating equation. Scores, information and variance components are
//! accumulated over all `C(n,2)` pairs in a streaming fashion, optionally in
//! parallel (feature `parallel`, on by default).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod kernels;
pub mod model;
pub mod simulate;
pub mod ustat;

pub use error::{FrmError, Result};
pub use fit::{
    adaptive_fit, assemble_ugee, estimate_nuisance, fit_icc, fit_moments, sandwich_variance, solve_ugee,
    CovarianceEstimator, FitConfig, FitResult,
};
pub use kernels::{
    aitchison_distance, apply_pseudocount, mww_indicator, Composition, Kernel, PseudocountPolicy, TieRule,
};
pub use model::{FrmModel, Link, PairModel, PairTransform, SubjectRecord, WorkingVariance};
pub use ustat::{
    enumerate_pairs, hajek_scores, projection_variance, ustatistic_mean, Exec, PairData, PairIndex, PairScoreTable,
    Reduction,
};
