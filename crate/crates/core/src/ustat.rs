//! Pair enumeration, second-order U-statistics, and Hájek projections of
//! pair-level scores.
//!
//! Pairs are indexed 0-based as `(i1, i2)` with `i1 < i2` and enumerated in
//! lexicographic order; the linear rank of a pair in that order is used
//! throughout as the pair's storage slot. All reductions walk fixed chunks of
//! [`CHUNK_PAIRS`] pairs. Under [`Reduction::Deterministic`] chunk partials are
//! merged in chunk order, so the result does not depend on the worker count
//! and the serial fallback is bitwise identical to the parallel path.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, input, FrmError, Result};
use crate::kernels::Kernel;
use crate::model::{validate_subjects, PairTransform, SubjectRecord};

/// Pairs per reduction chunk.
pub const CHUNK_PAIRS: usize = 1024;

/// Chunks processed per parallel batch before in-order merging.
#[cfg(feature = "parallel")]
const BATCH_CHUNKS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairIndex {
    pub i1: usize,
    pub i2: usize,
}

impl fmt::Display for PairIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i1, self.i2)
    }
}

impl PairIndex {
    /// Linear rank of this pair among all pairs of `n` subjects.
    pub fn linear(&self, n: usize) -> usize {
        row_offset(self.i1, n) + (self.i2 - self.i1 - 1)
    }

    /// Inverse of [`PairIndex::linear`].
    pub fn from_linear(k: usize, n: usize) -> Self {
        debug_assert!(k < pair_count(n));
        let nf = n as f64;
        let disc = (2.0 * nf - 1.0).powi(2) - 8.0 * k as f64;
        let mut i1 = ((2.0 * nf - 1.0 - disc.max(0.0).sqrt()) / 2.0).floor().max(0.0) as usize;
        i1 = i1.min(n - 2);
        while i1 > 0 && row_offset(i1, n) > k {
            i1 -= 1;
        }
        while i1 + 1 < n - 1 && row_offset(i1 + 1, n) <= k {
            i1 += 1;
        }
        PairIndex { i1, i2: k - row_offset(i1, n) + i1 + 1 }
    }
}

fn row_offset(i1: usize, n: usize) -> usize {
    i1 * n - i1 * (i1 + 1) / 2
}

/// `n (n - 1) / 2`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Iterator over pairs in lexicographic order, starting at a linear rank.
#[derive(Debug, Clone)]
pub struct PairIter {
    n: usize,
    next: PairIndex,
    remaining: usize,
}

impl PairIter {
    pub fn new(n: usize) -> Self {
        Self::range(n, 0, pair_count(n))
    }

    pub fn range(n: usize, start: usize, end: usize) -> Self {
        let remaining = end.saturating_sub(start);
        let next = if remaining > 0 { PairIndex::from_linear(start, n) } else { PairIndex { i1: 0, i2: 1 } };
        Self { n, next, remaining }
    }
}

impl Iterator for PairIter {
    type Item = PairIndex;

    fn next(&mut self) -> Option<PairIndex> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.next;
        if self.next.i2 + 1 < self.n {
            self.next.i2 += 1;
        } else {
            self.next.i1 += 1;
            self.next.i2 = self.next.i1 + 1;
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for PairIter {}

pub fn enumerate_pairs(n: usize) -> Result<Vec<PairIndex>> {
    if n < 2 {
        return input(format!("need at least two subjects to form pairs, got {n}"));
    }
    Ok(PairIter::new(n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Reduction {
    /// Fixed chunks merged in index order: identical for any worker count.
    #[default]
    Deterministic,
    /// Work-stealing tree reduction; equal to the deterministic result up to
    /// floating-point reassociation.
    Tree,
}

/// Execution settings for pair loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exec {
    pub parallel: bool,
    pub reduction: Reduction,
}

impl Default for Exec {
    fn default() -> Self {
        Self { parallel: cfg!(feature = "parallel"), reduction: Reduction::Deterministic }
    }
}

impl Exec {
    pub fn serial() -> Self {
        Self { parallel: false, reduction: Reduction::Deterministic }
    }

    pub fn parallel() -> Self {
        Self { parallel: true, reduction: Reduction::Deterministic }
    }

    pub fn tree() -> Self {
        Self { parallel: true, reduction: Reduction::Tree }
    }
}

/// Chunked reduction over all pairs of `n` subjects.
///
/// `body` folds the pairs of one chunk into an accumulator created by `init`;
/// `merge` combines two accumulators.
pub(crate) fn reduce_pairs<A, I, B, M>(n: usize, exec: Exec, init: I, body: B, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    B: Fn(&mut A, usize, PairIndex) -> Result<()> + Sync,
    M: Fn(&mut A, A) + Sync,
{
    let total = pair_count(n);
    let n_chunks = total.div_ceil(CHUNK_PAIRS);
    let run_chunk = |c: usize| -> Result<A> {
        let start = c * CHUNK_PAIRS;
        let end = (start + CHUNK_PAIRS).min(total);
        let mut acc = init();
        for (k, pair) in (start..end).zip(PairIter::range(n, start, end)) {
            body(&mut acc, k, pair)?;
        }
        Ok(acc)
    };

    #[cfg(feature = "parallel")]
    if exec.parallel && n_chunks > 1 {
        use rayon::prelude::*;
        if exec.reduction == Reduction::Tree {
            return (0..n_chunks).into_par_iter().map(run_chunk).try_reduce(&init, |mut a, b| {
                merge(&mut a, b);
                Ok(a)
            });
        }
        let mut acc = init();
        for batch in (0..n_chunks).collect::<Vec<_>>().chunks(BATCH_CHUNKS) {
            let partials: Vec<Result<A>> = batch.par_iter().map(|&c| run_chunk(c)).collect();
            for p in partials {
                merge(&mut acc, p?);
            }
        }
        return Ok(acc);
    }
    #[cfg(not(feature = "parallel"))]
    let _ = exec;

    let mut acc = init();
    for c in 0..n_chunks {
        merge(&mut acc, run_chunk(c)?);
    }
    Ok(acc)
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Second-order U-statistic: the kernel averaged over all pairs of subjects'
/// outcomes.
pub fn ustatistic_mean(kernel: &Kernel, subjects: &[SubjectRecord], exec: Exec) -> Result<Vec<f64>> {
    let n = subjects.len();
    if n < 2 {
        return input(format!("U-statistic needs at least two subjects, got {n}"));
    }
    validate_subjects(subjects)?;
    let d = kernel.output_dim();
    let init = || (vec![0.0; d], vec![0.0; d]);
    let sum = reduce_pairs(
        n,
        exec,
        init,
        |(acc, buf), _, pair| {
            kernel
                .eval_into(&subjects[pair.i1].y, &subjects[pair.i2].y, buf)
                .map_err(|e| FrmError::PairEvaluation { pair, reason: e.to_string() })?;
            add_into(acc, buf);
            Ok(())
        },
        |(a, _), (b, _)| add_into(a, &b),
    )?
    .0;
    let total = pair_count(n) as f64;
    Ok(sum.into_iter().map(|s| s / total).collect())
}

/// Pairwise responses and pair covariates for all pairs of `n` subjects,
/// stored in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub n: usize,
    /// Response dimension.
    pub d: usize,
    /// Pair covariate dimension.
    pub r: usize,
    pub f: Vec<f64>,
    pub x: Vec<f64>,
}

impl PairData {
    pub fn new(n: usize, d: usize, r: usize, f: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return input(format!("need at least two subjects, got {n}"));
        }
        let total = pair_count(n);
        check_dim(total * d, f.len())?;
        check_dim(total * r, x.len())?;
        if f.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return input("pair data contains non-finite values");
        }
        Ok(Self { n, d, r, f, x })
    }

    pub fn n_pairs(&self) -> usize {
        pair_count(self.n)
    }

    pub fn response(&self, k: usize) -> &[f64] {
        &self.f[k * self.d..(k + 1) * self.d]
    }

    pub fn covariate(&self, k: usize) -> &[f64] {
        &self.x[k * self.r..(k + 1) * self.r]
    }

    /// Evaluates `kernel` on outcomes and `transform` on covariates for every pair.
    pub fn from_subjects(subjects: &[SubjectRecord], kernel: &Kernel, transform: PairTransform) -> Result<Self> {
        let n = subjects.len();
        if n < 2 {
            return input(format!("need at least two subjects, got {n}"));
        }
        let (_, p) = validate_subjects(subjects)?;
        let d = kernel.output_dim();
        let r = transform.output_dim(p)?;
        let total = pair_count(n);
        let mut f = vec![0.0; total * d];
        let mut x = vec![0.0; total * r];
        for (k, pair) in PairIter::new(n).enumerate() {
            let (a, b) = (&subjects[pair.i1], &subjects[pair.i2]);
            let wrap = |e: FrmError| FrmError::PairEvaluation { pair, reason: e.to_string() };
            kernel.eval_into(&a.y, &b.y, &mut f[k * d..(k + 1) * d]).map_err(wrap)?;
            transform.eval_into(&a.x, &b.x, &mut x[k * r..(k + 1) * r]).map_err(wrap)?;
        }
        Self::new(n, d, r, f, x)
    }

    /// Pair data with no covariates, from a kernel only.
    pub fn responses_only(subjects: &[SubjectRecord], kernel: &Kernel) -> Result<Self> {
        let stripped: Vec<SubjectRecord> =
            subjects.iter().map(|s| SubjectRecord { id: s.id.clone(), y: s.y.clone(), x: Vec::new() }).collect();
        Self::from_subjects(&stripped, kernel, PairTransform::Concatenate)
    }
}

/// Complete table of per-pair score vectors of length `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreTable {
    n: usize,
    q: usize,
    scores: Vec<f64>,
}

impl PairScoreTable {
    pub fn new(n: usize, q: usize, scores: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return input(format!("need at least two subjects, got {n}"));
        }
        if scores.len() != pair_count(n) * q {
            return input(format!(
                "incomplete score table: {} values for {} pairs of dimension {q}",
                scores.len(),
                pair_count(n)
            ));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return input("score table contains non-finite values");
        }
        Ok(Self { n, q, scores })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn score(&self, k: usize) -> &[f64] {
        &self.scores[k * self.q..(k + 1) * self.q]
    }

    /// Binary dump: per pair `i1` and `i2` as little-endian u64, then `q`
    /// little-endian f64 values. A header carries `n` and `q` as u64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.q as u64).to_le_bytes())?;
        for (k, pair) in PairIter::new(self.n).enumerate() {
            w.write_all(&(pair.i1 as u64).to_le_bytes())?;
            w.write_all(&(pair.i2 as u64).to_le_bytes())?;
            for v in self.score(k) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word).map_err(|e| FrmError::Input(format!("truncated score dump: {e}")))?;
            Ok(word)
        };
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let q = u64::from_le_bytes(next(&mut r)?) as usize;
        let mut scores = Vec::with_capacity(pair_count(n) * q);
        for expected in PairIter::new(n) {
            let i1 = u64::from_le_bytes(next(&mut r)?) as usize;
            let i2 = u64::from_le_bytes(next(&mut r)?) as usize;
            if (i1, i2) != (expected.i1, expected.i2) {
                return input(format!("score dump out of order at pair ({i1}, {i2})"));
            }
            for _ in 0..q {
                scores.push(f64::from_le_bytes(next(&mut r)?));
            }
        }
        Self::new(n, q, scores)
    }
}

/// Per-subject and global moments of a stream of pair scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMoments {
    pub n: usize,
    pub q: usize,
    /// Sum of scores.
    pub sum: Vec<f64>,
    /// Sum of outer products `s s'` (q x q, row-major).
    pub outer: Vec<f64>,
    /// Per-subject score sums `a_j` (n x q, row-major).
    pub subject_sums: Vec<f64>,
    /// Per-subject sums of `s s'` over the subject's pairs (n x q x q), if requested.
    pub subject_outer: Option<Vec<f64>>,
    /// Per-subject sums of `|M s|^4`, if a metric `M` was supplied.
    pub subject_quartic: Option<Vec<f64>>,
}

impl ScoreMoments {
    fn zeros(n: usize, q: usize, per_subject_outer: bool, quartic: bool) -> Self {
        Self {
            n,
            q,
            sum: vec![0.0; q],
            outer: vec![0.0; q * q],
            subject_sums: vec![0.0; n * q],
            subject_outer: per_subject_outer.then(|| vec![0.0; n * q * q]),
            subject_quartic: quartic.then(|| vec![0.0; n]),
        }
    }

    fn merge(&mut self, other: ScoreMoments) {
        add_into(&mut self.sum, &other.sum);
        add_into(&mut self.outer, &other.outer);
        add_into(&mut self.subject_sums, &other.subject_sums);
        if let (Some(a), Some(b)) = (self.subject_outer.as_mut(), other.subject_outer.as_ref()) {
            add_into(a, b);
        }
        if let (Some(a), Some(b)) = (self.subject_quartic.as_mut(), other.subject_quartic.as_ref()) {
            add_into(a, b);
        }
    }

    fn push(&mut self, pair: PairIndex, s: &[f64], metric: Option<&DMatrix<f64>>, scratch: &mut [f64]) {
        let q = self.q;
        add_into(&mut self.sum, s);
        for a in 0..q {
            for b in 0..q {
                self.outer[a * q + b] += s[a] * s[b];
            }
        }
        for j in [pair.i1, pair.i2] {
            add_into(&mut self.subject_sums[j * q..(j + 1) * q], s);
            if let Some(g) = self.subject_outer.as_mut() {
                let g = &mut g[j * q * q..(j + 1) * q * q];
                for a in 0..q {
                    for b in 0..q {
                        g[a * q + b] += s[a] * s[b];
                    }
                }
            }
        }
        if let (Some(m), Some(quart)) = (metric, self.subject_quartic.as_mut()) {
            for (a, slot) in scratch.iter_mut().enumerate() {
                *slot = (0..q).map(|b| m[(a, b)] * s[b]).sum();
            }
            let sq: f64 = scratch.iter().map(|v| v * v).sum();
            quart[pair.i1] += sq * sq;
            quart[pair.i2] += sq * sq;
        }
    }

    /// Hájek scores `v_j = 2/(n-1) * a_j` as an n x q matrix.
    pub fn hajek(&self) -> DMatrix<f64> {
        let c = 2.0 / (self.n as f64 - 1.0);
        DMatrix::from_row_slice(self.n, self.q, &self.subject_sums).map(|v| v * c)
    }
}

/// Streams scores from `score` over every pair and accumulates
/// [`ScoreMoments`]. `metric`, when given, enables the per-subject quartic
/// sums in the transformed coordinates `M s`.
pub fn accumulate_scores<F>(
    n: usize,
    q: usize,
    exec: Exec,
    per_subject_outer: bool,
    metric: Option<&DMatrix<f64>>,
    score: F,
) -> Result<ScoreMoments>
where
    F: Fn(usize, PairIndex, &mut [f64]) -> Result<()> + Sync,
{
    if n < 2 {
        return input(format!("need at least two subjects, got {n}"));
    }
    let init = || (ScoreMoments::zeros(n, q, per_subject_outer, metric.is_some()), vec![0.0; q], vec![0.0; q]);
    let (moments, _, _) = reduce_pairs(
        n,
        exec,
        init,
        |(acc, buf, scratch), k, pair| {
            score(k, pair, buf)?;
            acc.push(pair, buf, metric, scratch);
            Ok(())
        },
        |(a, _, _), (b, _, _)| a.merge(b),
    )?;
    Ok(moments)
}

/// Hájek scores of a complete table: row j is `2/(n-1)` times the sum of
/// the scores of all pairs containing subject j, in either slot.
pub fn hajek_scores(table: &PairScoreTable, exec: Exec) -> Result<DMatrix<f64>> {
    let moments = accumulate_scores(table.n, table.q, exec, false, None, |k, _, out| {
        out.copy_from_slice(table.score(k));
        Ok(())
    })?;
    Ok(moments.hajek())
}

/// `n^-1 sum_j (v_j - vbar)(v_j - vbar)'` over the rows of `hajek`.
pub fn projection_variance(hajek: &DMatrix<f64>) -> DMatrix<f64> {
    let n = hajek.nrows();
    let q = hajek.ncols();
    if n == 0 {
        return DMatrix::zeros(q, q);
    }
    let nf = n as f64;
    let mean: Vec<f64> = (0..q).map(|a| (0..n).map(|j| hajek[(j, a)]).sum::<f64>() / nf).collect();
    let mut out = DMatrix::zeros(q, q);
    for a in 0..q {
        for b in 0..q {
            let s: f64 = (0..n).map(|j| (hajek[(j, a)] - mean[a]) * (hajek[(j, b)] - mean[b])).sum();
            out[(a, b)] = s / nf;
        }
    }
    out
}
