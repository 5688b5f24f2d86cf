//! Fisher–Rao geometry of the open probability simplex.
//!
//! All maps have closed forms. The exponential maps are those of the
//! e-connection, not the Levi-Civita connection:
//!
//! * `Π₀ x = x − mean(x)·1` projects onto the tangent space `T₀ = {v : Σv = 0}`.
//! * `R_p x = p·x − ⟨p, x⟩ p` is the replicator operator `Diag(p) − ppᵀ`.
//! * `exp_p(v) = p e^v / ⟨p, e^v⟩` with inverse `Π₀ log(q/p)`.
//! * `Exp_p(v) = exp_p(v/p)` with inverse `R_p log(q/p)`.
//!
//! Vector-level functions work on [`SimplexPoint`] and [`TangentVector`]. The
//! `*_into` kernels operate on raw slices and are what the row-wise matrix
//! variants and the flow code use internally.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lower clamp applied to every simplex entry produced by a map.
pub const EPS_INTERIOR: f64 = 1e-12;

/// Tolerance on `Σp = 1` and `Σv = 0`.
pub const SUM_TOL: f64 = 1e-12;

fn check_label_count(c: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::InvalidDimension(format!("need at least 2 labels, got {c}")));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::mismatch(format!("length {a}"), format!("length {b}")));
    }
    Ok(())
}

fn tangent_sum_ok(v: &[f64]) -> bool {
    let sum: f64 = v.iter().sum();
    let scale: f64 = v.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    sum.abs() <= SUM_TOL * scale
}

/// A point of the open probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates that `values` is strictly positive and sums to one.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_label_count(values.len())?;
        if let Some(x) = values.iter().find(|x| !x.is_finite() || **x <= 0.0) {
            return Err(Error::Domain(format!(
                "simplex entries must be positive and finite, found {x}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Domain(format!("simplex entries must sum to 1, sum is {sum}")));
        }
        Ok(SimplexPoint(values))
    }

    /// Normalizes nonnegative weights onto the simplex and applies the interior clamp.
    pub fn from_weights(mut values: Vec<f64>) -> Result<Self> {
        check_label_count(values.len())?;
        if values.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Domain("weights sum to zero".into()));
        }
        values.iter_mut().for_each(|x| *x /= sum);
        clamp_to_interior(&mut values);
        Ok(SimplexPoint(values))
    }

    /// The barycenter `1_S = (1/c, …, 1/c)`.
    pub fn barycenter(c: usize) -> Result<Self> {
        check_label_count(c)?;
        Ok(SimplexPoint(vec![1.0 / c as f64; c]))
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        SimplexPoint(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A vector of the tangent space `T₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_label_count(values.len())?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tangent vector".into()));
        }
        if !tangent_sum_ok(&values) {
            let sum: f64 = values.iter().sum();
            return Err(Error::Domain(format!("tangent entries must sum to 0, sum is {sum}")));
        }
        Ok(TangentVector(values))
    }

    pub fn zeros(c: usize) -> Result<Self> {
        check_label_count(c)?;
        Ok(TangentVector(vec![0.0; c]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Clamps entries to at least [`EPS_INTERIOR`] and renormalizes.
pub fn clamp_to_interior(p: &mut [f64]) {
    if p.iter().all(|&x| x >= EPS_INTERIOR) {
        return;
    }
    // pin small entries at the clamp and rescale the rest so the sum stays 1
    let small = p.iter().filter(|&&x| x < EPS_INTERIOR).count();
    let rest: f64 = p.iter().filter(|&&x| x >= EPS_INTERIOR).sum();
    let scale = (1.0 - small as f64 * EPS_INTERIOR) / rest;
    for x in p.iter_mut() {
        *x = if *x < EPS_INTERIOR { EPS_INTERIOR } else { *x * scale };
    }
}

/// `x ← x − mean(x)·1`.
pub fn project_t0_in_place(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// `out = R_p x = p·x − ⟨p, x⟩ p`.
pub fn replicator_into(p: &[f64], x: &[f64], out: &mut [f64]) {
    let inner: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
    for ((o, &pj), &xj) in out.iter_mut().zip(p).zip(x) {
        *o = pj * (xj - inner);
    }
}

/// `out = Π₀[u/q]`, the inverse of `R_q` restricted to `T₀`.
pub fn replicator_inverse_into(q: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    if let Some(&qj) = q.iter().find(|&&qj| qj < EPS_INTERIOR) {
        return Err(Error::Singular(format!(
            "replicator inverse at point with entry {qj:e} below {EPS_INTERIOR:e}"
        )));
    }
    for ((o, &uj), &qj) in out.iter_mut().zip(u).zip(q) {
        *o = uj / qj;
    }
    project_t0_in_place(out);
    Ok(())
}

/// `out = exp_p(v) = p e^v / ⟨p, e^v⟩`, evaluated with a max shift in the log domain.
pub fn exp_map_into(p: &[f64], v: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for ((o, &pj), &vj) in out.iter_mut().zip(p).zip(v) {
        *o = pj.ln() + vj;
        max = max.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    clamp_to_interior(out);
}

/// `out = Exp_p(v) = exp_p(v/p)`.
pub fn big_exp_map_into(p: &[f64], v: &[f64], out: &mut [f64]) {
    let scaled: Vec<f64> = v.iter().zip(p).map(|(vj, pj)| vj / pj).collect();
    exp_map_into(p, &scaled, out);
}

fn log_ratio_into(p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
    for ((o, &pj), &qj) in out.iter_mut().zip(p).zip(q) {
        if !(pj > 0.0 && qj > 0.0) {
            return Err(Error::Domain(format!(
                "log ratio needs positive entries, got p={pj}, q={qj}"
            )));
        }
        *o = (qj / pj).ln();
    }
    Ok(())
}

/// `out = exp_p⁻¹(q) = Π₀ log(q/p)`.
pub fn exp_map_inverse_into(p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
    log_ratio_into(p, q, out)?;
    project_t0_in_place(out);
    Ok(())
}

/// `out = Exp_p⁻¹(q) = R_p log(q/p)`.
pub fn big_exp_inverse_into(p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
    let mut log_ratio = vec![0.0; p.len()];
    log_ratio_into(p, q, &mut log_ratio)?;
    replicator_into(p, &log_ratio, out);
    Ok(())
}

/// Orthogonal projection onto `T₀`.
pub fn project_t0(x: &[f64]) -> Result<TangentVector> {
    check_label_count(x.len())?;
    let mut out = x.to_vec();
    project_t0_in_place(&mut out);
    Ok(TangentVector(out))
}

/// Replicator operator `R_p x`.
pub fn replicator_map(p: &SimplexPoint, x: &[f64]) -> Result<TangentVector> {
    check_same_len(p.len(), x.len())?;
    let mut out = vec![0.0; p.len()];
    replicator_into(p.as_slice(), x, &mut out);
    Ok(TangentVector(out))
}

/// Inverse of `R_q : T₀ → T₀`.
pub fn replicator_inverse_on_t0(q: &SimplexPoint, u: &TangentVector) -> Result<TangentVector> {
    check_same_len(q.len(), u.len())?;
    let mut out = vec![0.0; q.len()];
    replicator_inverse_into(q.as_slice(), u.as_slice(), &mut out)?;
    Ok(TangentVector(out))
}

/// `exp_p(v)`; `v` may be any finite vector since constants are in the kernel.
pub fn exp_map(p: &SimplexPoint, v: &[f64]) -> Result<SimplexPoint> {
    check_same_len(p.len(), v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("exp_map argument".into()));
    }
    let mut out = vec![0.0; p.len()];
    exp_map_into(p.as_slice(), v, &mut out);
    Ok(SimplexPoint(out))
}

pub fn exp_map_inverse(p: &SimplexPoint, q: &SimplexPoint) -> Result<TangentVector> {
    check_same_len(p.len(), q.len())?;
    let mut out = vec![0.0; p.len()];
    exp_map_inverse_into(p.as_slice(), q.as_slice(), &mut out)?;
    Ok(TangentVector(out))
}

pub fn big_exp_map(p: &SimplexPoint, v: &TangentVector) -> Result<SimplexPoint> {
    check_same_len(p.len(), v.len())?;
    let mut out = vec![0.0; p.len()];
    big_exp_map_into(p.as_slice(), v.as_slice(), &mut out);
    Ok(SimplexPoint(out))
}

pub fn big_exp_inverse(p: &SimplexPoint, q: &SimplexPoint) -> Result<TangentVector> {
    check_same_len(p.len(), q.len())?;
    let mut out = vec![0.0; p.len()];
    big_exp_inverse_into(p.as_slice(), q.as_slice(), &mut out)?;
    Ok(TangentVector(out))
}

/// A point of the assignment manifold: an `n×c` row-stochastic matrix with
/// positive entries, stored in standard (row-major) layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix(Array2<f64>);

impl AssignmentMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_label_count(values.ncols())?;
        for (i, row) in values.rows().into_iter().enumerate() {
            if row.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return Err(Error::Domain(format!("row {i} has a nonpositive entry")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::Domain(format!("row {i} sums to {sum}")));
            }
        }
        Ok(AssignmentMatrix(values.as_standard_layout().into_owned()))
    }

    /// Normalizes each row of a nonnegative matrix and applies the interior clamp.
    pub fn from_weights(mut values: Array2<f64>) -> Result<Self> {
        check_label_count(values.ncols())?;
        for mut row in values.rows_mut() {
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Domain("weights must be finite and nonnegative".into()));
            }
            let sum = row.sum();
            if sum <= 0.0 {
                return Err(Error::Domain("row of weights sums to zero".into()));
            }
            row.mapv_inplace(|x| x / sum);
        }
        let c = values.ncols();
        let mut w = values.as_standard_layout().into_owned();
        for row in w.as_slice_mut().unwrap().chunks_mut(c) {
            clamp_to_interior(row);
        }
        Ok(AssignmentMatrix(w))
    }

    /// The barycenter `1_W`: every row equals `1_S`.
    pub fn barycenter(n: usize, c: usize) -> Result<Self> {
        check_label_count(c)?;
        Ok(AssignmentMatrix(Array2::from_elem((n, c), 1.0 / c as f64)))
    }

    /// Every row equal to `p`.
    pub fn constant(n: usize, p: &SimplexPoint) -> Self {
        let c = p.len();
        let data: Vec<f64> = (0..n).flat_map(|_| p.as_slice().iter().copied()).collect();
        AssignmentMatrix(Array2::from_shape_vec((n, c), data).unwrap())
    }

    pub(crate) fn from_array_unchecked(values: Array2<f64>) -> Self {
        AssignmentMatrix(values.as_standard_layout().into_owned())
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn c(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.c();
        &self.as_slice()[i * c..(i + 1) * c]
    }

    pub fn row_point(&self, i: usize) -> SimplexPoint {
        SimplexPoint(self.row(i).to_vec())
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mean Shannon entropy of the rows, in nats.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .as_slice()
            .chunks(self.c())
            .map(|row| -row.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
            .sum();
        total / self.n().max(1) as f64
    }
}

/// An `n×c` matrix with rows in `T₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentMatrix(Array2<f64>);

impl TangentMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_label_count(values.ncols())?;
        for (i, row) in values.rows().into_iter().enumerate() {
            let row: Vec<f64> = row.to_vec();
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("tangent row {i}")));
            }
            if !tangent_sum_ok(&row) {
                return Err(Error::Domain(format!("tangent row {i} does not sum to 0")));
            }
        }
        Ok(TangentMatrix(values.as_standard_layout().into_owned()))
    }

    pub fn zeros(n: usize, c: usize) -> Self {
        TangentMatrix(Array2::zeros((n, c)))
    }

    pub(crate) fn from_array_unchecked(values: Array2<f64>) -> Self {
        TangentMatrix(values.as_standard_layout().into_owned())
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn c(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.c();
        &self.as_slice()[i * c..(i + 1) * c]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }
}

fn standard(a: &Array2<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn check_shape(w: &AssignmentMatrix, x: &Array2<f64>) -> Result<()> {
    if x.dim() != (w.n(), w.c()) {
        return Err(Error::mismatch(
            format!("{}x{}", w.n(), w.c()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    Ok(())
}

/// Applies `kernel(w_i, x_i, out_i)` to every row in parallel.
fn map_rows<F>(w: &[f64], x: &[f64], n: usize, c: usize, kernel: F) -> Result<Array2<f64>>
where
    F: Fn(&[f64], &[f64], &mut [f64]) -> Result<()> + Sync,
{
    let mut out = vec![0.0; n * c];
    out.par_chunks_mut(c)
        .zip(w.par_chunks(c))
        .zip(x.par_chunks(c))
        .try_for_each(|((o, wi), xi)| kernel(wi, xi, o))?;
    Ok(Array2::from_shape_vec((n, c), out).unwrap())
}

/// Row-wise `Π₀`.
pub fn project_t0_rows(x: &Array2<f64>) -> Result<TangentMatrix> {
    check_label_count(x.ncols())?;
    let mut out = x.as_standard_layout().into_owned();
    let c = out.ncols();
    for row in out.as_slice_mut().unwrap().chunks_mut(c) {
        project_t0_in_place(row);
    }
    Ok(TangentMatrix(out))
}

/// Row-wise `R_{W_i} X_i`.
pub fn replicator_map_rows(w: &AssignmentMatrix, x: &Array2<f64>) -> Result<TangentMatrix> {
    check_shape(w, x)?;
    let out = map_rows(w.as_slice(), &standard(x), w.n(), w.c(), |p, xi, o| {
        replicator_into(p, xi, o);
        Ok(())
    })?;
    Ok(TangentMatrix(out))
}

pub fn replicator_inverse_rows(w: &AssignmentMatrix, u: &TangentMatrix) -> Result<TangentMatrix> {
    check_shape(w, u.as_array())?;
    let out = map_rows(w.as_slice(), u.as_slice(), w.n(), w.c(), replicator_inverse_into)?;
    Ok(TangentMatrix(out))
}

pub fn exp_map_rows(w: &AssignmentMatrix, v: &Array2<f64>) -> Result<AssignmentMatrix> {
    check_shape(w, v)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("exp_map argument".into()));
    }
    let out = map_rows(w.as_slice(), &standard(v), w.n(), w.c(), |p, vi, o| {
        exp_map_into(p, vi, o);
        Ok(())
    })?;
    Ok(AssignmentMatrix(out))
}

pub fn exp_map_inverse_rows(w: &AssignmentMatrix, q: &AssignmentMatrix) -> Result<TangentMatrix> {
    check_shape(w, q.as_array())?;
    let out = map_rows(w.as_slice(), q.as_slice(), w.n(), w.c(), exp_map_inverse_into)?;
    Ok(TangentMatrix(out))
}

pub fn big_exp_map_rows(w: &AssignmentMatrix, v: &TangentMatrix) -> Result<AssignmentMatrix> {
    check_shape(w, v.as_array())?;
    if v.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Exp argument".into()));
    }
    let out = map_rows(w.as_slice(), v.as_slice(), w.n(), w.c(), |p, vi, o| {
        big_exp_map_into(p, vi, o);
        Ok(())
    })?;
    Ok(AssignmentMatrix(out))
}

pub fn big_exp_inverse_rows(w: &AssignmentMatrix, q: &AssignmentMatrix) -> Result<TangentMatrix> {
    check_shape(w, q.as_array())?;
    let out = map_rows(w.as_slice(), q.as_slice(), w.n(), w.c(), big_exp_inverse_into)?;
    Ok(TangentMatrix(out))
}
