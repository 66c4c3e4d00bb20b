use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{solve_spd, spd_condition_estimate, Matrix};

/// Diagnostics of one layer's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditReportEntry {
    pub layer: usize,
    pub alpha: f64,
    pub frob_delta: f64,
    /// `‖W*K1 − V1*‖_F`.
    pub edit_residual: f64,
    /// `‖W0K1 − V1*‖_F`.
    pub pre_residual: f64,
    /// `√tr(Δ·C0·Δᵀ)`: how far preserved keys move.
    pub preservation: f64,
    /// `‖(1−α)·Δ·C0 + α·(W*K1 − V1*)·K1ᵀ‖` over the same gradient at `W0`.
    pub stationarity: f64,
    pub cond_estimate: f64,
}

fn check_shapes(w0: &Matrix, c0: &Matrix, k1: &Matrix, v1: &Matrix) -> Result<()> {
    let (d, f) = w0.shape();
    if c0.shape() != (f, f) || k1.rows() != f || v1.rows() != d || v1.cols() != k1.cols() {
        return Err(Error::DimensionMismatch(format!(
            "W0 {:?}, C0 {:?}, K1 {:?}, V1 {:?}",
            w0.shape(),
            c0.shape(),
            k1.shape(),
            v1.shape()
        )));
    }
    Ok(())
}

/// `(1−α)·C0 + α·K1K1ᵀ`.
pub fn bracket(c0: &Matrix, k1: &Matrix, alpha: f64) -> Matrix {
    let kk = k1.matmul_t_unchecked(k1);
    c0.zip_map(&kk, |c, k| (1.0 - alpha) * c + alpha * k)
}

/// Residuals of a candidate `W*` against the edit objective.
pub fn diagnostics(
    layer: usize,
    w0: &Matrix,
    w_star: &Matrix,
    c0: &Matrix,
    k1: &Matrix,
    v1: &Matrix,
    alpha: f64,
) -> Result<EditReportEntry> {
    check_shapes(w0, c0, k1, v1)?;
    let delta = w_star.sub(w0)?;
    let pre = w0.matmul_unchecked(k1).sub(v1)?;
    let post = w_star.matmul_unchecked(k1).sub(v1)?;
    let dc = delta.matmul_unchecked(c0);
    let t1 = dc.scale(1.0 - alpha);
    let t2 = post.matmul_t_unchecked(k1).scale(alpha);
    let sum = t1.add(&t2)?;
    // Relative to the gradient at W0, which is the edit term alone.
    let g0 = pre.matmul_t_unchecked(k1).scale(alpha).frobenius_norm();
    let stationarity = if sum.max_abs() == 0.0 { 0.0 } else { sum.frobenius_norm() / g0.max(f64::MIN_POSITIVE) };
    let preservation = dc.matmul_t_unchecked(&delta);
    let trace: f64 = (0..preservation.rows()).map(|i| preservation.get(i, i)).sum();
    let cond_estimate = if k1.cols() == 0 { 0.0 } else { spd_condition_estimate(&bracket(c0, k1, alpha)).unwrap_or(f64::INFINITY) };
    Ok(EditReportEntry {
        layer,
        alpha,
        frob_delta: delta.frobenius_norm(),
        edit_residual: post.frobenius_norm(),
        pre_residual: pre.frobenius_norm(),
        preservation: trace.max(0.0).sqrt(),
        stationarity,
        cond_estimate,
    })
}

/// `W* = W0 + α(V1* − W0K1)K1ᵀ[(1−α)C0 + αK1K1ᵀ]⁻¹`.
///
/// `W0` is `d × f`, `C0` is `f × f`, keys `K1` are the `e` columns of an
/// `f × e` matrix and targets `V1*` the columns of a `d × e` matrix.
pub fn closed_form_update(
    layer: usize,
    w0: &Matrix,
    c0: &Matrix,
    k1: &Matrix,
    v1: &Matrix,
    alpha: f64,
) -> Result<(Matrix, EditReportEntry)> {
    check_shapes(w0, c0, k1, v1)?;
    if !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("α must be finite, got {alpha}")));
    }
    if alpha == 0.0 || k1.cols() == 0 {
        let w = w0.clone();
        let report = diagnostics(layer, w0, &w, c0, k1, v1, alpha)?;
        return Ok((w, report));
    }
    let b = bracket(c0, k1, alpha);
    let resid = v1.sub(&w0.matmul_unchecked(k1))?.scale(alpha);
    // B is symmetric, so Δᵀ = B⁻¹·K1·Rᵀ.
    let rhs = k1.matmul_t_unchecked(&resid);
    let delta_t = solve_spd(&b, &rhs).map_err(|e| match e {
        Error::NotPositiveDefinite { index, pivot } => {
            Error::SingularBracket(format!("layer {layer}: pivot {pivot:e} at index {index} (α = {alpha})"))
        }
        other => other,
    })?;
    let w = w0.add(&delta_t.transpose())?;
    if !w.is_finite() {
        return Err(Error::NonFinite(format!("updated weights at layer {layer}")));
    }
    let report = diagnostics(layer, w0, &w, c0, k1, v1, alpha)?;
    Ok((w, report))
}

/// One row of an α sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub edit_residual: f64,
    pub preservation: f64,
}

/// Closed-form solutions of one instance across `alphas`.
pub fn alpha_sweep_instance(
    w0: &Matrix,
    c0: &Matrix,
    k1: &Matrix,
    v1: &Matrix,
    alphas: &[f64],
) -> Result<Vec<AlphaSweepRow>> {
    alphas
        .iter()
        .map(|&a| {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidConfig(format!("α must lie in (0, 1), got {a}")));
            }
            let (_, r) = closed_form_update(0, w0, c0, k1, v1, a)?;
            Ok(AlphaSweepRow { alpha: a, edit_residual: r.edit_residual, preservation: r.preservation })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{lstsq, Rng};

    struct Instance {
        w0: Matrix,
        k0: Matrix,
        k1: Matrix,
        v1: Matrix,
    }

    fn instance(seed: u64, d: usize, f: usize, n: usize, e: usize) -> Instance {
        let mut rng = Rng::new(seed);
        Instance {
            w0: rng.normal_matrix(d, f, 1.0),
            k0: rng.normal_matrix(f, n, 1.0),
            k1: rng.normal_matrix(f, e, 1.0),
            v1: rng.normal_matrix(d, e, 1.0),
        }
    }

    /// Minimizes `(1−α)‖W·K0 − W0·K0‖² + α‖W·K1 − V1‖²` as one stacked least-squares problem.
    fn stacked(inst: &Instance, alpha: f64) -> Matrix {
        let v0 = inst.w0.matmul(&inst.k0).unwrap();
        let a = Matrix::concat_cols(&[&inst.k0.scale((1.0 - alpha).sqrt()), &inst.k1.scale(alpha.sqrt())]);
        let y = Matrix::concat_cols(&[&v0.scale((1.0 - alpha).sqrt()), &inst.v1.scale(alpha.sqrt())]);
        lstsq(&a.transpose(), &y.transpose()).unwrap().transpose()
    }

    #[test]
    fn matches_stacked_least_squares() {
        let inst = instance(1, 6, 8, 12, 2);
        let c0 = inst.k0.matmul_t(&inst.k0).unwrap();
        let (w, r) = closed_form_update(0, &inst.w0, &c0, &inst.k1, &inst.v1, 0.7).unwrap();
        let oracle = stacked(&inst, 0.7);
        let rel = w.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        assert!(rel <= 1e-6, "relative error {rel}");
        assert!(r.stationarity <= 1e-8, "stationarity {}", r.stationarity);
        assert!(r.edit_residual < r.pre_residual);
    }

    #[test]
    fn zero_alpha_and_consistent_edits_are_no_ops() {
        let inst = instance(2, 4, 5, 7, 2);
        let c0 = inst.k0.matmul_t(&inst.k0).unwrap();
        let (w, _) = closed_form_update(0, &inst.w0, &c0, &inst.k1, &inst.v1, 0.0).unwrap();
        assert_eq!(w, inst.w0);
        let v_ok = inst.w0.matmul(&inst.k1).unwrap();
        let (w, r) = closed_form_update(0, &inst.w0, &c0, &inst.k1, &v_ok, 0.5).unwrap();
        assert_eq!(w, inst.w0);
        assert_eq!(r.frob_delta, 0.0);
    }

    #[test]
    fn half_alpha_equals_the_unweighted_form() {
        let inst = instance(3, 6, 8, 12, 3);
        let c0 = inst.k0.matmul_t(&inst.k0).unwrap();
        let (w, _) = closed_form_update(0, &inst.w0, &c0, &inst.k1, &inst.v1, 0.5).unwrap();
        let b = c0.add(&inst.k1.matmul_t(&inst.k1).unwrap()).unwrap();
        let r = inst.v1.sub(&inst.w0.matmul(&inst.k1).unwrap()).unwrap();
        let delta = solve_spd(&b, &inst.k1.matmul_t(&r).unwrap()).unwrap().transpose();
        let direct = inst.w0.add(&delta).unwrap();
        assert!(w.sub(&direct).unwrap().max_abs() <= 1e-10 * (1.0 + direct.max_abs()));
    }

    #[test]
    fn singular_bracket_is_reported() {
        let inst = instance(4, 3, 6, 2, 2);
        let c0 = Matrix::zeros(6, 6);
        let err = closed_form_update(2, &inst.w0, &c0, &inst.k1, &inst.v1, 0.5).unwrap_err();
        assert!(matches!(err, Error::SingularBracket(_)), "{err:?}");
        let err = closed_form_update(0, &inst.w0, &Matrix::zeros(5, 5), &inst.k1, &inst.v1, 0.5).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn sweep_is_monotone() {
        let inst = instance(5, 6, 8, 12, 3);
        let c0 = inst.k0.matmul_t(&inst.k0).unwrap();
        let alphas: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let rows = alpha_sweep_instance(&inst.w0, &c0, &inst.k1, &inst.v1, &alphas).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].edit_residual <= w[0].edit_residual);
            assert!(w[1].preservation >= w[0].preservation);
        }
        assert!(alpha_sweep_instance(&inst.w0, &c0, &inst.k1, &inst.v1, &[1.0]).is_err());
    }
}
