//! KL-ball worst-case expectations and rectangular robust dynamic
//! programming.

use ndarray::{s, Array2, Array3};

use crate::dp::{argmax, check_init, ValueTables};
use crate::error::{Error, Result};
use crate::model::{InitDist, Policy, RobustSpec, PROB_TOL, SUPPORT_FLOOR};

/// Lower end of the dual-variable search interval.
pub const LAMBDA_FLOOR: f64 = 1e-12;
/// Absolute tolerance on the dual variable.
pub const LAMBDA_TOL: f64 = 1e-9;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// `inf { q·V : KL(q‖p) ≤ σ }` through the scalar dual
/// `sup_{λ≥0} −λ log E_p[exp(−V/λ)] − λσ`.
///
/// The dual is concave in `λ`; it is maximized by golden-section search
/// over `[1e-12, max(V)/σ]` and compared against its `λ → 0` limit, the
/// essential infimum of `V` under `p`. The larger of the two is returned.
pub fn kl_dual_inf(values: &[f64], p: &[f64], sigma: f64) -> Result<f64> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::param("sigma", format!("KL radius must be positive, got {sigma}")));
    }
    if values.len() != p.len() || p.is_empty() {
        return Err(Error::shape("value vector and distribution differ in length"));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (total - 1.0).abs() > PROB_TOL {
        return Err(Error::input("nominal distribution is not a probability vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("values must be finite"));
    }

    let support: Vec<(f64, f64)> = p
        .iter()
        .zip(values)
        .filter(|(pi, _)| **pi > SUPPORT_FLOOR)
        .map(|(pi, v)| (*pi, *v))
        .collect();
    let mass: f64 = support.iter().map(|(pi, _)| pi).sum();
    let essinf = support.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let vmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let upper = vmax / sigma;
    if upper.is_nan() || upper <= LAMBDA_FLOOR || support.iter().all(|(_, v)| *v == essinf) {
        return Ok(essinf);
    }

    // Shifted by the essinf, so every exponent is ≤ 0 and nothing underflows
    // to an all-zero sum: the essinf coordinate contributes exp(0) = 1.
    let dual = |lambda: f64| -> f64 {
        let s: f64 = support
            .iter()
            .map(|(pi, v)| pi / mass * (-(v - essinf) / lambda).exp_m1())
            .sum();
        essinf - lambda * s.ln_1p() - lambda * sigma
    };

    let (mut a, mut b) = (LAMBDA_FLOOR, upper);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (dual(c), dual(d));
    while (b - a).abs() > LAMBDA_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = dual(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = dual(d);
        }
    }
    let interior = dual(0.5 * (a + b)).max(fc).max(fd);
    let nominal: f64 = support.iter().map(|(pi, v)| pi / mass * v).sum();
    Ok(interior.max(essinf).min(nominal))
}

/// Robust Bellman recursion for a fixed policy.
pub fn robust_policy_values(spec: &RobustSpec, policy: &Policy) -> Result<ValueTables> {
    let mdp = spec.nominal();
    let d = mdp.dims();
    let probs = policy.check_shape(d)?;
    let mut v = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    for h in (0..d.horizon).rev() {
        let next = v.row(h + 1).to_vec();
        for st in 0..d.states {
            let mut acc = 0.0;
            for a in 0..d.actions {
                let w = probs[[h, st, a]];
                let row = mdp.transitions().slice(s![h, st, a, ..]).to_vec();
                let qa = mdp.reward(h, st, a) + kl_dual_inf(&next, &row, spec.sigma())?;
                q[[h, st, a]] = qa;
                acc += w * qa;
            }
            v[[h, st]] = acc;
        }
    }
    Ok(ValueTables { v, q })
}

/// `V^{π,R}_1(ξ)`: worst case over the rectangular KL uncertainty set.
pub fn robust_policy_value(spec: &RobustSpec, policy: &Policy, xi: &InitDist) -> Result<f64> {
    check_init(spec.nominal(), xi)?;
    Ok(robust_policy_values(spec, policy)?.initial_value(xi))
}

/// Greedy robust backward induction; deterministic, lowest-index ties.
pub fn robust_optimal_policy(spec: &RobustSpec) -> Result<(Policy, ValueTables)> {
    let mdp = spec.nominal();
    let d = mdp.dims();
    let mut v = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    let mut actions = Array2::zeros((d.horizon, d.states));
    for h in (0..d.horizon).rev() {
        let next = v.row(h + 1).to_vec();
        for st in 0..d.states {
            for a in 0..d.actions {
                let row = mdp.transitions().slice(s![h, st, a, ..]).to_vec();
                q[[h, st, a]] = mdp.reward(h, st, a) + kl_dual_inf(&next, &row, spec.sigma())?;
            }
            let best = argmax(q.slice(s![h, st, ..]).iter().copied());
            actions[[h, st]] = best;
            v[[h, st]] = q[[h, st, best]];
        }
    }
    Ok((Policy::deterministic(actions), ValueTables { v, q }))
}
