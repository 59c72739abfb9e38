use crate::error::{Error, Result};
use crate::ode::solve::SolutionTrajectory;

/// Cubic Hermite basis `[h00, h10, h01, h11]` at `theta ∈ [0, 1]`.
///
/// The interpolant on `[t_j, t_j + h]` is
/// `h00·z_j + h10·h·f_j + h01·z_{j+1} + h11·h·f_{j+1}`.
pub fn hermite_weights(theta: f64) -> [f64; 4] {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    [
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + theta,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    ]
}

/// Index `j` of the interval `[t_j, t_{j+1})` holding `t`; the final knot
/// maps to the last interval.
pub fn bracket(sol: &SolutionTrajectory, t: f64) -> Result<usize> {
    let (t0, t1) = (sol.t0(), sol.t_end());
    if !(t >= t0 && t <= t1) {
        return Err(Error::Domain(format!(
            "t = {t} outside solution span [{t0}, {t1}]"
        )));
    }
    if sol.t.len() < 2 {
        return Ok(0);
    }
    let j = sol.t.partition_point(|&tk| tk <= t);
    Ok(j.saturating_sub(1).min(sol.t.len() - 2))
}

/// Dense output at `t` from knot states and knot derivatives.
pub fn interpolate(sol: &SolutionTrajectory, t: f64) -> Result<Vec<f64>> {
    let j = bracket(sol, t)?;
    if sol.t.len() < 2 {
        return Ok(sol.z[j].clone());
    }
    Ok(hermite_segment(
        (sol.t[j], &sol.z[j], &sol.f_knots[j]),
        (sol.t[j + 1], &sol.z[j + 1], &sol.f_knots[j + 1]),
        t,
    ))
}

/// Cubic Hermite interpolant of one step, given `(t, z, f)` at both ends.
/// Knot times return the knot state exactly.
pub fn hermite_segment(a: (f64, &[f64], &[f64]), b: (f64, &[f64], &[f64]), t: f64) -> Vec<f64> {
    let (ta, za, fa) = a;
    let (tb, zb, fb) = b;
    if t == ta {
        return za.to_vec();
    }
    if t == tb {
        return zb.to_vec();
    }
    let h = tb - ta;
    let w = hermite_weights((t - ta) / h);
    (0..za.len())
        .map(|i| w[0] * za[i] + w[1] * h * fa[i] + w[2] * zb[i] + w[3] * h * fb[i])
        .collect()
}
