// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks for analytic gradients.

use crate::error::Result;

/// Relative tolerance for analytic vs numeric gradients.
pub const REL_TOL: f64 = 1e-3;

/// Below this magnitude both gradients are treated as zero-ish and compared absolutely.
const ABS_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Finite-difference step for a parameter group: `1e-3 · scale`, where
/// scale is the group's RMS (floored so zero-initialised groups still move).
pub fn step_for(values: &[f64]) -> f64 {
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64).sqrt();
    1e-3 * rms.max(1e-2)
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CoordCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < REL_TOL
    }
}

/// Compares `analytic[c]` with `(L(x + h e_c) − L(x − h e_c)) / 2h` for each
/// sampled coordinate `c`. `values` is restored before returning.
pub fn check_coordinates<F>(
    values: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    mut loss: F,
) -> Result<CoordCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let h = step_for(values);
    let mut report = CoordCheck {
        checked: 0,
        worst_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &c in coords {
        let orig = values[c];
        values[c] = orig + h;
        let plus = loss(values)?;
        values[c] = orig - h;
        let minus = loss(values)?;
        values[c] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[c], numeric);
        if err >= report.worst_rel_err {
            report.worst_rel_err = err;
            report.worst_index = c;
            report.worst_analytic = analytic[c];
            report.worst_numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
