//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

/// Denominator floor for the relative error, so that gradients near zero are
/// compared on an absolute scale instead of amplifying rounding noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub per_param: Vec<ParamError>,
    pub tolerance: f64,
    pub pass: bool,
    pub diagnostic: Option<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic[i]` against central differences of `loss` over `inputs[i]`.
/// The step for each element is `1e-5 * max(1, |x|)`.
pub fn grad_check<F>(
    op: &str,
    inputs: &[(String, Vec<f64>)],
    analytic: &[Vec<f64>],
    loss: F,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let fail = |msg: String| GradCheckReport {
        op: op.to_string(),
        per_param: Vec::new(),
        tolerance,
        pass: false,
        diagnostic: Some(msg),
    };
    if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(a, (_, x))| a.len() != x.len()) {
        return fail("analytic gradient layout does not match inputs".to_string());
    }
    if let Some((name, _)) = inputs.iter().zip(analytic).find(|(_, a)| a.iter().any(|g| !g.is_finite())).map(|(i, _)| i)
    {
        return fail(format!("non-finite analytic gradient for {name}"));
    }

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut per_param = Vec::with_capacity(inputs.len());
    let mut diagnostic = None;
    for (p, (name, _)) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..values[p].len() {
            let x = values[p][i];
            let h = 1e-5 * x.abs().max(1.0);
            values[p][i] = x + h;
            let plus = loss(&values);
            values[p][i] = x - h;
            let minus = loss(&values);
            values[p][i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                diagnostic.get_or_insert_with(|| format!("non-finite numeric gradient for {name}[{i}]"));
                worst = f64::INFINITY;
                continue;
            }
            worst = worst.max(relative_error(analytic[p][i], numeric));
        }
        per_param.push(ParamError { name: name.clone(), max_relative_error: worst });
    }
    let pass = diagnostic.is_none() && per_param.iter().all(|e| e.max_relative_error <= tolerance);
    GradCheckReport { op: op.to_string(), per_param, tolerance, pass, diagnostic }
}
