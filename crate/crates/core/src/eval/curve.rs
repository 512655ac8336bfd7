use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ApReport;
use crate::error::{Error, Result};

/// Per-class AP over training iterations, normalized by the last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationCurve {
    pub iterations: Vec<usize>,
    pub per_class: BTreeMap<usize, Vec<f64>>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Classes dropped because their final AP is zero.
    pub excluded: Vec<usize>,
}

/// `series` holds `(iteration, report)` pairs in training order; the last
/// one is taken as converged.
pub fn adaptation_curve(series: &[(usize, ApReport)], classes: &[usize]) -> Result<AdaptationCurve> {
    let Some((_, last)) = series.last() else {
        return Err(Error::Config("an adaptation curve needs at least one checkpoint".into()));
    };
    if series.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Config("checkpoint iterations must increase".into()));
    }
    let ap = |r: &ApReport, c: usize| r.per_class.get(&c).map_or(0.0, |a| a.ap);
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for &c in classes {
        let converged = ap(last, c);
        if converged <= 0.0 {
            log::warn!("class {c} has zero converged AP and is left out of the curve");
            excluded.push(c);
            continue;
        }
        per_class.insert(c, series.iter().map(|(_, r)| ap(r, c) / converged).collect::<Vec<f64>>());
    }
    let n = series.len();
    let k = per_class.len() as f64;
    let mut mean = vec![0.0; n];
    let mut variance = vec![0.0; n];
    if !per_class.is_empty() {
        for t in 0..n {
            let m = per_class.values().map(|v| v[t]).sum::<f64>() / k;
            mean[t] = m;
            variance[t] = per_class.values().map(|v| (v[t] - m).powi(2)).sum::<f64>() / k;
        }
    }
    Ok(AdaptationCurve {
        iterations: series.iter().map(|(i, _)| *i).collect(),
        per_class,
        mean,
        variance,
        excluded,
    })
}
