//! Run-level statistics: robust aggregates (IQM, top-k mean), per-setting
//! standardization, standard-error bands, Spearman correlation, and the
//! training diagnostics (gradient conflict, Q instability, update entropy).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Interquartile mean: drop `floor(N/4)` values from each end, average the rest.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("IQM of an empty list"));
    }
    let v = sorted(values);
    let trim = v.len() / 4;
    Ok(mean(&v[trim..v.len() - trim]))
}

/// Mean of the `ceil(k·N)` largest values.
pub fn top_k_mean(values: &[f64], k: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("top-k mean of an empty list"));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::invalid(format!("fraction {k} outside (0, 1]")));
    }
    let v = sorted(values);
    let n = ((k * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(mean(&v[v.len() - n..]))
}

/// `(mean, 2·s/√N)` with the sample standard deviation `s`.
pub fn standard_error_band(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid("standard error needs at least two values"));
    }
    let m = mean(values);
    let n = values.len() as f64;
    let s = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok((m, 2.0 * s / n.sqrt()))
}

/// Z-scores with the population standard deviation. A cell without spread
/// maps to all zeros; the flag reports that case.
pub fn standardize_values(values: &[f64]) -> (Vec<f64>, bool) {
    if values.len() < 2 {
        return (vec![0.0; values.len()], true);
    }
    let m = mean(values);
    let s = population_std(values);
    if !(s > 0.0) {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - m) / s).collect(), false)
}

/// Coordinates of the experimental setting a run belongs to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SettingKey {
    pub total_timesteps: u64,
    pub n_dims: usize,
    pub n_tasks: usize,
    pub regime: String,
}

impl SettingKey {
    /// Key restricted to the named coordinates, e.g. `["n_dims", "regime"]`.
    pub fn project(&self, fields: &[String]) -> Result<String> {
        let parts = fields
            .iter()
            .map(|f| {
                Ok(match f.as_str() {
                    "total_timesteps" => format!("total_timesteps={}", self.total_timesteps),
                    "n_dims" => format!("n_dims={}", self.n_dims),
                    "n_tasks" => format!("n_tasks={}", self.n_tasks),
                    "regime" => format!("regime={}", self.regime),
                    other => return Err(Error::invalid(format!("unknown setting coordinate {other}"))),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(if parts.is_empty() { "all".to_string() } else { parts.join(",") })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    /// Method indicators (0/1) and other numeric attributes.
    pub attributes: BTreeMap<String, f64>,
    pub setting: SettingKey,
    pub final_metric: f64,
    /// Further scalar metrics, e.g. gradient conflict or Q instability.
    pub metrics: BTreeMap<String, f64>,
}

/// A group of runs sharing a setting key.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingCell {
    pub key: String,
    pub members: Vec<usize>,
    pub degenerate: bool,
}

/// Replaces each run's `final_metric` with its z-score inside its cell.
/// Returns the z-scores (aligned with `records`) and the cells.
pub fn standardize(records: &[RunRecord], group_by: &[String]) -> Result<(Vec<f64>, Vec<SettingCell>)> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.setting.project(group_by)?).or_default().push(i);
    }
    let mut z = vec![0.0; records.len()];
    let mut cells = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let vals: Vec<f64> = members.iter().map(|&i| records[i].final_metric).collect();
        let (zs, degenerate) = standardize_values(&vals);
        for (&i, v) in members.iter().zip(zs) {
            z[i] = v;
        }
        cells.push(SettingCell { key, members, degenerate });
    }
    Ok((z, cells))
}

/// Fractional ranks (1-based), ties share the average of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation; `None` when either side has no variation.
pub fn spearman_checked(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    Ok(pearson(&fractional_ranks(x), &fractional_ranks(y)))
}

/// Spearman correlation; a constant input yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(spearman_checked(x, y)?.unwrap_or(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub attributes: Vec<String>,
    pub metrics: Vec<String>,
    /// Row-major, one row per attribute.
    pub values: Vec<f64>,
    /// Columns (attributes or metrics) that never vary.
    pub degenerate: Vec<String>,
}

impl CorrelationMatrix {
    pub fn get(&self, attr: usize, metric: usize) -> f64 {
        self.values[attr * self.metrics.len() + metric]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("attribute");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for (i, a) in self.attributes.iter().enumerate() {
            out.push_str(a);
            for j in 0..self.metrics.len() {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

fn column(records: &[RunRecord], name: &str) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.attributes
                .get(name)
                .or_else(|| r.metrics.get(name))
                .copied()
                .or_else(|| (name == "final_metric").then_some(r.final_metric))
                .ok_or_else(|| Error::invalid(format!("run {} has no column {name}", r.run_id)))
        })
        .collect()
}

/// Spearman correlation of every attribute against every metric.
pub fn correlation_matrix(records: &[RunRecord], attributes: &[String], metrics: &[String]) -> Result<CorrelationMatrix> {
    if records.len() < 2 {
        return Err(Error::invalid("correlation needs at least two runs"));
    }
    let attr_cols = attributes.iter().map(|a| column(records, a)).collect::<Result<Vec<_>>>()?;
    let metric_cols = metrics.iter().map(|m| column(records, m)).collect::<Result<Vec<_>>>()?;
    let constant = |c: &[f64]| c.iter().all(|v| *v == c[0]);
    let mut degenerate = Vec::new();
    for (name, col) in attributes.iter().zip(&attr_cols).chain(metrics.iter().zip(&metric_cols)) {
        if constant(col) && !degenerate.contains(name) {
            degenerate.push(name.clone());
        }
    }
    let mut values = Vec::with_capacity(attributes.len() * metrics.len());
    for a in &attr_cols {
        for m in &metric_cols {
            values.push(spearman(a, m)?);
        }
    }
    Ok(CorrelationMatrix { attributes: attributes.to_vec(), metrics: metrics.to_vec(), values, degenerate })
}

/// Mean over parameter coordinates of the population standard deviation of
/// per-sample gradients.
pub fn grad_conflict_std(per_sample: &[Vec<f64>]) -> Result<f64> {
    if per_sample.len() < 2 {
        return Err(Error::invalid("gradient conflict needs at least two samples"));
    }
    let p = per_sample[0].len();
    if p == 0 || per_sample.iter().any(|g| g.len() != p) {
        return Err(Error::invalid("per-sample gradients must be non-empty and equally long"));
    }
    let n = per_sample.len() as f64;
    let mut total = 0.0;
    for j in 0..p {
        let pivot = per_sample[0][j];
        let m = per_sample.iter().map(|g| g[j] - pivot).sum::<f64>() / n;
        let var = per_sample.iter().map(|g| (g[j] - pivot - m).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    Ok(total / p as f64)
}

/// Population standard deviation of a per-update mean-Q series.
pub fn q_instability(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::invalid("Q instability needs at least two entries"));
    }
    Ok(population_std(series))
}

/// Entropy of the normalized absolute parameter change between two snapshots.
pub fn param_update_entropy(prev: &[f64], next: &[f64]) -> Result<f64> {
    if prev.len() != next.len() {
        return Err(Error::invalid("parameter snapshots differ in length"));
    }
    let delta: Vec<f64> = prev.iter().zip(next).map(|(a, b)| (b - a).abs()).collect();
    let total: f64 = delta.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("parameters did not change; update entropy is undefined"));
    }
    Ok(-delta
        .iter()
        .filter(|d| **d > 0.0)
        .map(|d| {
            let p = d / total;
            p * p.ln()
        })
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> Vec<f64> {
        (1..=n).map(|v| v as f64).collect()
    }

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&seq(8)).unwrap(), 4.5);
        assert_eq!(iqm(&[5.0]).unwrap(), 5.0);
        assert_eq!(iqm(&[2.0; 7]).unwrap(), 2.0);
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_mean(&seq(10), 0.1).unwrap(), 10.0);
        assert_eq!(top_k_mean(&seq(10), 0.2).unwrap(), 9.5);
        assert_eq!(top_k_mean(&[3.0], 0.1).unwrap(), 3.0);
        assert!(top_k_mean(&[], 0.1).is_err());
    }

    #[test]
    fn standardize_examples() {
        let (z, deg) = standardize_values(&[1.0, 2.0, 3.0]);
        assert!(!deg);
        let k = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z[0] + k).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - k).abs() < 1e-12);
        assert!((z[2] - 1.2247).abs() < 1e-4);
        assert_eq!(standardize_values(&[4.0, 4.0, 4.0]), (vec![0.0; 3], true));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(fractional_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn conflict_examples() {
        assert_eq!(grad_conflict_std(&[vec![1.0], vec![-1.0]]).unwrap(), 1.0);
        assert_eq!(grad_conflict_std(&[vec![0.3, 2.0], vec![0.3, 2.0]]).unwrap(), 0.0);
        // coordinate stds 1 and 3
        assert_eq!(grad_conflict_std(&[vec![1.0, 3.0], vec![-1.0, -3.0]]).unwrap(), 2.0);
        assert!(grad_conflict_std(&[vec![1.0]]).is_err());
    }

    #[test]
    fn q_instability_examples() {
        assert_eq!(q_instability(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert_eq!(q_instability(&[0.0, 2.0]).unwrap(), 1.0);
        let s = [0.5, -1.0, 4.0];
        let scaled: Vec<f64> = s.iter().map(|v| -3.0 * v).collect();
        assert!((q_instability(&scaled).unwrap() - 3.0 * q_instability(&s).unwrap()).abs() < 1e-12);
        assert!(q_instability(&[1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h = param_update_entropy(&[0.0; 4], &[0.1, -0.1, 0.1, -0.1]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert_eq!(param_update_entropy(&[0.0, 0.0, 0.0], &[0.0, 2.0, 0.0]).unwrap(), 0.0);
        let a = param_update_entropy(&[0.0; 3], &[0.1, 0.2, 0.3]).unwrap();
        let b = param_update_entropy(&[0.0; 3], &[10.0, 20.0, 30.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(param_update_entropy(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn band_examples() {
        assert_eq!(standard_error_band(&[1.0; 4]).unwrap(), (1.0, 0.0));
        let (m, hw) = standard_error_band(&[0.0, 2.0]).unwrap();
        assert_eq!(m, 1.0);
        assert!((hw - 2.0).abs() < 1e-12);
        assert!(standard_error_band(&[1.0]).is_err());
    }

    #[test]
    fn setting_projection() {
        let k = SettingKey { total_timesteps: 2000, n_dims: 4, n_tasks: 8, regime: "CL".into() };
        assert_eq!(k.project(&["n_dims".into(), "regime".into()]).unwrap(), "n_dims=4,regime=CL");
        assert!(k.project(&["bogus".into()]).is_err());
    }
}
