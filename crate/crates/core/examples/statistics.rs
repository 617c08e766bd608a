//! Aggregate statistics used by the report: per-setting standardization,
//! interquartile mean, top-10% mean, standard-error bands and Spearman
//! correlation, on synthetic run records.
//!
//! cargo run --example statistics

use std::collections::BTreeMap;

use rand::Rng;
use tacrl::metrics::{self, RunRecord, SettingKey};
use tacrl::rng::seeded;

fn main() -> tacrl::Result<()> {
    let mut rng = seeded(1);
    let mut records = Vec::new();
    for (i, d) in [2usize, 4, 8].iter().cycle().take(60).enumerate() {
        let uses_history = i % 2 == 0;
        let scale = 10f64.powi(*d as i32 / 2);
        let skill = if uses_history { 0.2 } else { 0.0 } * *d as f64;
        let ret = -scale * (1.0 + rng.random::<f64>() - skill.min(0.9));
        let mut attributes = BTreeMap::new();
        attributes.insert("has_history".to_string(), uses_history as u8 as f64);
        attributes.insert("lr".to_string(), 10f64.powf(rng.random_range(-5.0..-1.0)));
        records.push(RunRecord {
            run_id: format!("run{i}"),
            method: if uses_history { "3RL" } else { "ER" }.into(),
            attributes,
            setting: SettingKey { total_timesteps: 4000, n_dims: *d, n_tasks: 4, regime: "CL".into() },
            final_metric: ret,
            metrics: BTreeMap::new(),
        });
    }

    let group_by = vec!["n_dims".to_string()];
    let (z, cells) = metrics::standardize(&records, &group_by)?;
    for cell in &cells {
        for method in ["ER", "3RL"] {
            let zs: Vec<f64> = cell.members.iter().filter(|&&i| records[i].method == method).map(|&i| z[i]).collect();
            let (mean, band) = metrics::standard_error_band(&zs)?;
            println!(
                "{:<10} {method:<4} iqm {:+.3}  top10 {:+.3}  mean {mean:+.3} ± {band:.3}",
                cell.key,
                metrics::iqm(&zs)?,
                metrics::top_k_mean(&zs, 0.1)?
            );
        }
    }

    for (r, v) in records.iter_mut().zip(&z) {
        r.metrics.insert("standardized_return".into(), *v);
    }
    let m = metrics::correlation_matrix(&records, &["has_history".into(), "lr".into()], &["standardized_return".into()])?;
    print!("{}", m.to_csv());
    Ok(())
}
