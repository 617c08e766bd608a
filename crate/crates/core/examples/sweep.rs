//! Random search: samples a small sweep, runs it on two threads and reports
//! IQM per method, the same path the `sweep` and `report` commands take.
//!
//! cargo run --release --example sweep -- [out_dir] [samples]

use std::path::PathBuf;

use tacrl::cli::{cmd_report, cmd_sweep, SweepSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/sweep-example".into()));
    let samples: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let spec = SweepSpec {
        n_samples: samples,
        methods: vec!["ER".into(), "3RL".into(), "TaskID".into()],
        total_timesteps: vec![600],
        n_tasks: vec![2],
        n_dims: vec![2],
        hidden: vec![16, 32],
        buffer_capacity: vec![10_000],
        evals_per_run: 2,
        episode_length: 50,
        ..SweepSpec::default()
    };
    for (i, c) in spec.sample().expect("valid spec").iter().enumerate() {
        println!("sample {i}: {} lr {:.1e} batch {} beta {}", c.context.as_str(), c.sac.lr, c.sac.batch_size, c.beta);
    }
    std::fs::create_dir_all(&out).expect("output directory");
    let spec_path = out.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).expect("json")).expect("write spec");
    let manifests = match cmd_sweep(&spec_path, &out.join("runs"), 2) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("sweep failed: {}", e.message);
            std::process::exit(e.code);
        }
    };
    let ok = manifests.iter().filter(|m| m.is_ok()).count();
    println!("{ok} of {} runs succeeded", manifests.len());
    let report = out.join("report.json");
    let glob = format!("{}/runs/*", out.display());
    if let Err(e) = cmd_report(&glob, &["n_dims".into()], &["iqm".into(), "top10".into()], &report) {
        eprintln!("report failed: {}", e.message);
        std::process::exit(e.code);
    }
    println!("{}", std::fs::read_to_string(&report).expect("report"));
}
