use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tacrl::cli::{self, RunManifest, RunSummary, SweepSpec};
use tacrl::encoders::{ContextKind, EncoderConfig};
use tacrl::env::Regime;
use tacrl::runner::RunConfig;
use tacrl::sac::SacConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tacrl"))
}

fn tiny_config() -> RunConfig {
    RunConfig {
        n_tasks: 2,
        n_dims: 2,
        t_per_task: 500,
        hidden: 16,
        sac: SacConfig { batch_size: 16, ..SacConfig::default() },
        eval_every: Some(250),
        seed: 3,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, config: &RunConfig) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, config.to_json().unwrap()).unwrap();
    p
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = bin()
        .args(["run", "--config", missing.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn malformed_config_reports_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, "{\n  \"n_tasks\": 2,\n  \"n_dims\": ]\n}").unwrap();
    let out = bin().args(["run", "--config", p.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "c.json", &RunConfig { beta: 1.5, ..tiny_config() });
    let code = cli::run_cli(["tacrl", "run", "--config", p.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn run_writes_exactly_four_files_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "c.json", &tiny_config());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let code = cli::run_cli(["tacrl", "run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(code, 0);
    }
    assert_eq!(listing(&a), ["checkpoint.json", "manifest.json", "result.jsonl", "taskset.json"]);
    for f in listing(&a) {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f} differs");
    }
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.schema, cli::MANIFEST_SCHEMA);
    assert_eq!(manifest.seed, 11);
    assert_eq!(manifest.config.seed, 11);
    assert_eq!(manifest.run_id, cli::run_id(&manifest.config));
    assert!(manifest.is_ok());
    let lines: Vec<Value> = std::fs::read_to_string(a.join("result.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for key in ["run_id", "step", "global_return", "current_return", "losses", "grad_std", "q_mean", "h_entropy"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    assert_eq!(lines[3]["step"], 1000);
}

#[test]
fn run_id_depends_on_config_and_seed_only() {
    let c = tiny_config();
    assert_eq!(cli::run_id(&c), cli::run_id(&c.clone()));
    assert_eq!(cli::run_id(&c).len(), 16);
    assert_ne!(cli::run_id(&c), cli::run_id(&RunConfig { seed: 4, ..c.clone() }));
    assert_ne!(cli::run_id(&c), cli::run_id(&RunConfig { hidden: 17, ..c }));
}

#[test]
fn config_round_trips() {
    let c = RunConfig {
        context: ContextKind::Transformer,
        encoder: EncoderConfig { hidden_size: 8, n_heads: 2, ..EncoderConfig::default() },
        sac: SacConfig { grad_clip: Some(1.0), target_entropy: Some(-1.5), ..SacConfig::default() },
        ..tiny_config()
    };
    assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
}

#[test]
fn numeric_blow_up_exits_3_with_step() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        sac: SacConfig { lr: 1e150, batch_size: 16, ..SacConfig::default() },
        warmup_steps: 10,
        burnin_steps: 10,
        ..tiny_config()
    };
    let p = write_config(tmp.path(), "c.json", &config);
    let out = bin().args(["run", "--config", p.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find(|l| l.contains("exit_code")).expect("json error line");
    let json: Value = serde_json::from_str(&line[line.find('{').unwrap()..]).unwrap();
    assert!(json["step"].as_u64().is_some(), "{line}");
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, "failed");
}

fn tiny_sweep(n: usize, seed: u64) -> SweepSpec {
    SweepSpec {
        n_samples: n,
        master_seed: seed,
        methods: ["ER", "3RL", "TaskID"].map(String::from).to_vec(),
        total_timesteps: vec![300],
        n_tasks: vec![2],
        n_dims: vec![2],
        hidden: vec![8],
        batch_size: (2, 16),
        history_length: vec![2],
        context_size: 4,
        evals_per_run: 2,
        ..SweepSpec::default()
    }
}

#[test]
fn sweep_runs_every_sample_and_resamples_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&tiny_sweep(5, 9)).unwrap()).unwrap();
    let out = tmp.path().join("sweep");
    let manifests = cli::cmd_sweep(&spec, &out, 2).unwrap();
    assert_eq!(manifests.len(), 5);
    assert!(manifests.iter().all(|m| m.status == "ok" || m.status == "failed"));
    let dirs: Vec<String> = listing(&out).into_iter().filter(|f| f != "sweep.json").collect();
    assert_eq!(dirs.len(), 5);
    for d in &dirs {
        assert!(out.join(d).join("manifest.json").is_file());
    }
    let again = tiny_sweep(5, 9).sample().unwrap();
    let ids: Vec<String> = again.iter().map(cli::run_id).collect();
    assert_eq!(ids, manifests.iter().map(|m| m.run_id.clone()).collect::<Vec<_>>());
    assert_ne!(tiny_sweep(5, 10).sample().unwrap(), again);
}

#[test]
fn sweep_without_success_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&tiny_sweep(0, 1)).unwrap()).unwrap();
    let code = cli::run_cli(["tacrl", "sweep", "--spec", spec.to_str().unwrap(), "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(code, 4);
}

#[test]
fn sampled_configs_validate_across_the_default_space() {
    let spec = SweepSpec { n_samples: 2000, master_seed: 5, ..SweepSpec::default() };
    let configs = spec.sample().unwrap();
    for c in &configs {
        c.validate().unwrap();
    }
    let kinds: std::collections::BTreeSet<ContextKind> = configs.iter().map(|c| c.context).collect();
    assert_eq!(kinds.len(), 6);
    assert!(configs.iter().any(|c| c.mode == Regime::MultiTask));
}

#[test]
fn sampled_lr_is_log_uniform() {
    let spec = SweepSpec { n_samples: 10_000, master_seed: 21, ..SweepSpec::default() };
    let mut u: Vec<f64> = spec
        .sample()
        .unwrap()
        .iter()
        .map(|c| (c.sac.lr.ln() - 1e-5f64.ln()) / (1e-1f64.ln() - 1e-5f64.ln()))
        .collect();
    u.sort_by(f64::total_cmp);
    assert!(u[0] >= 0.0 && u[u.len() - 1] <= 1.0);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov critical value at the 1% level
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

fn fake_manifest(dir: &Path, name: &str, method: ContextKind, dims: usize, global: f64, extra: f64) {
    let config = RunConfig { context: method, n_dims: dims, seed: name.len() as u64, ..tiny_config() };
    let mut m = RunManifest::new(&config);
    m.run_id = name.to_string();
    m.status = "ok".into();
    m.summary = Some(RunSummary {
        final_global_return: global,
        final_current_return: global,
        grad_std: Some(extra),
        q_instability: Some(1.0),
        h_entropy: None,
        audit_dereferences: 0,
    });
    let d = dir.join(name);
    std::fs::create_dir_all(&d).unwrap();
    std::fs::write(d.join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
}

fn oracle_z(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let s = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    values.iter().map(|v| (v - m) / s).collect()
}

#[test]
fn report_matches_hand_computed_iqm() {
    let tmp = tempfile::tempdir().unwrap();
    let er = [-10.0, -20.0, -30.0, -40.0, -1000.0];
    let rnn = [-5.0, -15.0, -25.0, -35.0, -45.0];
    for (i, v) in er.iter().enumerate() {
        fake_manifest(tmp.path(), &format!("er{i}"), ContextKind::None, 2, *v, 0.0);
    }
    for (i, v) in rnn.iter().enumerate() {
        fake_manifest(tmp.path(), &format!("rnn{i}"), ContextKind::Rnn, 2, *v, 0.0);
    }
    let out = tmp.path().join("report.json");
    let pattern = format!("{}/*", tmp.path().display());
    cli::cmd_report(&pattern, &["n_dims".to_string()], &["iqm".to_string(), "top10".to_string()], &out).unwrap();
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["schema"], cli::REPORT_SCHEMA);

    let all: Vec<f64> = er.iter().chain(&rnn).copied().collect();
    let z = oracle_z(&all);
    // 5 runs: trim one from each end, keep the middle three
    let mid_mean = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        (s[1] + s[2] + s[3]) / 3.0
    };
    let cell = &doc["cells"]["n_dims=2"];
    assert_eq!(cell["n_runs"], 10);
    let got_er = cell["methods"]["ER"]["iqm"].as_f64().unwrap();
    let got_rnn = cell["methods"]["3RL"]["iqm"].as_f64().unwrap();
    assert!((got_er - mid_mean(&z[..5])).abs() < 1e-12);
    assert!((got_rnn - mid_mean(&z[5..])).abs() < 1e-12);
    // top 10% of five runs is the single best
    let best_rnn = z[5..].iter().copied().fold(f64::MIN, f64::max);
    assert!((cell["methods"]["3RL"]["top10"].as_f64().unwrap() - best_rnn).abs() < 1e-12);
    assert!(cell["methods"]["3RL"].get("se2").is_none());

    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "cell,method,n_runs,iqm,top10");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn single_run_cells_are_flagged_degenerate() {
    let tmp = tempfile::tempdir().unwrap();
    fake_manifest(tmp.path(), "a", ContextKind::None, 2, -3.0, 0.0);
    fake_manifest(tmp.path(), "b", ContextKind::None, 4, -7.0, 0.0);
    let out = tmp.path().join("r.json");
    cli::cmd_report(&format!("{}/*", tmp.path().display()), &["n_dims".to_string()], &["iqm".to_string()], &out).unwrap();
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["n_dims=2", "n_dims=4"] {
        assert_eq!(doc["cells"][key]["degenerate"], true);
        assert_eq!(doc["cells"][key]["methods"]["ER"]["iqm"], 0.0);
    }
}

#[test]
fn report_rejects_its_own_output() {
    let tmp = tempfile::tempdir().unwrap();
    fake_manifest(tmp.path(), "a", ContextKind::None, 2, -3.0, 0.0);
    fake_manifest(tmp.path(), "b", ContextKind::Rnn, 2, -1.0, 0.0);
    let out = tmp.path().join("r.json");
    cli::cmd_report(&format!("{}/*", tmp.path().display()), &["n_dims".to_string()], &["iqm".to_string()], &out).unwrap();
    let err = cli::cmd_report(out.to_str().unwrap(), &[], &["iqm".to_string()], &tmp.path().join("r2.json")).unwrap_err();
    assert_eq!(err.code, 2);
    assert!(err.message.contains("schema"));
}

#[test]
fn report_without_inputs_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let code = cli::run_cli([
        "tacrl",
        "report",
        "--in",
        &format!("{}/*.json", tmp.path().display()),
        "--out",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn correlate_recovers_an_indicator_and_keeps_label_order() {
    let tmp = tempfile::tempdir().unwrap();
    for i in 0..6 {
        let kind = if i % 2 == 0 { ContextKind::Rnn } else { ContextKind::None };
        let metric = if kind == ContextKind::Rnn { 1.0 } else { 0.0 };
        fake_manifest(tmp.path(), &format!("r{i}"), kind, 2, -(i as f64), metric);
    }
    let out = tmp.path().join("corr.csv");
    let attrs = ["lr", "has_rnn"].map(String::from);
    let metrics = ["grad_std", "standardized_return", "q_instability"].map(String::from);
    cli::cmd_correlate(&format!("{}/*", tmp.path().display()), &attrs, &metrics, &out).unwrap();
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["attribute", "grad_std", "standardized_return", "q_instability"]);
    assert_eq!(rows[1][0], "lr");
    assert_eq!(rows[2][0], "has_rnn");
    assert!((rows[2][1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    let warn: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("corr.degenerate.json")).unwrap()).unwrap();
    let degenerate: Vec<&str> = warn["degenerate"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(degenerate, ["lr", "q_instability"]);
}

#[test]
fn correlate_needs_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    fake_manifest(tmp.path(), "a", ContextKind::None, 2, -3.0, 0.0);
    let err = cli::cmd_correlate(
        &format!("{}/*", tmp.path().display()),
        &["has_rnn".to_string()],
        &["grad_std".to_string()],
        &tmp.path().join("c.csv"),
    )
    .unwrap_err();
    assert_eq!(err.code, 2);
}

#[test]
fn shuffled_metric_is_nearly_uncorrelated() {
    use rand::seq::SliceRandom;
    let mut rng = tacrl::rng::seeded(8);
    let mut metric: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
    metric.shuffle(&mut rng);
    let records: Vec<tacrl::metrics::RunRecord> = (0..200)
        .map(|i| {
            let mut attributes = BTreeMap::new();
            attributes.insert("has_rnn".to_string(), (i % 2) as f64);
            let mut metrics = BTreeMap::new();
            metrics.insert("m".to_string(), metric[i]);
            tacrl::metrics::RunRecord {
                run_id: i.to_string(),
                method: "x".into(),
                attributes,
                setting: tacrl::metrics::SettingKey { total_timesteps: 1, n_dims: 1, n_tasks: 1, regime: "CL".into() },
                final_metric: 0.0,
                metrics,
            }
        })
        .collect();
    let m = tacrl::metrics::correlation_matrix(&records, &["has_rnn".to_string()], &["m".to_string()]).unwrap();
    assert!(m.get(0, 0).abs() < 0.3, "{}", m.get(0, 0));
}

#[test]
fn dump_hidden_writes_one_line_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        context: ContextKind::Rnn,
        encoder: EncoderConfig { hidden_size: 4, context_size: 3, history_length: 4, ..EncoderConfig::default() },
        t_per_task: 200,
        episode_length: 20,
        ..tiny_config()
    };
    let p = write_config(tmp.path(), "c.json", &config);
    let run_dir = tmp.path().join("run");
    assert_eq!(cli::run_cli(["tacrl", "run", "--config", p.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]), 0);
    let dump = tmp.path().join("z.jsonl");
    let code = cli::run_cli([
        "tacrl",
        "dump-hidden",
        "--config",
        p.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let lines: Vec<Value> = std::fs::read_to_string(&dump).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 20);
    assert_eq!(lines[0]["task"], 0);
    assert_eq!(lines[0]["t"], 0);
    assert_eq!(lines[0]["z"].as_array().unwrap().len(), 3);
    assert!(lines[0]["z"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(lines[25]["task"], 1);
}

#[test]
fn dump_hidden_rejects_a_memoryless_agent() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "c.json", &tiny_config());
    let run_dir = tmp.path().join("run");
    assert_eq!(cli::run_cli(["tacrl", "run", "--config", p.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]), 0);
    let code = cli::run_cli([
        "tacrl",
        "dump-hidden",
        "--config",
        p.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--out",
        tmp.path().join("z.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn log_level_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "c.json", &RunConfig { t_per_task: 100, ..tiny_config() });
    let run = |level: &str| {
        bin()
            .env("TACRL_LOG", level)
            .args(["run", "--config", p.to_str().unwrap(), "--out", tmp.path().join(level).to_str().unwrap()])
            .output()
            .unwrap()
    };
    let quiet = run("error");
    let chatty = run("debug");
    assert_eq!(quiet.status.code(), Some(0));
    assert!(quiet.stderr.is_empty());
    let text = String::from_utf8_lossy(&chatty.stderr);
    assert!(text.contains("INFO") && text.contains("DEBUG"), "{text}");
}
