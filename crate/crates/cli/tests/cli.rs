use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = r#"
resolution = 256
horizon = 0.5
dt = 1e-2
particles = 20000
seed = 11
"#;

/// SMALL with top-level keys replaced by those in `extra`.
fn small(extra: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().take_while(|l| !l.starts_with('[')).map(key).collect();
    let mut out: String = SMALL
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    out.push_str(extra);
    out.push('\n');
    out
}

fn entroflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entroflow"))
        .current_dir(dir)
        .env_remove("ENTROFLOW_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(dir: &TempDir, cmd: &str, cfg: &Path, out: &str) -> (Output, PathBuf) {
    let out_dir = dir.path().join(out);
    let o = entroflow(
        dir.path(),
        &[
            cmd,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
    );
    (o, out_dir)
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn forward_writes_artifacts_with_checksums() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "ou.toml", SMALL);
    let (o, out) = run(&tmp, "forward", &cfg, "fwd");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["density.csv", "entropy.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let m = manifest(&out);
    assert_eq!(m["command"], "forward");
    assert_eq!(m["passed"], true);
    assert_eq!(m["config"]["seed"], 11);
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    for f in files {
        let bytes = std::fs::read(out.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    let density = std::fs::read_to_string(out.join("density.csv")).unwrap();
    assert!(density.starts_with("t,x,p\n"));
    // 51 stored slices thinned to every 10th: t = 0, 0.1, ..., 0.5
    assert_eq!(density.lines().count(), 1 + 6 * 256);
}

#[test]
fn stationary_start_has_zero_entropy() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "q.toml", &small("initial = { kind = \"gibbs\" }\n"));
    let (o, out) = run(&tmp, "forward", &cfg, "q");
    assert!(o.status.success(), "{}", stderr(&o));
    let h = column(&std::fs::read_to_string(out.join("entropy.csv")).unwrap(), "H");
    assert_eq!(h.len(), 51);
    assert!(h.iter().all(|v| v.abs() <= 1e-8), "{h:?}");
}

#[test]
fn malformed_config_exits_2_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "bad.toml", "resolution = 256\nhorizn = 0.5\n");
    let (o, out) = run(&tmp, "forward", &cfg, "bad");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizn"), "{}", stderr(&o));
    assert!(!out.exists());

    let cfg = config(&tmp, "bad2.toml", "[tolerances]\ntv = -1.0\n");
    let (o, _) = run(&tmp, "forward", &cfg, "bad2");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tolerances.tv"), "{}", stderr(&o));

    let cfg = config(
        &tmp,
        "bad3.toml",
        "potential = { name = \"double_well\", params = [-1.0] }\n",
    );
    let (o, _) = run(&tmp, "forward", &cfg, "bad3");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn json_config_is_accepted() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        &tmp,
        "ou.json",
        r#"{"resolution": 128, "horizon": 0.2, "dt": 0.01, "stages": 2}"#,
    );
    let (o, out) = run(&tmp, "iterate", &cfg, "json");
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
}

#[test]
fn iterate_trace_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "k6.toml", &small("stages = 6\n"));
    let (o, out) = run(&tmp, "iterate", &cfg, "k6");
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,direction,H,tv,cost,se\n"));
    let h = column(&trace, "H");
    assert_eq!(h.len(), 6);
    assert!(h.windows(2).all(|w| w[1] < w[0]));
    let dirs: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(
        dirs,
        ["backward", "forward", "backward", "forward", "backward", "forward"]
    );

    let cfg = config(&tmp, "k1.toml", &small("stages = 1\n"));
    let (o, out) = run(&tmp, "iterate", &cfg, "k1");
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(),
        2
    );

    let cfg = config(
        &tmp,
        "stop.toml",
        &small("stages = 20\nstop_below = 1e-6\nhorizon = 2.0\n"),
    );
    let (o, out) = run(&tmp, "iterate", &cfg, "stop");
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(out.join("trace.csv")).unwrap().lines().count() - 1;
    assert!(rows < 20);
    let notes = manifest(&out)["notes"].to_string();
    assert!(notes.contains("stopped early"), "{notes}");
}

#[test]
fn iterate_verifies_stage_costs() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "mc.toml", &small("stages = 2\nverify_stages = [1, 2]\n"));
    let (o, out) = run(&tmp, "iterate", &cfg, "mc");
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let cost = column(&trace, "cost");
    let h = column(&trace, "H");
    let se = column(&trace, "se");
    for k in 0..2 {
        assert!((cost[k] - h[k]).abs() <= (0.01 * h[k]).max(3.0 * se[k]), "{trace}");
    }
}

#[test]
fn verify_control_reports_costs() {
    let tmp = TempDir::new().unwrap();
    let body = small(
        "policies = [{ kind = \"optimal\" }, { kind = \"constant\", c = 0.5 }, { kind = \"sine\", amplitude = 0.3 }]",
    );
    let cfg = config(&tmp, "vc.toml", &body);
    let (o, out) = run(&tmp, "verify-control", &cfg, "vc");
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("score_optimal") && stdout.contains("lambda_optimal"));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("costs.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let opt = &rows[0];
    assert!((opt["total"].as_f64().unwrap() - 0.3952).abs() <= 0.004f64.max(3.0 * opt["std_error"].as_f64().unwrap()));
    for r in rows
        .iter()
        .filter(|r| !r["policy"].as_str().unwrap().ends_with("_optimal"))
    {
        let slack = 3.0 * r["std_error"].as_f64().unwrap();
        assert!(r["gap"].as_f64().unwrap() > -slack);
        assert_eq!(r["pass"], true);
    }
}

#[test]
fn verify_control_at_stationarity() {
    let tmp = TempDir::new().unwrap();
    let body = small(
        "initial = { kind = \"gibbs\" }\nparticles = 5000\npolicies = [{ kind = \"optimal\" }, { kind = \"zero\" }]",
    );
    let cfg = config(&tmp, "st.toml", &body);
    let (o, out) = run(&tmp, "verify-control", &cfg, "st");
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("costs.json")).unwrap()).unwrap();
    for r in rows.as_array().unwrap() {
        assert!(r["total"].as_f64().unwrap().abs() <= 1e-6, "{r}");
    }
}

#[test]
fn failed_check_exits_4() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        &tmp,
        "strict.toml",
        &small("particles = 500\n[tolerances]\ntv = 1e-6\n"),
    );
    let (o, out) = run(&tmp, "reverse", &cfg, "strict");
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert_eq!(manifest(&out)["passed"], false);
}

#[test]
fn unwritable_output_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "ou.toml", SMALL);
    std::fs::write(tmp.path().join("taken"), "").unwrap();
    let (o, _) = run(&tmp, "forward", &cfg, "taken");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(&tmp, "ou.toml", SMALL);
    let target = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_entroflow"))
        .current_dir(tmp.path())
        .env("ENTROFLOW_OUT", &target)
        .args(["ergodic", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("ergodic.json").is_file());
}

#[test]
fn outputs_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        &tmp,
        "ou.toml",
        &small("particles = 4000\nforward_ensemble = true\n[tolerances]\ntv = 0.1"),
    );
    for cmd in ["forward", "reverse", "verify-control"] {
        let (a, da) = run(&tmp, cmd, &cfg, &format!("{cmd}-a"));
        let db = tmp.path().join(format!("{cmd}-b"));
        let b = entroflow(
            tmp.path(),
            &[
                cmd,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                db.to_str().unwrap(),
                "--threads",
                "2",
            ],
        );
        assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
        let (ma, mb) = (manifest(&da), manifest(&db));
        assert_eq!(ma["files"], mb["files"], "{cmd}");
        for f in ma["files"].as_array().unwrap() {
            let name = f["name"].as_str().unwrap();
            assert_eq!(
                std::fs::read(da.join(name)).unwrap(),
                std::fs::read(db.join(name)).unwrap(),
                "{cmd}/{name}"
            );
        }
    }
    let (a, _) = run(&tmp, "forward", &cfg, "seeded");
    assert!(a.status.success());
    let c = entroflow(
        tmp.path(),
        &[
            "reverse",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "reseeded",
            "--seed",
            "12",
        ],
    );
    assert!(c.status.success());
    assert_ne!(
        std::fs::read(tmp.path().join("reverse-a/ensembles.json")).unwrap(),
        std::fs::read(tmp.path().join("reseeded/ensembles.json")).unwrap()
    );
}
