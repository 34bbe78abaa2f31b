use std::process::Command;

fn diffobs(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_diffobs")).args(args).output().unwrap()
}

#[test]
fn simulate_observe_qv_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    let o = dir.path().join("o.csv");
    let out = diffobs(&["--seed", "5", "--out", p.to_str().unwrap(), "simulate", "--bm-dim", "1", "--t-end", "0.2", "--dt", "1e-4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = diffobs(&["--out", o.to_str().unwrap(), "observe", "--map", r#"{"name":"identity","dim":1}"#, "--domain", "-10,10", "--path", p.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = diffobs(&["qv", "--input", o.to_str().unwrap(), "--window", "0.05", "--at", "0.1"]);
    assert!(out.status.success());
    let rate: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((rate - 1.0).abs() < 0.5, "{rate}");
}

#[test]
fn reconstruct_from_state() {
    let out = diffobs(&["reconstruct", "--a", "1,-2", "--state", "0.5,-0.3", "--terms", "80"]);
    assert!(out.status.success());
    let x: Vec<f64> = serde_json::from_slice(&out.stdout).unwrap();
    assert!((x[0] - 0.5).abs() < 1e-8 && (x[1] + 0.3).abs() < 1e-8);
}

#[test]
fn exit_codes() {
    let bad = diffobs(&["simulate", "--sde", r#"{"x0":1,"t_end":1,"typo":0}"#, "--dt", "1e-3"]);
    assert_eq!(bad.status.code(), Some(2));
    let inadmissible = diffobs(&["reconstruct", "--a", "1,1", "--state", "0,0"]);
    assert_eq!(inadmissible.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"experiment":"E1_tracker_convergence","map":{"name":"piecewise_poly","coeffs":[0,0,1,0.5],"criticals":[-1.3333333333333333,0],"domain":[-4,8]},
            "sde":{"x0":3.0,"t_end":0.01},"dt":[1e-3],"seeds":{"count":2,"master":1},"estimator":{"max_redraws":2}}"#,
    )
    .unwrap();
    let run = diffobs(&["--quiet", "--out", dir.path().join("o").to_str().unwrap(), "experiment", "run", cfg.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(4));
    let table = diffobs(&["experiment", "table", dir.path().join("o/summary.json").to_str().unwrap()]);
    assert!(table.status.success());
    assert!(String::from_utf8(table.stdout).unwrap().starts_with("dt,median_error"));
}
