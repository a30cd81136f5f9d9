use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simulate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulate"))
        .args(args)
        .env("COTDMA_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const SHORT: &str = "scenario = \"RTMG\"\nsim_time_us = 400000\nwarmup_us = 50000\n";

#[test]
fn csv_sweep_over_levels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("out");
    let o = simulate(&[
        "--config",
        &cfg,
        "--vc-stas",
        "2..=3",
        "--seeds",
        "0..2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("scenario,system,vc_stas,group,metric,mean,ci_low,ci_high,n_iter")
    );
    for sys in ["coordinated", "uncoordinated"] {
        for n in [2, 3] {
            assert!(
                csv.contains(&format!("RTMG,{sys},{n},co_ll,p95_latency_us,")),
                "{sys} {n}"
            );
        }
    }
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",2")));
}

#[test]
fn single_system_json_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = simulate(&[
        "--scenario",
        "vr",
        "--system",
        "coordinated",
        "--seeds",
        "4",
        "--sim-time-us",
        "400000",
        "--format",
        "json",
        "--trace",
        "frames",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = fs::read_to_string(out.join("results.json")).unwrap();
    assert!(json.contains("\"system\": \"coordinated\""));
    assert!(!json.contains("uncoordinated"));
    let trace = fs::read_to_string(out.join("trace_vr_coordinated_n2_seed4_frames.csv")).unwrap();
    assert_eq!(
        trace.lines().next(),
        Some("time_us,device,event,ac,n_mpdus,airtime_us,outcome")
    );
    assert!(trace.contains(",icf,"));
}

#[test]
fn plot_data_and_grant_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("p");
    let o = simulate(&[
        "--config",
        &cfg,
        "--seeds",
        "0..=1",
        "--vc-stas",
        "2..4",
        "--format",
        "plot-data",
        "--trace",
        "grants",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read_to_string(out.join("rtmg_a_co_ll_p95.dat")).unwrap();
    assert_eq!(a.lines().count(), 3);
    assert!(out.join("rtmg_f_throughput.dat").exists());
    let g = fs::read_to_string(out.join("trace_rtmg_coordinated_n2_seed0_grants.csv")).unwrap();
    assert_eq!(
        g.lines().next(),
        Some("time_us,sharing_ap,shared_ap,duration_us,dl_ll_bytes,ul_ll_bytes")
    );
    assert!(g.lines().count() > 1);
}

#[test]
fn same_arguments_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = simulate(&[
            "--scenario",
            "rtmg",
            "--seeds",
            "0..2",
            "--sim-time-us",
            "300000",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        fs::read(out.join("results.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn gain_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = simulate(&[
        "--scenario",
        "rtmg",
        "--gain",
        "--vc-stas",
        "2..=3",
        "--seeds",
        "0",
        "--sim-time-us",
        "1000000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("gain.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("congestion_level,gain_eq1_us,gain_eq2_us,gain_eq3_us,gain_measured_us")
    );
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn invalid_input_fails_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write_config(dir.path(), "scenario = \"RTMG\"\nn_vcstas = 3\n");
    let o = simulate(&["--config", &bad_key, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_vcstas"));

    let bad_pair = write_config(
        dir.path(),
        "scenario = \"RTMG\"\nsystem = \"uncoordinated\"\nmapc_pair = [0, 1]\n",
    );
    let o = simulate(&["--config", &bad_pair, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mapc_pair"));

    let o = simulate(&["--scenario", "rtmg", "--seeds", "5..5"]);
    assert!(!o.status.success());

    let o = simulate(&["--config", "/nonexistent/file.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/file.toml"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = simulate(&[
        "--scenario",
        "rtmg",
        "--seeds",
        "0",
        "--sim-time-us",
        "200000",
        "--out",
        blocker.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}
