mod common;

use std::process::{Command, Output};

use common::{closed_port, data, silent_port, Server};
use ovinet_core::scenario::Report;

fn ovinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovinet"))
        .args(args)
        .env_remove("OVINET_CONTROL")
        .env_remove("OVINET_PLATFORM")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn validate_reads_every_egg() {
    let out = ovinet(&["validate"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let expected: u32 = std::fs::read_to_string(data("corpus.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u32>().unwrap())
        .sum();
    assert!(stdout.contains(&format!("eggs read        {expected} of {expected}")), "{stdout}");
}

#[test]
fn run_writes_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let export = dir.path().join("store.jsonl");
    let scn = data("poc28.toml");
    let out = ovinet(&[
        "run",
        "--scenario",
        scn.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
        "--export",
        export.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.truth_total, 129);
    assert_eq!(report.measured_totals, vec![126; 4]);
    assert_eq!(report.communications, 112);
    let lines = std::fs::read_to_string(&export).unwrap();
    let events = lines.lines().filter(|l| l.contains("\"type\":\"event\"")).count();
    assert_eq!(events as u64, report.communications);
}

#[test]
fn incomplete_lorawan_form_exits_with_validation() {
    let dir = tempfile::tempdir().unwrap();
    let form: String = std::fs::read_to_string(data("form-lorawan.toml"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("app_key"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("form.toml");
    std::fs::write(&path, form).unwrap();
    let ctl = closed_port().to_string();
    let out = ovinet(&["provision", "--file", path.to_str().unwrap(), "--device", "SN-1", "--control", &ctl]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("connectivity.app_key"), "{}", text(&out.stderr));
}

#[test]
fn unreachable_and_silent_targets() {
    let ctl = closed_port().to_string();
    let out = ovinet(&["test-read", "--device", "SN-1", "--control", &ctl]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));

    let ctl = silent_port().to_string();
    let out = ovinet(&["status", "--device", "SN-1", "--control", &ctl, "--timeout", "0.3"]);
    assert_eq!(out.status.code(), Some(4), "{}", text(&out.stderr));
}

#[test]
fn provision_then_test_read_against_a_server() {
    let s = Server::start(None, &["SN-A:2", "SN-B"]);
    let ctl = s.control();
    let plat = s.platform();
    let form = data("form-wifi.toml");
    let form = form.to_str().unwrap();
    let target = |serial: &'static str| vec!["--device", serial, "--control", &ctl, "--platform", &plat];

    let mut args = vec!["provision", "--file", form];
    args.extend(target("SN-A"));
    let out = ovinet(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("registry    created"));

    let mut args = vec!["test-read"];
    args.extend(target("SN-A"));
    let out = ovinet(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("eggs        2"), "{stdout}");
    assert!(stdout.contains("platform    received"), "{stdout}");

    let mut args = vec!["status"];
    args.extend(target("SN-A"));
    let out = ovinet(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("phase       operating"), "{}", text(&out.stdout));

    // Same id from another trap with different metadata.
    let dir = tempfile::tempdir().unwrap();
    let moved = std::fs::read_to_string(data("form-wifi.toml"))
        .unwrap()
        .replace("Av. Espana 1200", "Another street 5");
    let path = dir.path().join("moved.toml");
    std::fs::write(&path, moved).unwrap();
    let mut args = vec!["provision", "--file", path.to_str().unwrap()];
    args.extend(target("SN-B"));
    let out = ovinet(&args);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("conflict"));
}
