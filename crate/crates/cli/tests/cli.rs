use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use usmask_core::pipeline::eval_files;
use usmask_core::pipeline::formats::{read_decision_log, write_records, ground_truth_record};
use usmask_core::geom::{BBox, CategoryLabel, GroundTruth};
use usmask_core::service::Client;
use usmask_core::synth::{dropout_fixture, generate};
use usmask_core::temporal::DecisionSource;

fn usmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usmask"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_shows_operating_defaults() {
    let out = text(&usmask(&["mask", "--help"]));
    for needle in ["[default: 15]", "[default: 0.85]", "[default: 0.318]", "[default: hold_sim]", "[default: 2]"] {
        assert!(out.contains(needle), "missing {needle}");
    }
    assert!(text(&usmask(&["eval", "--help"])).contains("[default: 0.6]"));
}

#[test]
fn simulate_mask_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(usmask(&["simulate", "--out", p(d), "--fixture"]).status.success());

    let log = d.join("log.jsonl");
    let out = usmask(&[
        "mask", "--frames", p(&d.join("frames")), "--predictions", p(&d.join("predictions.jsonl")),
        "--output", p(&d.join("masked")), "--decision-log", p(&log), "--gt", p(&d.join("ground_truth.jsonl")),
        "--hold-frames", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(text(&out).contains("reduction 1.0000"), "{}", text(&out));
    let records = read_decision_log(&log).unwrap();
    assert_eq!(records.len(), 40);
    assert_eq!(records.iter().filter(|r| r.source == DecisionSource::Fresh).count(), 21);
    assert_eq!(std::fs::read_dir(d.join("masked")).unwrap().count(), 40);

    let json = d.join("eval.json");
    let csv = d.join("eval.csv");
    let out = usmask(&[
        "eval", "--gt", p(&d.join("ground_truth.jsonl")), "--predictions", p(&d.join("predictions.jsonl")),
        "--json", p(&json), "--csv", p(&csv),
    ]);
    assert!(out.status.success());
    let got: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let want = eval_files(&d.join("ground_truth.jsonl"), &d.join("predictions.jsonl"), 0.318, 0.6, None).unwrap();
    assert_eq!(got, serde_json::to_value(want).unwrap());
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("ap_50,ap_50_95,precision,recall,f1,fppi,tp,fp,fn,conf_thr,iou_thr\n"));

    let sweep_csv = d.join("sweep.csv");
    let out = usmask(&[
        "sweep", "--gt", p(&d.join("ground_truth.jsonl")), "--predictions", p(&d.join("predictions.jsonl")),
        "--steps", "10", "--csv", p(&sweep_csv),
    ]);
    assert!(text(&out).starts_with("best conf"));
    assert_eq!(std::fs::read_to_string(&sweep_csv).unwrap().lines().count(), 12);
}

#[test]
fn raw_stream_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(usmask(&["simulate", "--out", p(d), "--fixture"]).status.success());
    let out = usmask(&["mask", "--frames", p(&d.join("frames")), "--output", "-"]);
    assert!(out.status.success());
    assert_eq!(&out.stdout[..4], b"USRF");
    assert_eq!(out.stdout.len(), 12 + 40 * 48 * 48);
}

#[test]
fn validate_flags_non_square_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    let boxes = [
        GroundTruth::new(0, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), CategoryLabel::Transverse),
        GroundTruth::new(1, BBox::new(0.0, 0.0, 10.0, 14.0).unwrap(), CategoryLabel::MidSagittal),
    ];
    let mut f = std::fs::File::create(&gt).unwrap();
    write_records(&mut f, &[ground_truth_record(0, &boxes[..1]), ground_truth_record(1, &boxes[1..])]).unwrap();
    let out = usmask(&["validate", "--gt", p(&gt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("annotation 1 (frame 1): not square"));
    assert!(text(&out).contains("2 annotations checked, 1 violations"));
}

#[test]
fn errors_exit_with_status_two() {
    let out = usmask(&["eval", "--gt", "/nonexistent/gt.jsonl", "--predictions", "/nonexistent/p.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = usmask(&["mask", "--frames", ".", "--mode", "sometimes"]);
    assert!(!out.status.success());
}

#[test]
fn serve_answers_frames() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_usmask"))
        .args(["serve", "--listen", "127.0.0.1:0", "--hold-frames", "5"])
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.split("listening on ").nth(1) {
            break rest.trim().to_string();
        }
    };
    let s = generate(&dropout_fixture());
    let mut client = Client::connect(&addr).unwrap();
    let sources: Vec<_> = s
        .frames
        .iter()
        .zip(&s.detections)
        .enumerate()
        .map(|(i, (f, d))| client.mask(i as u32, f, d).unwrap().source)
        .collect();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(sources.iter().filter(|s| **s == DecisionSource::Fresh).count(), 21);
    assert_eq!(sources[11], DecisionSource::HeldSim);
}
