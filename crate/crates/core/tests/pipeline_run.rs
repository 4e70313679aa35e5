mod common;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use usmask_core::geom::Detection;
use usmask_core::pipeline::formats::{load_ground_truth, load_predictions, read_decision_log};
use usmask_core::pipeline::pgm::{read_pgm, write_raw_header, RawFrameReader};
use usmask_core::pipeline::render::render_mask;
use usmask_core::pipeline::{eval_files, run, FrameSinkSpec, FrameSourceSpec, PipelineError, RunConfig};
use usmask_core::synth::{dropout_fixture, generate, StreamSpec};
use usmask_core::temporal::{run_stream, DecisionSource, HoldMode};

fn fixture_run(mode: HoldMode) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let files = generate(&dropout_fixture()).write_to_dir(dir.path()).unwrap();
    let mut cfg = RunConfig::new(FrameSourceSpec::PgmDir(files.frames));
    cfg.predictions = Some(files.predictions);
    cfg.engine.hold = cfg.engine.hold.with_mode(mode);
    (dir, cfg)
}

#[test]
fn off_mode_without_detections_copies_frames() {
    let (dir, mut cfg) = fixture_run(HoldMode::Off);
    cfg.predictions = None;
    let out = dir.path().join("out");
    cfg.output = Some(FrameSinkSpec::PgmDir(out.clone()));
    let summary = run(&cfg).unwrap();
    assert_eq!((summary.frames, summary.count(DecisionSource::None)), (40, 40));
    let s = generate(&dropout_fixture());
    for (i, frame) in s.frames.iter().enumerate() {
        assert_eq!(&read_pgm(out.join(format!("frame_{i:06}.pgm"))).unwrap(), frame);
    }
}

#[test]
fn offline_run_matches_temporal_module() {
    let s = generate(&dropout_fixture());
    for mode in [HoldMode::Off, HoldMode::BBoxHold, HoldMode::BBoxHoldSim] {
        let (_dir, cfg) = fixture_run(mode);
        let summary = run(&cfg).unwrap();
        // The fixture's confidences all clear the default threshold and its
        // boxes lie inside the frame, so admission changes nothing.
        let direct = run_stream(&s.frames, &s.detections, &cfg.engine.hold).unwrap();
        let got: Vec<_> = summary.decisions.iter().map(|(_, d)| d.clone()).collect();
        assert_eq!(got, direct, "{mode:?}");
    }
}

#[test]
fn decision_log_has_one_record_per_frame() {
    let (dir, mut cfg) = fixture_run(HoldMode::BBoxHoldSim);
    let log = dir.path().join("decisions.jsonl");
    cfg.decision_log = Some(log.clone());
    let summary = run(&cfg).unwrap();
    let records = read_decision_log(&log).unwrap();
    assert_eq!(records.len(), 40);
    for (r, (i, d)) in records.iter().zip(&summary.decisions) {
        assert_eq!(r.frame, *i);
        assert_eq!(&r.to_decision(), d);
        if r.source == DecisionSource::Fresh {
            assert!(r.ssim.is_none());
        }
    }
}

#[test]
fn raw_output_is_the_rendered_stream() {
    let (dir, mut cfg) = fixture_run(HoldMode::BBoxHold);
    let out = dir.path().join("masked.raw");
    cfg.output = Some(FrameSinkSpec::Raw(out.clone()));
    let summary = run(&cfg).unwrap();
    let s = generate(&dropout_fixture());
    let mut reader = RawFrameReader::new(BufReader::new(File::open(&out).unwrap())).unwrap();
    assert_eq!(reader.dims(), (48, 48));
    for (frame, (_, d)) in s.frames.iter().zip(&summary.decisions) {
        let boxes: Vec<_> = d.boxes.iter().map(|b| b.bbox).collect();
        assert_eq!(reader.next_frame().unwrap().unwrap(), render_mask(frame, &boxes, cfg.engine.style));
    }
    assert!(reader.next_frame().unwrap().is_none());
}

#[test]
fn long_raw_stream_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let spec = StreamSpec {
        width: 384,
        height: 384,
        n_frames: 300,
        roi_spans: vec![20..280],
        dropouts: vec![50..60, 100..130],
        probe_moves: vec![115],
        ..dropout_fixture()
    };
    let s = generate(&spec);
    let raw = dir.path().join("in.raw");
    let mut w = BufWriter::new(File::create(&raw).unwrap());
    write_raw_header(&mut w, 384, 384).unwrap();
    for f in &s.frames {
        w.write_all(f.data()).unwrap();
    }
    w.flush().unwrap();
    drop(w);
    let files = s.write_to_dir(dir.path()).unwrap();

    let mut cfg = RunConfig::new(FrameSourceSpec::infer(&raw));
    cfg.predictions = Some(files.predictions);
    cfg.output = Some(FrameSinkSpec::Raw(dir.path().join("out.raw")));
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.frames, 300);
    assert!(summary.frames_per_sec > 0.0);
    assert_eq!(
        std::fs::metadata(dir.path().join("out.raw")).unwrap().len(),
        12 + 300 * 384 * 384
    );
}

#[test]
fn eval_files_matches_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(&dropout_fixture());
    let files = s.write_to_dir(dir.path()).unwrap();
    let report = eval_files(&files.ground_truth, &files.predictions, 0.318, 0.6, None).unwrap();
    let dets: Vec<Detection> = load_predictions(&files.predictions).unwrap().all();
    let gts = load_ground_truth(&files.ground_truth).unwrap().boxes;
    let (tp, fp, fn_) = common::counts(&dets, &gts, 0.318, 0.6);
    assert_eq!((report.tp, report.fp, report.fn_), (tp, fp, fn_));
    assert_eq!((tp, fp, fn_), (21, 0, 11));
    // All 40 frames have a record, so negatives count as images.
    assert_eq!(report.fppi, 0.0);
    assert_eq!(report.ap_50, common::map(&dets, &gts, 0.5).unwrap());
}

#[test]
fn frame_order_and_size_errors() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    let a = usmask_core::image::GrayImage::filled(8, 8, 1).unwrap();
    let b = usmask_core::image::GrayImage::filled(9, 8, 1).unwrap();
    usmask_core::pipeline::pgm::write_pgm(frames.join("f_1.pgm"), &a).unwrap();
    usmask_core::pipeline::pgm::write_pgm(frames.join("f_2.pgm"), &b).unwrap();
    let cfg = RunConfig::new(FrameSourceSpec::PgmDir(frames.clone()));
    assert!(matches!(run(&cfg), Err(PipelineError::StreamInconsistency { frame: 2, .. })));

    std::fs::write(frames.join("notes.pgm"), b"P5\n1 1\n255\n\0").unwrap();
    assert!(matches!(run(&cfg), Err(PipelineError::FrameName { .. })));
}
