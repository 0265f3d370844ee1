mod common;

use std::fs;

use hello_core::pipeline::{Pipeline, RunOptions, Stage};
use hello_core::Error;

fn run(cfg: hello_core::config::PipelineConfig, resume: bool) -> Vec<(Stage, bool)> {
    let mut p = Pipeline::new(cfg, RunOptions { resume, force: false }).unwrap();
    p.run_all().unwrap()
}

#[test]
fn tiny_run_resumes_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = common::tiny_config(a.path());
    let first = run(cfg_a.clone(), false);
    assert!(first.iter().filter(|(s, _)| *s != Stage::Update).all(|(_, ran)| *ran), "{first:?}");

    let p = Pipeline::new(cfg_a.clone(), RunOptions::default()).unwrap();
    for s in Stage::ALL {
        if s == Stage::Update {
            continue;
        }
        for out in p.ws.outputs(s) {
            assert!(out.exists(), "{} missing after {}", out.display(), s.name());
        }
    }

    let again = run(cfg_a.clone(), true);
    assert!(again.iter().all(|(_, ran)| !ran), "resume reran {again:?}");

    // a student-only change reruns the student and nothing upstream
    let mut changed = cfg_a.clone();
    changed.hyper.beta_ce = 0.5;
    let partial = run(changed, true);
    let reran: Vec<Stage> = partial.iter().filter(|(_, r)| *r).map(|(s, _)| *s).collect();
    assert_eq!(reran, vec![Stage::Student]);

    // identical config in a fresh directory reproduces the artifacts bit for bit
    let mut cfg_b = cfg_a.clone();
    cfg_b.output_dir = b.path().to_path_buf();
    run(cfg_b.clone(), false);
    let pa = Pipeline::new(cfg_a, RunOptions::default()).unwrap();
    let pb = Pipeline::new(cfg_b, RunOptions::default()).unwrap();
    assert_eq!(fs::read(pa.ws.projector()).unwrap(), fs::read(pb.ws.projector()).unwrap());
    assert_eq!(fs::read(pa.ws.transfer_log()).unwrap(), fs::read(pb.ws.transfer_log()).unwrap());
    let syn = |p: &Pipeline| fs::read(p.ws.synthetic().join("synthetic.arc")).unwrap();
    assert_eq!(syn(&pa), syn(&pb));
}

#[test]
fn downstream_stage_refuses_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let mut p = Pipeline::new(cfg, RunOptions::default()).unwrap();
    let err = p.run_stage(Stage::Projector).unwrap_err();
    assert!(matches!(err, Error::State(_) | Error::MissingFile(_)), "{err}");
}

#[test]
fn corrupt_projector_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let mut p = Pipeline::new(cfg, RunOptions::default()).unwrap();
    for s in [Stage::Data, Stage::Encoder, Stage::Teachers, Stage::Projector] {
        p.run_stage(s).unwrap();
    }
    let path = p.ws.projector();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = p.load_projector().unwrap_err();
    assert!(matches!(err, Error::Truncated { .. } | Error::CorruptHeader { .. }), "{err}");
    fs::write(&path, b"not an archive").unwrap();
    assert!(matches!(p.load_projector().unwrap_err(), Error::CorruptHeader { .. } | Error::Truncated { .. }));
}
