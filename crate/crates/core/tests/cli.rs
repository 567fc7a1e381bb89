//! Command-line contracts: exit codes, long-input separation, identity baseline.

use std::path::Path;

use querysep::dsp::{read_wav, write_wav, Waveform};
use querysep::evaluation::MetricsReport;
use querysep::harness::run;

const SMALL: [&str; 6] = [
    "corpus.per_class=20",
    "pretrain.steps=10",
    "training.epochs=1",
    "training.steps_per_epoch=2",
    "training.batch_size=2",
    "evaluation.shots=1",
];

fn cli(ws: &Path, args: &[&str]) -> i32 {
    let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Warn).is_test(true).try_init();
    let mut argv = vec!["querysep".to_string(), "--workspace".into(), ws.display().to_string()];
    for s in SMALL {
        argv.push("--set".into());
        argv.push(s.into());
    }
    argv.push("--set".into());
    argv.push("training.val_examples=2".into());
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

#[test]
fn usage_config_and_io_errors() {
    let ws = tempfile::tempdir().unwrap();
    assert_eq!(run(["querysep", "frobnicate"]), 2);
    assert_eq!(run(["querysep", "synth-data", "--out", "x", "--bogus"]), 2);
    assert_eq!(run(["querysep", "--set", "training.lr_start=-1", "synth-data", "--out", "x"]), 3);
    assert_eq!(run(["querysep", "--set", "no_such.field=1", "synth-data", "--out", "x"]), 3);
    assert_eq!(cli(ws.path(), &["pretrain", "--data", "missing", "--out", "b.ckpt"]), 4);
    assert_eq!(run(["querysep", "--version"]), 0);
}

#[test]
fn pipeline_separates_long_input_and_identity_scores_zero() {
    let ws = tempfile::tempdir().unwrap();
    let w = ws.path();
    assert_eq!(cli(w, &["synth-data", "--out", "data"]), 0);
    assert_eq!(cli(w, &["pretrain", "--data", "data", "--out", "backend.ckpt"]), 0);
    assert_eq!(cli(w, &["cache-embeddings", "--backend", "backend.ckpt", "--data", "data", "--out", "cache.json"]), 0);
    assert_eq!(cli(w, &["train", "--data", "data", "--backend", "backend.ckpt", "--out", "adapters.ckpt", "--adapters-only"]), 0);

    let long: Vec<f32> = (0..80_000).map(|i| 0.1 * ((i as f32) * 0.07).sin()).collect();
    write_wav(&w.join("long.wav"), &Waveform::new(long, 8000).unwrap()).unwrap();
    let sep = ["separate", "--ckpt", "adapters.ckpt", "--backend", "backend.ckpt", "--input", "long.wav", "--out", "out.wav"];
    assert_eq!(cli(w, &[&sep[..], &["--text", "tone", "--negative-text", "hiss"]].concat()), 0);
    let out: Waveform<f32> = read_wav(&w.join("out.wav")).unwrap();
    assert_eq!(out.len(), 80_000);
    assert_eq!(cli(w, &sep), 3, "a query is required");
    assert_eq!(cli(w, &["separate", "--ckpt", "nope.ckpt", "--backend", "backend.ckpt", "--input", "long.wav", "--out", "o.wav", "--text", "x"]), 4);

    assert_eq!(
        cli(w, &["evaluate", "--backend", "backend.ckpt", "--data", "data", "--modes", "P,PN", "--modalities", "text", "--out", "id.json"]),
        0
    );
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(w.join("id.json")).unwrap()).unwrap();
    assert!(!report.rows.is_empty());
    assert!(report.rows.iter().all(|r| r.sdri == Some(0.0)));
    assert!(report.aggregates.iter().all(|a| a.sdri.unwrap().mean == 0.0));

    assert_eq!(cli(w, &["plot-spec", "--input", "long.wav", "out.wav", "--out", "spec.png"]), 0);
    assert!(w.join("spec.png").exists());
}
