use std::fs;
use std::path::Path;
use std::process::Command;

use fedmic_cli::{dispatch, EXIT_INTERNAL, EXIT_OK, EXIT_USER};
use fedmic_core::data::{read_fmic, synth_generate, SynthSpec};
use fedmic_core::metrics::CSV_HEADER;

fn fedmic(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fedmic")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("fedmic").chain(args.iter().copied()).map(String::from).collect()
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    let text = format!(
        "# tiny run\nmode=fedmic\nn_clients=3\nratio=1.0\nrounds=2\nepochs=1\nbatch=8\nlr=0.05\nhidden=16\nrep_dim=8\n\
         seeds=1,2\ndata=synth:classes=4,per_class=20,shape=1x8x8,noise=0.2,seed=3\nout={}\n{extra}",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dispatch(argv(&["frobnicate"])), EXIT_USER);
    assert_eq!(dispatch(argv(&[])), EXIT_USER);
    assert_eq!(dispatch(argv(&["inspect"])), EXIT_USER);
    assert_eq!(dispatch(argv(&["--help"])), EXIT_OK);
    assert_eq!(fedmic(&["frobnicate"]).0, EXIT_USER);
}

#[test]
fn inspect_reports_synth_header() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.fmic");
    let f = file.to_str().unwrap();
    let (code, _) = fedmic(&["synth", "classes=5,per_class=7,shape=2x6x9,noise=0.1,seed=4", f]);
    assert_eq!(code, EXIT_OK);
    let (code, text) = fedmic(&["inspect", f]);
    assert_eq!(code, EXIT_OK);
    for line in ["format: FMIC", "samples: 35", "channels: 2", "height: 6", "width: 9", "classes: 5"] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }
    let spec = SynthSpec { n_classes: 5, per_class: 7, shape: [2, 6, 9], noise: 0.1, seed: 4 };
    assert_eq!(read_fmic(&file).unwrap(), synth_generate(&spec).unwrap());
}

#[test]
fn inspect_rejects_unknown_files() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a dataset").unwrap();
    assert_eq!(dispatch(argv(&["inspect", junk.to_str().unwrap()])), EXIT_USER);
    let missing = dir.path().join("missing.fmic");
    assert_eq!(dispatch(argv(&["inspect", missing.to_str().unwrap()])), EXIT_USER);
}

#[test]
fn partition_writes_conserving_shards() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.fmic");
    assert_eq!(dispatch(argv(&["synth", "classes=4,per_class=30,shape=1x4x4", file.to_str().unwrap()])), EXIT_OK);
    let shards = dir.path().join("shards");
    let code = dispatch(argv(&["partition", file.to_str().unwrap(), "0.5", "4", shards.to_str().unwrap(), "--seed", "9"]));
    assert_eq!(code, EXIT_OK);
    let full = read_fmic(&file).unwrap();
    let manifest = fs::read_to_string(shards.join("manifest.csv")).unwrap();
    let mut seen = Vec::new();
    for line in manifest.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let shard = read_fmic(&shards.join(f[1])).unwrap();
        let idx: Vec<usize> = f[5].split(' ').map(|s| s.parse().unwrap()).collect();
        let counts: usize = f[2..5].iter().map(|s| s.parse::<usize>().unwrap()).sum();
        assert_eq!(counts, idx.len());
        assert_eq!(shard, full.subset(&idx).unwrap());
        seen.extend(idx);
    }
    assert_eq!(manifest.lines().count(), 5);
    seen.sort_unstable();
    assert_eq!(seen, (0..full.len()).collect::<Vec<_>>());
    assert_eq!(dispatch(argv(&["partition", file.to_str().unwrap(), "-1", "4", shards.to_str().unwrap()])), EXIT_USER);
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let (code, _) = fedmic(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let csv = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    // 2 seeds x 2 rounds x (3 clients + aggregate)
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 4);
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("fedmic,2,"));
    assert!(dir.path().join("out/config.txt").exists());
}

#[test]
fn run_overrides_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    assert_eq!(dispatch(argv(&["run", c, "--mode=fedavg", "--seeds=5"])), EXIT_OK);
    let csv = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("fedavg-s5,fedavg,")));
    assert_eq!(dispatch(argv(&["run", c, "--alpha=1.5"])), EXIT_USER);
    assert_eq!(dispatch(argv(&["run", c, "--colour=red"])), EXIT_USER);
    assert_eq!(dispatch(argv(&["run", dir.path().join("nope.cfg").to_str().unwrap()])), EXIT_USER);
    let bad = small_config(dir.path(), "rounds=lots\n");
    assert_eq!(dispatch(argv(&["run", bad.to_str().unwrap()])), EXIT_USER);
}

#[test]
fn diverging_training_is_an_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lr=1e300\n");
    assert_eq!(dispatch(argv(&["run", cfg.to_str().unwrap()])), EXIT_INTERNAL);
}

#[test]
fn inspect_summarizes_dumped_packets() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("packets");
    let cfg = small_config(dir.path(), &format!("dump_packets={}\nseeds=1\nrounds=1\nraw_threshold=16\n", dump.display()));
    assert_eq!(dispatch(argv(&["run", cfg.to_str().unwrap()])), EXIT_OK);
    let up = dump.join("round001_client000_up.gpd");
    let (code, text) = fedmic(&["inspect", up.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(text.contains("format: GPD"));
    assert!(text.contains("gpd r="), "{text}");
    let down = dump.join("round001_global_down.gpd");
    assert_eq!(fedmic(&["inspect", down.to_str().unwrap()]).0, EXIT_OK);
}
