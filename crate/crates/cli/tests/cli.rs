use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mistlab::shadow::{read_scores, write_scores};
use mistlab_cli::snapshot::{self, FloatWidth};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

fn mistlab(out: &Path, cfg: &Path, threads: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mistlab"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .expect("spawn mistlab")
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn write_cfg(dir: &Path, extra: &str) -> PathBuf {
    let base = fs::read_to_string(smoke_config()).unwrap();
    let p = dir.join("exp.cfg");
    fs::write(&p, format!("{base}\n{extra}\n")).unwrap();
    p
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const PIPELINE: [&[&str]; 5] = [&["gen-data"], &["train"], &["shadow"], &["attack"], &["report"]];

fn run_pipeline(out: &Path, threads: usize) {
    for args in PIPELINE {
        ok(mistlab(out, &smoke_config(), threads, args));
    }
}

#[test]
fn pipeline_is_byte_reproducible_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run_pipeline(&a, 1);
    run_pipeline(&b, 1);
    run_pipeline(&c, 3);
    let ta = tree(&a);
    let names: Vec<String> = ta.iter().map(|(p, _)| p.display().to_string()).collect();
    for f in ["smoke/snapshot.bin", "smoke/trainlog.csv", "smoke/scores.tsv", "smoke/report.csv", "smoke/attack_lira.tsv", "report.csv"] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    assert_eq!(ta, tree(&b));
    assert_eq!(ta, tree(&c));
}

#[test]
fn snapshot_and_scores_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    for args in [&["train"][..], &["--f64", "train"], &["shadow"]] {
        ok(mistlab(out, &smoke_config(), 1, args));
    }
    let snap = out.join("smoke/snapshot.bin");
    let bytes = fs::read(&snap).unwrap();
    let (model, width) = snapshot::decode(&bytes).unwrap();
    assert_eq!(width, FloatWidth::F64);
    assert_eq!(snapshot::encode(&model, width), bytes);

    let scores = out.join("smoke/scores.tsv");
    let (shadows, obs) = read_scores(&scores).unwrap();
    let copy = out.join("copy.tsv");
    write_scores(&copy, shadows, &obs).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(&scores).unwrap());
    assert_eq!(read_scores(&copy).unwrap(), (shadows, obs));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let bad_key = write_cfg(dir, "no_such_key = 1");
    assert_eq!(mistlab(dir, &bad_key, 1, &["train"]).status.code(), Some(2));

    let two_shadows = write_cfg(dir, "shadows = 2");
    let o = mistlab(dir, &two_shadows, 1, &["shadow"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("coverage"));

    let blowup = write_cfg(dir, "lr = 1e300");
    assert_eq!(mistlab(dir, &blowup, 1, &["train"]).status.code(), Some(4));

    let ok_cfg = write_cfg(dir, "");
    ok(mistlab(dir, &ok_cfg, 1, &["train"]));
    fs::write(dir.join("smoke/snapshot.bin"), b"MIST garbage").unwrap();
    assert_eq!(mistlab(dir, &ok_cfg, 1, &["attack"]).status.code(), Some(3));

    assert_eq!(mistlab(dir, &ok_cfg, 0, &["train"]).status.code(), Some(2));
}

#[test]
fn shadow_attacks_need_scores_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_cfg(dir, "attacks = loss, mentr");
    ok(mistlab(dir, &cfg, 1, &["train"]));
    ok(mistlab(dir, &cfg, 1, &["attack"]));
    let report = fs::read_to_string(dir.join("smoke/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let cfg = write_cfg(dir, "attacks = loss, lira, classnn");
    let o = mistlab(dir, &cfg, 1, &["attack"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lira") && err.contains("classnn"), "{err}");
}

#[test]
fn attack_report_rows_have_auc_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    for args in [&["train"][..], &["shadow"], &["attack"]] {
        ok(mistlab(out, &smoke_config(), 1, args));
    }
    let report = fs::read_to_string(out.join("smoke/report.csv")).unwrap();
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let auc_col = header.iter().position(|h| *h == "auc").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let auc: f64 = r[auc_col].parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn canary_is_skipped_on_strict_binary_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut csv = String::from("f0,f1,f2,label\n");
    for i in 0..120 {
        let bits = [(i % 2), (i / 2) % 2, (i / 4) % 2];
        csv += &format!("{},{},{},{}\n", bits[0], bits[1], bits[2], (i / 3) % 2);
    }
    fs::write(dir.join("bin.csv"), csv).unwrap();
    let cfg = dir.join("bin.cfg");
    fs::write(
        &cfg,
        "experiment = bin\ndata = bin.csv\nlabel_column = label\ninteger_features = strict\n\
         members = 40\nvalidation = 20\ntest = 20\nhidden = 8\nepochs = 2\nbatch_size = 10\nshadows = 4\n\
         attacks = loss, canary\n",
    )
    .unwrap();
    for args in [&["train"][..], &["shadow"], &["attack"]] {
        ok(mistlab(dir, &cfg, 1, args));
    }
    let report = fs::read_to_string(dir.join("bin/report.csv")).unwrap();
    assert!(!report.contains("canary"));
    assert!(report.contains("loss"));
}

#[test]
fn ablation_emits_three_arms_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(mistlab(out, &smoke_config(), 1, &["ablate"]));
    let csv = fs::read_to_string(out.join("smoke/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 2);
    for variant in ["L1", "KL"] {
        let arms: Vec<&str> = rows.iter().filter(|r| r[1] == variant).map(|r| r[0]).collect();
        assert_eq!(arms, ["no-defense", "phase1-only", "phase1+2"]);
    }
    for r in rows.iter().filter(|r| r[0] == "phase1-only") {
        assert_eq!((r[2], r[3]), ("2", "0"));
    }
}

#[test]
fn tuned_lambda_is_largest_within_one_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(mistlab(out, &smoke_config(), 1, &["train", "--tune-lambda"]));
    let csv = fs::read_to_string(out.join("smoke/lambda_tuning.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1])
        })
        .collect();
    let base = rows.iter().find(|r| r.0 == 0.0).unwrap().1;
    let expected = rows
        .iter()
        .filter(|r| base - r.1 < 0.01)
        .map(|r| r.0)
        .fold(0.0, f64::max);
    let sel = fs::read_to_string(out.join("smoke/selection.cfg")).unwrap();
    assert!(sel.lines().any(|l| l.replace(' ', "") == format!("lambda={expected}")), "{sel}");
}
