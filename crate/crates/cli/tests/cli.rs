use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdcd_core::eval::BenchRow;
use cdcd_core::io;

const TINY: &[&str] = &[
    "world.name=tiny",
    "world.classes=2",
    "world.codebook=4",
    "world.seq_len=4",
    "world.train_per_class=8",
    "world.heldout_per_class=4",
    "schedule.steps=3",
    "model.width=8",
    "model.blocks=1",
    "model.ff_mult=2",
    "train.epochs=2",
    "train.batch_size=4",
    "eval.per_class=4",
];

fn cdcd(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdcd"));
    cmd.args(args);
    for s in extra {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny(extra: &[&'static str]) -> Vec<&'static str> {
    TINY.iter().chain(extra).copied().collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_into(dir: &Path, extra: &[&'static str]) -> PathBuf {
    ok(cdcd(&["train", "--out", s(dir)], &tiny(extra)));
    dir.join("model.ckpt")
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("w.cfg");
    std::fs::write(&cfg, TINY.join("\n")).unwrap();
    let a = tmp.path().join("a");
    ok(cdcd(
        &["train", "--config", s(&cfg), "--out", s(&a)],
        &["loss.mode=step", "loss.negatives=10"],
    ));
    for f in ["model.ckpt", "train_log.csv", "config.snapshot"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "header plus the final-epoch record");
    let b = tmp.path().join("b");
    ok(cdcd(
        &["train", "--config", s(&cfg), "--out", s(&b)],
        &["loss.mode=step", "loss.negatives=10"],
    ));
    let digest = |d: &Path| io::digest(&std::fs::read(d.join("model.ckpt")).unwrap());
    assert_eq!(digest(&a), digest(&b));

    // the snapshot alone reproduces the run
    let c = tmp.path().join("c");
    ok(cdcd(&["train", "--config", s(&a.join("config.snapshot")), "--out", s(&c)], &[]));
    assert_eq!(digest(&a), digest(&c));
}

#[test]
fn lambda_zero_trains_like_vanilla() {
    let tmp = tempfile::tempdir().unwrap();
    let off = train_into(&tmp.path().join("off"), &["loss.mode=step", "loss.lambda=0"]);
    let van = train_into(&tmp.path().join("van"), &["loss.mode=vanilla"]);
    let (p, _) = io::load_checkpoint(&off).unwrap();
    let (q, _) = io::load_checkpoint(&van).unwrap();
    assert_eq!(p, q);
}

#[test]
fn invalid_config_fails_without_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["loss.lamda=1", "train.rho=0", "loss.mode=sideways", "model.heads=3"] {
        let out = cdcd(&["train", "--out", s(tmp.path())], &tiny(&[bad]));
        assert!(!out.status.success(), "{bad} accepted");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
        assert!(!tmp.path().join("model.ckpt").exists());
    }
}

#[test]
fn sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_into(&tmp.path().join("run"), &[]);
    let out = tmp.path().join("s");
    ok(cdcd(
        &["sample", "--checkpoint", s(&ckpt), "--truncation", "0.86", "--class", "1", "--count", "100", "--out", s(&out)],
        &[],
    ));
    let path = out.join("samples.corpus");
    let text = std::fs::read_to_string(&path).unwrap();
    let data = io::load_corpus(&path).unwrap();
    assert_eq!(data.len(), 100);
    assert!(data.items.iter().all(|x| x.class == Some(1)));
    assert_eq!(io::write_corpus(&data), text);

    ok(cdcd(
        &["sample", "--checkpoint", s(&ckpt), "--truncation", "1.0", "--class", "0", "--count", "5", "--out", s(&out)],
        &[],
    ));
    assert_eq!(io::load_corpus(&path).unwrap().len(), 5);

    let bad = cdcd(&["sample", "--checkpoint", s(&ckpt), "--class", "2", "--out", s(&out)], &[]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("out of range"));
}

fn eval_row(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), cdcd_core::eval::EvalReport::CSV_HEADER);
    lines.next().unwrap().split(',').map(String::from).collect()
}

#[test]
fn tiny_eval_reports_exact_nll_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_into(&tmp.path().join("run"), &[]);
    let a = tmp.path().join("e1");
    let b = tmp.path().join("e2");
    ok(cdcd(&["eval", "--checkpoint", s(&ckpt), "--out", s(&a)], &[]));
    ok(cdcd(&["eval", "--checkpoint", s(&ckpt), "--out", s(&b)], &[]));
    let row = eval_row(&a);
    let exact: f64 = row[4].parse().expect("exact column present");
    let elbo: f64 = row[3].parse().unwrap();
    assert!(exact <= elbo + 1e-9);
    assert_eq!(row[7], "false");
    assert_eq!(
        std::fs::read(a.join("eval.csv")).unwrap(),
        std::fs::read(b.join("eval.csv")).unwrap()
    );
}

#[test]
fn large_eval_omits_exact_and_flags_proxy() {
    let tmp = tempfile::tempdir().unwrap();
    let large = ["world.seq_len=8", "world.codebook=6", "train.epochs=1"];
    let ckpt = train_into(&tmp.path().join("run"), &large);
    let out = tmp.path().join("e");
    ok(cdcd(&["eval", "--checkpoint", s(&ckpt), "--out", s(&out)], &[]));
    let row = eval_row(&out);
    assert_eq!(row[4], "");
    assert_eq!(row[7], "true");

    let forced = cdcd(&["eval", "--checkpoint", s(&ckpt), "--out", s(&out)], &["eval.exact=on"]);
    assert!(!forced.status.success());
    assert!(String::from_utf8_lossy(&forced.stderr).contains("shrink"));
}

#[test]
fn bench_cardinality_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let args = ["bench", "--T", "2,3,4", "--mode", "vanilla,step-intra", "--seeds", "3", "--out", s(&out)];
    let cfg = tiny(&["train.epochs=1"]);
    ok(cdcd(&args, &cfg));
    let parse = || -> Vec<BenchRow> {
        let text = std::fs::read_to_string(out.join("bench.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), BenchRow::CSV_HEADER);
        lines.map(|l| BenchRow::parse_csv_line(l).unwrap()).collect()
    };
    let rows = parse();
    assert_eq!(rows.len(), 18);

    // a finished cell is read back from its marker rather than retrained
    let marker = out.join("cells").join(format!("{}.done", BenchRow::key("tiny", 3, "step-intra", 1)));
    let mut edited = BenchRow::parse_csv_line(&std::fs::read_to_string(&marker).unwrap()).unwrap();
    edited.wall_s = 12345.0;
    std::fs::write(&marker, edited.to_csv_line()).unwrap();
    // an unfinished cell is retrained with identical metrics
    let missing = out.join("cells").join(format!("{}.done", BenchRow::key("tiny", 2, "vanilla", 0)));
    std::fs::remove_file(&missing).unwrap();
    ok(cdcd(&args, &cfg));
    let again = parse();
    assert_eq!(again.len(), 18);
    let find = |rs: &[BenchRow], t: usize, m: &str, seed: u64| {
        rs.iter().find(|r| r.steps == t && r.mode == m && r.seed == seed).unwrap().clone()
    };
    assert_eq!(find(&again, 3, "step-intra", 1).wall_s, 12345.0);
    let (x, y) = (find(&rows, 2, "vanilla", 0), find(&again, 2, "vanilla", 0));
    assert_eq!((x.elbo_per_token, x.genre_acc, x.coherence_tv), (y.elbo_per_token, y.genre_acc, y.coherence_tv));
}

#[test]
fn make_world_writes_loadable_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    ok(cdcd(&["make-world", "--out", s(tmp.path())], TINY));
    let train = io::load_corpus(&tmp.path().join("train.corpus")).unwrap();
    let held = io::load_corpus(&tmp.path().join("heldout.corpus")).unwrap();
    assert_eq!((train.len(), held.len()), (16, 8));
    assert_eq!((train.codebook, train.seq_len, train.classes), (4, 4, 2));
}
