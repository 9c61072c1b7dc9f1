//! End-to-end runs of the `crnn` binary: outputs, files and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: [&str; 10] = [
    "--set",
    "filters=8",
    "--set",
    "hidden=8",
    "--set",
    "window=5",
    "--set",
    "length=40",
    "--set",
    "batch_size=10",
];

fn crnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(SMALL);
    crnn(dir, &all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn motifs(dir: &Path) -> PathBuf {
    let o = crnn(dir, &["synth", "motifs", "-o", "motifs.tsv", "--count", "60", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("motifs.tsv")
}

#[test]
fn resolved_config_is_the_first_block() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let o = crnn(dir.path(), &["stats", "motifs.tsv", "--seed", "9", "--cell", "mgu"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.starts_with("# resolved config\n"));
    let block: Vec<&str> = out.split("\n\n").next().unwrap().lines().collect();
    assert!(block.contains(&"# seed=9") && block.contains(&"# cell=mgu"));
}

#[test]
fn stats_formats() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let o = crnn(dir.path(), &["stats", "motifs.tsv", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let csv: Vec<&str> = out.lines().skip_while(|l| l.starts_with('#') || l.is_empty()).collect();
    assert_eq!(csv[0], "name,size,vocabulary,total_words,mst,classes");
    assert!(csv[1].starts_with("motifs,60,") && csv[1].ends_with(",2"));
    let table = stdout(&crnn(dir.path(), &["stats", "motifs.tsv"]));
    assert!(table.contains("vocabulary") && !table.contains("name,size"));
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let o = crnn(dir.path(), &["stats", "no_such_corpus.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such_corpus.tsv"));
}

#[test]
fn malformed_corpus_exits_2_with_line_number() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.tsv"), "a\tfine\nno tab here\n").unwrap();
    let o = crnn(dir.path(), &["stats", "bad.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.tsv:2"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_before_any_work() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    for args in [
        vec!["train", "motifs.tsv", "--alpha", "1.5", "--out-dir", "run"],
        vec!["train", "motifs.tsv", "--set", "hidden=9", "--set", "filters=8", "--out-dir", "run"],
        vec!["train", "motifs.tsv", "--set", "colour=red", "--out-dir", "run"],
        vec!["train", "motifs.tsv", "--cell", "rnn", "--out-dir", "run"],
    ] {
        let o = crnn(dir.path(), &args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(!dir.path().join("run").exists(), "{args:?}");
    }
    let o = crnn(dir.path(), &["train", "motifs.tsv", "--alpha", "1.5"]);
    assert!(stderr(&o).contains("alpha"));
}

#[test]
fn config_file_with_comments_and_flag_overrides() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    fs::write(
        dir.path().join("run.cfg"),
        "# tiny model\nfilters=8\nhidden=8\nwindow=5\nlength=40\nbatch_size=10\nsteps=5\ncell=lstm\n",
    )
    .unwrap();
    let o = crnn(
        dir.path(),
        &["train", "motifs.tsv", "--config", "run.cfg", "--cell", "mgu", "--out-dir", "run"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# cell=mgu") && stdout(&o).contains("# steps=5"));
    assert!(fs::read_to_string(dir.path().join("run/run.cfg")).unwrap().contains("cell=mgu"));

    fs::write(dir.path().join("bad.cfg"), "filters=8\nfliters=8\n").unwrap();
    let o = crnn(dir.path(), &["stats", "motifs.tsv", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fliters"));
}

#[test]
fn train_writes_checkpoint_trace_and_report_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let run = |out: &str| small(dir.path(), &["train", "motifs.tsv", "--steps", "40", "--seed", "5", "--format", "csv", "--out-dir", out]);
    let a = run("a");
    let b = run("b");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    for f in ["model.ckpt", "model.ckpt.labels", "trace.csv"] {
        let fa = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(fa, fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let trace = fs::read_to_string(dir.path().join("a/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,test_f1"));
    assert_eq!(trace.lines().count(), 41);
    assert!(stdout(&a).contains("class,precision,recall,f1\n"));
    assert!(stdout(&a).lines().last().unwrap().starts_with("macro,"));

    let c = small(dir.path(), &["train", "motifs.tsv", "--steps", "40", "--seed", "6", "--out-dir", "c"]);
    assert_eq!(code(&c), 0);
    assert_ne!(
        fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        fs::read(dir.path().join("c/model.ckpt")).unwrap()
    );
}

#[test]
fn eval_reports_and_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let o = small(dir.path(), &["train", "motifs.tsv", "--steps", "60", "--cell", "gru", "--out-dir", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = crnn(dir.path(), &["eval", "run/model.ckpt", "motifs.tsv", "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# checkpoint model\n"));
    assert!(stdout(&o).contains("macro,"));

    let bytes = fs::read(dir.path().join("run/model.ckpt")).unwrap();
    fs::write(dir.path().join("short.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let o = crnn(dir.path(), &["eval", "short.ckpt", "motifs.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("corrupt checkpoint"));
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint at all").unwrap();
    assert_eq!(code(&crnn(dir.path(), &["eval", "junk.ckpt", "motifs.tsv"])), 2);

    fs::write(dir.path().join("three.tsv"), "motif_a\txqz\nmotif_b\tkvj\nother\tabc\n").unwrap();
    let o = crnn(dir.path(), &["eval", "run/model.ckpt", "three.tsv"]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("3 classes") && msg.contains("has 2"), "{msg}");

    fs::remove_file(dir.path().join("run/model.ckpt.labels")).unwrap();
    let o = crnn(dir.path(), &["eval", "run/model.ckpt", "three.tsv"]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("3 classes") && msg.contains("has 2"), "{msg}");
}

#[test]
fn gradcheck_passes_by_default_and_fails_below_the_noise_floor() {
    let dir = TempDir::new().unwrap();
    for cell in ["lstm", "gru", "mgu"] {
        let o = crnn(dir.path(), &["gradcheck", "--cell", cell]);
        assert_eq!(code(&o), 0, "{cell}: {}", stdout(&o));
        assert!(stdout(&o).contains("PASS"));
    }
    let o = crnn(dir.path(), &["gradcheck", "--tol", "1e-9"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("exceeds tolerance"));
}

#[test]
fn sweep_default_grid_and_single_alpha() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let o = small(dir.path(), &["sweep", "motifs.tsv", "--steps", "10", "--alphas", "0.5", "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(rows[0], "alpha,precision,recall,f1");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("0.5,"));

    let o = small(dir.path(), &["sweep", "motifs.tsv", "--steps", "5", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let f1: Vec<f64> = out
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(f1.len(), 9);
    assert!(f1.windows(2).all(|w| w[0] >= w[1]));

    assert_eq!(code(&small(dir.path(), &["sweep", "motifs.tsv", "--alphas", "1.2"])), 2);
}

#[test]
fn bench_all_cells_or_a_subset() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let o = small(dir.path(), &["bench", "motifs.tsv", "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(rows[0], "cell,mean_ms,median_ms,std_ms,steps,cell_params");
    assert_eq!(rows.len(), 4);
    // 4 * H * (D + H + 1) + 3 * H peepholes, then 3 and 2 gate blocks, at D = H = 8.
    assert!(rows[1].starts_with("lstm,") && rows[1].ends_with(",30,568"));
    assert!(rows[2].starts_with("gru,") && rows[2].ends_with(",30,408"));
    assert!(rows[3].starts_with("mgu,") && rows[3].ends_with(",30,272"));

    let o = small(dir.path(), &["bench", "motifs.tsv", "--cells", "lstm", "--format", "csv"]);
    let rows = stdout(&o).lines().filter(|l| l.starts_with("lstm") || l.starts_with("gru")).count();
    assert_eq!(rows, 1);
    assert_eq!(code(&small(dir.path(), &["bench", "motifs.tsv", "--bench-steps", "5"])), 2);
}

#[test]
fn knn_and_convert() {
    let dir = TempDir::new().unwrap();
    motifs(dir.path());
    let o = crnn(dir.path(), &["knn", "motifs.tsv", "--k", "3", "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("macro,"));
    assert_eq!(code(&crnn(dir.path(), &["knn", "motifs.tsv", "--k", "0"])), 2);

    fs::write(dir.path().join("qc.label"), "DESC:manner How did serfdom develop ?\nHUM:ind Who killed Gandhi ?\n").unwrap();
    let o = crnn(dir.path(), &["convert", "qc", "qc.label", "-o", "qc.tsv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(dir.path().join("qc.tsv")).unwrap();
    assert_eq!(tsv.lines().next(), Some("DESC:manner\tHow did serfdom develop ?"));
}
