use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bridging::synthetic::{generate, SyntheticConfig};
use serde_json::Value;
use tempfile::TempDir;

const SMALL_MODEL: &str = "\
# tiny widths so the tests stay quick
static_dim = 0
char_dim = 4
char_filter_widths = 2,3
char_filters = 4
lstm_layers = 1
lstm_hidden = 6
ffnn_size = 8
feature_dim = 4
epochs = 2
learning_rate = 0.01
";

fn bridging(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridging"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

/// Exit code and the parsed one-line error record.
fn failure(out: &Output) -> (i32, Value) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    (
        out.status.code().unwrap(),
        serde_json::from_str(lines[0]).unwrap(),
    )
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(documents: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, _) = generate(&SyntheticConfig {
            documents,
            entities: 5 * documents,
            clusters: documents,
            repeats: 2 * documents,
            bridging: 2 * documents,
            singletons: 2 * documents,
            static_dim: 0,
            ..SyntheticConfig::small()
        })
        .unwrap();
        corpus.save(dir.path().join("corpus.jsonl")).unwrap();
        std::fs::write(dir.path().join("small.conf"), SMALL_MODEL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    /// `command --config small.conf --corpus corpus.jsonl` plus `extra`.
    fn run(&self, command: &str, extra: &[&str]) -> Output {
        let (config, corpus) = (self.arg("small.conf"), self.arg("corpus.jsonl"));
        let mut args = vec![command, "--config", &config, "--corpus", &corpus];
        args.extend_from_slice(extra);
        bridging(&args)
    }

    fn train(&self, dir: &str, extra: &[&str]) -> PathBuf {
        let out_dir = self.arg(dir);
        let mut args = vec!["--output", out_dir.as_str()];
        args.extend_from_slice(extra);
        let out = self.run("train", &args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        self.path(dir).join("model.ckpt")
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gradcheck_passes_and_prints_the_error() {
    let out = bridging(&["gradcheck"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = stdout_json(&out);
    assert_eq!(report["passed"], true);
    assert!(report["max_relative_error"].as_f64().unwrap() <= 1e-4);
    let modes = report["modes"].as_array().unwrap();
    let names: Vec<&str> = modes
        .iter()
        .map(|m| m["sharing"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["ENCODER_ONLY", "SHARE_FFNN_1", "SHARE_FFNN_2"]);
    for m in modes {
        assert_eq!(m["model"]["encoder"]["lstm_layers"], 3);
        assert!(m["entries_checked"].as_u64().unwrap() > 1000);
        assert!(m["kink_margin"].as_f64().unwrap() >= 1e-3);
    }
    assert_eq!(report["seed"], 0);
}

#[test]
fn predict_without_checkpoint_is_a_usage_error() {
    let ws = Workspace::new(3);
    let (code, record) = failure(&ws.run("predict", &[]));
    assert_eq!(code, 1);
    assert_eq!(record["error"]["kind"], "usage");
    assert!(record["error"]["message"]
        .as_str()
        .unwrap()
        .contains("checkpoint"));
}

#[test]
fn argument_and_configuration_mistakes_exit_with_usage() {
    for args in [
        &["frobnicate"][..],
        &["train", "--bogus"],
        &["gradcheck", "--set", "no_such_key=1"],
        &["gradcheck", "--set", "learning_rate"],
        &["gradcheck", "--set", "dropout.lstm=1.5"],
        &["gradcheck", "--config", "/nonexistent/run.conf"],
        &["validate-corpus"],
    ] {
        let (code, record) = failure(&bridging(args));
        assert_eq!(code, 1, "{args:?}: {record}");
        assert_eq!(record["error"]["exit_code"], 1);
    }
}

#[test]
fn bad_data_exits_with_two() {
    let ws = Workspace::new(3);
    let (code, record) = failure(&bridging(&[
        "validate-corpus",
        "--corpus",
        "/nonexistent/corpus.jsonl",
    ]));
    assert_eq!((code, record["error"]["kind"].as_str()), (2, Some("data")));

    std::fs::write(ws.path("broken.jsonl"), "{\"doc_id\": \"x\", \"sentences\": [[\"a\"]], \"mentions\": [{\"id\": \"m\", \"start\": 0, \"end\": 5}]}\n").unwrap();
    let (code, _) = failure(&bridging(&[
        "validate-corpus",
        "--corpus",
        &ws.arg("broken.jsonl"),
    ]));
    assert_eq!(code, 2);

    std::fs::write(ws.path("garbage.ckpt"), "not a checkpoint").unwrap();
    let (code, _) = failure(&ws.run("predict", &["--checkpoint", &ws.arg("garbage.ckpt")]));
    assert_eq!(code, 2);
}

#[test]
fn divergent_training_exits_with_three() {
    let ws = Workspace::new(3);
    let out_dir = ws.arg("diverged");
    let out = ws.run(
        "train",
        &[
            "--output",
            &out_dir,
            "--set",
            "learning_rate=1e38",
            "--epochs",
            "30",
        ],
    );
    let (code, record) = failure(&out);
    assert_eq!(
        (code, record["error"]["kind"].as_str()),
        (3, Some("numeric")),
        "{record}"
    );
    assert!(record["error"]["message"]
        .as_str()
        .unwrap()
        .contains("non-finite"));
}

#[test]
fn validate_corpus_reports_counts() {
    let ws = Workspace::new(4);
    let out = ws.run("validate-corpus", &[]);
    assert!(out.status.success());
    let report = stdout_json(&out);
    let corpus = bridging::corpus::load_corpus(ws.path("corpus.jsonl")).unwrap();
    assert_eq!(report["valid"], true);
    assert_eq!(report["documents"], 4);
    assert_eq!(report["mentions"], corpus.num_mentions());
    assert_eq!(report["bridging_links"], corpus.num_links());
    let status = &report["information_status"];
    let total = ["dn", "do", "bridging"]
        .iter()
        .map(|k| status[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(total as usize, corpus.num_mentions());
}

#[test]
fn static_vectors_are_required_when_the_channel_is_on() {
    let ws = Workspace::new(2);
    let out_dir = ws.arg("run");
    let (code, record) =
        failure(&ws.run("train", &["--output", &out_dir, "--set", "static_dim=3"]));
    assert_eq!(code, 1);
    assert!(record["error"]["message"]
        .as_str()
        .unwrap()
        .contains("static"));

    let corpus = bridging::corpus::load_corpus(ws.path("corpus.jsonl")).unwrap();
    let mut tokens: Vec<&str> = corpus.documents.iter().flat_map(|d| d.tokens()).collect();
    tokens.sort_unstable();
    tokens.dedup();
    let lines: String = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{t} {} 0.5 -0.25\n", i as f32 / 10.0))
        .collect();
    std::fs::write(ws.path("vectors.txt"), lines).unwrap();
    let vectors = ws.arg("vectors.txt");
    ws.train(
        "run",
        &[
            "--set",
            "static_dim=3",
            "--static-vectors",
            &vectors,
            "--epochs",
            "1",
        ],
    );

    let (code, _) = failure(&ws.run(
        "train",
        &[
            "--output",
            &out_dir,
            "--set",
            "static_dim=4",
            "--static-vectors",
            &vectors,
        ],
    ));
    assert_eq!(code, 2);
}

#[test]
fn train_writes_checkpoints_and_a_loss_log_with_the_config() {
    let ws = Workspace::new(4);
    let ckpt = ws.train(
        "run",
        &["--epochs", "4", "--checkpoint-every", "2", "--seed", "7"],
    );
    assert!(ckpt.exists());
    assert!(ws.path("run").join("epoch-0002.ckpt").exists());
    assert!(!ws.path("run").join("epoch-0004.ckpt").exists());
    let log = read_json(&ws.path("run").join("loss_log.json"));
    assert_eq!(log["seed"], 7);
    assert_eq!(log["config"]["train"]["epochs"], 4);
    assert_eq!(log["config"]["model"]["encoder"]["lstm_hidden"], 6);
    assert_eq!(log["epochs"].as_array().unwrap().len(), 4);

    let manifest: Value = {
        let bytes = std::fs::read(&ckpt).unwrap();
        let end = bytes.iter().position(|&b| b == b'\n').unwrap();
        serde_json::from_slice(&bytes[..end]).unwrap()
    };
    assert_eq!(manifest["meta"]["seed"], 7);
    assert_eq!(manifest["meta"]["epoch"], 4);
    assert_eq!(manifest["meta"]["config"], log["config"]);
}

#[test]
fn flags_beat_the_file_which_beats_defaults() {
    let ws = Workspace::new(2);
    std::fs::write(
        ws.path("small.conf"),
        format!("{SMALL_MODEL}epochs = 3\nseed = 5\nnegative_ratio = 1.5\n"),
    )
    .unwrap();
    ws.train("run", &["--epochs", "1", "--set", "seed=6"]);
    let log = read_json(&ws.path("run").join("loss_log.json"));
    assert_eq!(log["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(log["seed"], 6);
    assert_eq!(log["config"]["train"]["negative_ratio"], 1.5);
    assert_eq!(log["config"]["train"]["learning_rate"], 0.01);
    assert_eq!(log["config"]["train"]["dropout"]["embedding"], 0.5);
}

#[test]
fn predict_is_byte_identical_and_carries_a_header() {
    let ws = Workspace::new(4);
    let ckpt = ws.train("run", &["--seed", "3"]);
    let ckpt = ckpt.to_str().unwrap();
    let a = ws.run("predict", &["--checkpoint", ckpt]);
    let b = ws.run("predict", &["--checkpoint", ckpt]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);

    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["seed"], 3);
    assert_eq!(header["config"]["run"]["task"], "bridging");
    let records: Vec<Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    let corpus = bridging::corpus::load_corpus(ws.path("corpus.jsonl")).unwrap();
    assert_eq!(records.len(), corpus.num_mentions());
    for r in &records {
        assert_eq!(r["task"], "bridging");
        assert!(r["anaphor"]["start"].is_u64() && r["anaphor"]["end"].is_u64());
        assert!(r["antecedent"].is_null() || r["antecedent"]["start"].is_u64());
        assert!(r["score"].is_number());
        assert!(corpus.document(r["doc_id"].as_str().unwrap()).is_some());
    }

    let file = ws.arg("predictions.jsonl");
    let out = ws.run("predict", &["--checkpoint", ckpt, "--output", &file]);
    assert!(out.status.success());
    let written = std::fs::read_to_string(&file).unwrap();
    let body = |t: &str| t.lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(&written), body(&text));
    let header_line: Value = serde_json::from_str(written.lines().next().unwrap()).unwrap();
    assert_eq!(header_line["config"]["run"]["output"], file.as_str());

    let removed = ws.run("predict", &["--checkpoint", ckpt, "--setting", "remove"]);
    assert!(String::from_utf8(removed.stdout).unwrap().lines().count() <= text.lines().count());
}

#[test]
fn evaluate_reports_all_three_tasks() {
    let ws = Workspace::new(4);
    let ckpt = ws.train("run", &[]);
    let out = ws.run(
        "evaluate",
        &[
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--setting",
            "remove",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = stdout_json(&out);
    let tasks: Vec<&str> = report["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["task"].as_str().unwrap())
        .collect();
    assert_eq!(
        tasks,
        [
            "full_bridging",
            "anaphor_recognition",
            "antecedent_selection"
        ]
    );
    assert_eq!(report["reports"][0]["setting"], "remove");
    let links = bridging::corpus::load_corpus(ws.path("corpus.jsonl"))
        .unwrap()
        .num_links();
    assert_eq!(report["reports"][2]["counts"]["gold"], links);
    assert!(report["config"].is_object() && report["seed"].is_u64());
}

#[test]
fn crossval_gives_one_report_per_fold_and_a_pooled_one() {
    let ws = Workspace::new(50);
    let file = ws.arg("crossval.json");
    let out = ws.run(
        "crossval",
        &["--folds", "10", "--epochs", "1", "--output", &file],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(Path::new(&file));
    let folds = report["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 10);
    let mut seen: Vec<&str> = folds
        .iter()
        .flat_map(|f| {
            f["test_documents"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d.as_str().unwrap())
        })
        .collect();
    assert_eq!(seen.len(), 50);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 50);

    let pooled = report["pooled"].as_array().unwrap();
    assert_eq!(pooled.len(), 3);
    for (k, task) in pooled.iter().enumerate() {
        for field in ["gold", "predicted", "correct"] {
            let sum: u64 = folds
                .iter()
                .map(|f| f["reports"][k]["counts"][field].as_u64().unwrap())
                .sum();
            assert_eq!(
                task["counts"][field].as_u64().unwrap(),
                sum,
                "{field} of {}",
                task["task"]
            );
        }
    }
    let links = bridging::corpus::load_corpus(ws.path("corpus.jsonl"))
        .unwrap()
        .num_links();
    assert_eq!(pooled[0]["counts"]["gold"], links);
}

#[test]
fn parallel_crossval_matches_sequential() {
    let ws = Workspace::new(6);
    let run = |extra: &[&str]| {
        let mut args = vec!["--folds", "3", "--epochs", "1"];
        args.extend_from_slice(extra);
        let out = ws.run("crossval", &args);
        assert!(out.status.success());
        out.stdout
    };
    let sequential = run(&[]);
    let parallel: Value = serde_json::from_slice(&run(&["--parallel-folds"])).unwrap();
    let mut sequential: Value = serde_json::from_slice(&sequential).unwrap();
    assert_eq!(parallel["config"]["run"]["parallel_folds"], true);
    sequential["config"]["run"]["parallel_folds"] = Value::Bool(true);
    assert_eq!(parallel, sequential);
}
