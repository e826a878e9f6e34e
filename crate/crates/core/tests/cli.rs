mod common;

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_hyperrag");

fn hyperrag(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("HYPERRAG_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn offline_index(dir: &Path) -> PathBuf {
    let idx = dir.join("index");
    let corpus = fixture("toy_corpus.jsonl");
    let o = hyperrag(
        &[
            "--offline",
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&idx),
            "index",
        ],
        &[],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    idx
}

fn selected_ids(v: &Value) -> Vec<String> {
    v["selected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["id"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn toy_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    let o = hyperrag(
        &[
            "--offline",
            "--index-dir",
            s(&idx),
            "retrieve",
            "Albert Einstein",
            "--k1",
            "1",
            "--k2",
            "3",
            "--t",
            "1",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(selected_ids(&v), ["P1", "P2"]);
    assert_eq!(v["topk2"].as_array().unwrap().len(), 3);
    assert_eq!(v["query"], "Albert Einstein");
    assert_eq!(v["diagnostics"]["query_entities"][0], "albert einstein");
}

#[test]
fn stats_report_toy_counts() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    let o = hyperrag(
        &["--offline", "--index-dir", s(&idx), "stats", "--json"],
        &[],
    );
    let v = stdout_json(&o);
    assert_eq!(v["nodes"], 5);
    assert_eq!(v["hyperedges"], 3);
    assert_eq!(v["nnz"], 7);
    let text = hyperrag(&["--index-dir", s(&idx), "stats"], &[]);
    let text = String::from_utf8(text.stdout).unwrap();
    assert!(text.contains("No. of nodes") && text.contains("No. of hyperedges"));
}

#[test]
fn missing_index_is_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    for cmd in [vec!["stats"], vec!["retrieve", "q"], vec!["answer", "q"]] {
        let mut args = vec!["--offline", "--index-dir", s(&missing)];
        args.extend(cmd);
        let o = hyperrag(&args, &[]);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
    }
}

#[test]
fn unreadable_corpus_is_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("absent.jsonl");
    let o = hyperrag(
        &[
            "--offline",
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&dir.path().join("i")),
            "index",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&corpus)));
}

#[test]
fn malformed_corpus_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\":\"a\",\"title\":\"\",\"text\":\"ok\"}\n{not json\n",
    )
    .unwrap();
    let o = hyperrag(
        &[
            "--offline",
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&dir.path().join("i")),
            "index",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2"));
}

#[test]
fn invalid_parameters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    for bad in [["--beta", "1.5"], ["--k1", "0"], ["--eta", "-2"]] {
        let mut args = vec!["--offline", "--index-dir", s(&idx), "retrieve", "q"];
        args.extend(bad);
        assert_eq!(hyperrag(&args, &[]).status.code(), Some(2), "{bad:?}");
    }
    let o = hyperrag(
        &[
            "--offline",
            "--index-dir",
            s(&idx),
            "retrieve",
            "q",
            "--k1",
            "4",
            "--k2",
            "5",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_endpoint_without_offline_is_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("toy_corpus.jsonl");
    let o = hyperrag(
        &[
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&dir.path().join("i")),
            "index",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--offline"));
}

fn eval_config(idx: &Path, out: &Path, extra: &[&str], env: &[(&str, &str)]) -> Value {
    let mut args = vec!["--index-dir", s(idx)];
    args.extend(extra);
    let dataset = fixture("toy_dataset.jsonl");
    args.extend(["eval", "--dataset", s(&dataset), "--out", s(out), "--no-qa"]);
    let o = hyperrag(&args, env);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    report["config"].clone()
}

#[test]
fn configuration_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    let out = dir.path().join("ev");
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "offline = true\n[retrieval]\nbeta = 0.1\neta = 0.3\nk1 = 2\nk2 = 3\n",
    )
    .unwrap();
    let c = s(&cfg);

    let v = eval_config(&idx, &out, &["--offline", "--k1", "1"], &[]);
    assert_eq!(
        (v["beta"].as_f64(), v["eta"].as_f64(), v["steps"].as_u64()),
        (Some(0.5), Some(0.8), Some(4))
    );

    let v = eval_config(&idx, &out, &["--config", c], &[]);
    assert_eq!(
        (v["beta"].as_f64(), v["eta"].as_f64(), v["k1"].as_u64()),
        (Some(0.1), Some(0.3), Some(2))
    );

    let v = eval_config(&idx, &out, &["--config", c], &[("HYPERRAG_BETA", "0.7")]);
    assert_eq!(
        (v["beta"].as_f64(), v["eta"].as_f64()),
        (Some(0.7), Some(0.3))
    );

    let v = eval_config(
        &idx,
        &out,
        &["--config", c, "--beta", "0.9"],
        &[("HYPERRAG_BETA", "0.7")],
    );
    assert_eq!(v["beta"].as_f64(), Some(0.9));

    let v = eval_config(
        &idx,
        &out,
        &[],
        &[("HYPERRAG_CONFIG", c), ("HYPERRAG_K2", "3")],
    );
    assert_eq!(v["k2"].as_u64(), Some(3));

    let v = eval_config(
        &idx,
        &out,
        &["--config", c, "--no-weights", "--no-se", "--no-struct"],
        &[],
    );
    assert_eq!(v["use_weight_matrix"], false);
    assert_eq!(v["use_semantic_enhancement"], false);
    assert_eq!(v["use_structural_enhancement"], false);
}

#[test]
fn eval_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    let dataset = fixture("toy_dataset.jsonl");
    let run = |out: &Path| {
        let o = hyperrag(
            &[
                "--offline",
                "--index-dir",
                s(&idx),
                "--k1",
                "1",
                "--k2",
                "3",
                "eval",
                "--dataset",
                s(&dataset),
                "--out",
                s(out),
            ],
            &[],
        );
        assert_eq!(o.status.code(), Some(0));
        (
            std::fs::read(out.join("report.json")).unwrap(),
            std::fs::read(out.join("report.txt")).unwrap(),
        )
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    assert!(dir.path().join("a/timing.json").is_file());
}

#[test]
fn eval_partial_failure_exits_one_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    let dataset = dir.path().join("ds.jsonl");
    std::fs::write(
        &dataset,
        "{\"question\":\"Where was Albert Einstein born?\",\"answers\":[\"Germany\"],\"gold_passage_ids\":[\"P1\"]}\n\
         {\"question\":\"Who?\",\"answers\":[\"x\"],\"gold_passage_ids\":[\"P9\"]}\n",
    )
    .unwrap();
    let out = dir.path().join("ev");
    let o = hyperrag(
        &[
            "--offline",
            "--index-dir",
            s(&idx),
            "--k1",
            "1",
            "eval",
            "--dataset",
            s(&dataset),
            "--out",
            s(&out),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"]["failed"], 1);
    assert_eq!(report["aggregates"]["evaluated"], 1);
    assert!(report["records"][1]["error"]
        .as_str()
        .unwrap()
        .contains("P9"));
}

#[test]
fn answer_offline_prints_placeholder() {
    let dir = tempfile::tempdir().unwrap();
    let idx = offline_index(dir.path());
    let o = hyperrag(
        &[
            "--offline",
            "--index-dir",
            s(&idx),
            "answer",
            "Where was Albert Einstein born?",
            "--k1",
            "1",
            "--k2",
            "3",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&o.stdout).trim().is_empty());
}

fn remote_env(server: &MockServer) -> Vec<(&'static str, String)> {
    vec![
        ("HYPERRAG_LLM_BASE_URL", server.base_url.clone()),
        ("HYPERRAG_LLM_MODEL", "mock-chat".into()),
        ("HYPERRAG_EMBED_BASE_URL", server.base_url.clone()),
        ("HYPERRAG_EMBED_MODEL", "mock-embed".into()),
        ("HYPERRAG_EMBED_API_KEY", "k".into()),
    ]
}

fn fast_retry_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("fast.toml");
    std::fs::write(&cfg, "retry_base_delay_ms = 1\n").unwrap();
    cfg
}

#[test]
fn remote_index_is_cached_and_rerun_is_free() {
    let server = MockServer::start();
    let dir = tempfile::tempdir().unwrap();
    let idx = dir.path().join("index");
    let corpus = fixture("toy_corpus.jsonl");
    let env = remote_env(&server);
    let env: Vec<(&str, &str)> = env.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let args = ["--corpus", s(&corpus), "--index-dir", s(&idx), "index"];

    let o = hyperrag(&args, &env);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(server.count("/chat/completions"), 3);
    assert!(server.count("/embeddings") >= 1);
    let first = std::fs::read(idx.join("manifest.json")).unwrap();

    let before = server.total();
    let o = hyperrag(&args, &env);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(server.total(), before, "rerun must not call the endpoints");
    assert_eq!(std::fs::read(idx.join("manifest.json")).unwrap(), first);

    let o = hyperrag(
        &[
            "--index-dir",
            s(&idx),
            "retrieve",
            "Albert Einstein",
            "--k1",
            "1",
            "--k2",
            "3",
            "--t",
            "1",
        ],
        &env,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(selected_ids(&stdout_json(&o)), ["P1", "P2"]);

    let offline = hyperrag(
        &[
            "--offline",
            "--index-dir",
            s(&idx),
            "retrieve",
            "q",
            "--k1",
            "1",
        ],
        &[],
    );
    assert_eq!(
        offline.status.code(),
        Some(2),
        "encoder mismatch must be refused"
    );
}

#[test]
fn remote_calls_retry_transient_failures() {
    let server = MockServer::start();
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_retry_config(dir.path());
    let corpus = fixture("toy_corpus.jsonl");
    let env = remote_env(&server);
    let env: Vec<(&str, &str)> = env.iter().map(|(k, v)| (*k, v.as_str())).collect();

    server.fail_next(2);
    let o = hyperrag(
        &[
            "--config",
            s(&cfg),
            "--parallelism",
            "1",
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&dir.path().join("a")),
            "index",
        ],
        &env,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    server.fail_next(3);
    let o = hyperrag(
        &[
            "--config",
            s(&cfg),
            "--parallelism",
            "1",
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&dir.path().join("b")),
            "index",
        ],
        &env,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("b/manifest.json").exists());
}

const SHIM: &str = r#"
#include <stdio.h>
#include <unistd.h>
#include <sys/socket.h>
int socket(int d, int t, int p) { (void)d; (void)t; (void)p; fputs("socket() called\n", stderr); _exit(97); }
int connect(int s, const struct sockaddr *a, socklen_t l) { (void)s; (void)a; (void)l; fputs("connect() called\n", stderr); _exit(97); }
"#;

fn build_socket_shim(dir: &Path) -> Option<PathBuf> {
    let src = dir.join("nosocket.c");
    let lib = dir.join("nosocket.so");
    std::fs::write(&src, SHIM).unwrap();
    let ok = Command::new("cc")
        .args(["-shared", "-fPIC", "-o", s(&lib), s(&src)])
        .status()
        .map(|st| st.success())
        .unwrap_or(false);
    ok.then_some(lib)
}

#[test]
fn offline_mode_never_opens_a_socket() {
    let dir = tempfile::tempdir().unwrap();
    let trap = TcpListener::bind("127.0.0.1:0").unwrap();
    trap.set_nonblocking(true).unwrap();
    let url = format!("http://{}/v1", trap.local_addr().unwrap());
    let mut env = vec![
        ("HYPERRAG_LLM_BASE_URL", url.as_str()),
        ("HYPERRAG_LLM_MODEL", "m"),
        ("HYPERRAG_EMBED_BASE_URL", url.as_str()),
        ("HYPERRAG_EMBED_MODEL", "m"),
        ("HTTP_PROXY", url.as_str()),
        ("HTTPS_PROXY", url.as_str()),
        ("ALL_PROXY", url.as_str()),
    ];
    let shim = build_socket_shim(dir.path());
    let shim_str = shim.as_ref().map(|p| s(p).to_string());
    if let Some(lib) = &shim_str {
        env.push(("LD_PRELOAD", lib.as_str()));
    } else {
        eprintln!("no C compiler; relying on the listener trap only");
    }

    let idx = dir.path().join("index");
    let corpus = fixture("toy_corpus.jsonl");
    let dataset = fixture("toy_dataset.jsonl");
    let out = dir.path().join("ev");
    let runs: Vec<Vec<&str>> = vec![
        vec![
            "--offline",
            "--corpus",
            s(&corpus),
            "--index-dir",
            s(&idx),
            "index",
        ],
        vec![
            "--offline",
            "--index-dir",
            s(&idx),
            "--k1",
            "1",
            "retrieve",
            "Albert Einstein",
        ],
        vec![
            "--offline",
            "--index-dir",
            s(&idx),
            "--k1",
            "1",
            "answer",
            "Where was Albert Einstein born?",
        ],
        vec![
            "--offline",
            "--index-dir",
            s(&idx),
            "--k1",
            "1",
            "eval",
            "--dataset",
            s(&dataset),
            "--out",
            s(&out),
        ],
        vec!["--offline", "--index-dir", s(&idx), "stats"],
    ];
    for args in &runs {
        let o = hyperrag(args, &env);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(
        trap.accept().err().map(|e| e.kind()),
        Some(std::io::ErrorKind::WouldBlock)
    );

    if let Some(lib) = &shim_str {
        // the shim does trip on a networked run
        let o = hyperrag(
            &[
                "--index-dir",
                s(&dir.path().join("x")),
                "--corpus",
                s(&corpus),
                "index",
            ],
            &[
                ("LD_PRELOAD", lib.as_str()),
                ("HYPERRAG_LLM_BASE_URL", url.as_str()),
                ("HYPERRAG_LLM_MODEL", "m"),
                ("HYPERRAG_EMBED_BASE_URL", url.as_str()),
                ("HYPERRAG_EMBED_MODEL", "m"),
            ],
        );
        assert_eq!(
            o.status.code(),
            Some(97),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}
