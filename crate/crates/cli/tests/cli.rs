use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[corpus]
num_docs = 8
page_width = 188
page_height = 250

[model]
page_width = 188
page_height = 250

[train]
steps = 2
checkpoint_every = 1

[topics]
iterations = 5
"#;

fn mpdoc(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_mpdoc"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap().trim().to_string()
}

fn gen(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let run = dir.join(name);
    PathBuf::from(ok(&mpdoc(dir, &["gen-corpus", "--seed", seed, "--run-dir", run.to_str().unwrap()])))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "7");
    let b = gen(dir.path(), "b", "7");
    let (ta, tb) = (tree(a.parent().unwrap()), tree(b.parent().unwrap()));
    assert!(ta.len() > 8);
    assert_eq!(ta, tb);
    let c = gen(dir.path(), "c", "8");
    assert_ne!(ta, tree(c.parent().unwrap()));
}

#[test]
fn pretrain_with_dtm_needs_topics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), "corpus", "1");
    let run = dir.path().join("pt");
    let out = mpdoc(dir.path(), &["pretrain", "--corpus", manifest.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("doc_topics.jsonl"), "{err}");
}

#[test]
fn full_cycle_records_the_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = gen(d, "corpus", "2");
    let m = manifest.to_str().unwrap();
    let topics = ok(&mpdoc(d, &["mine-topics", "--corpus", m, "--run-dir", d.join("topics").to_str().unwrap()]));
    let pt = d.join("pt");
    let ckpt = ok(&mpdoc(d, &["pretrain", "--corpus", m, "--topics", &topics, "--run-dir", pt.to_str().unwrap()]));
    assert!(pt.join("train.log").exists());

    let ev = d.join("eval");
    let metrics = ok(&mpdoc(
        d,
        &["evaluate", "--checkpoint", &ckpt, "--corpus", m, "--ablation", "image-only", "--run-dir", ev.to_str().unwrap()],
    ));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(metrics).unwrap()).unwrap();
    let mask = &report["ablation"];
    assert_eq!(mask["use_text"], false);
    assert_eq!(mask["use_layout"], false);
    assert_eq!(mask["use_image"], true);
    assert_eq!(mask["use_page"], false);
    let echoed = fs::read_to_string(ev.join("config.toml")).unwrap();
    assert!(echoed.contains("ablation = \"image-only\""), "{echoed}");

    // a used run directory is refused
    let again = mpdoc(d, &["evaluate", "--checkpoint", &ckpt, "--corpus", m, "--run-dir", ev.to_str().unwrap()]);
    assert!(!again.status.success());
}

#[test]
fn unknown_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpdoc(dir.path(), &["gen-corpus", "--device", "cuda", "--run-dir", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cuda"));
}
