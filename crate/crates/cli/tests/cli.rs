use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use hybridlm::generate::{greedy_generate, GenerationConfig};
use hybridlm::training::load_checkpoint;
use hybridlm::Vocab;

const TINY: [&str; 18] = [
    "--set",
    "vocab_size=320",
    "--set",
    "model.hidden_size=32",
    "--set",
    "model.ff_intermediate_size=64",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.max_seq_len=48",
    "--set",
    "schedule={\"total_steps\":12,\"batch_tokens_start\":128,\"batch_tokens_end\":256,\"seq_len_start\":16,\"seq_len_end\":32,\"ratio\":\"1:3\"}",
    "--set",
    "checkpoint_every=4",
    "--set",
    "model.dropout_p=0.1",
    "--set",
    "optim.initial_learning_rate=0.01",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybridlm"));
    c.env_remove("HYBRIDLM_SEED");
    c
}

fn corpus(dir: &Path) -> PathBuf {
    let p = dir.join("corpus.txt");
    let docs: Vec<String> = (0..40)
        .map(|i| {
            format!(
                "the {} sat near the {} and sang {} songs.",
                ["cat", "dog", "bird"][i % 3],
                ["river", "barn"][i % 2],
                i
            )
        })
        .collect();
    fs::write(&p, docs.join("\n\n")).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tokenize_and_train(dir: &Path, corpus: &Path, extra: &[&str]) {
    run(bin()
        .args(["tokenize", "--corpus"])
        .arg(corpus)
        .args(TINY)
        .arg("--out")
        .arg(dir));
    run(bin()
        .args(["train", "--log-every", "0", "--corpus"])
        .arg(corpus)
        .args(TINY)
        .args(extra)
        .arg("--out")
        .arg(dir));
}

fn read(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const ARTIFACTS: [&str; 4] = [
    "vocab.txt",
    "metrics.jsonl",
    "checkpoint-12/manifest.json",
    "checkpoint-12/tensors.bin",
];

#[test]
fn tokenize_train_is_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let c = corpus(tmp.path());
    let (a, b, r) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("r"),
    );
    tokenize_and_train(&a, &c, &[]);
    tokenize_and_train(&b, &c, &[]);
    for f in ARTIFACTS {
        assert_eq!(
            read(a.join(f)),
            read(b.join(f)),
            "{f} differs between identical runs"
        );
    }
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);

    // Interrupted run: keep only the first checkpoint, then resume from it.
    tokenize_and_train(&r, &c, &[]);
    for step in [8, 12] {
        fs::remove_dir_all(r.join(format!("checkpoint-{step}"))).unwrap();
    }
    run(bin()
        .args(["train", "--log-every", "0", "--out"])
        .arg(&r)
        .arg("--resume")
        .arg(r.join("checkpoint-4")));
    for f in ARTIFACTS {
        assert_eq!(read(a.join(f)), read(r.join(f)), "{f} differs after resume");
    }

    let manifest: serde_json::Value =
        serde_json::from_slice(&read(r.join("manifest.json"))).unwrap();
    assert_eq!(manifest["train"]["status"], "finished");
    assert_eq!(manifest["train"]["start_step"], 4);
    assert_eq!(manifest["train"]["final_metrics"]["step"], 12);
    assert_eq!(
        manifest["train"]["corpus_sha256"],
        manifest["tokenize"]["corpus_sha256"]
    );
    assert!(!r.join(".hybridlm.lock").exists());
}

#[test]
fn seed_environment_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let c = corpus(tmp.path());
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(i.to_string())).collect();
    run(bin()
        .args(["tokenize", "--corpus"])
        .arg(&c)
        .args(TINY)
        .arg("--out")
        .arg(&dirs[0]));
    for d in &dirs[1..] {
        fs::create_dir_all(d).unwrap();
        fs::copy(dirs[0].join("vocab.txt"), d.join("vocab.txt")).unwrap();
    }
    let train = |dir: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = bin();
        cmd.args(["train", "--log-every", "0", "--steps", "2", "--corpus"])
            .arg(&c)
            .args(TINY)
            .arg("--out")
            .arg(dir);
        if let Some(e) = env {
            cmd.env("HYBRIDLM_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        run(&mut cmd);
        let m: serde_json::Value =
            serde_json::from_slice(&read(dir.join("manifest.json"))).unwrap();
        (
            m["train"]["seed"].as_u64().unwrap(),
            read(dir.join("checkpoint-2/tensors.bin")),
        )
    };
    let (s0, t0) = train(&dirs[0], None, None);
    let (s1, t1) = train(&dirs[1], Some("77"), None);
    let (s2, t2) = train(&dirs[2], Some("77"), Some("5"));
    assert_eq!((s0, s1, s2), (0, 77, 5));
    assert_ne!(t0, t1);
    assert_ne!(t1, t2);
}

fn trained_run() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let c = corpus(tmp.path());
    let dir = tmp.path().join("run");
    tokenize_and_train(&dir, &c, &["--steps", "4"]);
    (tmp, dir)
}

#[test]
fn eval_writes_report_and_rejects_bad_modes() {
    let (tmp, dir) = trained_run();
    let data = tmp.path().join("eval.jsonl");
    fs::write(
        &data,
        concat!(
            "{\"kind\":\"pair\",\"good\":\"the cat sat.\",\"bad\":\"cat the sat.\"}\n",
            "{\"kind\":\"cloze\",\"context\":\"the dog sat near the\",\"answer\":\"river\"}\n",
            "{\"kind\":\"text\",\"text\":\"the bird sat near the barn and sang 3 songs.\"}\n",
        ),
    )
    .unwrap();
    let ckpt = dir.join("checkpoint-4");
    let before = read(data.clone());
    let out = run(bin()
        .args([
            "eval",
            "--mode",
            "prefix",
            "--prefix-fraction",
            "0.5",
            "--calibrate-temperature",
            "--checkpoint",
        ])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data));
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
    assert_eq!(read(data.clone()), before, "eval must not touch its inputs");
    let report: serde_json::Value = serde_json::from_slice(&read(dir.join("report.json"))).unwrap();
    assert_eq!(report["mode"], "prefix");
    assert_eq!(report["prefix_fraction"], 0.5);
    assert_eq!(report["overall"]["ranked"], 1);
    assert_eq!(report["overall"]["text"], 1);
    assert!(report["overall"]["accuracy"].is_number());
    assert!(report["calibration"]
        .as_array()
        .is_some_and(|c| !c.is_empty()));
    assert_eq!(report["step"], 4);

    let bad = bin()
        .args(["eval", "--mode", "sideways", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let broken = tmp.path().join("broken.jsonl");
    fs::write(&broken, "{\"kind\":\"pair\",\"good\":\"a\"}\n").unwrap();
    let bad = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&broken)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
}

#[test]
fn generate_json_stdin_and_penalty() {
    let (_tmp, dir) = trained_run();
    let ckpt = dir.join("checkpoint-4");
    let gen = |prompt_arg: &str, stdin: Option<&str>, penalty: &str| {
        let mut child = bin()
            .args([
                "generate",
                "--json",
                "--max-new-tokens",
                "8",
                "--repetition-penalty",
                penalty,
                "--checkpoint",
            ])
            .arg(&ckpt)
            .arg(prompt_arg)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut input = child.stdin.take().unwrap();
        input.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
        drop(input);
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success());
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let direct = gen("the cat", None, "1.5");
    let piped = gen("-", Some("the cat\n"), "1.5");
    assert_eq!(direct, piped);
    assert_eq!(direct["prompt"], "the cat");
    let steps = direct["steps"].as_u64().unwrap();
    assert!((1..=8).contains(&steps));
    assert!(direct["text"].is_string());

    // The penalty reaches the decoder unchanged.
    let vocab = Vocab::load(&dir.join("vocab.txt")).unwrap();
    let params = load_checkpoint(&ckpt).unwrap().params;
    let mut prompt = vec![vocab.specials().bos];
    prompt.extend(vocab.encode("the cat"));
    let cfg = GenerationConfig {
        max_new_tokens: 8,
        repetition_penalty: 1.5,
        stop_on_eos: true,
    };
    let expected = greedy_generate(&params, &prompt, &cfg, vocab.specials().eos).unwrap();
    let ids: Vec<u32> = direct["ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as u32)
        .collect();
    assert_eq!(ids, expected.ids);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let c = corpus(tmp.path());
    let out = tmp.path().join("run");
    let code = |cmd: &mut Command| {
        let o = cmd.output().unwrap();
        (
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).into_owned(),
        )
    };

    let (status, err) = code(bin().args(["tokenize", "--out"]).arg(&out));
    assert_eq!(status, Some(2));
    assert!(err.contains("`corpus`"), "{err}");

    let (status, err) = code(
        bin()
            .args(["tokenize", "--corpus", "/nonexistent/corpus.txt", "--out"])
            .arg(&out),
    );
    assert_eq!(status, Some(2));
    assert!(err.contains("`corpus`"), "{err}");

    run(bin()
        .args(["tokenize", "--corpus"])
        .arg(&c)
        .args(TINY)
        .arg("--out")
        .arg(&out));
    let first = read(out.join("vocab.txt"));
    run(bin()
        .args(["tokenize", "--corpus"])
        .arg(&c)
        .args(TINY)
        .arg("--out")
        .arg(&out));
    assert_eq!(first, read(out.join("vocab.txt")));

    let (status, _) = code(
        bin()
            .args(["train", "--ratio", "1:", "--corpus"])
            .arg(&c)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(status, Some(2));
    let (status, _) = code(
        bin()
            .args(["train", "--set", "schedule.ratio=1:", "--corpus"])
            .arg(&c)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(status, Some(2));
    let (status, err) = code(
        bin()
            .args(["train", "--set", "model.depth=3", "--corpus"])
            .arg(&c)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(status, Some(2));
    assert!(err.contains("model.depth"), "{err}");

    let (status, _) = code(
        bin()
            .args(["generate", "--checkpoint"])
            .arg(out.join("checkpoint-9"))
            .arg("hi"),
    );
    assert_eq!(status, Some(2));
    let (status, _) = code(
        bin()
            .args(["train", "--out"])
            .arg(&out)
            .arg("--resume")
            .arg(out.join("checkpoint-9")),
    );
    assert_eq!(status, Some(2));

    fs::write(out.join(".hybridlm.lock"), "1").unwrap();
    let (status, err) = code(
        bin()
            .args(["train", "--corpus"])
            .arg(&c)
            .args(TINY)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(status, Some(2));
    assert!(err.contains("in use"), "{err}");
}
