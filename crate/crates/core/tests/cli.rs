use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_modalfuse");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn modalfuse")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// A small dataset written through `generate`.
fn small_data(dir: &Path) -> PathBuf {
    let spec = write(dir, "small.txt", "dim=16\nn_topics=4\nn_queries=24\nitems_per_query=5\n");
    let out = dir.join("data");
    assert!(run(&["generate", "--spec", s(&spec), "--out", s(&out)]).status.success());
    out
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

#[test]
fn generate_writes_data_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("g");
    let o = run(&["generate", "--preset", "standard", "--seed", "11", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["embeddings.bin", "pairs.bin", "spec.txt", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = manifest(&out);
    assert!(m.contains("command=generate\n") && m.contains("seed=11\n") && m.contains("engine_version="));
    assert!(fs::read_to_string(out.join("spec.txt")).unwrap().contains("seed=11\n"));
}

#[test]
fn bad_spec_key_is_named() {
    let t = tempfile::tempdir().unwrap();
    let spec = write(t.path(), "spec.txt", "preset=standard\nnoise_sigmaa=0.1\n");
    let o = run(&["generate", "--spec", s(&spec), "--out", s(&t.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("noise_sigmaa"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["generate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn fusion_stage_without_stage2_warns_and_proceeds() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = write(t.path(), "s3.txt", "stage=fusion_align\nepochs=2\nbatch_size=16\n");
    let out = t.path().join("s3");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--embeddings",
        s(&data.join("embeddings.bin")),
        "--pairs",
        s(&data.join("pairs.bin")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&out);
    assert!(m.contains("warnings=1\n"), "{m}");
    assert!(m.contains("warning.1=fusion_align started without stage II output"), "{m}");
    assert!(out.join("checkpoint.bin").exists());
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 3);
}

#[test]
fn lambda_ordering_is_cited() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = write(t.path(), "bad.txt", "lambda_eng=0.4\nlambda_rel=0.6\n");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--embeddings",
        s(&data.join("embeddings.bin")),
        "--pairs",
        s(&data.join("pairs.bin")),
        "--out",
        s(&t.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("λ_eng > λ_rel"), "{}", stderr(&o));
}

#[test]
fn seed_flag_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = write(t.path(), "s2.txt", "stage=query_text_align\nepochs=1\nbatch_size=16\nseed=3\n");
    let out = t.path().join("t");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--embeddings",
        s(&data.join("embeddings.bin")),
        "--pairs",
        s(&data.join("pairs.bin")),
        "--seed",
        "99",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(manifest(&out).contains("seed=99\n"));
    let ck = modalfuse::trainer::load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.config.seed, 99);
    assert_eq!(ck.stages, vec![modalfuse::trainer::Stage::QueryTextAlign]);
}

#[test]
fn eval_defaults_and_dim_guard() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = write(t.path(), "s2.txt", "stage=query_text_align\nepochs=1\nbatch_size=16\n");
    let tr = t.path().join("t");
    let emb = data.join("embeddings.bin");
    let pairs = data.join("pairs.bin");
    assert!(run(&["train", "--config", s(&cfg), "--embeddings", s(&emb), "--pairs", s(&pairs), "--out", s(&tr)])
        .status
        .success());
    let ev = t.path().join("e");
    let ck = tr.join("checkpoint.bin");
    let o = run(&["eval", "--checkpoint", s(&ck), "--embeddings", s(&emb), "--pairs", s(&pairs), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let cutoffs: Vec<&str> = csv.lines().skip(1).filter(|l| l.starts_with("desirability")).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(cutoffs, ["1", "3", "9", "24"]);
    assert!(fs::read_to_string(ev.join("gates.csv")).unwrap().starts_with("category,items,mean_alpha"));

    let other = t.path().join("other");
    let spec = write(t.path(), "d8.txt", "dim=8\nn_topics=4\nn_queries=6\nitems_per_query=3\n");
    assert!(run(&["generate", "--spec", s(&spec), "--out", s(&other)]).status.success());
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--embeddings",
        s(&other.join("embeddings.bin")),
        "--pairs",
        s(&other.join("pairs.bin")),
        "--out",
        s(&t.path().join("e2")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupted_gradient_exits_three_naming_tensor() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("gc");
    let o = run(&["gradcheck", "--seeds", "1", "--corrupt-gradient", "gate_w", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("gate_w["), "{}", stderr(&o));
    assert!(manifest(&out).contains("deliberately corrupted"));
    let o = run(&["gradcheck", "--seeds", "1", "--corrupt-gradient", "no_such_tensor", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_writes_one_directory_per_variant() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = write(t.path(), "a.txt", "epochs=2\nbatch_size=16\n");
    let out = t.path().join("ab");
    let o = run(&[
        "ablate",
        "--config",
        s(&cfg),
        "--embeddings",
        s(&data.join("embeddings.bin")),
        "--pairs",
        s(&data.join("pairs.bin")),
        "--holdout",
        "4",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["mlp", "moe", "moe_mlp", "attention", "moe_bilinear"] {
        for f in ["checkpoint.bin", "loss.csv", "metrics.csv", "gates.csv"] {
            assert!(out.join(v).join(f).exists(), "{v}/{f}");
        }
        let ck = modalfuse::trainer::load_checkpoint(&out.join(v).join("checkpoint.bin")).unwrap();
        assert_eq!(ck.stages.len(), 3);
    }
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("D@10") && table.contains("MoE+Bilinear"), "{table}");
    assert!(manifest(&out).contains("stage2_adapters_sha256="));
}

#[test]
fn full_pipeline_within_budget() {
    let t = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let data = t.path().join("data");
    assert!(run(&["generate", "--out", s(&data)]).status.success());
    let emb = data.join("embeddings.bin");
    let pairs = data.join("pairs.bin");
    let mut previous: Option<PathBuf> = None;
    for stage in ["query_text_align", "query_image_align", "fusion_align"] {
        let cfg = write(t.path(), &format!("{stage}.txt"), &format!("stage={stage}\n"));
        let out = t.path().join(stage);
        let mut args = vec!["train", "--config", s(&cfg), "--embeddings", s(&emb), "--pairs", s(&pairs), "--out", s(&out)];
        let ck = previous.as_ref().map(|p| p.join("checkpoint.bin"));
        if let Some(ck) = &ck {
            args.extend(["--checkpoint", s(ck)]);
        }
        let o = run(&args);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(manifest(&out).contains("warnings=0\n"), "{stage}");
        previous = Some(out);
    }
    let ck = previous.unwrap().join("checkpoint.bin");
    let ev = t.path().join("eval");
    assert!(run(&["eval", "--checkpoint", s(&ck), "--embeddings", s(&emb), "--pairs", s(&pairs), "--out", s(&ev)])
        .status
        .success());
    assert!(start.elapsed() < Duration::from_secs(600));
}
