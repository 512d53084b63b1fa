use std::path::Path;
use std::process::{Command, Output};

use vlp_core::pipeline::Checkpoint;

const SPEC: &str = "records = 12\ntopics = 2\nvocab_size = 16\nframe_dim = 4\nmin_frames = 2\nmax_frames = 4\nmin_tokens = 3\nmax_tokens = 6\nseed = 5\n";

const CONFIG: &str = r#"
data = "data.rec"
steps = 4
batch_size = 4
min_negatives = 2
include_queues = true

[model]
hidden = 8
heads = 2
enc_blocks = 1
dec_blocks = 1
max_text = 8
max_frames = 4
vocab_size = 16
frame_dim = 4
ff_mult = 2

[finetune]
steps = 5
batch_size = 4
negatives = 5
beam = 2
max_caption_len = 6
plot_classes = 2
top_cate_classes = 2
leaf_cate_classes = 4
"#;

fn vlp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlp")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vlp(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A directory holding generated data, a config and a pre-trained
/// checkpoint at `run/final.ckpt`.
fn pretrained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("spec.toml"), SPEC).unwrap();
    std::fs::write(p.join("run.toml"), CONFIG).unwrap();
    ok(p, &["gen-data", "--spec", "spec.toml", "--out", "data.rec"]);
    ok(p, &["pretrain", "--config", "run.toml", "--out", "run"]);
    dir
}

fn metric(tsv: &str, name: &str) -> f64 {
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("metric\tvalue"));
    lines
        .find_map(|l| l.strip_prefix(&format!("{name}\t")))
        .unwrap_or_else(|| panic!("no {name} in {tsv}"))
        .parse()
        .unwrap()
}

#[test]
fn pretraining_writes_log_and_checkpoint() {
    let dir = pretrained();
    let log = std::fs::read_to_string(dir.path().join("run/metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("step\t"));
    let ckpt = Checkpoint::load(&dir.path().join("run/final.ckpt")).unwrap();
    assert_eq!(ckpt.step, 4);
    assert!(ckpt.queues.is_some());
}

#[test]
fn finetuning_leaves_key_network_and_queues_untouched() {
    let dir = pretrained();
    let p = dir.path();
    let tsv = ok(p, &["finetune", "plot", "--config", "run.toml", "--ckpt", "run/final.ckpt", "--out", "plot.ckpt"]);
    let acc = metric(&tsv, "accuracy_plot");
    assert!((0.0..=1.0).contains(&acc));

    let before = Checkpoint::load(&p.join("run/final.ckpt")).unwrap();
    let after = Checkpoint::load(&p.join("plot.ckpt")).unwrap();
    assert_eq!(after.key, before.key);
    assert_eq!(after.queues, before.queues);
    assert_eq!(after.step, before.step);
    assert_ne!(after.params.get("enc.0.attn.q.w").unwrap(), before.params.get("enc.0.attn.q.w").unwrap());
    assert!(after.params.get("ft.plot.w").is_ok());

    ok(p, &["eval", "plot", "--config", "run.toml", "--ckpt", "plot.ckpt", "--out", "plot.tsv"]);
    let again = std::fs::read_to_string(p.join("plot.tsv")).unwrap();
    assert_eq!(metric(&again, "accuracy_plot"), acc);
}

#[test]
fn retrieval_and_caption_report_their_metrics() {
    let dir = pretrained();
    let p = dir.path();
    let tsv = ok(p, &["eval", "retrieval-text", "--config", "run.toml", "--ckpt", "run/final.ckpt"]);
    assert_eq!(metric(&tsv, "candidates"), 6.0);
    let recalls: Vec<f64> = [1, 5, 10, 20].iter().map(|k| metric(&tsv, &format!("recall@{k}"))).collect();
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(recalls[3], 1.0);

    ok(p, &["finetune", "caption", "--config", "run.toml", "--ckpt", "run/final.ckpt"]);
    let tsv = ok(p, &["eval", "caption", "--config", "run.toml", "--ckpt", "run/final.caption.ckpt", "--hyps", "hyps.tsv"]);
    for m in ["bleu1", "bleu4", "rouge_l"] {
        assert!((0.0..=1.0).contains(&metric(&tsv, m)));
    }
    let hyps = std::fs::read_to_string(p.join("hyps.tsv")).unwrap();
    assert_eq!(hyps.lines().next(), Some("id\ttokens"));
    assert_eq!(hyps.lines().count(), 13);
}

#[test]
fn export_is_one_row_per_record_and_repeatable() {
    let dir = pretrained();
    let p = dir.path();
    ok(p, &["export-emb", "--ckpt", "run/final.ckpt", "--data", "data.rec", "--out", "a.tsv"]);
    ok(p, &["export-emb", "--ckpt", "run/final.ckpt", "--data", "data.rec", "--out", "b.tsv"]);
    let a = std::fs::read(p.join("a.tsv")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.tsv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(header.len(), 9);
    assert_eq!(header[0], "id");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.split('\t').count() == 9));
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "learning_rat = 0.1\n").unwrap();
    let out = vlp(dir.path(), &["pretrain", "--config", "bad.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("learning_rat"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_task_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlp(dir.path(), &["eval", "sentiment", "--config", "x", "--ckpt", "y"]);
    assert!(!out.status.success());
}
