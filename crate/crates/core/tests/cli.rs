//! The command line end to end: exit codes and manifest replays.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use codesearch_peft::cli::{
    run, RunManifest, EXIT_EMPTY_OUTPUT, EXIT_MISMATCH, EXIT_NUMERIC_ABORT, EXIT_OK, EXIT_UNREADABLE_INPUT,
};

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("codesearch").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out) = cli(args);
    assert_eq!(code, EXIT_OK, "{args:?} failed:\n{out}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            (path, bytes)
        })
        .collect()
}

/// Deletes everything in `dir`, replays its manifest and checks every file
/// comes back byte-identical.
fn assert_replays(dir: &Path) {
    let before = snapshot(dir);
    assert!(before.len() > 1, "{} holds no artifacts", dir.display());
    let manifest = dir.join("manifest.json");
    let saved = std::env::temp_dir().join(format!("replay-{}-{}.json", std::process::id(), before.len()));
    std::fs::copy(&manifest, &saved).unwrap();
    std::fs::remove_dir_all(dir).unwrap();
    ok(&["replay", "--manifest", p(&saved)]);
    std::fs::remove_file(&saved).unwrap();
    let after = snapshot(dir);
    assert_eq!(before.keys().collect::<Vec<_>>(), after.keys().collect::<Vec<_>>());
    for (path, bytes) in &before {
        assert!(bytes == &after[path], "{} differs after replay", path.display());
    }
}

#[test]
fn pipeline_runs_and_every_stage_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (syn, data, run_dir, eval, idx, search, rouge, audit) = (
        root.join("syn"),
        root.join("data"),
        root.join("run"),
        root.join("eval"),
        root.join("idx"),
        root.join("search"),
        root.join("rouge"),
        root.join("audit"),
    );
    ok(&["synth", "--pairs", "80", "--seed", "5", "--out", p(&syn)]);
    let corpus = syn.join("corpus.jsonl");
    ok(&["prepare", "--input", p(&corpus), "--seed", "5", "--ratios", "0.6,0.2,0.2", "--out", p(&data)]);
    for split in ["train", "valid", "test"] {
        assert!(data.join(format!("{split}.jsonl")).exists());
    }
    let out = ok(&[
        "train", "--data", p(&data), "--method", "lora", "--rank", "4", "--batch-size", "16", "--accumulation", "1",
        "--epochs", "2", "--lr", "0.01", "--seed", "3", "--out", p(&run_dir),
    ]);
    assert!(out.starts_with("lora: 6 optimizer steps"), "{out}");
    let ckpt = run_dir.join("final.ckpt");
    let test = data.join("test.jsonl");
    let report = ok(&["eval", "--checkpoint", p(&ckpt), "--split", p(&test), "--protocol", "all-pairs", "--out", p(&eval)]);
    assert!(report.contains("n_evaluated  16"), "{report}");
    ok(&["index", "--checkpoint", p(&ckpt), "--corpus", p(&test), "--out", p(&idx)]);
    let index = idx.join("index.bin");
    let hits = ok(&["search", "--index", p(&index), "--query", "ka lo", "--k", "3"]);
    assert_eq!(hits.lines().count(), 3);
    let ctx = ok(&["search", "--index", p(&index), "--query", "ka lo", "--k", "3", "--context-budget", "12", "--out", p(&search)]);
    assert!(ctx.starts_with("### "), "{ctx}");
    let (cand, refs) = (root.join("cand.txt"), root.join("refs.txt"));
    std::fs::write(&cand, "a c\nthe cat\n").unwrap();
    std::fs::write(&refs, "a b c\nthe cat\n").unwrap();
    let scores = ok(&["rouge", "--candidates", p(&cand), "--references", p(&refs), "--json", "--out", p(&rouge)]);
    assert!(scores.contains("\"rougeL\""), "{scores}");
    let table = ok(&["audit", "--out", p(&audit)]);
    assert!(table.contains("294912") && table.contains("0.268%"), "{table}");

    for dir in [&syn, &data, &run_dir, &eval, &idx, &search, &rouge, &audit] {
        assert_replays(dir);
    }

    let m = RunManifest::load(run_dir.join("manifest.json")).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.seed, Some(3));
    assert_eq!(m.config["train"]["lr"], 0.01);
    assert_eq!(m.config["adapter"]["rank"], 4);
    assert_eq!(m.config["train"]["accumulation"], 1);
    assert!(m.outputs.contains_key("best"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let missing = root.join("missing.jsonl");
    assert_eq!(cli(&["prepare", "--input", p(&missing), "--out", p(&root.join("x"))]).0, EXIT_UNREADABLE_INPUT);
    let garbage = root.join("garbage.jsonl");
    std::fs::write(&garbage, "{not json\n").unwrap();
    assert_eq!(cli(&["prepare", "--input", p(&garbage), "--out", p(&root.join("x"))]).0, EXIT_UNREADABLE_INPUT);

    let syn = root.join("syn");
    ok(&["synth", "--pairs", "40", "--out", p(&syn)]);
    let corpus = syn.join("corpus.jsonl");
    let (code, _) = cli(&["prepare", "--input", p(&corpus), "--lang", "cobol", "--out", p(&root.join("empty"))]);
    assert_eq!(code, EXIT_EMPTY_OUTPUT);

    let data = root.join("data");
    ok(&["prepare", "--input", p(&corpus), "--out", p(&data)]);
    let enc = root.join("enc.json");
    std::fs::write(&enc, r#"{"layers":1,"d_model":16,"heads":2,"d_ff":16,"vocab_size":7,"max_len":64,"d_emb":8}"#).unwrap();
    let (code, _) = cli(&["train", "--data", p(&data), "--encoder-config", p(&enc), "--out", p(&root.join("r"))]);
    assert_eq!(code, EXIT_MISMATCH);
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, r#"{"learning-rate": 0.1}"#).unwrap();
    let (code, _) = cli(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&root.join("r"))]);
    assert_eq!(code, EXIT_MISMATCH);

    // A learnable temperature driven by an absurd learning rate overflows.
    let abort = root.join("abort");
    let (code, _) = cli(&[
        "train", "--data", p(&data), "--method", "lora", "--lr", "1e308", "--learn-temperature", "true",
        "--batch-size", "8", "--accumulation", "1", "--epochs", "3", "--out", p(&abort),
    ]);
    assert_eq!(code, EXIT_NUMERIC_ABORT);
    assert!(abort.join("last_good.ckpt").exists());
    assert!(!abort.join("final.ckpt").exists());

    let run_a = root.join("a");
    let run_b = root.join("b");
    for (dir, seed) in [(&run_a, "1"), (&run_b, "2")] {
        ok(&["train", "--data", p(&data), "--method", "ia3", "--max-steps", "1", "--batch-size", "8", "--seed", seed, "--out", p(dir)]);
    }
    let idx = root.join("idx");
    ok(&["index", "--checkpoint", p(&run_a.join("final.ckpt")), "--corpus", p(&data.join("test.jsonl")), "--out", p(&idx)]);
    let index = idx.join("index.bin");
    let (code, _) = cli(&["search", "--index", p(&index), "--query", "x", "--checkpoint", p(&run_b.join("final.ckpt"))]);
    assert_eq!(code, EXIT_MISMATCH);
    // A checkpoint paired with the wrong vocabulary is a mismatch too.
    let other_vocab = root.join("vocab.txt");
    std::fs::write(&other_vocab, "<pad>\n<unk>\n<bos>\n<eos>\nzzz\n").unwrap();
    let (code, _) = cli(&["eval", "--checkpoint", p(&run_a.join("final.ckpt")), "--split", p(&data.join("test.jsonl")), "--vocab", p(&other_vocab)]);
    assert_eq!(code, EXIT_MISMATCH);

    assert_eq!(cli(&["no-such-command"]).0, 1);
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
}
