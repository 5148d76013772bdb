use std::path::Path;
use std::process::{Command, Output};

use lcm_core::conllu::{gen_synthetic, read_conllu_file, validate_tree, write_conllu_file, Grammar};
use lcm_core::tagschemes::{derive_treebank_tags, TagScheme};

fn lcm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcm"))
        .args(args)
        .current_dir(dir)
        .env_remove("LCM_RUN_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn corpus(dir: &Path, name: &str, n: usize) {
    write_conllu_file(dir.join(name), &gen_synthetic(3, n, &Grammar::default()).unwrap()).unwrap();
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lcm(dir.path(), &[])), 1);
    assert_eq!(code(&lcm(dir.path(), &["parse", "--model", "m.ckpt"])), 1);
    assert_eq!(code(&lcm(dir.path(), &["derive-tags", "--scheme", "XX", "--in", "a", "--out", "b"])), 1);
    assert_eq!(code(&lcm(dir.path(), &["--help"])), 0);
}

#[test]
fn gen_synthetic_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a.conllu", "b.conllu"] {
        assert!(lcm(d, &["--seed", "4", "gen-synthetic", "--n", "15", "--out", out]).status.success());
    }
    lcm(d, &["--seed", "5", "gen-synthetic", "--n", "15", "--out", "c.conllu"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.conllu"), read("b.conllu"));
    assert_ne!(read("a.conllu"), read("c.conllu"));
    let tb = read_conllu_file(d.join("a.conllu")).unwrap();
    assert_eq!(tb.len(), 15);
    assert!(tb.sentences.iter().all(|s| validate_tree(s).is_ok()));
}

#[test]
fn derive_tags_writes_one_pair_per_token() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, "toy.conllu", 6);
    let before = std::fs::read(d.join("toy.conllu")).unwrap();
    let o = lcm(d, &["derive-tags", "--scheme", "CT", "--in", "toy.conllu", "--out", "toy.ct.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("toy.conllu")).unwrap(), before);

    let tb = read_conllu_file(d.join("toy.conllu")).unwrap();
    let tags = derive_treebank_tags(&tb, TagScheme::CT).unwrap();
    let text = std::fs::read_to_string(d.join("toy.ct.tsv")).unwrap();
    let blocks: Vec<Vec<(String, String)>> = text
        .split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|b| {
            b.lines()
                .map(|l| {
                    let (f, t) = l.split_once('\t').unwrap();
                    (f.to_string(), t.to_string())
                })
                .collect()
        })
        .collect();
    assert_eq!(blocks.len(), tb.len());
    for ((block, s), t) in blocks.iter().zip(&tb.sentences).zip(&tags) {
        let forms: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
        assert_eq!(block.iter().map(|(f, _)| f.as_str()).collect::<Vec<_>>(), forms);
        assert_eq!(block.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(), t.labels);
    }
}

#[test]
fn derive_tags_reports_bad_trees() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cyc.conllu"),
        "1\ta\t_\tNOUN\t_\t_\t2\tnsubj\t_\t_\n2\tb\t_\tVERB\t_\t_\t1\troot\t_\t_\n\n",
    )
    .unwrap();
    let o = lcm(d, &["derive-tags", "--scheme", "RD", "--in", "cyc.conllu", "--out", "x.tsv"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("sentence"), "{}", stderr(&o));
    let o = lcm(d, &["derive-tags", "--scheme", "CT", "--in", "missing.conllu", "--out", "x.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.conllu"), "{}", stderr(&o));
}

#[test]
fn trained_parser_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, "train.conllu", 10);
    let o = lcm(
        d,
        &["--seed", "2", "-q", "train-parser", "--train", "train.conllu", "--out", "p.ckpt", "--epochs", "200", "--dropout", "0"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("p.ckpt.json").exists());
    let snapshot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("p.ckpt.config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["train"]["seed"], 2);
    assert_eq!(snapshot["train"]["epochs"], 200);

    // Parsing the training file of an overfit model gives back the gold columns.
    let o = lcm(d, &["parse", "--model", "p.ckpt", "--in", "train.conllu", "--out", "pred.conllu"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gold = read_conllu_file(d.join("train.conllu")).unwrap();
    let pred = read_conllu_file(d.join("pred.conllu")).unwrap();
    for (g, p) in gold.sentences.iter().zip(&pred.sentences) {
        assert!(validate_tree(p).is_ok());
        assert_eq!(g.heads(), p.heads());
        assert_eq!(g.deprels(), p.deprels());
    }

    let o = lcm(d, &["evaluate", "--gold", "train.conllu", "--pred", "pred.conllu", "--json", "scores.json"]);
    assert!(stdout(&o).contains("100.00 / 100.00"), "{}", stdout(&o));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("scores.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["las"], 100.0);

    let o = lcm(d, &["inspect-checkpoint", "p.ckpt"]);
    assert!(stdout(&o).starts_with("kind: parser\nformat version: 1\n"), "{}", stdout(&o));

    std::fs::write(d.join("empty.conllu"), "").unwrap();
    let o = lcm(d, &["parse", "--model", "p.ckpt", "--in", "empty.conllu", "--out", "empty.out"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("empty.out")).unwrap(), b"");

    let mut bytes = std::fs::read(d.join("p.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(d.join("bad.ckpt"), &bytes).unwrap();
    std::fs::copy(d.join("p.ckpt.json"), d.join("bad.ckpt.json")).unwrap();
    let o = lcm(d, &["parse", "--model", "bad.ckpt", "--in", "train.conllu", "--out", "x.conllu"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    let mut bytes = std::fs::read(d.join("p.ckpt")).unwrap();
    bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
    std::fs::write(d.join("old.ckpt"), &bytes).unwrap();
    std::fs::copy(d.join("p.ckpt.json"), d.join("old.ckpt.json")).unwrap();
    let o = lcm(d, &["parse", "--model", "old.ckpt", "--in", "train.conllu", "--out", "x.conllu"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("file has 9, expected 1"), "{}", stderr(&o));
}

#[test]
fn tagger_from_tsv_and_kind_checks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, "toy.conllu", 8);
    lcm(d, &["derive-tags", "--scheme", "CT", "--in", "toy.conllu", "--out", "ct.tsv"]);
    let o = lcm(d, &["-q", "train-tagger", "--scheme", "CT", "--train", "ct.tsv", "--out", "ct.ckpt", "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&lcm(d, &["inspect-checkpoint", "ct.ckpt"])).contains("scheme: CT"));
    // A tagger is not a parser.
    let o = lcm(d, &["parse", "--model", "ct.ckpt", "--in", "toy.conllu", "--out", "x.conllu"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("expected a parser model"), "{}", stderr(&o));
}

#[test]
fn config_file_sits_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, "toy.conllu", 6);
    std::fs::write(d.join("cfg.json"), r#"{"train": {"epochs": 2, "lr": 0.01}}"#).unwrap();
    let o = lcm(
        d,
        &["--config", "cfg.json", "-q", "train-parser", "--train", "toy.conllu", "--out", "p.ckpt", "--lr", "0.005"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let snap: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("p.ckpt.config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["epochs"], 2);
    assert_eq!(snap["train"]["lr"], 0.005);
    assert_eq!(snap["train"]["profile"], "desk");

    std::fs::write(d.join("bad.json"), r#"{"trian": {}}"#).unwrap();
    let o = lcm(d, &["--config", "bad.json", "train-parser", "--train", "toy.conllu", "--out", "q.ckpt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
    let o = lcm(d, &["train-parser", "--train", "toy.conllu", "--out", "q.ckpt", "--dropout", "1.5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pipeline_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, "all.conllu", 30);
    let all = read_conllu_file(d.join("all.conllu")).unwrap();
    write_conllu_file(d.join("train.conllu"), &all.slice(0, 15)).unwrap();
    write_conllu_file(d.join("test.conllu"), &all.slice(15, 30)).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lcm"))
        .args(["--seed", "3", "-q", "pipeline", "--variant", "base", "--train", "train.conllu"])
        .args(["--test", "test.conllu", "--epochs", "2"])
        .current_dir(d)
        .env("LCM_RUN_DIR", d.join("runs"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let run = d.join("runs/base-seed3");
    for f in ["config.json", "metrics.json", "parser.ckpt", "test.pred.conllu", "log.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    lcm_core::eval::Metrics::validate_json(&m).unwrap();

    // LCM needs extra data.
    let o = lcm(d, &["pipeline", "--variant", "lcm", "--train", "train.conllu", "--test", "test.conllu", "--run-dir", "x"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));
}

#[test]
fn grad_check_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcm(dir.path(), &["grad-check", "--model", "biaff", "--profile", "desk", "--coords", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("max relative error "));
    // An impossible tolerance turns the same check into a numeric failure.
    let o = lcm(dir.path(), &["grad-check", "--model", "biaff", "--coords", "40", "--tolerance", "0"]);
    assert_eq!(code(&o), 3);
}
