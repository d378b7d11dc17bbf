use std::path::Path;
use std::process::Command;

use hgcn::checkpoint;
use hgcn::corpus::{load_dataset, parse_dataset, Provenance};
use hgcn_cli::{eval_output, train_command};

const EXAMPLE: &str = r#"{"tokens":["Great","food","but","the","service","was","dreadful","!"],"ptb":"(ROOT (S (NP (JJ Great) (NN food)) (CC but) (S (NP (DT the) (NN service)) (VP (VBD was) (ADJP (JJ dreadful)))) (. !)))","conllu":"1\tGreat\t_\tJJ\t_\t_\t2\tamod\t_\t_\n2\tfood\t_\tNN\t_\t_\t0\troot\t_\t_\n3\tbut\t_\tCC\t_\t_\t7\tcc\t_\t_\n4\tthe\t_\tDT\t_\t_\t5\tdet\t_\t_\n5\tservice\t_\tNN\t_\t_\t7\tnsubj\t_\t_\n6\twas\t_\tVBD\t_\t_\t7\tcop\t_\t_\n7\tdreadful\t_\tJJ\t_\t_\t2\tconj\t_\t_\n8\t!\t_\t.\t_\t_\t2\tpunct\t_\t_","targets":[{"span":[1,1],"polarity":"positive"},{"span":[4,4],"polarity":"negative"}]}"#;

fn hgcn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hgcn")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_toy_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = hgcn(&["gen-toy", "--size", "50", "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(a, b);
    assert_eq!(parse_dataset(std::str::from_utf8(&a).unwrap()).unwrap().len(), 50);
    let bundled = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy.jsonl")).unwrap();
    assert_eq!(a, bundled);
}

#[test]
fn annotate_auto_marks_great_food() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("in.jsonl");
    let out = dir.path().join("out.jsonl");
    let lex = dir.path().join("lexicon.txt");
    std::fs::write(&data, EXAMPLE).unwrap();
    std::fs::write(&lex, "# opinion words\ngreat\ndreadful\n").unwrap();
    let o = hgcn(&["annotate-auto", "--data", s(&data), "--lexicon", s(&lex), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(v["targets"][0]["scope_bio"], serde_json::json!(["B", "I", "O", "O", "O", "O", "O", "O"]));
    assert_eq!(v["targets"][0]["provenance"], "auto");
    let back = load_dataset(&out).unwrap();
    assert_eq!(back[0].targets[1].provenance, Some(Provenance::Auto));
    // The input file is untouched.
    assert_eq!(std::fs::read_to_string(&data).unwrap(), EXAMPLE);
}

#[test]
fn annotate_auto_without_hits_is_weak() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("in.jsonl");
    let out = dir.path().join("out.jsonl");
    let lex = dir.path().join("lexicon.txt");
    std::fs::write(&data, EXAMPLE).unwrap();
    std::fs::write(&lex, "superb\n").unwrap();
    let o = hgcn(&["annotate-auto", "--data", s(&data), "--lexicon", s(&lex), "--out", s(&out)]);
    assert!(o.status.success());
    let back = load_dataset(&out).unwrap();
    assert!(back[0].targets.iter().all(|t| t.provenance == Some(Provenance::AutoWeak)));
}

#[test]
fn eval_after_reload_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    let config = dir.path().join("config.json");
    let ckpt = dir.path().join("model.json");
    let log = dir.path().join("log.jsonl");
    let o = hgcn(&["gen-toy", "--size", "8", "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success());
    std::fs::write(&config, r#"{"embedding_dim": 16, "hidden_dim": 8, "label_dim": 8, "relation_dim": 4}"#).unwrap();

    let outcome = train_command(&data, None, Some(&config), &ckpt, Some(&log), None, None, Some(3), None).unwrap();
    let sentences = load_dataset(&data).unwrap();
    let in_process = serde_json::to_value(eval_output(&outcome.model, &sentences).unwrap()).unwrap();
    let reloaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(
        serde_json::to_value(eval_output(&reloaded, &sentences).unwrap()).unwrap(),
        in_process
    );

    let o = hgcn(&["eval", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, in_process);

    let epochs: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 3);
    assert_eq!(epochs[2]["epoch"], 3);
}

#[test]
fn predict_and_dump_attention_write_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    let config = dir.path().join("config.json");
    let ckpt = dir.path().join("model.json");
    let preds = dir.path().join("pred.jsonl");
    let attn = dir.path().join("attn.json");
    assert!(hgcn(&["gen-toy", "--size", "4", "--out", s(&data)]).status.success());
    std::fs::write(&config, r#"{"embedding_dim": 6, "hidden_dim": 3, "label_dim": 4, "relation_dim": 2}"#).unwrap();
    let o = hgcn(&[
        "train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt), "--epochs", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("model.json.log.jsonl").exists());

    let o = hgcn(&["predict", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&preds)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    let p: f64 = lines[0]["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() < 1e-12);

    let o = hgcn(&["dump-attention", "--data", s(&data), "--ckpt", s(&ckpt), "--sentence", "1", "--out", s(&attn)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&attn).unwrap()).unwrap();
    let words = v["words"].as_array().unwrap().len();
    assert_eq!(v["matrix"].as_array().unwrap().len(), words);
}

#[test]
fn bad_input_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = hgcn(&["eval", "--data", s(&missing), "--ckpt", s(&missing)]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, EXAMPLE.replace(r#""span":[4,4]"#, r#""span":[4,9]"#)).unwrap();
    let o = hgcn(&["annotate-auto", "--data", s(&bad), "--out", s(&dir.path().join("o.jsonl"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("targets[1].span"));

    let o = hgcn(&["gen-toy", "--out", s(&dir.path().join("t.jsonl")), "--min-targets", "3", "--max-targets", "2"]);
    assert!(!o.status.success());
}
