use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn slt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const QUICKSTART: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quickstart.toml");

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--d-model", "8", "--heads", "2", "--layers", "1", "--d-ff", "16",
    "--max-iterations", "20", "--eval-every", "10", "--batch-size", "8",
    "--set", "decode.max_len=12",
];

struct Shared {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    joint: PathBuf,
    gloss2text: PathBuf,
}

/// One synthetic corpus with a joint and a gloss2text checkpoint, built once.
fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let o = slt(&["gen-synthetic", "--out", p(&corpus), "--seed", "2", "--samples", "40", "--d-in", "6"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("train=40"));

        let train = |protocol: &str, lambda_r: &str, out: &Path| {
            let mut args = vec!["train", "--config", QUICKSTART, "--corpus", p(&corpus), "--output", p(out)];
            args.extend(["--protocol", protocol, "--lambda-r", lambda_r]);
            args.extend(TINY);
            let o = slt(&args);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            assert!(stdout(&o).contains("iterations=20"));
            out.join("best.ckpt")
        };
        let joint = train("sign2gloss+text", "5", &dir.path().join("joint"));
        let gloss2text = train("gloss2text", "0", &dir.path().join("g2t"));
        Shared {
            corpus,
            joint,
            gloss2text,
            _dir: dir,
        }
    })
}

#[test]
fn training_writes_checkpoint_log_and_config() {
    let s = shared();
    let run = s.joint.parent().unwrap();
    assert!(s.joint.is_file());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("d_model = 8"));
}

#[test]
fn evaluation_is_deterministic() {
    let s = shared();
    let args = ["evaluate", "--checkpoint", p(&s.joint), "--corpus", p(&s.corpus), "--split", "dev"];
    let (a, b) = (slt(&args), slt(&args));
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    assert!(out.contains("split=dev"));
    assert!(out.lines().any(|l| l.starts_with("wer=")));
    assert!(out.lines().any(|l| l.starts_with("bleu4=")));
}

#[test]
fn sweep_lists_the_whole_grid() {
    let s = shared();
    let o = slt(&["evaluate", "--checkpoint", p(&s.joint), "--corpus", p(&s.corpus), "--sweep", "--max-len", "12"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("sweep.")).count(), 55);
    assert!(out.contains("best_beam_width="));
    assert!(out.lines().any(|l| l.starts_with("test.bleu4=")));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = slt(&["train", "--config", QUICKSTART, "--corpus", p(&missing), "--output", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus"));

    let s = shared();
    let mut args = vec!["train", "--config", QUICKSTART, "--corpus", p(&s.corpus), "--output", p(dir.path())];
    args.extend(["--lambda-r", "0", "--lambda-t", "0"]);
    let o = slt(&args);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss"));

    let o = slt(&["train", "--config", QUICKSTART, "--set", "model.heads=7"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model"));

    let o = slt(&["pipeline", "--recognizer", p(&s.joint), "--translator", p(&missing), "--corpus", p(&s.corpus)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn vocabulary_mismatch_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("other");
    let o = slt(&["gen-synthetic", "--out", p(&other), "--seed", "5", "--samples", "40", "--gloss-vocab", "30", "--d-in", "6"]);
    assert_eq!(code(&o), 0);
    let o = slt(&["evaluate", "--checkpoint", p(&shared().joint), "--corpus", p(&other)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_runs_and_checks_protocols() {
    let s = shared();
    let base = ["pipeline", "--recognizer", p(&s.joint), "--corpus", p(&s.corpus), "--split", "dev"];
    let mut args = base.to_vec();
    args.extend(["--translator", p(&s.gloss2text)]);
    let o = slt(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l.starts_with("wer=")));

    args.push("--oracle-glosses");
    let oracle = stdout(&slt(&args));
    assert!(oracle.lines().any(|l| l == "wer=0.00"));
    // With oracle glosses the pipeline is a plain gloss2text evaluation.
    let direct = stdout(&slt(&["evaluate", "--checkpoint", p(&s.gloss2text), "--corpus", p(&s.corpus), "--split", "dev"]));
    let bleu = |out: &str| out.lines().find(|l| l.starts_with("bleu4=")).map(str::to_owned);
    assert_eq!(bleu(&oracle), bleu(&direct));

    let mut wrong = base.to_vec();
    wrong.extend(["--translator", p(&s.joint)]);
    assert_eq!(code(&slt(&wrong)), 3);
}

#[test]
fn translate_single_inputs() {
    let s = shared();
    let features = s.corpus.join("features/dev-00000.sltf");
    let o = slt(&["translate", "--checkpoint", p(&s.joint), "--features", p(&features), "--beam", "3", "--alpha", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("glosses=")));
    assert!(out.lines().any(|l| l.starts_with("sentence=")));

    let o = slt(&["translate", "--checkpoint", p(&s.gloss2text), "--glosses", "A B C"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("sentence="));

    let o = slt(&["translate", "--checkpoint", p(&s.gloss2text), "--features", p(&features)]);
    assert_eq!(code(&o), 2);
}
