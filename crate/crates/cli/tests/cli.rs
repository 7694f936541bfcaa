use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mma_core::model::{Model, Variant};
use mma_core::training::{streams, Checkpoint, RunConfig};
use tempfile::TempDir;

const TINY: &str = r#"
variant = "mma_il"
d_model = 16
ffn_dim = 32
n_heads = 2
encoder_layers = 1
decoder_layers = 1
vocab_size = 12
min_len = 3
max_src_len = 6
max_len = 10
steps = 20
batch_size = 4
warmup = 5
valid_size = 16
eval_every = 10
lambda_avg = 0.1
"#;

fn mma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mma")).args(args).output().expect("spawn mma")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny configuration into `dir/run` and returns the best checkpoint.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write(dir, "tiny.toml", TINY);
    let out = dir.join("run");
    let o = mma(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.ckpt")
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = mma(&["train", "--config", s(&cfg), "--out", s(&a)]);
    let ob = mma(&["train", "--config", s(&cfg), "--out", s(&b)]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(stdout(&oa).starts_with("final step=20 loss="));
    assert_eq!(stdout(&oa), stdout(&ob));
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,lr,loss,nll,l_avg,l_var,grad_norm"));
    assert_eq!(log.lines().count(), 21);

    let oc = mma(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("c")), "--seed", "7"]);
    assert!(oc.status.success());
    assert_ne!(stdout(&oa), stdout(&oc));
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.toml", &format!("{TINY}\nlearning_rat = 0.1\n"));
    let o = mma(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_1_and_names_path() {
    let o = mma(&["train", "--config", "/nonexistent/run.toml", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn divergence_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "hot.toml", &TINY.replace("warmup = 5", "warmup = 1\nlr = 1e36\nclip_norm = 0.0"));
    let o = mma(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(mma(&[]).status.code(), Some(1));
    assert_eq!(mma(&["frobnicate"]).status.code(), Some(1));
    let o = mma(&["sweep", "--config", "c.toml", "--out", "o.csv", "--seeds", "1,2", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mma(&["sweep", "--config", "c.toml", "--out", "o.csv", "--filter-dal", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(mma(&["--help"]).status.code(), Some(0));
}

#[test]
fn decode_prints_tokens_traces_and_actions() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let input = write(dir.path(), "in.txt", "3 4 5\n\n6 7 8 9\n");
    let o = mma(&["decode", "--checkpoint", s(&ckpt), "--input", s(&input), "--stream"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    for (k, src_len) in [(0usize, 3usize), (1, 4)] {
        let trace = lines[3 * k + 1];
        assert_eq!(trace.split('\t').next().unwrap(), (src_len + 1).to_string());
        let actions = lines[3 * k + 2];
        assert_eq!(actions.matches('R').count(), src_len + 1);
        assert_eq!(actions.matches('W').count(), lines[3 * k].split_whitespace().count() + 1);
    }

    let o = mma(&["decode", "--checkpoint", s(&ckpt), "--input", s(&input)]);
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn decode_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let bad = write(dir.path(), "bad.txt", "3 4\n5 99 6\n");
    let o = mma(&["decode", "--checkpoint", s(&ckpt), "--input", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
    let empty = write(dir.path(), "empty.txt", "");
    let o = mma(&["decode", "--checkpoint", s(&ckpt), "--input", s(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    let o = mma(&["decode", "--checkpoint", s(&dir.path().join("none.ckpt")), "--input", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn metrics_of_eval_traces_match_eval_means() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let trace = dir.path().join("eval.trace");
    let o = mma(&["eval", "--checkpoint", s(&ckpt), "--sentences", "40", "--trace", s(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();

    let m = mma(&["metrics", s(&trace)]);
    assert!(m.status.success(), "{}", stderr(&m));
    let text = stdout(&m);
    assert_eq!(text.lines().next(), Some("line,ap,al,dal"));
    assert_eq!(text.lines().count(), 42);
    let mean = text.lines().last().unwrap();
    let mean: Vec<f64> = mean.strip_prefix("mean,").unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    for (k, name) in ["ap", "al", "dal"].iter().enumerate() {
        assert!((mean[k] - row[2 + k]).abs() < 1e-9, "{name}: {} vs {}", mean[k], row[2 + k]);
    }
}

#[test]
fn metrics_of_decode_traces_match_eval_means() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let cfg = Checkpoint::load(&ckpt).unwrap().config;
    let pairs = cfg.task_spec().dataset(25, streams::TEST).unwrap();
    let lines: Vec<String> =
        pairs.iter().map(|p| p.source.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")).collect();
    let input = write(dir.path(), "src.txt", &(lines.join("\n") + "\n"));
    let trace = dir.path().join("decode.trace");
    let o = mma(&["decode", "--checkpoint", s(&ckpt), "--input", s(&input), "--trace", s(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = mma(&["eval", "--checkpoint", s(&ckpt), "--sentences", "25"]);
    let row: Vec<f64> = stdout(&e).lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let m = stdout(&mma(&["metrics", s(&trace)]));
    let mean: Vec<f64> =
        m.lines().last().unwrap().strip_prefix("mean,").unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    for k in 0..3 {
        assert!((mean[k] - row[2 + k]).abs() < 1e-9);
    }
}

#[test]
fn always_write_model_reads_once_per_write_step() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig {
        variant: Variant::MmaH,
        d_model: 16,
        ffn_dim: 32,
        n_heads: 2,
        vocab_size: 12,
        max_len: 10,
        max_src_len: 6,
        min_len: 3,
        ..Default::default()
    };
    let mut model = Model::<f32>::new(cfg.model(), 1).unwrap();
    model.set_constant_monotonic_energy(40.0);
    let ckpt = dir.path().join("w.ckpt");
    Checkpoint::from_model(&cfg, &model, 0, None).save(&ckpt).unwrap();
    let input = write(dir.path(), "in.txt", "3 4 5 6\n");
    let o = mma(&["decode", "--checkpoint", s(&ckpt), "--input", s(&input), "--stream"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    let fields: Vec<&str> = lines[1].split('\t').collect();
    let u: usize = fields[1].parse().unwrap();
    assert!(fields[2].split(',').all(|g| g == "1"), "{}", lines[1]);
    let expected: String = std::iter::once('R').chain(std::iter::repeat_n('W', u)).chain("RRRR".chars()).collect();
    assert_eq!(lines[2].replace(' ', ""), expected);
}

#[test]
fn metrics_examples() {
    let dir = TempDir::new().unwrap();
    let t = write(dir.path(), "t.trace", "3\t3\t1,2,3\n6\t6\t3,4,5,6,6,6\n3\t1\t2\n");
    let o = mma(&["metrics", s(&t)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).take(3).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(rows[0][0], 2.0 / 3.0) && close(rows[0][1], 1.0) && close(rows[0][2], 1.0));
    assert!(close(rows[1][1], 3.0));
    assert!(close(rows[2][2], 2.0));
}

#[test]
fn metrics_reports_malformed_line() {
    let dir = TempDir::new().unwrap();
    let t = write(dir.path(), "t.trace", "3\t3\t1,2,3\n3\tx\t1\n");
    let o = mma(&["metrics", s(&t)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));

    let t = write(dir.path(), "ok.trace", "3\t3\t1,2,3\n");
    let o = mma(&["metrics", s(&t)]);
    assert!(o.status.success());
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let ap: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((ap - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn sweep_is_deterministic_across_jobs_and_filters_dal() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let run = |name: &str, jobs: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["sweep", "--config", s(&cfg), "--out", s(&out), "--lambda-avg", "0,0.2"];
        args.extend_from_slice(&["--seeds", "1,2", "--jobs", jobs, "--eval-sentences", "10"]);
        args.extend_from_slice(extra);
        let o = mma(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv", "1", &[]);
    let b = run("b.csv", "2", &[]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
    assert!(a.starts_with("variant,lambda_avg,lambda_var,L,H,seed,BLEU,accuracy,AP,AL,DAL,span\n"));
    let f = run("f.csv", "1", &["--filter-dal", "1000:2000"]);
    assert_eq!(f.lines().count(), 1);
}

#[test]
fn ablate_covers_the_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("abl.csv");
    let o = mma(&[
        "ablate", "--config", s(&cfg), "--out", s(&out), "--layers", "1,2", "--heads", "1,2", "--variant", "offline",
        "--eval-sentences", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out).unwrap();
    let cells: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].to_string(), f[4].to_string())
        })
        .collect();
    assert_eq!(cells.len(), 4);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("offline,")));
}
