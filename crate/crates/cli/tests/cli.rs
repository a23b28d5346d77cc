use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
train_size = 64
test_size = 24
codebook_size = 16
code_dim = 8
tokenizer_hidden = 8
tokenizer_steps = 12
tokenizer_batch = 8
d_model = 16
depth = 1
heads = 2
mlp_ratio = 2
pretrain_steps = 12
pretrain_batch = 8
finetune_steps = 6
finetune_batch = 8
probe_epochs = 3
log_every = 1
";

fn cafc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cafc"))
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .args(args)
        .output()
        .expect("spawn cafc")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

const BASE: [&str; 4] = ["--config", "tiny.cfg", "--checkpoint", "m.ckpt"];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    extra.iter().copied().chain(BASE).collect()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    d
}

#[test]
fn unknown_flag_is_usage_error() {
    let d = workdir();
    let o = cafc(d.path(), &["sweep", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(cafc(d.path(), &["bogus-command"]).status.code(), Some(1));
    assert_eq!(cafc(d.path(), &["sweep", "--k-list", "64,x"]).status.code(), Some(1));
    assert_eq!(cafc(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_2() {
    let d = workdir();
    let o = cafc(d.path(), &["pretrain", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(d.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(cafc(d.path(), &["train-tokenizer", "--config", "bad.cfg"]).status.code(), Some(2));
}

#[test]
fn inspect_golden_packet() {
    let d = workdir();
    let golden: [u8; 19] = [b'C', b'A', b'F', b'C', 1, 2, 0, 2, 0, 4, 0, 0, 0, 2, 0, 0, 0, 0xA0, 0xD0];
    std::fs::write(d.path().join("golden.pkt"), golden).unwrap();
    let out = ok(&cafc(d.path(), &["inspect-packet", "golden.pkt"]));
    for line in ["h: 2", "w: 2", "N: 4", "K: 2", "positions: 0,2", "indices: 3,1", "bytes: 19"] {
        assert!(out.lines().any(|l| l == line), "missing `{line}` in\n{out}");
    }
    std::fs::write(d.path().join("bad.pkt"), &golden[..18]).unwrap();
    assert_eq!(cafc(d.path(), &["inspect-packet", "bad.pkt"]).status.code(), Some(2));
}

fn step_lines(stderr: &[u8], n: usize) -> Vec<String> {
    String::from_utf8_lossy(stderr)
        .lines()
        .filter(|l| l.starts_with("tokenizer step"))
        .take(n)
        .map(str::to_string)
        .collect()
}

#[test]
fn same_seed_gives_identical_training_logs() {
    let d = workdir();
    let run = |ck: &str, seed: &str| {
        let o = cafc(d.path(), &["train-tokenizer", "--config", "tiny.cfg", "--seed", seed, "--checkpoint", ck]);
        ok(&o);
        step_lines(&o.stderr, 10)
    };
    let a = run("a.ckpt", "7");
    let b = run("b.ckpt", "7");
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(d.path().join("a.ckpt")).unwrap(), std::fs::read(d.path().join("b.ckpt")).unwrap());
    assert_ne!(run("c.ckpt", "8"), a);
}

#[test]
fn full_pipeline_and_sweep_csv() {
    let d = workdir();
    ok(&cafc(d.path(), &with(&["train-tokenizer"])));
    let pre = ok(&cafc(d.path(), &with(&["pretrain"])));
    assert!(pre.contains("L_rec"));
    let lp = ok(&cafc(d.path(), &with(&["linear-probe"])));
    assert!(lp.starts_with("linear probe top1"));
    ok(&cafc(d.path(), &with(&["finetune", "--mode", "variable", "--k-min", "8", "--k-max", "64"])));

    ok(&cafc(d.path(), &with(&["sweep", "--k-list", "64,32,16", "--out", "sweep.csv"])));
    let csv = std::fs::read_to_string(d.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "K,bpp,top1,n");
    assert_eq!(lines.len(), 4, "{csv}");
    let ks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["64", "32", "16"]);

    let params = ok(&cafc(d.path(), &with(&["params"])));
    assert!(params.contains("edge role") && params.contains("cloud role"));

    let cmp = ok(&cafc(d.path(), &with(&["compare", "--k-list", "64,16"])));
    assert_eq!(cmp.lines().next(), Some("K,fixed,variable"));
    assert_eq!(cmp.lines().count(), 3);
}

#[test]
fn gen_data_writes_images_and_labels() {
    let d = workdir();
    ok(&cafc(d.path(), &["gen-data", "--count", "5", "--out", "data"]));
    let labels = std::fs::read_to_string(d.path().join("data/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 6);
    let img = std::fs::read(d.path().join("data/00003.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(img.len(), 13 + 32 * 32 * 3);
}

#[test]
fn edge_and_cloud_over_tcp() {
    let d = workdir();
    ok(&cafc(d.path(), &with(&["train-tokenizer"])));
    ok(&cafc(d.path(), &with(&["pretrain"])));
    ok(&cafc(d.path(), &with(&["finetune", "--k", "32"])));

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server = Command::new(env!("CARGO_BIN_EXE_cafc"))
        .current_dir(d.path())
        .args(with(&["serve-cloud", "--listen", &addr, "--max-connections", "1"]))
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut out = None;
    for _ in 0..100 {
        let o = cafc(d.path(), &with(&["run-edge", "--connect", &addr, "--k", "20", "--count", "10", "--dump", "pk"]));
        if o.status.success() {
            out = Some(String::from_utf8(o.stdout).unwrap());
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
    let out = out.expect("edge never connected");
    assert!(out.starts_with("K=20 bpp"), "{out}");
    assert!(server.wait().unwrap().success());
    let pkt = std::fs::read_dir(d.path().join("pk")).unwrap().next().unwrap().unwrap().path();
    let shown = ok(&cafc(d.path(), &["inspect-packet", pkt.to_str().unwrap()]));
    assert!(shown.contains("K: 20") && shown.contains("N: 16"));
}
