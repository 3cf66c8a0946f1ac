use std::path::Path;
use std::process::{Command, Output};

fn volumix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volumix")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn first_line_is_header(o: &Output) {
    let out = stdout(o);
    let first = out.lines().next().unwrap_or_default();
    assert!(first.starts_with("# seed=") && first.contains(" config="), "{out}");
}

#[test]
fn oracle_check_passes_with_tiny_errors() {
    let o = volumix(&["oracle-check", "--cases", "40"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    first_line_is_header(&o);
    let out = stdout(&o);
    for name in ["ssm_scan", "qs_matmul", "qs_composition"] {
        let line = out.lines().find(|l| l.starts_with(name)).expect(name);
        let err: f64 = line.split("max_err=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        assert!(err < 1e-10, "{line}");
    }
}

#[test]
fn gradcheck_single_module_and_unknown_module() {
    let o = volumix(&["gradcheck", "--module", "decoder", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("# seed=4 "));
    assert!(stdout(&o).contains("decoder"));
    assert_eq!(volumix(&["gradcheck", "--module", "unet"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_without_output() {
    let o = volumix(&["train", "--out", "/nonexistent/never", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(!Path::new("/nonexistent/never").exists());
    assert_eq!(volumix(&[]).status.code(), Some(1));
    assert_eq!(volumix(&["bench", "--kernel", "fft"]).status.code(), Some(1));
}

#[test]
fn help_lists_every_flag() {
    let o = volumix(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for flag in ["--config", "--seed", "--set", "--variant", "--out", "--manifest", "--epochs", "--width"] {
        assert!(out.contains(flag), "{flag} missing from:\n{out}");
    }
    let out = stdout(&volumix(&["eval", "--help"]));
    for flag in ["--ckpt", "--manifest", "--tau", "--pred", "--gt"] {
        assert!(out.contains(flag), "{flag}");
    }
}

#[test]
fn bench_emits_csv() {
    let o = volumix(&["bench", "--kernel", "scan,qs", "--lengths", "32,64"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "kernel,L,N,d,wall_ns,checksum");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("scan,32,4,4,"));
}

#[test]
fn bad_config_key_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\n# fine\nmomentum = 0.9\n").unwrap();
    let o = volumix(&["gradcheck", "--module", "fue", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("momentum"), "{err}");
}

#[test]
fn data_train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let o = volumix(&["gen-data", "--out", &p("data"), "--size", "16", "--n-train", "2", "--n-val", "1", "--n-test", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    first_line_is_header(&o);

    let train = ["train", "--manifest", &p("data"), "--width", "4", "--epochs", "2", "--val-interval", "1", "--out"];
    let o = volumix(&[&train[..], &[p("run").as_str()]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch,train_loss,val_dsc"));
    let log = std::fs::read_to_string(p("run/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // Same inputs, same seed: bitwise-identical log and checkpoint.
    let o = volumix(&[&train[..], &[p("again").as_str()]].concat());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(p("again/log.csv")).unwrap(), log.as_bytes());
    assert_eq!(std::fs::read(p("again/best.ckpt")).unwrap(), std::fs::read(p("run/best.ckpt")).unwrap());

    let o = volumix(&["eval", "--ckpt", &p("run/best.ckpt"), "--manifest", &p("data"), "--out", &p("eval.csv")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p("eval.csv")).unwrap();
    assert!(csv.starts_with("variant,class,dsc,miou,nsd,tau_mm"));
    assert!(csv.contains("mambaout,mean,"));

    let gt = p("data/test_003_lbl.volx");
    let o = volumix(&["eval", "--pred", &gt, "--gt", &gt]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("pred,mean,1.000000,1.000000,1.000000"), "{}", stdout(&o));

    let o = volumix(&["report", &p("eval.csv"), "--out", &p("table.csv")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("MambaOutUNet"));
    assert!(std::fs::read_to_string(p("table.csv")).unwrap().starts_with("model,dsc,miou,nsd,params,seconds"));

    let o = volumix(&["eval", "--ckpt", &p("missing.ckpt"), "--manifest", &p("data")]);
    assert_eq!(o.status.code(), Some(3));
}
