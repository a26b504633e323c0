use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "K=4", "S=2", "D=6", "d=6", "d_fc=8", "T_steps=2", "N_stn=1", "backbone_channels=4",
    "train_scenes=6", "test_scenes=3", "epochs=2",
];

fn cmac(args: &[&str], data: &Path) -> Output {
    // Defaults go first so later `--set` flags from the caller win.
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cmac"));
    cmd.env("RUST_LOG", "warn");
    match args.split_first() {
        Some((sub, rest)) if !sub.starts_with('-') => {
            cmd.arg(sub).arg("--set").arg(format!("data_dir={}", data.display()));
            for kv in TINY {
                cmd.args(["--set", kv]);
            }
            cmd.args(rest);
        }
        _ => {
            cmd.args(args);
        }
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let runs_s = runs.to_str().unwrap();

    assert_eq!(code(&cmac(&["--help"], &data)), 0);
    assert_eq!(code(&cmac(&["no-such-command"], &data)), 1);
    assert_eq!(code(&cmac(&["train", "--set", "K=eight"], &data)), 1);
    assert_eq!(code(&cmac(&["train", "--set", "unknown_key=1"], &data)), 1);
    // dataset not synthesised yet
    assert_eq!(code(&cmac(&["train", "--out", runs_s], &data)), 1);

    let out = cmac(&["synth"], &data);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 train / 3 test"));

    let out = cmac(&["train", "--out", runs_s], &data);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.log", "epoch-01.ckpt", "epoch-02.ckpt", "final.ckpt", "config.txt"] {
        assert!(runs.join(f).exists(), "{f}");
    }

    let ckpt = runs.join("final.ckpt");
    let out = cmac(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", runs_s], &data);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP"));

    // checkpoint from other dimensions
    let out = cmac(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", runs_s, "--set", "D=7"], &data);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, "not a checkpoint\n").unwrap();
    assert_eq!(code(&cmac(&["eval", "--checkpoint", bad.to_str().unwrap(), "--out", runs_s], &data)), 2);

    let gone = data.join("test").join("manifest");
    fs::write(&gone, "s500000 x\n").unwrap();
    assert_eq!(code(&cmac(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", runs_s], &data)), 2);

    let out = cmac(&["gradcheck", "--per-group", "4"], &data);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nlr = 0.01\nepochs = many\n").unwrap();
    let out = cmac(&["train", "--config", cfg.to_str().unwrap()], &data);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn eval_is_deterministic_and_exports_one_map_per_proposal() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let runs_s = runs.to_str().unwrap();
    assert_eq!(code(&cmac(&["synth"], &data)), 0);
    assert_eq!(code(&cmac(&["train", "--out", runs_s], &data)), 0);
    let ckpt = runs.join("final.ckpt");
    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", runs_s, "--export-attention"];
    assert_eq!(code(&cmac(&args, &data)), 0);
    let first = (fs::read(runs.join("metrics.txt")).unwrap(), fs::read(runs.join("detections.txt")).unwrap());
    assert_eq!(code(&cmac(&args, &data)), 0);
    let second = (fs::read(runs.join("metrics.txt")).unwrap(), fs::read(runs.join("detections.txt")).unwrap());
    assert_eq!(first, second);

    let cfg = cmac::config::RunConfig {
        data_dir: data.clone(),
        ..tiny_config()
    };
    let proposals: usize = cmac::train::load_split(&cfg, "test").unwrap().iter().map(|p| p.proposals.len()).sum();
    let maps = fs::read_dir(runs.join("attention"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(maps, proposals);
}

fn tiny_config() -> cmac::config::RunConfig {
    let mut cfg = cmac::config::RunConfig::default();
    for kv in TINY {
        cfg.apply_override(kv).unwrap();
    }
    cfg
}
