use std::path::Path;
use std::process::{Command, Output};

use decoupled_distill::image::{GrayImage, Image};
use decoupled_distill::io::{save_pgm, save_ppm, write_bytes};

fn ddistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddistill")).args(args).output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn grad_check_on_default_config_passes() {
    let out = ddistill(&["grad-check", "--seed", "0", "--coords", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let last = stdout.lines().last().unwrap();
    let err: f64 = last.strip_prefix("max_rel_err\t").unwrap().parse().unwrap();
    assert!(err <= 1e-3, "{err}");
    assert_eq!(stdout.lines().count(), 22);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ddistill(&["grad-check", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"));
    let none = ddistill(&[]);
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn help_lists_config_keys() {
    let out = ddistill(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let s = text(&out.stdout);
    for key in ["context_type", "lambda", "finetune_layers", "window"] {
        assert!(s.contains(key), "{key} missing from help");
    }
}

#[test]
fn eval_seg_single_class_fixture_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_ppm(&d.join("data/images/0000.ppm"), &Image::filled(32, 32, [0.2, 0.6, 0.4])).unwrap();
    save_pgm(&d.join("data/labels/0000.pgm"), &GrayImage::filled(32, 32, 0)).unwrap();
    write_bytes(&d.join("bank.txt"), b"8 1\nbackground 1 0 0 0 0 0 0 0\n").unwrap();
    let init = ddistill(&["init", "--out", p(&d.join("s.ckpt")), p(&d.join("t.ckpt")), p(&d.join("v.ckpt"))]);
    assert_eq!(init.status.code(), Some(0), "{}", text(&init.stderr));
    let out = ddistill(&[
        "eval-seg",
        "--data",
        p(&d.join("data")),
        "--student",
        p(&d.join("s.ckpt")),
        "--bank",
        p(&d.join("bank.txt")),
        "--window",
        "32",
        "--stride",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "class\tiou\nbackground\t1.000000\nmIoU\t1.000000\n");
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let run = |d: &Path| -> Vec<String> {
        let data = d.join("data");
        let ck = |n: &str| d.join(n).to_str().unwrap().to_string();
        let cfg = d.join("run.cfg");
        write_bytes(&cfg, b"# short run\nmax_steps = 3\nbatch = 2\nlr = 0.01\n").unwrap();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-synth", "--seed", "5", "--count", "4", "--px", "32", "--classes", "3", "--out", p(&data)].into_iter().map(String::from).collect(),
            vec!["init".into(), "--config".into(), ck("run.cfg"), "--out".into(), ck("s.ckpt"), ck("t.ckpt"), ck("v.ckpt")],
            vec![
                "distill".into(),
                "--config".into(),
                ck("run.cfg"),
                "--data".into(),
                p(&data).into(),
                "--student".into(),
                ck("s.ckpt"),
                "--teacher".into(),
                ck("t.ckpt"),
                "--vfm".into(),
                ck("v.ckpt"),
                "--out".into(),
                ck("d.ckpt"),
            ],
            vec!["eval-seg".into(), "--data".into(), p(&data).into(), "--student".into(), ck("d.ckpt"), "--bank".into(), format!("{}/bank.txt", p(&data))],
            vec![
                "eval-region".into(),
                "--data".into(),
                p(&data).into(),
                "--student".into(),
                ck("d.ckpt"),
                "--bank".into(),
                format!("{}/bank.txt", p(&data)),
                "--mode".into(),
                "mask".into(),
            ],
        ];
        steps
            .iter()
            .map(|args| {
                let out = Command::new(env!("CARGO_BIN_EXE_ddistill")).args(args).output().unwrap();
                assert_eq!(out.status.code(), Some(0), "{args:?}: {}", text(&out.stderr));
                text(&out.stdout).replace(p(d), "")
            })
            .collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert_eq!(ra, rb);
    assert_eq!(ra[2].lines().count(), 3);
    assert!(ra[3].lines().last().unwrap().starts_with("mIoU\t"));
    assert!(ra[4].lines().last().unwrap().starts_with("mAcc\t"));
    for f in ["regions.txt", "bank.txt", "images/0003.ppm", "labels/0003.pgm"] {
        assert_eq!(std::fs::read(a.path().join("data").join(f)).unwrap(), std::fs::read(b.path().join("data").join(f)).unwrap());
    }
    assert_eq!(std::fs::read(a.path().join("d.ckpt")).unwrap(), std::fs::read(b.path().join("d.ckpt")).unwrap());
}

#[test]
fn io_and_numeric_failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = ddistill(&["eval-seg", "--data", p(&d.join("nope")), "--student", p(&d.join("s.ckpt")), "--bank", p(&d.join("b.txt"))]);
    assert_eq!(missing.status.code(), Some(2));

    write_bytes(&d.join("bad.cfg"), b"lambda = 0.25\nlamda = 1\n").unwrap();
    let typo = ddistill(&["grad-check", "--config", p(&d.join("bad.cfg"))]);
    assert_eq!(typo.status.code(), Some(2));
    assert!(text(&typo.stderr).contains("line 2"), "{}", text(&typo.stderr));

    let init = ddistill(&["init", "--out", p(&d.join("s.ckpt")), p(&d.join("t.ckpt")), p(&d.join("v.ckpt"))]);
    assert_eq!(init.status.code(), Some(0));
    let mut bytes = std::fs::read(d.join("s.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0x40;
    std::fs::write(d.join("s.ckpt"), bytes).unwrap();
    let img = d.join("x.ppm");
    save_ppm(&img, &Image::filled(32, 32, [0.5; 3])).unwrap();
    let corrupt = ddistill(&["probe", "--student", p(&d.join("s.ckpt")), "--image", p(&img), "--anchor", "0,0", "--layer", "0", "--out", p(&d.join("pr"))]);
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(text(&corrupt.stderr).contains("checksum"));
}
