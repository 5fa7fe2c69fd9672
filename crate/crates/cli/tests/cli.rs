use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use voxatn::padeval::{det_csv, DetPoint};
use voxatn_cli::svg::to_pixels;

fn voxatn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxatn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let bytes = fs::read(e.path()).unwrap();
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            (e.file_name().to_string_lossy().into_owned(), hex)
        })
        .collect()
}

#[test]
fn synth_writes_dataset_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = voxatn(&["synth", "--out", out.to_str().unwrap(), "--seed", "9"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let da = digests(&a);
    assert_eq!(da.keys().filter(|k| k.ends_with(".ply")).count(), 240);
    assert!(da.contains_key("manifest.csv") && da.contains_key("resolved_config.toml"));
    assert_eq!(da, digests(&b));

    let echo = fs::read_to_string(a.join("resolved_config.toml")).unwrap();
    assert!(echo.contains("[data]") && echo.contains("seed = 9"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepcohs = 3\n").unwrap();
    let o = voxatn(&["synth", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epcohs"), "{}", stderr(&o));
}

#[test]
fn argument_and_input_errors_exit_one() {
    assert_eq!(code(&voxatn(&["frobnicate"])), 1);
    assert_eq!(code(&voxatn(&["train"])), 1);
    assert_eq!(code(&voxatn(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = voxatn(&["train", "--manifest", "/nonexistent/manifest.csv", "--out", out]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = voxatn(&["gradcheck", "--inject-fault", "no_such_op", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("conv3d"));
}

#[test]
fn single_class_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&voxatn(&["synth", "--out", data.to_str().unwrap()])), 0);
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let bona: String = manifest.lines().filter(|l| !l.contains("silicone_mask") && !l.contains("wrap_photo")).map(|l| format!("{l}\n")).collect();
    let only_bona = data.join("bona.csv");
    fs::write(&only_bona, bona).unwrap();
    let o = voxatn(&["train", "--manifest", only_bona.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("silicone_mask"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());
    let cfg = dir.path().join("toy.toml");
    fs::write(&cfg, "[model]\nfc_hidden = 4\n[train]\nepochs = 1\n[train.augment]\nrotation_copies = 1\n").unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let manifest = data.join("manifest.csv");
    let manifest_s = manifest.to_str().unwrap();
    assert_eq!(code(&voxatn(&["synth", "--out", data_s])), 0);

    let o = voxatn(&["train", "--config", cfg_s, "--manifest", manifest_s, "--out", run_s, "--resolution", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,loss"));
    assert_eq!(loss.lines().count(), 2);
    let summary = fs::read_to_string(run.join("summary.txt")).unwrap();
    assert!(summary.contains("learnable parameters:"));

    let ckpt = run.join("model.vxm");
    let ckpt_s = ckpt.to_str().unwrap();
    let o = voxatn(&["eval", "--config", cfg_s, "--manifest", manifest_s, "--checkpoint", ckpt_s, "--out", run_s, "--resolution", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("D-EER (%)") && report.contains("BPCER@APCER=10%") && report.contains("BPCER@APCER=5%"));
    assert!(report.contains("intra-silicone_mask"));
    assert_eq!(fs::read_to_string(run.join("report.txt")).unwrap(), report);
    let det = voxatn::padeval::parse_det_csv(&fs::read_to_string(run.join("det.csv")).unwrap()).unwrap();
    for w in det.windows(2) {
        assert!(w[0].threshold < w[1].threshold && w[0].apcer <= w[1].apcer && w[0].bpcer >= w[1].bpcer);
    }
    let scores = fs::read_to_string(run.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 61);

    let o = voxatn(&["eval", "--config", cfg_s, "--manifest", manifest_s, "--checkpoint", ckpt_s, "--out", run_s, "--resolution", "16"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_and_catches_faults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = voxatn(&["gradcheck", "--out", out, "--resolution", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for layer in ["conv3d", "leaky_relu", "softmax_cross_entropy", "network_8^3"] {
        assert!(text.lines().any(|l| l.starts_with(layer) && l.contains("max_rel_error=") && l.ends_with("PASS")), "{text}");
    }

    let o = voxatn(&["gradcheck", "--out", out, "--resolution", "8", "--inject-fault", "conv3d"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL"));
}

fn curve(shift: f64) -> Vec<DetPoint> {
    (0..=10)
        .map(|i| {
            let t = i as f64 / 10.0;
            DetPoint {
                threshold: t,
                apcer: (100.0 * t - shift).max(0.0),
                bpcer: 100.0 * (1.0 - t),
            }
        })
        .collect()
}

fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let start = l.find("points=\"").unwrap() + 8;
            let end = start + l[start..].find('"').unwrap();
            l[start..end]
                .split(' ')
                .map(|xy| {
                    let (x, y) = xy.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn det_plot_draws_each_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("alpha.csv"), dir.path().join("beta.csv"));
    fs::write(&a, det_csv(&curve(0.0))).unwrap();
    fs::write(&b, det_csv(&curve(5.0))).unwrap();
    let svg = dir.path().join("one.svg");
    let o = voxatn(&["det-plot", a.to_str().unwrap(), "--svg", svg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    let lines = polylines(&text);
    assert_eq!(lines.len(), 1);

    // Plotted points are the CSV rows after the log-axis transform.
    let rows = voxatn::padeval::parse_det_csv(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(lines[0].len(), rows.len());
    for (&(x, y), p) in lines[0].iter().zip(&rows) {
        let (ex, ey) = to_pixels(p.apcer, p.bpcer);
        assert!((x - ex).abs() < 1e-3 && (y - ey).abs() < 1e-3);
    }

    let both = dir.path().join("both.svg");
    let o = voxatn(&["det-plot", a.to_str().unwrap(), b.to_str().unwrap(), "--svg", both.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&both).unwrap();
    assert_eq!(polylines(&text).len(), 2);
    assert!(text.contains(">alpha</text>") && text.contains(">beta</text>"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "threshold,apcer,bpcer\n0.5,oops,1\n").unwrap();
    assert_eq!(code(&voxatn(&["det-plot", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])), 1);
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&voxatn(&["synth", "--out", data.to_str().unwrap()])), 0);
    let cfg = dir.path().join("toy.toml");
    fs::write(&cfg, "[model]\nfc_hidden = 4\n[train]\nepochs = 1\n[train.augment]\nrotation_copies = 1\n").unwrap();
    let run = dir.path().join("run");
    let manifest = data.join("manifest.csv");
    let o = voxatn(&["ablate", "--config", cfg.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--out", run.to_str().unwrap(), "--resolution", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(run.join("ablation.txt")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('|').map(str::trim).collect()).collect();
    assert_eq!(rows.len(), 8);
    for pair in rows.chunks(2) {
        assert!(pair[0][0].ends_with("attention=on") && pair[1][0].ends_with("attention=off"));
        let params = |r: &Vec<&str>| r[1].parse::<usize>().unwrap();
        assert!(params(&pair[1]) < params(&pair[0]));
        assert!(pair.iter().all(|r| r[2].parse::<f64>().is_ok()));
    }
}
