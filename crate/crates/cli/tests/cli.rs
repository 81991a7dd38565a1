use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msplat_core::events::parse_jsonl;
use msplat_core::{checkpoint, Band, BandSet, Event, GaussianCloud};
use serde_json::Value;
use tempfile::TempDir;

const EXE: &str = env!("CARGO_BIN_EXE_msplat");
const SCALE: &str = "0.002";

fn msplat(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = msplat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scene(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("scene");
    ok(&["gen-scene", "--out", s(&dir), "--size", "32", "--primitives", "12", "--cameras", "4", "--seed", "3"]);
    dir
}

fn train(scene: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", s(scene), "--out", s(out), "--scale", SCALE];
    args.extend_from_slice(extra);
    msplat(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_scene_writes_a_loadable_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(&tmp);
    let m = msplat_core::load_manifest(&dir).unwrap();
    assert_eq!(m.views.len(), 4 * 5);
    assert!(dir.join("images/nir_000.png").is_file());
    assert_eq!(checkpoint::load(&dir.join("truth.mspl")).unwrap().len(), 12);
    // same seed, same bytes
    let again = tmp.path().join("again");
    ok(&["gen-scene", "--out", s(&again), "--size", "32", "--primitives", "12", "--cameras", "4", "--seed", "3"]);
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), fs::read(again.join("manifest.json")).unwrap());
    assert_eq!(fs::read(dir.join("images/rgb_001.png")).unwrap(), fs::read(again.join("images/rgb_001.png")).unwrap());
}

#[test]
fn separate_rgb_only_metrics() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("run");
    let r = train(&sc, &out, &["--strategy", "separate", "--bands", "RGB"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let m = json(&out.join("metrics.json"));
    let bands: Vec<&str> = m["bands"].as_array().unwrap().iter().map(|b| b["band"].as_str().unwrap()).collect();
    assert_eq!(bands, ["RGB"]);
    assert!(m["All"]["psnr"].is_number());
    assert_eq!(m["primitives"][0][0], "RGB");
    assert!(out.join("checkpoints/RGB.mspl").is_file());
    assert!(out.join("events.jsonl").is_file());
}

#[test]
fn outputs_are_protected_and_reruns_are_identical() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("run");
    assert!(train(&sc, &out, &["--strategy", "joint"]).status.success());
    let first = fs::read(out.join("metrics.json")).unwrap();
    let ckpt = fs::read(out.join("checkpoints/RGB+G+R+RE+NIR.mspl")).unwrap();

    let refused = train(&sc, &out, &["--strategy", "joint"]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--overwrite"));

    assert!(train(&sc, &out, &["--strategy", "joint", "--overwrite"]).status.success());
    assert_eq!(fs::read(out.join("metrics.json")).unwrap(), first);
    assert_eq!(fs::read(out.join("checkpoints/RGB+G+R+RE+NIR.mspl")).unwrap(), ckpt);

    // the resolved config alone reproduces the run
    let copy = tmp.path().join("copy");
    let cfg = out.join("config.resolved.json");
    ok(&["train", "--config", s(&cfg), "--out", s(&copy)]);
    assert_eq!(fs::read(copy.join("metrics.json")).unwrap(), first);
}

#[test]
fn joint_optimized_delays_spectral_bands() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("run");
    assert!(train(&sc, &out, &["--preset", "joint-optimized"]).status.success());
    let cfg = json(&out.join("config.resolved.json"));
    assert_eq!(cfg["flags"]["spec_delay"], true);
    assert_eq!(cfg["flags"]["msad"], true);
    let events = parse_jsonl(&fs::read_to_string(out.join("events.jsonl")).unwrap()).unwrap();
    // spectral bands start at 30,000 * 0.002 = 60
    let spectral: Vec<u64> = events
        .iter()
        .filter_map(|e| match e {
            Event::Render { iter, band, .. } if *band != Band::Rgb => Some(*iter),
            _ => None,
        })
        .collect();
    assert!(!spectral.is_empty());
    assert!(spectral.iter().all(|&it| it >= 60));
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["label"], "Joint + SpecDelay + MSAD");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("run");

    let bad_flag = train(&sc, &out, &["--flags", "turbo"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    let bad_combo = train(&sc, &out, &["--strategy", "separate", "--flags", "sig"]);
    assert_eq!(bad_combo.status.code(), Some(1));
    let unknown_arg = msplat(&["train", "--frobnicate"]);
    assert_eq!(unknown_arg.status.code(), Some(1));

    let cfg = tmp.path().join("typo.toml");
    fs::write(&cfg, "schedule_scale = 0.002\nlearning_rate = 1.0\n").unwrap();
    let typo = train(&sc, &out, &["--config", s(&cfg)]);
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("learning_rate"));

    let missing = train(&tmp.path().join("nowhere"), &out, &[]);
    assert_eq!(missing.status.code(), Some(2));

    let blowup = tmp.path().join("blowup.toml");
    fs::write(&blowup, "schedule_scale = 0.002\n[adam]\nlr_sh = 1e300\n").unwrap();
    let nan = train(&sc, &out, &["--config", s(&blowup)]);
    assert_eq!(nan.status.code(), Some(3), "{}", String::from_utf8_lossy(&nan.stderr));

    let threads = Command::new(EXE)
        .args(["eval", "--manifest", s(&sc), "--checkpoint", s(&sc.join("truth.mspl"))])
        .env("MSPLAT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn eval_reproduces_training_metrics_and_counts() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("run");
    assert!(train(&sc, &out, &["--strategy", "split"]).status.success());
    let logged = json(&out.join("metrics.json"));
    let e = ok(&["eval", "--manifest", s(&sc), "--checkpoint", s(&out.join("checkpoints"))]);
    let evaluated: Value = serde_json::from_slice(&e.stdout).unwrap();
    // checkpoints hold f32 parameters, so agreement is to rounding
    let close = |a: &Value, b: &Value, tol: f64| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < tol;
    for (a, b) in evaluated["bands"].as_array().unwrap().iter().zip(logged["bands"].as_array().unwrap()) {
        assert_eq!(a["band"], b["band"]);
        assert_eq!(a["n_images"], b["n_images"]);
        assert!(close(&a["psnr"], &b["psnr"], 1e-4) && close(&a["ssim"], &b["ssim"], 1e-6), "{a} vs {b}");
    }
    assert!(close(&evaluated["All"]["psnr"], &logged["All"]["psnr"], 1e-4));

    let c = ok(&["eval", "--manifest", s(&sc), "--checkpoint", s(&out.join("checkpoints")), "--counts"]);
    let text = String::from_utf8(c.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.split('\t').nth(1).unwrap().parse::<usize>().is_ok()));

    // the ground truth fits its own training images
    let t = ok(&["eval", "--manifest", s(&sc), "--checkpoint", s(&sc.join("truth.mspl")), "--split", "train"]);
    let truth: Value = serde_json::from_slice(&t.stdout).unwrap();
    assert!(truth["All"]["psnr"] == "inf" || truth["All"]["psnr"].as_f64().unwrap() > 40.0);
}

#[test]
fn render_empty_cloud_is_black() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let empty = tmp.path().join("empty.mspl");
    checkpoint::save(&GaussianCloud::empty(BandSet::all()), &empty).unwrap();
    let out = tmp.path().join("frames");
    ok(&["render", "--checkpoint", s(&empty), "--manifest", s(&sc), "--view", "2", "--out", s(&out)]);
    for (name, band) in [("rgb.png", Band::Rgb), ("nir.png", Band::Nir), ("g.png", Band::G)] {
        let img = msplat_core::SpectralImage::load_png(&out.join(name), band).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }
    let again = msplat(&["render", "--checkpoint", s(&empty), "--manifest", s(&sc), "--view", "2", "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(1));

    let cam = tmp.path().join("cam.json");
    fs::write(
        &cam,
        r#"{"fx": 20, "fy": 20, "cx": 12, "cy": 8, "width": 24, "height": 16,
            "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,4]}"#,
    )
    .unwrap();
    let truth = sc.join("truth.mspl");
    let posed = tmp.path().join("posed");
    ok(&["render", "--checkpoint", s(&truth), "--camera", s(&cam), "--out", s(&posed)]);
    let img = msplat_core::SpectralImage::load_png(&posed.join("re.png"), Band::Re).unwrap();
    assert_eq!((img.width(), img.height()), (24, 16));
}

#[test]
fn ablate_four_variants() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("ablate");
    ok(&[
        "ablate",
        "--manifest",
        s(&sc),
        "--out",
        s(&out),
        "--variants",
        "separate,split,joint,joint-optimized",
        "--scale",
        SCALE,
        "--jobs",
        "2",
    ]);
    let table = json(&out.join("ablation.json"));
    let labels: Vec<&String> = table.as_object().unwrap().keys().collect();
    assert_eq!(labels, ["Separate", "Split", "Joint", "Joint + SpecDelay + MSAD"]);
    for row in table.as_object().unwrap().values() {
        for col in ["RGB", "G", "R", "RE", "NIR", "All"] {
            assert!(row[col]["psnr"].is_number(), "{row}");
        }
    }
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("label,RGB PSNR,RGB SSIM,G PSNR"));
    assert!(lines[4].starts_with("Joint + SpecDelay + MSAD,"));
    // each row trained into its own directory
    assert!(out.join("runs/joint_specdelay_msad/metrics.json").is_file());

    let refused = msplat(&["ablate", "--manifest", s(&sc), "--out", s(&out), "--variants", "joint"]);
    assert_eq!(refused.status.code(), Some(1));
}

#[test]
fn subsets_table() {
    let tmp = TempDir::new().unwrap();
    let sc = scene(&tmp);
    let out = tmp.path().join("subsets");
    ok(&["subsets", "--manifest", s(&sc), "--out", s(&out), "--variants", "RGB;RGB+NIR", "--scale", SCALE]);
    let table = json(&out.join("subsets.json"));
    let rows = table.as_object().unwrap();
    assert_eq!(rows.keys().collect::<Vec<_>>(), ["RGB", "RGB+NIR"]);
    assert!(rows["RGB"].get("NIR").is_none());
    assert!(rows["RGB+NIR"]["NIR"]["psnr"].is_number());
    let csv = fs::read_to_string(out.join("subsets.csv")).unwrap();
    // the RGB row leaves the NIR cells empty
    assert!(csv.lines().nth(1).unwrap().contains(",,"));
}
