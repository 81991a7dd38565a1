//! Ablation and band-subset studies: one `train` subprocess per row, at most
//! `--jobs` at a time, then a CSV and a JSON table keyed by row label.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use msplat_core::train::{ablation_rows, plan_label, rgb_subsets};
use msplat_core::{load_manifest, BandSet, Flags, Metrics, Strategy};
use serde_json::{json, Map, Value};

use crate::fail::{Fail, FailExt, EXIT_CONFIG};
use crate::{prepare_out, write, StudyArgs};

/// One table row: its label and the `train` arguments producing it.
struct Row {
    label: String,
    args: Vec<String>,
}

fn flag_list(f: Flags) -> String {
    [
        (f.spec_delay, "specdelay"),
        (f.ext_adc, "extadc"),
        (f.msad, "msad"),
        (f.sig, "sig"),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, n)| *n)
    .collect::<Vec<_>>()
    .join(",")
}

fn variant_row(strategy: Strategy, flags: Flags) -> Row {
    Row {
        label: plan_label(strategy, flags),
        args: vec![
            "--strategy".into(),
            strategy.to_string(),
            "--flags".into(),
            flag_list(flags),
        ],
    }
}

/// Parses `joint-optimized` or `strategy[+flag...]`.
fn parse_variant(s: &str) -> Result<(Strategy, Flags), Fail> {
    let s = s.trim().to_ascii_lowercase();
    if s == "joint-optimized" {
        return Ok(crate::config::Preset::JointOptimized.resolve());
    }
    let mut parts = s.split('+').map(str::trim);
    let strategy: Strategy = parts.next().unwrap_or_default().parse()?;
    let flags = Flags::parse_list(&parts.collect::<Vec<_>>().join(","))?;
    Ok((strategy, flags))
}

fn common_args(a: &StudyArgs) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(c) = &a.config {
        v.extend(["--config".into(), c.display().to_string()]);
    }
    if let Some(s) = a.scale {
        v.extend(["--scale".into(), s.to_string()]);
    }
    if let Some(s) = a.seed {
        v.extend(["--seed".into(), s.to_string()]);
    }
    v
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

pub fn ablate(a: StudyArgs) -> Result<(), Fail> {
    let rows = match &a.variants {
        Some(list) => list
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| parse_variant(t).map(|(s, f)| variant_row(s, f)))
            .collect::<Result<Vec<_>, _>>()?,
        None => ablation_rows().into_iter().map(|(_, s, f)| variant_row(s, f)).collect(),
    };
    run_study(&a, rows, "ablation")
}

pub fn subsets(a: StudyArgs) -> Result<(), Fail> {
    let sets = match &a.variants {
        Some(list) => list
            .split(';')
            .filter(|t| !t.trim().is_empty())
            .map(BandSet::parse_list)
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            let manifest = load_manifest(&a.manifest)?;
            rgb_subsets()
                .into_iter()
                .filter(|s| s.iter().all(|b| manifest.bands.contains(b)))
                .collect()
        }
    };
    let rows = sets
        .into_iter()
        .map(|s| Row {
            label: s.label(),
            args: vec![
                "--preset".into(),
                "joint-optimized".into(),
                "--bands".into(),
                s.label(),
            ],
        })
        .collect();
    run_study(&a, rows, "subsets")
}

fn run_study(a: &StudyArgs, rows: Vec<Row>, name: &str) -> Result<(), Fail> {
    if rows.is_empty() {
        return Err(Fail::config("no rows to run"));
    }
    if a.jobs == 0 {
        return Err(Fail::config("--jobs must be at least 1"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(r) = rows.iter().find(|r| !seen.insert(&r.label)) {
        return Err(Fail::config(format!("row `{}` requested twice", r.label)));
    }
    let csv_name = format!("{name}.csv");
    let json_name = format!("{name}.json");
    prepare_out(&a.out, &[&csv_name, &json_name, "runs"], a.overwrite)?;
    let exe = std::env::current_exe()?;
    let manifest = fs::canonicalize(&a.manifest).data(format!("missing manifest {}", a.manifest.display()))?;
    let common = common_args(a);
    let runs_dir = a.out.join("runs");

    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<Metrics, Fail>>>> = rows.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.min(rows.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(row) = rows.get(k) else { break };
                let dir = runs_dir.join(slug(&row.label));
                let r = run_one(&exe, &manifest, &dir, &row.args, &common, a.jobs);
                *results[k].lock().unwrap() = Some(r);
            });
        }
    });

    let mut table = Vec::new();
    let mut first_failure = None;
    for (row, cell) in rows.iter().zip(results) {
        match cell.into_inner().unwrap().expect("every row ran") {
            Ok(m) => table.push((row.label.clone(), m)),
            Err(f) => {
                eprintln!("row `{}` failed: {f}", row.label);
                first_failure.get_or_insert(f);
            }
        }
    }
    write(&a.out.join(&csv_name), to_csv(&table)?)?;
    write(&a.out.join(&json_name), to_json(&table))?;
    match first_failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn run_one(exe: &Path, manifest: &Path, dir: &PathBuf, args: &[String], common: &[String], jobs: usize) -> Result<Metrics, Fail> {
    let mut cmd = Command::new(exe);
    cmd.arg("train")
        .arg("--manifest")
        .arg(manifest)
        .arg("--out")
        .arg(dir)
        .args(args)
        .args(common)
        .arg("--overwrite")
        .stdout(Stdio::null());
    if jobs > 1 && std::env::var_os("MSPLAT_THREADS").is_none() {
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        cmd.env("MSPLAT_THREADS", (cores / jobs).max(1).to_string());
    }
    let status = cmd.status()?;
    if !status.success() {
        let code = status.code().and_then(|c| u8::try_from(c).ok()).unwrap_or(EXIT_CONFIG);
        return Err(Fail {
            code,
            message: format!("training in {} exited with {status}", dir.display()),
        });
    }
    let text = fs::read_to_string(dir.join("metrics.json"))?;
    serde_json::from_str(&text).data("bad metrics.json")
}

fn columns(table: &[(String, Metrics)]) -> Vec<String> {
    let mut bands: Vec<msplat_core::Band> = table.iter().flat_map(|(_, m)| m.bands.iter().map(|b| b.band)).collect();
    bands.sort();
    bands.dedup();
    bands.iter().map(|b| b.name().to_string()).collect()
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn to_csv(table: &[(String, Metrics)]) -> Result<Vec<u8>, Fail> {
    let cols = columns(table);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    for c in cols.iter().chain(std::iter::once(&"All".to_string())) {
        header.push(format!("{c} PSNR"));
        header.push(format!("{c} SSIM"));
    }
    header.push("primitives".into());
    w.write_record(&header).data("csv")?;
    for (label, m) in table {
        let mut rec = vec![label.clone()];
        for c in &cols {
            match m.bands.iter().find(|b| b.band.name() == c) {
                Some(b) => rec.extend([num(b.psnr), num(b.ssim)]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        rec.extend([num(m.all.psnr), num(m.all.ssim)]);
        rec.push(m.primitives.iter().map(|(_, n)| n).sum::<usize>().to_string());
        w.write_record(&rec).data("csv")?;
    }
    w.into_inner().map_err(|e| Fail::data(e.to_string()))
}

fn to_json(table: &[(String, Metrics)]) -> String {
    let mut rows = Map::new();
    for (label, m) in table {
        let mut row = Map::new();
        for b in &m.bands {
            row.insert(
                b.band.name().to_string(),
                json!({"psnr": msplat_core::metrics::psnr_json(b.psnr), "ssim": b.ssim}),
            );
        }
        row.insert(
            "All".into(),
            json!({"psnr": msplat_core::metrics::psnr_json(m.all.psnr), "ssim": m.all.ssim}),
        );
        row.insert("primitives".into(), json!(m.primitives));
        rows.insert(label.clone(), Value::Object(row));
    }
    let mut s = serde_json::to_string_pretty(&Value::Object(rows)).expect("table serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        let (s, f) = parse_variant("joint+sig+specdelay").unwrap();
        assert_eq!(s, Strategy::Joint);
        assert!(f.sig && f.spec_delay && !f.msad && !f.ext_adc);
        assert_eq!(plan_label(s, f), "Joint + SIG + SpecDelay");
        let (s, f) = parse_variant("joint-optimized").unwrap();
        assert_eq!(plan_label(s, f), "Joint + SpecDelay + MSAD");
        assert!(parse_variant("joint+turbo").is_err());
        assert!(parse_variant("diagonal").is_err());
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("Joint + SIG + ExtADC"), "joint_sig_extadc");
        assert_eq!(slug("RGB+G+NIR"), "rgb_g_nir");
    }

    #[test]
    fn flag_list_roundtrip() {
        let f = Flags {
            spec_delay: true,
            msad: true,
            ..Flags::default()
        };
        assert_eq!(Flags::parse_list(&flag_list(f)).unwrap(), f);
    }
}
