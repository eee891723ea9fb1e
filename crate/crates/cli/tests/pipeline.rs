use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use qbilliard::config::{parse_config, Overrides};
use qbilliard::pipeline::{self, RunError, ShapeStatus};
use qbilliard::{run_experiment, RunConfig, MANIFEST_FILE};
use qbilliard_core::stats::weyl_density;

/// One chaotic shape on a basis large enough for ~200 certified levels.
fn small_config(out: &Path, cache: &Path, shapes: &str) -> RunConfig {
    let text = format!(
        r#"
seed = 11
output_dir = "{}"
cache_dir = "{}"

[basis]
n_max_x = 50
n_max_y = 56
keep_fraction = 0.25
step_height = 30000.0

[perturb]
tau = "infinite"
epsilon_rule = "sqrt-ebar-delta"

{shapes}
"#,
        out.display(),
        cache.display()
    );
    parse_config(&text, &Overrides { test_mode: true, ..Default::default() }).unwrap()
}

const CHAOTIC: &str = r#"
[[shape]]
name = "a"
width = 1.0
height = 1.13
curvature1 = 0.20
offset1 = 0.40
curvature2 = 0.30
offset2 = 0.60
"#;

const BOX: &str = r#"
[[shape]]
name = "box"
width = 1.0
height = 1.13
curvature1 = 0.0
offset1 = 0.5
curvature2 = 0.0
offset2 = 0.5
"#;

fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().unwrap() != "cache" {
                    stack.push(p);
                }
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json" | "txt")) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Manifest with run-specific facts (timings, cache hits, paths) removed.
fn stable_manifest(bytes: &[u8]) -> serde_json::Value {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.remove("execution");
                m.remove("output_dir");
                m.remove("cache_dir");
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    strip(&mut v);
    v
}

#[test]
fn integrable_reference_records_zero_lyapunov_and_weyl_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("out"), &tmp.path().join("cache"), BOX);
    let manifest = run_experiment(&cfg).unwrap();
    let entry = manifest.shape("box").unwrap();
    assert_eq!(entry.status, ShapeStatus::Completed);
    let classical = entry.classical.as_ref().unwrap();
    assert!(classical.lyapunov_per_collision.abs() < 1e-3, "{classical:?}");
    let q = entry.quantum.as_ref().unwrap();
    assert_eq!(q.stable_levels, q.kept_levels);
    assert!(q.max_stable_drift < 1e-9);
    assert!(q.weyl_relative_error.abs() < 0.05, "{q:?}");
    assert_eq!(q.weyl_expected, weyl_density(1.13));
}

#[test]
fn manifest_references_only_existing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = small_config(&out, &tmp.path().join("cache"), CHAOTIC);
    let manifest = run_experiment(&cfg).unwrap();
    let on_disk: RunConfig = {
        let bytes = fs::read(out.join(MANIFEST_FILE)).unwrap();
        serde_json::from_slice::<qbilliard::RunManifest>(&bytes).unwrap().config
    };
    assert_eq!(on_disk, cfg);
    let mut paths: Vec<&PathBuf> = manifest.artifacts.values().collect();
    for s in &manifest.shapes {
        paths.extend(s.artifacts.values());
    }
    assert!(paths.len() >= 8);
    for p in paths {
        assert!(out.join(p).is_file(), "{} missing", p.display());
    }
    assert!(!out.join("manifest.json.partial").exists());

    let pooled = manifest.pooled.as_ref().unwrap();
    assert_eq!(pooled.shapes, ["a"]);
    let q = manifest.shapes[0].quantum.as_ref().unwrap();
    assert_eq!(pooled.h0.sample_size, q.stable_levels - 1 - 2 * cfg.stats.unfold_window);
    // H0 of a chaotic shape sits nearer the Wigner law, H(eps) nearer Poisson.
    assert!(pooled.h0.ks_wigner < pooled.h0.ks_poisson);
    assert!(pooled.h_eps.ks_poisson < pooled.h_eps.ks_wigner);
}

#[test]
fn reruns_with_one_seed_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("first");
    let b = tmp.path().join("second");
    run_experiment(&small_config(&a, &a.join("cache"), CHAOTIC)).unwrap();
    run_experiment(&small_config(&b, &b.join("cache"), CHAOTIC)).unwrap();
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (path, bytes) in &fa {
        if path == Path::new(MANIFEST_FILE) {
            assert_eq!(stable_manifest(bytes), stable_manifest(&fb[path]));
        } else {
            assert!(bytes == &fb[path], "{} differs", path.display());
        }
    }
}

#[test]
fn statistics_rerun_from_persisted_spectra_without_eigensolves() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = small_config(&out, &tmp.path().join("cache"), CHAOTIC);
    let manifest = run_experiment(&cfg).unwrap();
    assert_eq!(manifest.shapes[0].execution.cache_hit, Some(false));
    let spectra = vec![out.join(&manifest.shapes[0].artifacts["spectrum"])];
    let (_, report) = pipeline::pool_spectrum_files(&spectra, cfg.stats.unfold_window, cfg.stats.histogram_bins).unwrap();
    assert_eq!(&report, &manifest.pooled.as_ref().unwrap().h0);

    let again = run_experiment(&cfg).unwrap();
    assert_eq!(again.shapes[0].execution.cache_hit, Some(true));
    assert_eq!(again.pooled, manifest.pooled);
}

#[test]
fn failing_shapes_are_recorded_and_all_failing_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = small_config(&out, &tmp.path().join("cache"), CHAOTIC);
    // Too few levels below V0/10 for the Weyl fit.
    cfg.basis.step_height = Some(5000.0);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, RunError::AllShapesFailed(1)), "{err}");
    let bytes = fs::read(out.join(MANIFEST_FILE)).unwrap();
    let manifest: qbilliard::RunManifest = serde_json::from_slice(&bytes).unwrap();
    assert!(manifest.pooled.is_none());
    match &manifest.shapes[0].status {
        ShapeStatus::Failed { stage, error } => {
            assert_eq!(stage, "h0_statistics");
            assert!(error.contains("200"), "{error}");
        }
        other => panic!("{other:?}"),
    }
    // Earlier stages' artifacts are kept.
    assert!(out.join(&manifest.shapes[0].artifacts["classical"]).is_file());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qbilliard"))
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn validate_subcommand_accepts_the_shipped_config() {
    let out = bin().arg("validate").arg(repo_file("configs/default.toml")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok (3 shapes)"));
}

#[test]
fn validate_subcommand_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo_file("configs/default.toml")).unwrap();
    let text: String = text.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n");
    let text = text.replacen("curvature2 = 0.30", "curvature2 = 0.20", 1);
    let path = tmp.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed"), "{err}");
    assert!(err.contains("shape[0].curvature2"), "{err}");
}

#[test]
fn classical_subcommand_honours_seed_and_out_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str| {
        let out = bin()
            .args(["classical", "--seed", "99", "--dump-trajectories", "--out"])
            .arg(tmp.path().join(dir))
            .arg(repo_file("configs/default.toml"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let first = run("x");
    assert_eq!(first, run("y"));
    let summaries: BTreeMap<String, pipeline::ClassicalSummary> = serde_json::from_slice(&first).unwrap();
    assert_eq!(summaries.len(), 3);
    for s in summaries.values() {
        assert!(s.lyapunov_per_collision > 0.05);
    }
    assert!(tmp.path().join("x/shapes/b/trajectory_1.txt").is_file());
}
