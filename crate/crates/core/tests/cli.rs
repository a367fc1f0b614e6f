use std::fs;
use std::path::Path;

use avgclp::cli::{load_csv, main_with_args, ColumnRoles, RunConfig};
use avgclp::simulate::{draw_sample, export_csv, replicate_rng};
use avgclp::{dr, fit_mle, BasisSpec, ClpBasis, Dataset, Design, GpsFamily, GpsKind};
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("avgclp").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn design_sample(n: usize, seed: u64) -> Dataset {
    draw_sample(&Design::preset(1).unwrap(), n, &mut replicate_rng(seed, 0)).unwrap()
}

fn write_sample(dir: &TempDir, n: usize) -> std::path::PathBuf {
    let path = dir.path().join("sample.csv");
    export_csv(&design_sample(n, 9), fs::File::create(&path).unwrap()).unwrap();
    path
}

fn dr_beta(data: &Dataset) -> f64 {
    let names = &data.control_names;
    let fam = GpsFamily::new(GpsKind::PoissonLog, BasisSpec::linear_with_constant(names)).unwrap();
    let fit = fit_mle(&fam, data).unwrap();
    let clp = ClpBasis::fit(BasisSpec::linear(names), data, true).unwrap();
    dr(data, &fit, &clp).unwrap().beta[0]
}

#[test]
fn export_and_reload_give_identical_estimates() {
    let dir = TempDir::new().unwrap();
    let original = design_sample(700, 9);
    let path = dir.path().join("round.csv");
    export_csv(&original, fs::File::create(&path).unwrap()).unwrap();
    let roles = ColumnRoles {
        outcome: original.outcome_name.clone(),
        treatments: original.treatment_names.clone(),
        controls: original.control_names.clone(),
        multinomial_labels: false,
    };
    let reloaded = load_csv(&path, &roles).unwrap();
    assert_eq!(reloaded.y, original.y);
    assert_eq!(reloaded.x, original.x);
    assert_eq!(reloaded.w, original.w);
    assert_eq!(dr_beta(&reloaded).to_bits(), dr_beta(&original).to_bits());
}

fn sample_config() -> Value {
    json!({
        "data": "file.csv",
        "outcome": "file_y",
        "treatments": ["file_x"],
        "controls": ["file_w"],
        "gps": "logit",
        "gps_basis": "1,file_w",
        "clp_basis": "file_w",
        "multinomial_labels": false,
        "estimators": "ob",
        "jacobian": "exact",
        "gps_correction": false,
        "output": "file_out.csv",
        "format": "csv",
        "sidecar": "file.json",
        "markdown": "file.md",
        "seed": 1,
        "n": 100,
        "reps": 10,
        "draws": 1000,
        "threads": 1,
        "design": "1",
        "custom_design": null
    })
}

fn flag_value(key: &str) -> Value {
    match key {
        "data" => json!("flag.csv"),
        "outcome" => json!("flag_y"),
        "treatments" => json!(["flag_x"]),
        "controls" => json!(["flag_w"]),
        "gps" => json!("poisson"),
        "gps_basis" => json!("1,flag_w"),
        "clp_basis" => json!("flag_w"),
        "multinomial_labels" => json!(true),
        "estimators" => json!("dr"),
        "jacobian" => json!("numeric"),
        "gps_correction" => json!(true),
        "output" => json!("flag_out.csv"),
        "format" => json!("json"),
        "sidecar" => json!("flag.json"),
        "markdown" => json!("flag.md"),
        "seed" => json!(2),
        "n" => json!(200),
        "reps" => json!(20),
        "draws" => json!(2000),
        "threads" => json!(2),
        "design" => json!("3"),
        "custom_design" => serde_json::to_value(Design::preset(2).unwrap()).unwrap(),
        other => panic!("no flag value for {other}"),
    }
}

#[test]
fn flags_override_config_file_per_field() {
    let file = sample_config();
    let keys: Vec<String> = file.as_object().unwrap().keys().cloned().collect();
    let base: RunConfig = serde_json::from_value(file.clone()).unwrap();
    // every field of the config is exercised
    let serialized = serde_json::to_value(&base).unwrap();
    assert_eq!(serialized.as_object().unwrap().len(), keys.len());
    for key in &keys {
        let flags: RunConfig = serde_json::from_value(json!({ key.as_str(): flag_value(key) })).unwrap();
        let merged = serde_json::to_value(flags.overlay(base.clone())).unwrap();
        for other in &keys {
            let want = if other == key { flag_value(key) } else { file[other].clone() };
            assert_eq!(merged[other], want, "flag on '{key}', field '{other}'");
        }
    }
    let unset = RunConfig::default().overlay(base.clone());
    assert_eq!(unset, base);
}

#[test]
fn cli_flag_beats_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("out.csv");
    fs::write(
        &cfg,
        json!({"design": "1", "n": 150, "reps": 6, "seed": 4, "estimators": "ob", "output": path_str(&out)}).to_string(),
    )
    .unwrap();
    assert_eq!(run(&["simulate", "--config", path_str(&cfg), "--reps", "4", "--threads", "1"]), 0);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "design,estimator,N,B,median_bias,sd,median_se,coverage,fail_rate");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,ob,150,4,"), "{}", lines[1]);
}

#[test]
fn estimate_writes_one_record_per_estimator() {
    let dir = TempDir::new().unwrap();
    let data = write_sample(&dir, 800);
    let out = dir.path().join("est.csv");
    let sidecar = dir.path().join("est.json");
    let code = run(&[
        "estimate",
        "--data",
        path_str(&data),
        "--outcome",
        "y",
        "--treatments",
        "x",
        "--controls",
        "w",
        "--gps",
        "poisson",
        "--estimator",
        "ob,gipw,dr,plm",
        "--output",
        path_str(&out),
        "--sidecar",
        path_str(&sidecar),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("estimator,treatment,beta,stderr"));
    let records: Vec<Value> = serde_json::from_str(&fs::read_to_string(&sidecar).unwrap()).unwrap();
    assert_eq!(records.len(), 4);
    for r in &records {
        let beta = r["beta"].as_f64().unwrap();
        let se = r["stderr"].as_f64().unwrap();
        assert!((beta - 2.0).abs() < 6.0 * se.max(0.05), "{r}");
        assert_eq!(r["n"], 800);
    }
}

#[test]
fn estimate_expands_category_labels() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("labels.csv");
    let mut text = String::from("y,arm,w\n");
    for i in 0..300 {
        let w = f64::from(i % 17) / 8.0 - 1.0;
        let arm = (i * 7 + i / 5) % 3;
        let y = 0.5 * w + f64::from(arm) * 1.5 + f64::from(i % 11) / 10.0;
        text.push_str(&format!("{y},{arm},{w}\n"));
    }
    fs::write(&path, text).unwrap();
    let out = dir.path().join("out.csv");
    let code = run(&[
        "estimate",
        "--data",
        path_str(&path),
        "--outcome",
        "y",
        "--treatments",
        "arm",
        "--controls",
        "w",
        "--gps",
        "multinomial",
        "--multinomial-labels",
        "--estimator",
        "gipw,dr",
        "--output",
        path_str(&out),
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn seb_reports_calibrated_standard_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("seb.csv");
    assert_eq!(run(&["seb", "--design", "2", "--draws", "200000", "--output", path_str(&out)]), 0);
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let se: f64 = row[6].parse().unwrap();
    assert!((se - 0.05).abs() < 0.001, "{se}");
}

#[test]
fn data_errors_exit_with_three() {
    let dir = TempDir::new().unwrap();
    let data = write_sample(&dir, 50);
    let base = ["estimate", "--data", path_str(&data), "--gps", "poisson", "--treatments", "x"];
    let mut missing = base.to_vec();
    missing.extend(["--outcome", "nope", "--controls", "w"]);
    assert_eq!(run(&missing), 3);

    let holey = dir.path().join("holey.csv");
    fs::write(&holey, "y,x,w\n1,0,0.5\nNA,1,0.2\n").unwrap();
    let code = run(&[
        "estimate", "--data", path_str(&holey), "--outcome", "y", "--treatments", "x", "--controls", "w", "--gps",
        "poisson",
    ]);
    assert_eq!(code, 3);

    let negative = dir.path().join("negative.csv");
    fs::write(&negative, "y,x,w\n1,-1,0.5\n2,1,0.2\n").unwrap();
    let code = run(&[
        "estimate", "--data", path_str(&negative), "--outcome", "y", "--treatments", "x", "--controls", "w", "--gps",
        "poisson",
    ]);
    assert_eq!(code, 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sed": 3}"#).unwrap();
    assert_eq!(run(&["simulate", "--config", path_str(&cfg)]), 2);
    assert_eq!(run(&["estimate", "--gps", "poisson"]), 2);
    assert_eq!(run(&["simulate", "--design", "9", "--reps", "2"]), 2);
    assert_eq!(run(&["simulate", "--estimators", "ols"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
}

#[test]
fn separated_logit_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("separated.csv");
    let mut text = String::from("y,x,w\n");
    for i in 0..60 {
        let w = f64::from(i) / 10.0 - 3.0;
        let x = u8::from(w > 0.0);
        text.push_str(&format!("{},{x},{w}\n", w + f64::from(x)));
    }
    fs::write(&path, text).unwrap();
    let code = run(&[
        "estimate", "--data", path_str(&path), "--outcome", "y", "--treatments", "x", "--controls", "w", "--gps",
        "logit",
    ]);
    assert_eq!(code, 4);
}
