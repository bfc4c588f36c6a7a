use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use massact::io::{read_dump, RecordKind};

const ENGINE: &str = r#"
[engine]
depth = 3
width = 16
heads = 4
latent_h = 4
latent_w = 4
encoder_len = 2
steps = 1
seed = 5
vocab = 8
"#;

fn massact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_massact")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{body}\n{ENGINE}")).unwrap();
    path
}

fn run(command: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    massact(&args)
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_flag() {
    for command in ["generate", "disrupt", "segment", "transport"] {
        let out = massact(&[command, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in ["--config", "--out", "--seed", "--preset"] {
            assert!(text.contains(flag), "{command} --help lacks {flag}");
        }
    }
    let text = String::from_utf8(massact(&["eval-mask", "--help"]).stdout).unwrap();
    for flag in ["--mask", "--gt", "--band", "--out"] {
        assert!(text.contains(flag));
    }
}

#[test]
fn unknown_flags_fail() {
    let out = massact(&["generate", "--config", "x.toml", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(!massact(&["generate"]).status.success());
}

#[test]
fn generate_writes_one_latent_per_step_plus_noise() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert!(run("generate", &config, &out, &[]).status.success());
    let records = read_dump(out.join("trajectory.madf")).unwrap();
    let latents = records.iter().filter(|r| r.kind == RecordKind::Latent).count();
    assert_eq!(latents, 2);
    assert_eq!(records.len(), 2 + 3 * 2);
    let summary = json(out.join("trajectory.json"));
    assert_eq!(summary["config"]["depth"], 3);
    assert!(fs::read_to_string(out.join("final_latent.pgm")).unwrap().starts_with("P2\n4 4\n255\n"));
}

#[test]
fn zero_k_disruption_reports_unchanged_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[disrupt]\ncriterion = \"top\"\nk = [0, 4]\n");
    let out = dir.path().join("out");
    assert!(run("disrupt", &config, &out, &[]).status.success());
    let reports = json(out.join("disruption.json"));
    assert_eq!(reports[0]["latent_rmse"], 0.0);
    assert_eq!(reports[0]["relative"]["energy_ratio"], 100.0);
    assert_eq!(reports[0]["relative"]["cosine_similarity"], 100.0);
    let csv = fs::read_to_string(out.join("disruption.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,criterion,stream,layers,timesteps,latent_rmse,energy_ratio"));
    assert_eq!(lines.next(), Some("0,top,image,all,all,0.0,100.0"));
}

#[test]
fn segmenting_a_planted_dump_recovers_the_plant() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[plant]
foreground = [0, 1, 4, 5, 8, 9]
channels = [2, 7, 11]
amplitude = 200.0
noise = 1.0
seed = 9

[segment]
k = 3
dump = "planted/trajectory.madf"
ground_truth = "planted/ground_truth.pgm"
"#;
    let config = write_config(dir.path(), body);
    assert!(run("generate", &config, &dir.path().join("planted"), &[]).status.success());
    let out = dir.path().join("seg");
    let status = run("segment", &config, &out, &[]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let rows = json(out.join("segment_metrics.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row["miou"], 1.0);
        assert_eq!(row["k"], 3);
    }
    let mask = out.join("masks/layer00_t00_top_max.pgm");
    let gt = dir.path().join("planted/ground_truth.pgm");
    assert_eq!(fs::read(&mask).unwrap(), fs::read(&gt).unwrap());

    let eval = massact(&["eval-mask", "--mask", mask.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert!(eval.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(metrics["miou"], 1.0);
}

#[test]
fn transport_writes_three_dumps_and_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[transport]\nsource_prompt = [1, 2]\ntarget_prompt = [3, 4]\nlayers = \"all\"\n";
    let config = write_config(dir.path(), body);
    let out = dir.path().join("out");
    let res = run("transport", &config, &out, &["--preset", "sana-transport"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for name in ["merged.madf", "source.madf", "target.madf", "transport_sweep.csv", "transport.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let summary = json(out.join("transport.json"));
    assert_eq!(summary["plan"]["image_k"], 512);
    assert_eq!(summary["result"]["image_k"], 16);
    let csv = fs::read_to_string(out.join("transport_sweep.csv")).unwrap();
    assert!(csv.starts_with("regime,image_k,encoder_k,mask_criterion,delta_S,delta_T,delta_diff\nall,16,0,max,"));
}

#[test]
fn seed_override_changes_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("generate", &config, &a, &[]).status.success());
    assert!(run("generate", &config, &b, &["--seed", "5"]).status.success());
    assert!(run("generate", &config, &c, &["--seed", "6"]).status.success());
    let read = |d: &Path| fs::read(d.join("trajectory.madf")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_errors_are_one_line_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    for (body, key) in [
        ("mystery = 1", "mystery"),
        ("prompt = [1, 2, 3]", "prompt"),
        ("[segment]\nk = 99\n", "segment.k"),
        ("[disrupt]\ncriterion = \"sideways\"\nk = [1]\n", "sideways"),
    ] {
        let config = write_config(dir.path(), body);
        let out = run("segment", &config, &dir.path().join("o"), &[]);
        assert_eq!(out.status.code(), Some(2), "{body}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with("massact: error[config]: "), "{stderr}");
        assert!(stderr.contains(key), "{stderr}");
    }
    let out = massact(&["generate", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn corrupt_dumps_fail_as_io() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[segment]\nk = 4\ndump = \"bad.madf\"\n");
    fs::write(dir.path().join("bad.madf"), b"MADF\x01\x00\x00").unwrap();
    let out = run("segment", &config, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = run("transport", &config, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("transport"));
}
