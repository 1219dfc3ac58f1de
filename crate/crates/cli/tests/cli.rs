use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cosam_core::plot::read_svg_values;

const TINY: &str = r#"
preset = "toy"
epochs = 1
batch_size = 2
k_points = 4
t_iters = 2
dims = [32, 32]

[data]
domains = 2
per_domain = 3
"#;

fn cosam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosam"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = setup();
    for out in ["a", "b"] {
        ok(&cosam(dir.path(), &["gen-data", "--config", "tiny.toml", "--out", out]));
    }
    for domain in ["A", "B"] {
        for sub in ["images", "masks"] {
            let file = format!("{domain}_0000.png");
            let a = dir.path().join("a").join(domain).join(sub).join(&file);
            let b = dir.path().join("b").join(domain).join(sub).join(&file);
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{}", a.display());
        }
        let m = |r: &str| fs::read(dir.path().join(r).join(domain).join("manifest.json")).unwrap();
        assert_eq!(m("a"), m("b"));
    }
}

#[test]
fn lodo_csv_is_deterministic() {
    let dir = setup();
    for out in ["r1", "r2"] {
        ok(&cosam(dir.path(), &["lodo", "--config", "tiny.toml", "--seed", "5", "--out", out]));
    }
    for f in ["lodo_matrix.csv", "lodo_summary.csv"] {
        let a = fs::read_to_string(dir.path().join("r1").join(f)).unwrap();
        let b = fs::read_to_string(dir.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let matrix = fs::read_to_string(dir.path().join("r1/lodo_matrix.csv")).unwrap();
    let rows: Vec<&str> = matrix.lines().collect();
    assert_eq!(rows[0], "source,A,B,average,coarse_average");
    assert_eq!(rows.len(), 3);
    // The source's own column stays blank.
    assert!(rows[1].starts_with("A,,"));
    assert_eq!(rows[2].split(',').nth(2), Some(""));
}

#[test]
fn train_eval_refine_round_trip() {
    let dir = setup();
    ok(&cosam(dir.path(), &["train", "--config", "tiny.toml", "--source", "B", "--out", "run"]));
    assert!(dir.path().join("run/final.bin").exists());
    assert!(dir.path().join("run/train_log.jsonl").exists());
    assert!(dir.path().join("run/config.toml").exists());

    let out = cosam(dir.path(), &["eval", "--config", "tiny.toml", "--checkpoint", "run/final.bin", "--source", "B", "--out", "ev"]);
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("A,"));
    assert!(csv.lines().last().unwrap().starts_with("average,"));

    ok(&cosam(dir.path(), &["gen-data", "--config", "tiny.toml", "--out", "data"]));
    ok(&cosam(
        dir.path(),
        &["refine", "--config", "tiny.toml", "--checkpoint", "run/final.bin", "--data", "data/A", "--save-masks", "--out", "ref"],
    ));
    let traces = fs::read_to_string(dir.path().join("ref/traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 3);
    assert!(dir.path().join("ref/masks/A_0000/coarse.png").exists());
}

#[test]
fn ablation_writes_table_and_matching_figure() {
    let dir = setup();
    let out = cosam(
        dir.path(),
        &["ablate", "--config", "tiny.toml", "--axis", "t_iters", "--levels", "1,2", "--seeds", "0", "--sources", "A", "--out", "abl"],
    );
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("abl/ablation_t_iters.csv")).unwrap();
    let svg = fs::read_to_string(dir.path().join("abl/figures/fig_t_iters.svg")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let values = read_svg_values(&svg).unwrap();
    let mut checked = 0;
    for row in csv.lines().filter(|l| l.split(',').nth(1) == Some("mean")) {
        let cells: Vec<&str> = row.split(',').collect();
        for v in &values {
            if v.level == cells[0] {
                let col = header.iter().position(|h| *h == v.series).unwrap();
                assert_eq!(format!("{:.6}", v.value), cells[col]);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 4);

    ok(&cosam(dir.path(), &["plot", "--input", "abl/ablation_t_iters.csv", "--run-id", "again", "--out", "p"]));
    let again = fs::read_to_string(dir.path().join("p/again/fig_t_iters.svg")).unwrap();
    assert_eq!(again, svg);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = setup();
    let code = |args: &[&str]| cosam(dir.path(), args).status.code();
    assert_eq!(code(&["gen-data", "--preset", "huge"]), Some(2));
    fs::write(dir.path().join("bad.toml"), "alpha = 0.2\nlearning_rate = 3\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", "bad.toml"]), Some(2));
    assert_eq!(code(&["gen-data", "--config", "tiny.toml", "--set", "alpha=1.5"]), Some(2));
    assert_eq!(code(&["ablate", "--config", "tiny.toml", "--axis", "loss", "--levels", "coarse+magic"]), Some(2));
    assert_eq!(code(&["gen-data", "--config", "tiny.toml", "--set", "data.root=\"missing\""]), Some(3));
    assert_eq!(code(&["plot", "--input", "nowhere.csv"]), Some(3));
}
