use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bubblebloch"))
}

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("BUBBLEBLOCH_CACHE")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = "[geometry]\norder = 6\n";

#[test]
fn band_grid_peaks_at_corner() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), SMALL, &["--mode", "asymptotic", "band"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(d.path().join("out/band.csv")).unwrap();
    let rows = bubblebloch::bloch::read_band_csv(csv.as_bytes()).unwrap();
    assert_eq!(rows.len(), 343);
    assert!(csv.starts_with("# tool: bubblebloch "));
    let s = json(&d.path().join("out/summary.json"));
    assert_eq!(s["argmax_is_corner"], true);
    assert_eq!(s["failures"].as_array().unwrap().len(), 0);
    let pi = std::f64::consts::PI;
    for a in s["argmax_alpha"].as_array().unwrap() {
        assert!((a.as_f64().unwrap() - pi).abs() < 1e-12);
    }
    let checks = s["asymptotic_check"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    for c in checks {
        let (dev, budget) = (c["relative_deviation"].as_f64().unwrap(), c["budget"].as_f64().unwrap());
        assert_eq!(c["within_budget"], dev <= budget, "{c}");
        assert!(dev <= 10.0 * budget, "{c}");
    }
    // Deviation is smallest at the corner and grows toward the origin.
    let last = &checks[4];
    assert!(last["alpha"].as_array().unwrap().iter().all(|a| (a.as_f64().unwrap() - pi).abs() < 1e-12));
    assert_eq!(last["within_budget"], true);
    assert!(s["header"]["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn empty_path_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), "[sweep]\npath = []\n", &["band"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("path is empty"));
}

#[test]
fn failed_points_give_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    // The path starts at alpha = 0, where the band problem is undefined.
    let cfg = "[geometry]\norder = 4\n[sweep]\nmode = \"asymptotic\"\npath = [[0, 0, 0], [1, 0, 0]]\nsamples = 2\n";
    let out = run(d.path(), cfg, &["band"]);
    assert_eq!(out.status.code(), Some(1));
    let s = json(&d.path().join("out/summary.json"));
    let f = s["failures"].as_array().unwrap();
    assert_eq!(f.len(), 1);
    assert_eq!(f[0]["index"], 0);
}

#[test]
fn tensor_is_deterministic_and_isotropic_for_sphere() {
    let d = tempfile::tempdir().unwrap();
    assert!(run(d.path(), SMALL, &["tensor"]).status.success());
    let first = std::fs::read(d.path().join("out/model.json")).unwrap();
    assert!(run(d.path(), SMALL, &["tensor"]).status.success());
    let second = std::fs::read(d.path().join("out/model.json")).unwrap();
    assert_eq!(first, second);
    let m = json(&d.path().join("out/model.json"));
    let l = &m["model"]["lambda"];
    let at = |i: usize, j: usize| l[i][j].as_f64().unwrap();
    for i in 0..3 {
        assert!((at(i, i) - at(0, 0)).abs() <= 1e-6 * at(0, 0));
        for j in 0..3 {
            if i != j {
                assert!(at(i, j).abs() <= 1e-6 * at(0, 0));
            }
        }
    }
    assert_eq!(m["hessian_check"]["passed"], true);
}

#[test]
fn ellipsoid_tensor_is_diagonal_and_anisotropic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "[geometry]\nshape = \"ellipsoid\"\nsemi_axes = [0.3, 0.2, 0.15]\norder = 6\n";
    assert!(run(d.path(), cfg, &["tensor"]).status.success());
    let m = json(&d.path().join("out/model.json"));
    let l = &m["model"]["lambda"];
    let at = |i: usize, j: usize| l[i][j].as_f64().unwrap();
    let scale = at(0, 0).max(at(1, 1)).max(at(2, 2));
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(at(i, j).abs() <= 1e-6 * scale, "{l}");
            }
        }
    }
    assert!((at(0, 0) - at(1, 1)).abs() > 1e-3 * scale);
    assert!((at(1, 1) - at(2, 2)).abs() > 1e-3 * scale);
}

#[test]
fn gap_regimes_around_corner_frequency() {
    let d = tempfile::tempdir().unwrap();
    assert!(run(d.path(), SMALL, &["tensor"]).status.success());
    let model = d.path().join("out/model.json");
    let m = model.to_str().unwrap();

    assert!(run(d.path(), SMALL, &["gap", "--ratio", "0.99", "--model", m]).status.success());
    let g = json(&d.path().join("out/gap.json"));
    assert_eq!(g["regime"], "propagating");
    let ell = std::fs::read_to_string(d.path().join("out/ellipsoid.csv")).unwrap();
    assert!(ell.lines().any(|l| l == "a1,a2,a3,residual"));

    assert!(run(d.path(), SMALL, &["gap", "--ratio", "1.01", "--model", m]).status.success());
    let g = json(&d.path().join("out/gap.json"));
    assert_eq!(g["regime"], "gap");
    let dirs = g["directions"].as_array().unwrap();
    assert_eq!(dirs.len(), 26);
    assert!(dirs.iter().all(|d| d["magnitude"]["kind"] == "imaginary" && d["magnitude"]["value"].as_f64().unwrap() > 0.0));

    assert!(run(d.path(), SMALL, &["gap", "--ratio", "1.0", "--model", m]).status.success());
    assert_eq!(json(&d.path().join("out/gap.json"))["regime"], "critical");

    let out = run(d.path(), SMALL, &["gap", "--model", m]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn field_peaks_in_bubbles_and_is_quasi_periodic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "scale = 0.5\n[geometry]\norder = 6\n[field]\nstart = [0.0, 0.0, 0.0]\nend = [1.0, 0.0, 0.0]\npoints = 41\n";
    assert!(run(d.path(), cfg, &["field", "--alpha-tilde", "0.3,-0.2,0.1"]).status.success());
    let text = std::fs::read_to_string(d.path().join("out/field.csv")).unwrap();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let hdr = r.headers().unwrap().clone();
    assert_eq!(hdr.iter().collect::<Vec<_>>(), ["x1", "x2", "x3", "re", "im", "abs", "qp1", "qp2", "qp3"]);
    let rows: Vec<Vec<f64>> = r.records().map(|x| x.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 41);
    // Bubble centres at x1 = 0, 0.5, 1 (radius 0.125); cell faces at 0.25, 0.75.
    for row in &rows {
        let (x, abs) = (row[0], row[5]);
        let to_centre = (x - (x / 0.5).round() * 0.5).abs();
        if to_centre < 0.1 {
            assert!((abs - 1.0).abs() < 1e-4, "x = {x}, |u| = {abs}");
        } else if (to_centre - 0.25).abs() < 1e-9 {
            assert!(abs < 0.1, "x = {x}, |u| = {abs}");
        }
        for q in &row[6..9] {
            assert!(*q < 1e-8, "{row:?}");
        }
    }
}

#[test]
fn validate_fails_on_injected_sign_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "[geometry]\norder = 4\n[validate]\nnegate_lambda = true\nfd_resolutions = [16, 24]\npwe_cutoff = 4\ngrid = 3\n";
    let out = run(d.path(), cfg, &["validate"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL tensor_psd")), "{text}");
    let v = json(&d.path().join("out/validate.json"));
    assert_eq!(v["passed"], false);
}

#[test]
fn validate_reports_coarse_oracle_miss() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "[geometry]\norder = 4\n[validate]\nfd_resolutions = [16, 17]\npwe_cutoff = 4\ngrid = 3\n[tolerances]\nfd_rel = 1e-4\n";
    let out = run(d.path(), cfg, &["validate"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL fd_capacity")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS tensor_psd")), "{text}");
}

#[test]
fn cache_reproduces_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cache = d.path().join("cache");
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "[geometry]\norder = 4\n[sweep]\nmode = \"asymptotic\"\ngrid = 3\n").unwrap();
    let go = |out: &str, cached: bool| {
        let mut c = bin();
        c.arg("--config").arg(&cfg).arg("--out").arg(d.path().join(out)).arg("band");
        if cached {
            c.env("BUBBLEBLOCH_CACHE", &cache);
        } else {
            c.env_remove("BUBBLEBLOCH_CACHE");
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(d.path().join(out).join("band.csv")).unwrap()
    };
    let plain = go("a", false);
    let cold = go("b", true);
    let operators = std::fs::read_dir(&cache)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("S-"))
        .count();
    assert_eq!(operators, 27);
    let warm = go("c", true);
    assert_eq!(plain, cold);
    assert_eq!(plain, warm);
}
