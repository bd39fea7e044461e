use std::fs;
use std::path::Path;

use lcmflow::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use lcmflow::egomotion::read_trajectory;
use lcmflow::pipeline::Metrics;

fn lcmflow(args: &[&str]) -> i32 {
    run(std::iter::once("lcmflow").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, seed: &str) -> i32 {
    lcmflow(&[
        "synth",
        "--traj",
        "straight",
        "--frames",
        "6",
        "--seed",
        seed,
        "--out",
        p(out),
    ])
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(synth(&a, "3"), EXIT_OK);
    assert_eq!(synth(&b, "3"), EXIT_OK);
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    // run.json also records the output path, so compare only the hashes.
    let hashes = |dir: &Path| {
        let run: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap();
        run["artifacts"].clone()
    };
    assert!(hashes(&a)["dataset"].is_string());
    assert_eq!(hashes(&a), hashes(&b));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(
        lcmflow(&["synth", "--traj", "spiral", "--out", p(&out)]),
        EXIT_USAGE
    );
    assert_eq!(lcmflow(&["report"]), EXIT_USAGE);
    assert_eq!(
        lcmflow(&["egomotion", "--estimator", "ransac", "--out", p(&out)]),
        EXIT_USAGE
    );
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        lcmflow(&["calibrate", "--dataset", p(&empty), "--out", p(&out)]),
        EXIT_DATA
    );
    let missing = dir.path().join("nope.json");
    assert_eq!(lcmflow(&["report", p(&missing)]), EXIT_DATA);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ds = root.join("ds");
    assert_eq!(synth(&ds, "1"), EXIT_OK);

    let calib = root.join("calib");
    let code = lcmflow(&[
        "calibrate",
        "--dataset",
        p(&ds),
        "--knots",
        "3",
        "--restarts",
        "1",
        "--out",
        p(&calib),
    ]);
    assert_eq!(code, EXIT_OK);
    let lut = calib.join("lut.json");
    assert!(lut.is_file() && calib.join("bins.csv").is_file());

    let eval = root.join("eval");
    let code = lcmflow(&[
        "evalfit",
        "--dataset",
        p(&ds),
        "--lut",
        p(&lut),
        "--out",
        p(&eval),
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = fs::read_to_string(eval.join("evalfit.csv")).unwrap();
    assert!(csv.starts_with("bin_lo,bin_hi,n,ks_lcm,ks_gauss,ks_loglogistic"));
    assert_eq!(csv.lines().count(), 4);

    // LCMSAC refuses to run without a LUT.
    let none = root.join("none");
    assert_ne!(
        lcmflow(&[
            "egomotion",
            "--dataset",
            p(&ds),
            "--estimator",
            "lcmsac",
            "--out",
            p(&none)
        ]),
        EXIT_OK
    );

    let mut metrics = Vec::new();
    for est in ["ransac", "lcmsac"] {
        let out = root.join(est);
        let code = lcmflow(&[
            "egomotion",
            "--dataset",
            p(&ds),
            "--lut",
            p(&lut),
            "--estimator",
            est,
            "--flow",
            "gt",
            "--out",
            p(&out),
        ]);
        assert_eq!(code, EXIT_OK);
        let m: Metrics =
            serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert!(m.drift_pct < 0.01, "{est}: {}", m.drift_pct);
        let head = fs::read_to_string(out.join("trajectory.csv")).unwrap();
        assert!(head.starts_with("k,x,y,z,yaw,pitch,roll\n"));
        assert_eq!(
            read_trajectory(&out.join("trajectory.csv")).unwrap().len(),
            6
        );
        metrics.push(out.join("metrics.json"));
    }

    let rep = root.join("report");
    assert_eq!(
        lcmflow(&["report", p(&metrics[0]), p(&metrics[1]), "--out", p(&rep)]),
        EXIT_OK
    );
    let rows = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}
