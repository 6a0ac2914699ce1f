use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lifseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lifseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path to contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--out", p(d), "--frames", "2", "--skew", "0", "--seed", "1"]);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.len() > 10);
    assert_eq!(sa, sb);
}

struct BoxRecord {
    camera: usize,
    min_row: usize,
    min_col: usize,
    max_row: usize,
    max_col: usize,
    class_id: usize,
}

fn read_boxes(path: &Path) -> Vec<BoxRecord> {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    let n = |b: &serde_json::Value, k: &str| b[k].as_u64().unwrap() as usize;
    v.as_array()
        .unwrap()
        .iter()
        .map(|b| BoxRecord {
            camera: n(b, "camera"),
            min_row: n(b, "min_row"),
            min_col: n(b, "min_col"),
            max_row: n(b, "max_row"),
            max_col: n(b, "max_col"),
            class_id: n(b, "class_id"),
        })
        .collect()
}

#[test]
fn project_on_synchronized_data_stays_inside_vehicle_boxes() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen", "--out", p(&data), "--frames", "2", "--skew", "0", "--seed", "4"]);
    let mut checked = 0;
    for frame in 0..2 {
        let dir = data.join(format!("frame_{frame:04}"));
        let labels: Vec<u16> = std::fs::read(dir.join("labels.bin"))
            .unwrap()
            .chunks(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let boxes = read_boxes(&dir.join("boxes.json"));
        for camera in 0..2 {
            let csv = t.path().join(format!("p{frame}{camera}.csv"));
            ok(&[
                "project",
                "--data",
                p(&data),
                "--frame",
                &frame.to_string(),
                "--camera",
                &camera.to_string(),
                "--out",
                p(&csv),
            ]);
            let text = std::fs::read_to_string(&csv).unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next(), Some("point,row,col,depth,visible"));
            for line in lines {
                let f: Vec<&str> = line.split(',').collect();
                let i: usize = f[0].parse().unwrap();
                if f[4] != "1" || labels[i] != 2 {
                    continue;
                }
                let row = f[1].parse::<f64>().unwrap().round() as usize;
                let col = f[2].parse::<f64>().unwrap().round() as usize;
                let inside = boxes.iter().any(|b| {
                    b.camera == camera
                        && b.class_id == 2
                        && (b.min_row..=b.max_row).contains(&row)
                        && (b.min_col..=b.max_col).contains(&col)
                });
                assert!(inside, "frame {frame} camera {camera} point {i} at ({row}, {col})");
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "only {checked} vehicle points checked");
}

const FLAGS: &[(&str, &[&str])] = &[
    (
        "gen",
        &[
            "--out", "--frames", "--skew", "--speed", "--yaw-rate", "--seed", "--vehicles", "--poles", "--clutter",
            "--window",
        ],
    ),
    ("project", &["--data", "--frame", "--camera", "--out"]),
    ("paint", &["--data", "--frame", "--window", "--out"]),
    (
        "train",
        &[
            "--data", "--variant", "--out", "--epochs", "--seed", "--lr", "--offset-lr", "--alpha",
            "--train-fraction", "--grid", "--centroid", "--all-classes",
        ],
    ),
    ("eval", &["--run", "--data", "--out", "--held-out", "--zero-offset"]),
    (
        "ablate",
        &[
            "--data", "--out", "--variants", "--seeds", "--epochs", "--seed", "--lr", "--offset-lr", "--alpha",
            "--train-fraction", "--grid", "--centroid", "--all-classes",
        ],
    ),
    ("formats", &[]),
];

#[test]
fn help_lists_every_flag_and_readme_agrees() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    for (cmd, flags) in FLAGS {
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        let listed: Vec<&str> = help
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| w.starts_with("--") && *w != "--help" && *w != "--version")
            .collect();
        let mut listed: Vec<&str> = listed.into_iter().map(|w| w.split('<').next().unwrap()).collect();
        listed.sort();
        listed.dedup();
        let mut expected: Vec<&str> = flags.to_vec();
        expected.sort();
        assert_eq!(listed, expected, "{cmd} --help");
        for f in *flags {
            assert!(readme.contains(f), "README does not document {cmd} {f}");
        }
    }
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let usage = lifseg(&["gen", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    let usage = lifseg(&["train", "--data", "x", "--variant", "c9x9", "--out", "y"]);
    assert_eq!(usage.status.code(), Some(2));
    let stderr = String::from_utf8(usage.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("lifseg: error=usage code=2 "));

    let missing = lifseg(&["paint", "--data", p(&t.path().join("none")), "--frame", "0", "--out", "x.bin"]);
    assert_eq!(missing.status.code(), Some(3));

    let data = t.path().join("d");
    ok(&["gen", "--out", p(&data), "--frames", "1", "--seed", "2"]);
    let points = data.join("frame_0000/points.bin");
    let bytes = std::fs::read(&points).unwrap();
    std::fs::write(&points, &bytes[..bytes.len() - 3]).unwrap();
    let corrupt = lifseg(&["paint", "--data", p(&data), "--frame", "0", "--out", p(&t.path().join("o.bin"))]);
    assert_eq!(corrupt.status.code(), Some(3));
    let stderr = String::from_utf8(corrupt.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("lifseg: error=data code=3 corrupt file"), "{stderr}");
}

#[test]
fn train_and_eval_are_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen", "--out", p(&data), "--frames", "3", "--seed", "5"]);
    let mut runs = Vec::new();
    for k in 0..2 {
        let run = t.path().join(format!("run{k}"));
        let csv = t.path().join(format!("eval{k}.csv"));
        ok(&[
            "train", "--data", p(&data), "--variant", "full", "--epochs", "1", "--seed", "3", "--grid", "8,8,4", "--out",
            p(&run),
        ]);
        ok(&["eval", "--run", p(&run), "--data", p(&data), "--out", p(&csv)]);
        runs.push((run, csv));
    }
    let strip = |path: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_seconds");
        v
    };
    let (a, b) = (&runs[0], &runs[1]);
    for f in ["model.ckpt", "config.json"] {
        assert_eq!(std::fs::read(a.0.join(f)).unwrap(), std::fs::read(b.0.join(f)).unwrap(), "{f}");
    }
    assert_eq!(strip(&a.0.join("report.json")), strip(&b.0.join("report.json")));
    assert_eq!(std::fs::read(&a.1).unwrap(), std::fs::read(&b.1).unwrap());
    assert_eq!(strip(&a.1.with_extension("json")), strip(&b.1.with_extension("json")));
    let csv = std::fs::read_to_string(&a.1).unwrap();
    assert!(csv.starts_with("class_id,name,iou\n0,background,"));
    assert!(csv.lines().last().unwrap().starts_with("miou,"));
}

#[test]
fn zero_offset_eval_matches_nothing_learned_at_init() {
    // an untrained offset head predicts zero, so forcing zero changes nothing
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen", "--out", p(&data), "--frames", "3", "--seed", "6"]);
    let run = t.path().join("run");
    ok(&["train", "--data", p(&data), "--variant", "full", "--epochs", "0", "--grid", "8,8,4", "--out", p(&run)]);
    let (a, b) = (t.path().join("a.csv"), t.path().join("b.csv"));
    ok(&["eval", "--run", p(&run), "--data", p(&data), "--out", p(&a)]);
    ok(&["eval", "--run", p(&run), "--data", p(&data), "--out", p(&b), "--zero-offset"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn formats_prints_the_document() {
    let out = ok(&["formats"]);
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/formats.md")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), doc);
}

#[test]
fn ablate_writes_comparison_table() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen", "--out", p(&data), "--frames", "3", "--seed", "7"]);
    let out = t.path().join("ab");
    ok(&[
        "ablate", "--data", p(&data), "--out", p(&out), "--variants", "baseline,c3x3,full", "--seeds", "1,2", "--epochs",
        "1", "--grid", "8,8,4",
    ]);
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,label,seed,miou,offset_error,zero_offset_error");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("baseline,baseline,1,"));
    assert!(out.join("full_seed2/model.ckpt").exists());
}
