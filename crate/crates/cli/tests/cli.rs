use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vspw_core::ensemble::weighted_pair;
use vspw_core::label_map::{parse_mapping, remap};
use vspw_core::losses::{majority_patch_labels, nce_loss};
use vspw_core::tensor_io::{read_mask, read_tensor, write_mask, write_tensor};
use vspw_core::tta::{plan_windows, stitch};
use vspw_core::{
    EnsembleCoefficient, FeatureClip, MissingPolicy, NceConfig, ProbMap, SegMask, IGNORE,
};

fn vspw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vspw"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn map(c: usize, h: usize, w: usize, seed: u32) -> ProbMap {
    let plane = h * w;
    let mut v = vec![0.0f32; c * plane];
    for pix in 0..plane {
        let raw: Vec<f32> = (0..c)
            .map(|k| 1.0 + ((seed as usize * 31 + pix * 7 + k * 13) % 11) as f32)
            .collect();
        let z: f32 = raw.iter().sum();
        for k in 0..c {
            v[k * plane + pix] = raw[k] / z;
        }
    }
    ProbMap::new(c, h, w, true, v).unwrap()
}

#[test]
fn version_and_usage_errors() {
    let v = vspw(&["--version"]);
    assert!(v.status.success());
    assert!(stdout(&v).starts_with("vspw "));
    assert_eq!(vspw(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(vspw(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        vspw(&["gradcheck"]).status.code(),
        Some(2),
        "--seed is required"
    );
    assert_eq!(
        vspw(&["ensemble", "a", "b", "-o", "x"]).status.code(),
        Some(2)
    );
}

#[test]
fn weighted_ensemble_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (map(3, 4, 5, 1), map(3, 4, 5, 2));
    let (pa, pb, out) = (
        dir.path().join("a.lgt"),
        dir.path().join("b.lgt"),
        dir.path().join("o.lgt"),
    );
    fs::write(&pa, write_tensor(&a)).unwrap();
    fs::write(&pb, write_tensor(&b)).unwrap();
    let o = vspw(&["ensemble", "--tau", "0.4", s(&pa), s(&pb), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = read_tensor(&fs::read(&out).unwrap()).unwrap();
    let want = weighted_pair(&a, &b, EnsembleCoefficient::new(0.4).unwrap()).unwrap();
    assert_eq!(got, want);
    for (g, (x, y)) in got.values().iter().zip(a.values().iter().zip(b.values())) {
        assert!((f64::from(*g) - (0.4 * f64::from(*x) + 0.6 * f64::from(*y))).abs() < 1e-7);
    }
    let bad = vspw(&["ensemble", "--tau", "1.5", s(&pa), s(&pb), "-o", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = SegMask::new(3, 2, vec![0, 1, 2, 2, IGNORE, 0]).unwrap();
    fs::create_dir_all(dir.path().join("p")).unwrap();
    fs::write(dir.path().join("p/x.pgm"), write_mask(&m)).unwrap();
    let p = dir.path().join("p");
    let o = vspw(&["eval", "--classes", "4", "--pred", s(&p), "--gt", s(&p)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.ends_with("mIoU\t1/1\t1.000000\n"), "{text}");
    assert!(text.contains("3\t-\t-\n"));
}

#[test]
fn eval_reports_exact_ratio_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for d in ["p", "g"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let row = |l: &[u8]| write_mask(&SegMask::new(l.len(), 1, l.to_vec()).unwrap());
    fs::write(root.join("p/a.pgm"), row(&[0, 0, 1, 1])).unwrap();
    fs::write(root.join("g/a.pgm"), row(&[0, 1, 1, 1])).unwrap();
    let (p, g) = (root.join("p"), root.join("g"));
    let o = vspw(&["eval", "--classes", "2", "--pred", s(&p), "--gt", s(&g)]);
    assert_eq!(
        stdout(&o),
        "class\tiou\tratio\n0\t0.500000\t1/2\n1\t0.666667\t2/3\nmIoU\t7/12\t0.583333\n"
    );
    fs::write(root.join("g/b.pgm"), row(&[0])).unwrap();
    let o = vspw(&["eval", "--classes", "2", "--pred", s(&p), "--gt", s(&g)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("only in gt: b"));
}

#[test]
fn per_video_averages_video_scores() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let row = |l: &[u8]| write_mask(&SegMask::new(l.len(), 1, l.to_vec()).unwrap());
    for (video, pred, gt) in [
        ("v1", [0u8, 0, 1, 1], [0u8, 1, 1, 1]),
        ("v2", [0, 1, 1, 1], [0, 1, 1, 1]),
    ] {
        for (d, l) in [("p", pred), ("g", gt)] {
            fs::create_dir_all(root.join(d).join(video)).unwrap();
            fs::write(root.join(d).join(video).join("0.pgm"), row(&l)).unwrap();
        }
    }
    let (p, g) = (root.join("p"), root.join("g"));
    let o = vspw(&[
        "eval",
        "--classes",
        "2",
        "--pred",
        s(&p),
        "--gt",
        s(&g),
        "--per-video",
    ]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], format!("{}\t0.583333", p.join("v1").display()));
    assert_eq!(lines[1], format!("{}\t1.000000", p.join("v2").display()));
    assert_eq!(lines[2], "mIoU\t19/24\t0.791667");
}

#[test]
fn filter_manifest_keeps_and_drops() {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    let mut eight = vec![1u8; 9];
    eight[0] = IGNORE;
    let mut seven = eight.clone();
    seven[1] = IGNORE;
    fs::write(
        masks.join("a.pgm"),
        write_mask(&SegMask::new(3, 3, eight).unwrap()),
    )
    .unwrap();
    fs::write(
        masks.join("b.pgm"),
        write_mask(&SegMask::new(3, 3, seven).unwrap()),
    )
    .unwrap();
    let o = vspw(&["filter", "--in", s(&masks), "--threshold", "0.8"]);
    assert!(o.status.success());
    let want = format!(
        "{}\t0.888889\tkeep\n{}\t0.777778\tdrop\n",
        masks.join("a.pgm").display(),
        masks.join("b.pgm").display()
    );
    assert_eq!(stdout(&o), want);
    let strict = vspw(&[
        "filter",
        "--in",
        s(&masks),
        "--threshold",
        "0.888888888888889",
        "--strict",
    ]);
    assert!(stdout(&strict).lines().all(|l| l.ends_with("drop")));
}

#[test]
fn remap_matches_library_and_maps_unknown_to_ignore() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let table_text = "# ade to target\n0\t1\n1\t0\n2\t-\n";
    fs::write(root.join("t.tsv"), table_text).unwrap();
    let src = SegMask::new(4, 1, vec![0, 1, 2, 9]).unwrap();
    fs::create_dir_all(root.join("in/vid")).unwrap();
    fs::write(root.join("in/vid/x.pgm"), write_mask(&src)).unwrap();
    let (t, i, out) = (root.join("t.tsv"), root.join("in"), root.join("out"));
    let o = vspw(&["remap", "--table", s(&t), "--in", s(&i), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = read_mask(&fs::read(out.join("vid/x.pgm")).unwrap()).unwrap();
    let table = parse_mapping(table_text).unwrap();
    assert_eq!(got, remap(&src, &table, MissingPolicy::ToIgnore).unwrap());
    assert_eq!(got.labels(), &[1, 0, IGNORE, IGNORE]);
    assert!(stdout(&o).ends_with("\t0.500000\tdrop\n"));

    let strict_out = root.join("strict");
    let o = vspw(&[
        "remap",
        "--table",
        s(&t),
        "--in",
        s(&i),
        "--out",
        s(&strict_out),
        "--strict-table",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!strict_out.exists(), "failed run left outputs behind");
}

#[test]
fn failed_vote_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, out) = (
        dir.path().join("a.pgm"),
        dir.path().join("b.pgm"),
        dir.path().join("v.pgm"),
    );
    fs::write(&a, write_mask(&SegMask::filled(2, 2, 1).unwrap())).unwrap();
    fs::write(&b, write_mask(&SegMask::filled(3, 2, 1).unwrap())).unwrap();
    let o = vspw(&["vote", s(&a), s(&b), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(
        fs::read_dir(dir.path()).unwrap().count(),
        2,
        "no temp files left"
    );
}

#[test]
fn vote_and_argmax_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for (name, labels) in [("a", [0u8, 2]), ("b", [1, 2]), ("c", [1, IGNORE])] {
        fs::write(
            p(&format!("{name}.pgm")),
            write_mask(&SegMask::new(2, 1, labels.to_vec()).unwrap()),
        )
        .unwrap();
    }
    let o = vspw(&[
        "vote",
        s(&p("a.pgm")),
        s(&p("b.pgm")),
        s(&p("c.pgm")),
        "-o",
        s(&p("v.pgm")),
    ]);
    assert!(o.status.success());
    assert_eq!(
        read_mask(&fs::read(p("v.pgm")).unwrap()).unwrap().labels(),
        &[1, 2]
    );

    let probs = ProbMap::new(2, 1, 2, true, vec![0.3, 0.5, 0.7, 0.5]).unwrap();
    fs::write(p("m.lgt"), write_tensor(&probs)).unwrap();
    assert!(vspw(&["argmax", s(&p("m.lgt")), "-o", s(&p("m.pgm"))])
        .status
        .success());
    assert_eq!(
        read_mask(&fs::read(p("m.pgm")).unwrap()).unwrap().labels(),
        &[1, 0]
    );
}

#[test]
fn tta_and_flip_merge_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_windows(5, 6, 3, 4, 2).unwrap();
    let windows: Vec<ProbMap> = (0..plan.windows.len())
        .map(|k| map(2, 3, 4, k as u32))
        .collect();
    let mut args = vec!["tta-merge".to_string(), "--plan".into(), "5,6,3,4,2".into()];
    for (k, w) in windows.iter().enumerate() {
        let path = dir.path().join(format!("w{k}.lgt"));
        fs::write(&path, write_tensor(w)).unwrap();
        args.push(path.display().to_string());
    }
    let out = dir.path().join("full.lgt");
    args.extend(["-o".into(), out.display().to_string()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(vspw(&argv).status.success());
    let got = read_tensor(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(got, stitch(&plan, &windows).unwrap());

    // One window short of the plan.
    let short: Vec<&str> = argv
        .iter()
        .copied()
        .filter(|a| !a.ends_with("w0.lgt"))
        .collect();
    assert_eq!(vspw(&short).status.code(), Some(1));
    assert_eq!(
        vspw(&["tta-merge", "--plan", "5,6", "x", "-o", "y"])
            .status
            .code(),
        Some(2)
    );

    let (a, b) = (dir.path().join("w0.lgt"), dir.path().join("w1.lgt"));
    let flip = dir.path().join("flip.lgt");
    assert!(vspw(&["flip-merge", s(&a), s(&b), "-o", s(&flip)])
        .status
        .success());
    let merged = read_tensor(&fs::read(&flip).unwrap()).unwrap();
    assert_eq!(
        merged,
        vspw_core::tta::hflip_merge(&windows[0], &windows[1]).unwrap()
    );
}

#[test]
fn gradcheck_reports_every_loss() {
    let o = vspw(&["gradcheck", "--seed", "9", "--instances", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 6);
    for loss in ["nce", "ce", "dice", "seg", "total"] {
        assert!(text.contains(&format!("\n{loss}\t3\t")), "{text}");
    }
}

#[test]
fn nce_eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let (dim, h, w) = (2, 2, 2);
    let f0: Vec<f32> = vec![0.1, 0.4, -0.3, 0.8, 0.5, -0.2, 0.9, 0.0];
    let f1: Vec<f32> = vec![0.2, 0.3, -0.1, 0.7, 0.4, -0.5, 0.6, 0.1];
    fs::write(
        p("f0.lgt"),
        write_tensor(&ProbMap::new(dim, h, w, false, f0.clone()).unwrap()),
    )
    .unwrap();
    fs::write(
        p("f1.lgt"),
        write_tensor(&ProbMap::new(dim, h, w, false, f1.clone()).unwrap()),
    )
    .unwrap();
    let gt0 = SegMask::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0]).unwrap();
    let gt1 = SegMask::new(
        4,
        4,
        vec![
            0, 0, 1, 1, 0, 0, 1, 1, 2, 2, IGNORE, IGNORE, 2, 2, IGNORE, IGNORE,
        ],
    )
    .unwrap();
    fs::write(p("g0.pgm"), write_mask(&gt0)).unwrap();
    fs::write(p("g1.pgm"), write_mask(&gt1)).unwrap();

    let mut classes = majority_patch_labels(&gt0, h, w).unwrap();
    classes.extend(majority_patch_labels(&gt1, h, w).unwrap());
    let mut features = Vec::new();
    for f in [&f0, &f1] {
        for pix in 0..h * w {
            features.extend((0..dim).map(|c| f64::from(f[c * h * w + pix])));
        }
    }
    let clip = FeatureClip::new(dim, features, classes, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    let cfg = NceConfig {
        temperature: 0.5,
        rng_seed: 4,
        ..NceConfig::default()
    };
    let want = nce_loss(&clip, &cfg).unwrap();

    let o = vspw(&[
        "nce-eval",
        s(&p("f0.lgt")),
        s(&p("f1.lgt")),
        "--gt",
        s(&p("g0.pgm")),
        s(&p("g1.pgm")),
        "--seed",
        "4",
        "--temperature",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let value: f64 = text
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(value, want.value);
    assert!(text.contains(&format!("contributing\t{}\n", want.contributing)));

    fs::write(p("short.txt"), "0 1 2").unwrap();
    let o = vspw(&[
        "nce-eval",
        s(&p("f0.lgt")),
        s(&p("f1.lgt")),
        "--classes",
        s(&p("short.txt")),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = vspw(&[
        "nce-eval",
        s(&p("f0.lgt")),
        s(&p("f1.lgt")),
        "--classes",
        s(&p("short.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2), "missing --seed is a usage error");
}

#[test]
fn train_toy_tsv_and_json() {
    let o = vspw(&["train-toy", "--seed", "3", "--steps", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step\ttotal\tseg\tnce");
    assert!(lines[5].starts_with("4\t"));
    assert!(text.contains("\nfinal\t"));
    assert!(text.contains("class_counts\t0:16 1:16 2:16\n"));

    let o = vspw(&["train-toy", "--seed", "3", "--steps", "5", "--json"]);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["outcome"]["log"].as_array().unwrap().len(), 5);
    assert_eq!(doc["config"]["seed"], 3);
    assert!(doc["outcome"]["final"]["intra"].is_number());
    assert_eq!(
        vspw(&["train-toy", "--seed", "3", "--lr=-1"]).status.code(),
        Some(1)
    );
}
