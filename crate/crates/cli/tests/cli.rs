use std::path::Path;
use std::process::{Command, Output};

fn vidinsert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidinsert"))
        .args(args)
        .env_remove("VIDINSERT_PLUGINS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vidinsert(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic_case(dir: &Path) -> std::path::PathBuf {
    let case = dir.join("synthetic");
    ok(&["make-case", "--synthetic", "--out", s(&case)]);
    case
}

#[test]
fn staged_commands_match_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let case = synthetic_case(dir.path());
    let (full, staged) = (dir.path().join("full"), dir.path().join("staged"));

    ok(&[
        "run",
        "--case",
        s(&case),
        "--out",
        s(&full),
        "--mode",
        "ln",
        "--seed",
        "7",
        "--stage1-steps",
        "12",
        "--stage2-steps",
        "12",
        "--inject-feature",
        "3",
        "--inject-sattn",
        "2",
        "--inject-tattn",
        "4",
    ]);
    ok(&["compose", "--case", s(&case), "--out", s(&staged)]);
    ok(&[
        "stage1",
        "--case",
        s(&case),
        "--out",
        s(&staged),
        "--mode",
        "ln",
        "--seed",
        "7",
        "--steps",
        "12",
    ]);
    ok(&[
        "stage2",
        "--case",
        s(&case),
        "--out",
        s(&staged),
        "--steps",
        "12",
        "--inject-feature",
        "3",
        "--inject-sattn",
        "2",
        "--inject-tattn",
        "4",
    ]);
    for stage in ["copy", "coarse", "align"] {
        let a = std::fs::read(full.join(stage).join("clip.bin")).unwrap();
        let b = std::fs::read(staged.join(stage).join("clip.bin")).unwrap();
        assert!(a == b, "{stage} differs between run and staged commands");
    }
    assert!(staged.join("manifest.stage2.json").exists());

    let report = ok(&["eval", "--pred", s(&full.join("align")), "--case", s(&case)]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["cases"], on_disk["cases"]);
}

#[test]
fn exit_codes_separate_validation_from_stage_failures() {
    let dir = tempfile::tempdir().unwrap();
    let case = synthetic_case(dir.path());
    let out = dir.path().join("out");

    let unknown = vidinsert(&[
        "run",
        "--case",
        s(&case),
        "--out",
        s(&out),
        "--video-backend",
        "nope",
    ]);
    assert_eq!(unknown.status.code(), Some(2));

    let external = vidinsert(&[
        "eval",
        "--pred",
        s(&case.join("background")),
        "--case",
        s(&case),
        "--embedder",
        "external:viclip",
    ]);
    assert_eq!(external.status.code(), Some(2));

    std::fs::remove_file(case.join("trajectory.json")).unwrap();
    let missing = vidinsert(&["run", "--case", s(&case), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("trajectory"));
    assert!(!out.exists());

    // 60x60 frames pass validation but cannot be encoded by the pooling codec.
    let odd = dir.path().join("odd");
    std::fs::create_dir_all(&odd).unwrap();
    let traj = ok(&[
        "trajgen",
        "--init",
        "4,4,12,12",
        "--frames",
        "16",
        "--width",
        "60",
        "--height",
        "60",
        "--delta",
        "2,0",
    ]);
    std::fs::write(odd.join("trajectory.json"), traj).unwrap();
    let bg = dir.path().join("bg60");
    std::fs::create_dir_all(&bg).unwrap();
    for i in 0..16 {
        let img = image::RgbImage::from_pixel(60, 60, image::Rgb([40, 80, 120]));
        img.save(bg.join(format!("frame_{i:04}.png"))).unwrap();
    }
    ok(&[
        "make-case",
        "--out",
        s(&odd),
        "--background",
        s(&bg),
        "--object",
        s(&case.join("object.png")),
        "--object-mask",
        s(&case.join("object_mask.png")),
        "--trajectory",
        s(&odd.join("trajectory.json")),
        "--prompts",
        s(&case.join("prompts.json")),
    ]);
    let failed = vidinsert(&[
        "run",
        "--case",
        s(&odd),
        "--out",
        s(&dir.path().join("odd-out")),
    ]);
    assert_eq!(failed.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("stage1"));
}

#[test]
fn trajgen_prints_clamped_boxes() {
    let out = ok(&[
        "trajgen", "--init", "52,0,8,8", "--frames", "3", "--width", "64", "--height", "64",
        "--delta", "4,0",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let xs: Vec<u64> = v["boxes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["x0"].as_u64().unwrap())
        .collect();
    assert_eq!(xs, vec![52, 56, 56]);

    let bad = vidinsert(&[
        "trajgen", "--init", "60,0,8,8", "--frames", "2", "--width", "64", "--height", "64",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablate_prints_summary_table() {
    let dir = tempfile::tempdir().unwrap();
    let case = synthetic_case(dir.path());
    let sweep = dir.path().join("sweep.json");
    std::fs::write(
        &sweep,
        r#"{"points":[{"sigma1":0.1},{"sigma1":0.5,"feature_steps":0}]}"#,
    )
    .unwrap();
    let out = dir.path().join("abl");
    let table = ok(&[
        "ablate",
        "--case",
        s(&case),
        "--out",
        s(&out),
        "--sweep",
        s(&sweep),
        "--mode",
        "pn",
        "--stage2-steps",
        "6",
        "--inject-feature",
        "2",
        "--inject-sattn",
        "2",
        "--inject-tattn",
        "2",
        "--jobs",
        "2",
    ]);
    assert_eq!(table.lines().count(), 3);
    assert!(out.join("run_001/manifest.json").exists());
}
