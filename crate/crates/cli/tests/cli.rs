use std::path::Path;
use std::process::{Command, Output};

use occam::imaging::Image;
use occam::synthetic::red_blue_scene;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_occam");

fn occam(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok_json_lines(out: &Output) -> Vec<Value> {
    assert!(
        out.status.success(),
        "status {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn sizes(report: &Value) -> Vec<u64> {
    report["clusters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["size"].as_u64().unwrap())
        .collect()
}

fn scene_png(dir: &Path) -> String {
    let path = dir.join("scene.png");
    red_blue_scene().render().save_png(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn count_scene_profile_m() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene_png(dir.path());
    let reports = ok_json_lines(&occam(&["count", &img, "--profile", "M"]));
    assert_eq!(reports.len(), 1);
    assert_eq!(sizes(&reports[0]), vec![12, 7]);
    assert_eq!(reports[0]["total"], 19);
    assert_eq!(reports[0]["clusters"][0]["boxes"].as_array().unwrap().len(), 12);
}

#[test]
fn count_blank_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blank.png");
    Image::new(50, 40).unwrap().save_png(&path).unwrap();
    let reports = ok_json_lines(&occam(&["count", path.to_str().unwrap()]));
    assert_eq!(reports[0]["clusters"], json!([]));
    assert_eq!(reports[0]["total"], 0);
}

#[test]
fn no_clustering_gives_one_pseudo_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene_png(dir.path());
    let reports = ok_json_lines(&occam(&["count", &img, "--profile", "M", "--no-clustering"]));
    assert_eq!(sizes(&reports[0]), vec![19]);
}

#[test]
fn wire_provider_and_embedder_match_mock() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene_png(dir.path());
    let provider = format!("wire:{BIN} serve-mock");
    let wire = ok_json_lines(&occam(&[
        "count", &img, "--profile", "M", "--provider", &provider, "--embedder", "wire",
    ]));
    let local = ok_json_lines(&occam(&["count", &img, "--profile", "M"]));
    assert_eq!(wire, local);
}

#[test]
fn artifacts_and_cluster_command() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene_png(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let status = occam(&[
        "count", &img, "--profile", "M", "--out", out_s, "--viz", "--dump-candidates", "--dump-features",
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("scene.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 19);
    let viz = Image::load(&out.join("scene.viz.png")).unwrap();
    assert_eq!(viz.dims(), (320, 240));
    let cands: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("scene.candidates.json")).unwrap()).unwrap();
    assert_eq!(cands.as_array().unwrap().len(), 19);
    assert!(out.join("scene_features.f32").exists());

    let features = out.join("scene_features.json");
    let clusters = ok_json_lines(&occam(&[
        "cluster", "--features", features.to_str().unwrap(), "--schedule", "5.0,4.0,3.0",
    ]));
    let got: Vec<u64> = clusters[0]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["size"].as_u64().unwrap())
        .collect();
    assert_eq!(got, vec![12, 7]);
    assert_eq!(clusters[0][0]["members"], report["clusters"][0]["members"]);
}

#[test]
fn eval_on_stitched_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("images")).unwrap();
    let scene = red_blue_scene();
    let mut annotations = serde_json::Map::new();
    for i in 0..3 {
        let name = format!("{i:03}.png");
        scene.render().save_png(&root.join("images").join(&name)).unwrap();
        let classes: serde_json::Map<String, Value> = scene
            .ground_truth()
            .classes
            .iter()
            .map(|c| (c.label.clone(), json!(c.points)))
            .collect();
        annotations.insert(name, json!({ "classes": classes }));
    }
    std::fs::write(root.join("annotations.json"), Value::Object(annotations).to_string()).unwrap();
    let csv = root.join("per_image.csv");
    let out = occam(&[
        "eval", "--dataset", "stitched", "--root", root.to_str().unwrap(), "--profile", "M",
        "--csv", csv.to_str().unwrap(), "--workers", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["mae"], 0.0);
    assert_eq!(r["f1"], 1.0);
    assert_eq!(r["n_units"], 6);
    let csv_text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv_text.lines().count(), 7);
    assert!(csv_text.starts_with("image,class,predicted,ground_truth,tp,fp,fn"));

    let root_s = root.to_str().unwrap();
    let kept = occam(&["eval", "--dataset", "stitched", "--root", root_s, "--max-gt", "19"]);
    let r: Value = serde_json::from_slice(&kept.stdout).unwrap();
    assert_eq!(r["n_units"], 6);
    let none_left = occam(&["eval", "--dataset", "stitched", "--root", root_s, "--max-gt", "18"]);
    assert_eq!(none_left.status.code(), Some(4));
}

#[test]
fn stitch_from_fsc_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("fsc");
    let images = root.join("images_384_VarV2");
    std::fs::create_dir_all(&images).unwrap();
    let mut ann = serde_json::Map::new();
    let mut classes = String::new();
    let mut names = Vec::new();
    for i in 0..4u32 {
        let name = format!("{i}.jpg");
        let mut img = Image::new(20 + i, 16).unwrap();
        img.put_pixel(3, 3, [200, 10, 10]);
        img.save_png(&images.join(&name)).unwrap();
        ann.insert(name.clone(), json!({"points": [[3.5, 3.5], [10.0, 8.0]], "box_examples_coordinates": []}));
        classes.push_str(&format!("{name}\tclass{i}\n"));
        names.push(name);
    }
    std::fs::write(root.join("annotation_FSC147_384.json"), Value::Object(ann).to_string()).unwrap();
    std::fs::write(root.join("Train_Test_Val_FSC_147.json"), json!({"test": names}).to_string()).unwrap();
    std::fs::write(root.join("ImageClasses_FSC147.txt"), classes).unwrap();

    let run = |out: &Path| {
        let o = occam(&[
            "stitch", "--root", root.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7",
            "--count", "5", "--max-sub-images", "4",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    for f in ["annotations.json", "meta.json", "images/000.png", "images/004.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let meta: Value = serde_json::from_slice(&std::fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["variant"], "seed-7");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene_png(dir.path());
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"grid_spacing": 0}"#).unwrap();
    assert_eq!(occam(&["count", &img, "--config", bad_cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(occam(&["count", &img, "--provider", "sam"]).status.code(), Some(2));
    assert_eq!(occam(&["count", &img, "--provider", "wire:exit 1"]).status.code(), Some(3));
    assert_eq!(occam(&["count", "/nonexistent/x.png"]).status.code(), Some(4));
    assert_eq!(
        occam(&["eval", "--dataset", "carpk", "--root", dir.path().to_str().unwrap()]).status.code(),
        Some(4)
    );
}
