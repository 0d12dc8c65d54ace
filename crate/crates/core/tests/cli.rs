use pim::demo;
use pim::session::{Op, Session};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn pim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pim")).arg("-C").arg(dir).args(args).output().expect("runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pim(dir, args);
    assert!(out.status.success(), "pim {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn demos_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demos")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &to.join(e.file_name()));
        } else {
            std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

#[test]
fn bundled_demos_replay_bit_identically() {
    for name in demo::NAMES {
        let dir = demos_dir().join(name);
        let out = ok(&dir, &["replay", "--verify"]);
        assert!(out.starts_with("verified"), "{out}");
        let (loaded, warnings) = Session::load(&dir).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert!(out.contains(&loaded.state_digest()));
    }
}

#[test]
fn bundled_demos_match_the_scripts() {
    for name in demo::NAMES {
        let (loaded, _) = Session::load(&demos_dir().join(name)).unwrap();
        let ops: Vec<Op> = loaded.journal().iter().map(|r| r.op.clone()).collect();
        assert_eq!(ops, demo::by_name(name).unwrap().ops, "{name}");
    }
}

#[test]
fn replay_verify_detects_a_tampered_project() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("p");
    copy_dir(&demos_dir().join("cuboid"), &dir);
    let journal = std::fs::read_to_string(dir.join("journal.jsonl")).unwrap();
    let shorter: Vec<&str> = journal.lines().take(journal.lines().count() - 1).collect();
    std::fs::write(dir.join("journal.jsonl"), shorter.join("\n")).unwrap();
    let out = pim(&dir, &["replay", "--verify"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay differs"));
    // Without --verify the state is rebuilt from the journal.
    ok(&dir, &["replay"]);
    ok(&dir, &["replay", "--verify"]);
}

#[test]
fn scripted_session_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("proj");
    let scene = demo::cuboid_two_view();
    ok(tmp.path(), &["new", dir.to_str().unwrap()]);
    assert!(!pim(tmp.path(), &["new", dir.to_str().unwrap()]).status.success());

    let mut files = Vec::new();
    for (i, bytes) in scene.images.iter().enumerate() {
        let f = tmp.path().join(format!("photo{i}.png"));
        std::fs::write(&f, bytes).unwrap();
        files.push(f.to_str().unwrap().to_owned());
    }
    let mut args = vec!["images", "add"];
    args.extend(files.iter().map(String::as_str));
    let out = ok(&dir, &args);
    assert!(out.contains("img0") && out.contains("img1") && out.contains("640x480"), "{out}");
    assert!(ok(&dir, &["images", "add", &files[0]]).contains("already present"));

    let script: String = scene
        .ops
        .iter()
        .filter(|op| !matches!(op, Op::AddImage { .. }))
        .map(|op| serde_json::to_string(op).unwrap() + "\n")
        .collect();
    std::fs::write(tmp.path().join("ops.jsonl"), script).unwrap();
    let out = ok(&dir, &["apply", tmp.path().join("ops.jsonl").to_str().unwrap()]);
    assert!(out.contains("journal has 20 records"), "{out}");
    assert_eq!(Session::load(&dir).unwrap().0.state_digest(), scene.run().unwrap().state_digest());

    let report: serde_json::Value = serde_json::from_str(&ok(&dir, &["report"])).unwrap();
    assert!(report["solve"]["rms_reprojection"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["journal_len"], 20);

    let out = ok(&dir, &["solve", "--max-iters", "50", "--tol", "1e-12", "--penalty-schedule", "1e2,1e5"]);
    let solve: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(solve["rms_reprojection"].as_f64().unwrap() < 1e-6);
    let (s, _) = Session::load(&dir).unwrap();
    assert_eq!(s.model().solve_options.max_iterations, 50);
    assert_eq!(s.model().solve_options.constraint_weight_schedule, vec![1e2, 1e5]);
    assert_eq!(s.journal().last().unwrap().op.name(), "set_solve_options");

    let calib: serde_json::Value = serde_json::from_str(&ok(&dir, &["calibrate"])).unwrap();
    assert_eq!(calib["images"].as_object().unwrap().len(), 2);
    assert_eq!(calib["reference_pair"], serde_json::json!([0, 1]));

    let out = ok(&dir, &["texture", "--density", "40"]);
    assert!(out.contains("6 charts"), "{out}");
    let first = std::fs::read(dir.join("atlas.png")).unwrap();
    ok(&dir, &["texture"]);
    assert_eq!(std::fs::read(dir.join("atlas.png")).unwrap(), first);

    let export = tmp.path().join("export");
    let report: serde_json::Value = serde_json::from_str(&ok(&dir, &["export", "--format", "obj", export.to_str().unwrap()])).unwrap();
    assert_eq!(report["textured"], true);
    assert_eq!(report["vertices"], 8);
    for f in ["mesh.obj", "mesh.mtl", "atlas.png"] {
        assert!(export.join(f).exists(), "{f}");
    }
    assert!(!pim(&dir, &["export", "--format", "ply", export.to_str().unwrap()]).status.success());
    ok(&dir, &["replay", "--verify"]);
}

#[test]
fn calibrate_with_line_file_is_journaled() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("p");
    copy_dir(&demos_dir().join("cuboid"), &dir);
    let lines = serde_json::json!([
        {"image": 0, "x1": 10.0, "y1": 10.0, "x2": 200.0, "y2": 40.0, "axis": "x"},
        {"image": 0, "x1": 10.0, "y1": 300.0, "x2": 200.0, "y2": 280.0, "axis": "x"}
    ]);
    std::fs::write(tmp.path().join("lines.json"), lines.to_string()).unwrap();
    ok(&dir, &["calibrate", "--lines", tmp.path().join("lines.json").to_str().unwrap()]);
    let (s, _) = Session::load(&dir).unwrap();
    assert_eq!(s.model().lines.len(), 2);
    assert_eq!(s.journal().last().unwrap().op.name(), "add_lines");
}

#[test]
fn apply_reports_the_failing_line_and_keeps_earlier_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("p");
    ok(tmp.path(), &["new", dir.to_str().unwrap()]);
    let ops = concat!(
        r#"{"op":"k_create","spec":{"kind":"wedge","dims":[1,1,1,0.5]}}"#,
        "\n\n",
        r#"{"op":"v_delete","vertex":42}"#,
        "\n"
    );
    std::fs::write(tmp.path().join("ops.jsonl"), ops).unwrap();
    let out = pim(&dir, &["apply", tmp.path().join("ops.jsonl").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ops.jsonl:3") && err.contains("NotFound"), "{err}");
    assert_eq!(Session::load(&dir).unwrap().0.journal().len(), 1);

    std::fs::write(tmp.path().join("bad.jsonl"), "{\"seq\": 5, \"op\": {\"op\": \"clear_reference_length\"}}\n").unwrap();
    let out = pim(&dir, &["apply", tmp.path().join("bad.jsonl").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 1"));
}

#[test]
fn unknown_demo_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pim(tmp.path(), &["demo", "castle", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cuboid, pavilion"));
}

fn http(addr: &str, request: &str) -> String {
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    stream.write_all(request.as_bytes()).unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_exposes_the_project_over_http() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_pim"))
        .arg("-C")
        .arg(demos_dir().join("pavilion"))
        .args(["serve", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    assert!(first.ends_with("is session s1"), "{first}");
    let second = lines.next().unwrap().unwrap();
    let addr = second.strip_prefix("listening on http://").unwrap().to_owned();
    assert!(addr.starts_with("127.0.0.1:"));

    let res = http(&addr, "GET /sessions/s1/report HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
    assert!(res.starts_with("HTTP/1.1 200"), "{res}");
    assert!(res.contains("\"revision\":0") && res.contains("\"journal_len\":31"));
    let res = http(&addr, "POST /sessions HTTP/1.1\r\nHost: x\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
    assert!(res.contains("\"id\":\"s2\""), "{res}");
    child.kill().unwrap();
    child.wait().unwrap();
}
