//! The binary end to end on a quickly trained model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

struct Fixture {
    _root: TempDir,
    data: PathBuf,
    model_dir: PathBuf,
}

fn run(args: &[&str], data: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnguard"))
        .env_remove("ATTNGUARD_CONFIG")
        .env("RUST_LOG", "warn")
        .arg("--dataset-dir")
        .arg(data)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str], data: &Path, out: &Path) {
    let o = run(args, data, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let out = root.path().join("base");
        ok(
            &["make-dataset", "--subjects", "2", "--images", "3"],
            &data,
            &out,
        );
        ok(&["train-toy", "--quick"], &data, &out);
        Fixture {
            data,
            model_dir: out.join("model"),
            _root: root,
        }
    })
}

/// A fresh output directory holding a copy of the fixture model.
fn workspace() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir_all(out.join("model")).unwrap();
    for entry in fs::read_dir(&fixture().model_dir).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, out.join("model").join(p.file_name().unwrap())).unwrap();
    }
    (dir, out)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const FAST: [&str; 8] = [
    "--steps",
    "4",
    "--finetune-steps",
    "10",
    "--samples",
    "3",
    "--sampling-steps",
    "4",
];

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(FAST).collect()
}

#[test]
fn evaluate_before_finetune_is_a_prerequisite_error() {
    let f = fixture();
    let (_d, out) = workspace();
    let o = run(&["evaluate"], &f.data, &out);
    assert_eq!(o.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("attnguard finetune"), "{msg}");
    assert!(!out.join("reports").exists());
}

#[test]
fn protect_without_a_model_names_the_missing_step() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["protect"], &f.data, dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-toy"));
}

#[test]
fn finetune_protected_requires_protect() {
    let f = fixture();
    let (_d, out) = workspace();
    let o = run(&["finetune", "--source", "protected"], &f.data, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("attnguard protect"));
}

#[test]
fn failed_command_leaves_previous_outputs_and_no_partial_files() {
    let f = fixture();
    let (_d, out) = workspace();
    ok(&with_fast(&["protect"]), &f.data, &out);
    let before = snapshot(&out);
    // The subjects' class word never appears in this template.
    let o = run(
        &with_fast(&["protect", "--prompt", "a photo of a <v> person"]),
        &f.data,
        &out,
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(snapshot(&out), before);
    let leftovers: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn reruns_are_bitwise_identical_and_inputs_untouched() {
    let f = fixture();
    let (dir, out) = workspace();
    let data_before = snapshot(&f.data);
    let steps: [&[&str]; 5] = [
        &["protect"],
        &["finetune"],
        &["generate"],
        &["evaluate"],
        &["attn-map"],
    ];
    for s in steps {
        ok(&with_fast(s), &f.data, &out);
    }
    let first = snapshot(&out);
    for dir in [
        "protected",
        "finetune/clean",
        "finetune/protected",
        "generated/protected",
        "reports",
        "attn/clean",
    ] {
        assert!(out.join(dir).is_dir(), "{dir} missing");
    }
    assert!(first
        .keys()
        .any(|k| k.ends_with("protected/subject_00/000.trace.jsonl")));
    assert!(first
        .keys()
        .any(|k| k.ends_with("attn/protected/subject_01/v.png")));
    for s in steps {
        ok(&with_fast(s), &f.data, &out);
    }
    assert_eq!(snapshot(&out), first);
    assert_eq!(snapshot(&f.data), data_before);
    let top: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(top, vec![std::ffi::OsString::from("run")]);

    let table = fs::read_to_string(out.join("reports/table.md")).unwrap();
    assert!(
        table.contains("| No defense |") && table.contains("| Protected |"),
        "{table}"
    );
}

#[test]
fn protected_pngs_are_sixteen_bit_and_within_budget() {
    let f = fixture();
    let (_d, out) = workspace();
    ok(
        &[
            "protect",
            "--steps",
            "6",
            "--eta",
            "4/255",
            "--step-size",
            "1/255",
        ],
        &f.data,
        &out,
    );
    let sets = attnguard_cli::dataset::load_dataset(&f.data, 64).unwrap();
    for set in &sets {
        for (stem, clean) in set.files.iter().zip(&set.images) {
            let path = out
                .join("protected")
                .join(&set.name)
                .join(format!("{stem}.png"));
            let decoded = image::open(&path).unwrap();
            assert_eq!(decoded.color(), image::ColorType::Rgb16);
            let back = attnguard_cli::imageio::read_png(&path).unwrap();
            assert!(back.linf_distance(clean) <= 4.0 / 255.0 + 1.0 / 65536.0);
            let trace = fs::read_to_string(path.with_extension("trace.jsonl")).unwrap();
            assert_eq!(trace.lines().count(), 6);
        }
    }
}

#[test]
fn make_dataset_refuses_to_overwrite() {
    let f = fixture();
    let (_d, out) = workspace();
    let o = run(&["make-dataset"], &f.data, &out);
    assert!(!o.status.success());
}
