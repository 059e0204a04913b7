use std::path::Path;

use attnguard_cli::dataset::{load_dataset, load_subject, write_synthetic};
use attnguard_cli::CliError;
use image::{ImageBuffer, Rgb};

fn write_rgb8(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    ImageBuffer::from_fn(w, h, |x, y| Rgb(f(x, y)))
        .save(path)
        .unwrap();
}

fn gradient(path: &Path, w: u32, h: u32) {
    write_rgb8(path, w, h, |x, y| {
        [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]
    });
}

#[test]
fn five_images_load_at_the_configured_size() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("alice");
    std::fs::create_dir(&sub).unwrap();
    for i in 0..5 {
        gradient(&sub.join(format!("{i}.png")), 96, 96);
    }
    let sets = load_dataset(dir.path(), 64).unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0].name, "alice");
    assert_eq!(sets[0].images.len(), 5);
    assert_eq!(sets[0].files, vec!["0", "1", "2", "3", "4"]);
    for img in &sets[0].images {
        assert_eq!((img.height(), img.width()), (64, 64));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn two_image_subject_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    for (name, n) in [("ok", 3), ("bob", 2)] {
        let sub = dir.path().join(name);
        std::fs::create_dir(&sub).unwrap();
        for i in 0..n {
            gradient(&sub.join(format!("{i}.png")), 64, 64);
        }
    }
    match load_dataset(dir.path(), 64) {
        Err(CliError::Dataset(msg)) => assert!(msg.contains("bob"), "{msg}"),
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn non_square_input_is_center_cropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.png");
    // 100×80: the 10-pixel side bands must be cut away.
    write_rgb8(&path, 100, 80, |x, y| {
        if !(10..90).contains(&x) {
            [255, 0, 0]
        } else {
            [(x - 10) as u8, y as u8, 7]
        }
    });
    let img = attnguard_cli::imageio::load_image(&path, 80).unwrap();
    assert_eq!((img.height(), img.width()), (80, 80));
    for y in 0..80 {
        for x in 0..80 {
            assert_eq!(img.get(y, x, 0), x as f64 / 255.0);
            assert_eq!(img.get(y, x, 1), y as f64 / 255.0);
            assert_eq!(img.get(y, x, 2), 7.0 / 255.0);
        }
    }

    let small = attnguard_cli::imageio::load_image(&path, 40).unwrap();
    assert_eq!((small.height(), small.width()), (40, 40));
    // No red from the discarded bands may leak into the resized image.
    for y in 0..40 {
        assert!(small.get(y, 0, 0) < 0.05 && small.get(y, 39, 0) < 0.35);
    }
}

#[test]
fn unreadable_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("carol");
    std::fs::create_dir(&sub).unwrap();
    for i in 0..3 {
        gradient(&sub.join(format!("{i}.png")), 64, 64);
    }
    std::fs::write(sub.join("broken.png"), b"not a png").unwrap();
    std::fs::write(sub.join("notes.txt"), b"ignored").unwrap();
    let set = load_subject(&sub, 64).unwrap();
    assert_eq!(set.images.len(), 3);
    assert!(!set.files.contains(&"broken".to_string()));
}

#[test]
fn empty_subject_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("dave");
    std::fs::create_dir(&sub).unwrap();
    std::fs::write(sub.join("broken.png"), b"junk").unwrap();
    assert!(matches!(load_subject(&sub, 64), Err(CliError::Dataset(_))));
}

#[test]
fn missing_dataset_is_a_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset(&dir.path().join("nope"), 64),
        Err(CliError::Prerequisite(_))
    ));
}

#[test]
fn synthetic_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), 2, 4, 64, 3).unwrap();
    let sets = load_dataset(dir.path(), 64).unwrap();
    assert_eq!(sets.len(), 2);
    assert_eq!(sets[0].class_word.as_deref(), Some("man"));
    assert_eq!(sets[1].class_word.as_deref(), Some("woman"));
    let original = attnguard::synth::subject(attnguard::synth::FaceClass::Man, 4, 64, 3);
    for (a, b) in sets[0].images.iter().zip(&original.images) {
        assert!(a.linf_distance(b) <= 0.5 / 255.0 + 1e-12);
    }
}
