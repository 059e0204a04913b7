//! Subject datasets: one subdirectory of PNG images per subject.

use std::fs;
use std::path::{Path, PathBuf};

use attnguard::synth::{self, FaceClass};
use attnguard::PixelImage;

use crate::error::{CliError, CliResult};
use crate::imageio;

/// Fewest images a subject may have.
pub const MIN_SUBJECT_IMAGES: usize = 3;

/// Optional per-subject file overriding the configured class word.
pub const CLASS_FILE: &str = "class.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSet {
    pub name: String,
    pub class_word: Option<String>,
    /// File stems, parallel to `images`.
    pub files: Vec<String>,
    pub images: Vec<PixelImage>,
}

impl SubjectSet {
    pub fn class_or<'a>(&'a self, default: &'a str) -> &'a str {
        self.class_word.as_deref().unwrap_or(default)
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

/// Loads one subject directory, skipping unreadable files with a warning.
pub fn load_subject(dir: &Path, size: usize) -> CliResult<SubjectSet> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Dataset(format!("bad subject directory {}", dir.display())))?
        .to_string();
    let mut files = Vec::new();
    let mut images = Vec::new();
    for path in sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_png(p))
    {
        match imageio::load_image(&path, size) {
            Ok(img) => {
                files.push(
                    path.file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("image")
                        .to_string(),
                );
                images.push(img);
            }
            Err(e) => log::warn!("skipping unreadable {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(CliError::Dataset(format!(
            "subject `{name}` has no readable images"
        )));
    }
    if images.len() < MIN_SUBJECT_IMAGES {
        return Err(CliError::Dataset(format!(
            "subject `{name}` has {} images; at least {MIN_SUBJECT_IMAGES} are required",
            images.len()
        )));
    }
    let class_word = match fs::read_to_string(dir.join(CLASS_FILE)) {
        Ok(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        _ => None,
    };
    Ok(SubjectSet {
        name,
        class_word,
        files,
        images,
    })
}

/// Loads every subject under `dir`, in name order.
pub fn load_dataset(dir: &Path, size: usize) -> CliResult<Vec<SubjectSet>> {
    if !dir.is_dir() {
        return Err(CliError::Prerequisite(format!(
            "dataset directory {} does not exist (create one with `attnguard make-dataset`)",
            dir.display()
        )));
    }
    let subjects: Vec<SubjectSet> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| load_subject(&p, size))
        .collect::<CliResult<_>>()?;
    if subjects.is_empty() {
        return Err(CliError::Dataset(format!(
            "no subject directories in {}",
            dir.display()
        )));
    }
    Ok(subjects)
}

/// Renders `n_subjects` synthetic identities with `n_images` photos each,
/// alternating classes.
pub fn write_synthetic(
    dir: &Path,
    n_subjects: usize,
    n_images: usize,
    size: usize,
    seed: u64,
) -> CliResult<()> {
    for s in 0..n_subjects {
        let class = if s % 2 == 0 {
            FaceClass::Man
        } else {
            FaceClass::Woman
        };
        let subject = synth::subject(class, n_images, size, seed.wrapping_add(s as u64));
        let sub = dir.join(format!("subject_{s:02}"));
        fs::create_dir_all(&sub)?;
        fs::write(sub.join(CLASS_FILE), format!("{}\n", class.word()))?;
        for (i, img) in subject.images.iter().enumerate() {
            imageio::save_png8(img, &sub.join(format!("{i:03}.png")))?;
        }
    }
    Ok(())
}
