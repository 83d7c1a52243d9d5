//! Loader for a directory of 8-bit grayscale images, one subdirectory per
//! identity:
//!
//! ```text
//! root/alice/0001.png
//! root/alice/0002.pgm
//! root/bob/0001.png
//! ```
//!
//! Identities are numbered in sorted directory order and files are read in
//! sorted name order. The last `test_per_id` files of each identity form
//! the test split.

use std::fs;
use std::path::{Path, PathBuf};

use super::dataset::{DataConfig, Dataset, ShiftConfig, Split};
use super::resample::{downsample, Kernel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_image_dir(
    root: &Path,
    hr_size: usize,
    lr_factor: usize,
    kernel: Kernel,
    test_per_id: usize,
) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let mut pixels = Vec::new();
    let (mut labels, mut splits) = (Vec::new(), Vec::new());
    let ids = sorted_entries(root, true)?;
    let mut max_count = 0;
    for (label, dir) in ids.iter().enumerate() {
        let files = sorted_entries(dir, false)?;
        if files.len() <= test_per_id {
            return Err(Error::Config(format!(
                "{} holds {} images, needs more than {test_per_id}",
                dir.display(),
                files.len()
            )));
        }
        max_count = max_count.max(files.len());
        for (k, file) in files.iter().enumerate() {
            let img = image::open(file)
                .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?
                .to_luma8();
            if img.width() as usize != hr_size || img.height() as usize != hr_size {
                return Err(Error::Dimension(format!(
                    "{} is {}×{}, expected {hr_size}×{hr_size}",
                    file.display(),
                    img.width(),
                    img.height()
                )));
            }
            pixels.extend(img.as_raw().iter().map(|&v| v as f64 / 255.0));
            labels.push(label);
            splits.push(if k + test_per_id < files.len() {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    if ids.len() < 2 {
        return Err(Error::Config(format!(
            "{} needs at least 2 identity folders",
            root.display()
        )));
    }
    let n = labels.len();
    let hr = Tensor::new(vec![n, 1, hr_size, hr_size], pixels)?;
    let lr = downsample(&hr, lr_factor, kernel)?;
    Ok(Dataset {
        config: DataConfig {
            num_ids: ids.len(),
            samples_per_id: max_count,
            test_per_id,
            hr_size,
            lr_factor,
            kernel,
            shift: ShiftConfig::none(),
            ..DataConfig::default()
        },
        seed: 0,
        hr,
        lr,
        labels,
        splits,
        identities: Vec::new(),
    })
}
