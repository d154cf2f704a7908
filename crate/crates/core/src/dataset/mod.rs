//! Images, YOLO label files, list files and train/test splitting.

mod image;
mod labels;
mod split;

use std::fs;
use std::path::{Path, PathBuf};

pub use self::image::{decode_netpbm, encode_ppm, load_image, resize_to_net, save_ppm, RgbImage};
pub use self::labels::{parse_label_file, render_label_file, GroundTruthLabel};
pub use self::split::split_dataset;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub image_path: PathBuf,
    pub labels: Vec<GroundTruthLabel>,
}

/// One path per non-blank line, surrounding whitespace trimmed.
pub fn parse_list_file(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// Candidate label paths for an image: the same stem with `.txt`, then the
/// darknet layout where an `images` directory is swapped for `labels`.
pub fn label_path_candidates(image: &Path) -> Vec<PathBuf> {
    let mut out = vec![image.with_extension("txt")];
    let swapped: PathBuf = image
        .components()
        .map(|c| if c.as_os_str() == "images" { std::ffi::OsStr::new("labels") } else { c.as_os_str() })
        .collect();
    let swapped = swapped.with_extension("txt");
    if swapped != out[0] {
        out.push(swapped);
    }
    out
}

/// Reads the labels for `image_path`. Returns `Ok(None)` when no label file
/// exists at any candidate location.
pub fn load_labels_for(image_path: &Path) -> Result<Option<Vec<GroundTruthLabel>>> {
    for cand in label_path_candidates(image_path) {
        if cand.is_file() {
            let text = fs::read_to_string(&cand).map_err(|e| Error::io(&cand, e))?;
            return parse_label_file(&text).map(Some).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", cand.display()) },
                Error::Validation(msg) => Error::Validation(format!("{}: {msg}", cand.display())),
                other => other,
            });
        }
    }
    Ok(None)
}
