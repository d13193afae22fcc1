//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json          dims, class count, region dims, format version
//! <dir>/image_00000.f32        little-endian f32, row-major H x W x channels
//! <dir>/label_00000.u8         u8 class ids, row-major H x W (255 = VOID)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{SceneDataset, VOID};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_images: usize,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    region_height: usize,
    region_width: usize,
}

fn image_file(i: usize) -> String {
    format!("image_{i:05}.f32")
}

fn label_file(i: usize) -> String {
    format!("label_{i:05}.u8")
}

pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_images: dataset.len(),
        height: dataset.height(),
        width: dataset.width(),
        channels: dataset.channels(),
        num_classes: dataset.num_classes(),
        region_height: dataset.region_height(),
        region_width: dataset.region_width(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    for i in 0..dataset.len() {
        let bytes: Vec<u8> = dataset.image(i).iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(image_file(i));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let labels: Vec<u8> = dataset.labels(i).iter().copied().collect();
        let path = dir.join(label_file(i));
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: FORMAT_VERSION,
        });
    }

    let (h, w, ch) = (m.height, m.width, m.channels);
    let mut images = Vec::with_capacity(m.num_images);
    let mut labels = Vec::with_capacity(m.num_images);
    for i in 0..m.num_images {
        let path = dir.join(image_file(i));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != h * w * ch * 4 {
            return Err(Error::format(
                &path,
                format!("expected {} bytes, found {}", h * w * ch * 4, bytes.len()),
            ));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        images.push(Array3::from_shape_vec((h, w, ch), values).expect("length checked"));

        let path = dir.join(label_file(i));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != h * w {
            return Err(Error::format(
                &path,
                format!("expected {} bytes, found {}", h * w, bytes.len()),
            ));
        }
        if let Some(&max) = bytes.iter().filter(|&&c| c != VOID).max() {
            if usize::from(max) >= m.num_classes {
                return Err(Error::FieldMismatch {
                    field: "num_classes",
                    expected: m.num_classes.to_string(),
                    found: format!("label id {max} in {}", path.display()),
                });
            }
        }
        labels.push(Array2::from_shape_vec((h, w), bytes).expect("length checked"));
    }
    SceneDataset::new(m.num_classes, m.region_height, m.region_width, images, labels)
}
