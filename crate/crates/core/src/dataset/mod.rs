//! Scene datasets, the region grid and the labeling oracle.
//!
//! A [`SceneDataset`] holds per-pixel feature images (`H x W x channels`,
//! `f32`) and label maps (`H x W`, `u8`, [`VOID`] for unlabeled pixels).
//! Every image is tiled by a grid of non-overlapping rectangular regions;
//! region dimensions must divide the image dimensions exactly.

pub(crate) mod generate;
mod io;
pub(crate) mod split;

pub use generate::{class_signatures, generate_scenes, GenConfig, RareClass};
pub use io::{load_dataset, save_dataset, FORMAT_VERSION};
pub use split::{select_state_set, split_dataset, SplitSizes, Splits};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels excluded from every loss and metric.
pub const VOID: u8 = 255;

/// One cell of the region grid: image index plus grid row and column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

impl RegionId {
    pub fn new(image: usize, row: usize, col: usize) -> Self {
        RegionId { image, row, col }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    region_height: usize,
    region_width: usize,
    images: Vec<Array3<f32>>,
    labels: Vec<Array2<u8>>,
}

impl SceneDataset {
    /// Builds a dataset after checking every structural invariant.
    pub fn new(
        num_classes: usize,
        region_height: usize,
        region_width: usize,
        images: Vec<Array3<f32>>,
        labels: Vec<Array2<u8>>,
    ) -> Result<Self> {
        if !(2..usize::from(VOID)).contains(&num_classes) {
            return Err(Error::config("num_classes", "must be in 2..255"));
        }
        if images.len() != labels.len() {
            return Err(Error::Dimension {
                context: "label map count",
                expected: images.len(),
                actual: labels.len(),
            });
        }
        let (height, width, channels) = match images.first() {
            Some(img) => img.dim(),
            None => return Err(Error::EmptyInput("dataset has no images")),
        };
        if channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        check_region_dims(height, width, region_height, region_width)?;
        for (img, lab) in images.iter().zip(&labels) {
            if img.dim() != (height, width, channels) {
                return Err(Error::Dimension {
                    context: "image shape",
                    expected: height * width * channels,
                    actual: img.len(),
                });
            }
            if lab.dim() != (height, width) {
                return Err(Error::Dimension {
                    context: "label map shape",
                    expected: height * width,
                    actual: lab.len(),
                });
            }
            if let Some(&bad) = lab
                .iter()
                .find(|&&c| c != VOID && usize::from(c) >= num_classes)
            {
                return Err(Error::ClassOutOfRange {
                    class: bad,
                    num_classes,
                });
            }
        }
        Ok(SceneDataset {
            height,
            width,
            channels,
            num_classes,
            region_height,
            region_width,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn region_height(&self) -> usize {
        self.region_height
    }

    pub fn region_width(&self) -> usize {
        self.region_width
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.region_height
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.region_width
    }

    pub fn regions_per_image(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        self.images[index].view()
    }

    pub fn labels(&self, index: usize) -> ArrayView2<'_, u8> {
        self.labels[index].view()
    }

    /// Same pixels, re-tiled with a different region size.
    pub fn with_region_size(&self, region_height: usize, region_width: usize) -> Result<Self> {
        check_region_dims(self.height, self.width, region_height, region_width)?;
        Ok(SceneDataset {
            region_height,
            region_width,
            ..self.clone()
        })
    }

    /// All regions, row-major by `(image, row, col)`.
    pub fn region_grid(&self) -> Vec<RegionId> {
        self.regions_of(0..self.len())
    }

    /// Regions of the given images in enumeration order.
    pub fn regions_of(&self, images: impl IntoIterator<Item = usize>) -> Vec<RegionId> {
        let (rows, cols) = (self.grid_rows(), self.grid_cols());
        images
            .into_iter()
            .flat_map(|image| {
                (0..rows).flat_map(move |row| (0..cols).map(move |col| RegionId { image, row, col }))
            })
            .collect()
    }

    pub fn check_region(&self, region: RegionId) -> Result<()> {
        if region.image >= self.len()
            || region.row >= self.grid_rows()
            || region.col >= self.grid_cols()
        {
            return Err(Error::RegionOutOfRange(region));
        }
        Ok(())
    }

    /// Pixel rectangle `(row0, col0)` of a region's top-left corner.
    pub fn region_origin(&self, region: RegionId) -> (usize, usize) {
        (region.row * self.region_height, region.col * self.region_width)
    }

    /// Feature and label views of one region.
    pub fn region_pixels(&self, region: RegionId) -> Result<(ArrayView3<'_, f32>, ArrayView2<'_, u8>)> {
        self.check_region(region)?;
        let (r0, c0) = self.region_origin(region);
        let (r1, c1) = (r0 + self.region_height, c0 + self.region_width);
        let feats = self.images[region.image].slice(s![r0..r1, c0..c1, ..]);
        let labels = self.labels[region.image].slice(s![r0..r1, c0..c1]);
        Ok((feats, labels))
    }

    /// Oracle: the ground-truth labels of a region.
    pub fn reveal_labels(&self, region: RegionId) -> Result<ArrayView2<'_, u8>> {
        self.region_pixels(region).map(|(_, labels)| labels)
    }

    /// Per-class pixel counts over the given images (VOID skipped).
    pub fn class_counts(&self, images: &[usize]) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &i in images {
            add_label_counts(&mut counts, self.labels[i].iter().copied());
        }
        counts
    }
}

pub(crate) fn add_label_counts(counts: &mut [u64], labels: impl Iterator<Item = u8>) {
    for c in labels {
        if c != VOID {
            counts[usize::from(c)] += 1;
        }
    }
}

fn check_region_dims(height: usize, width: usize, rh: usize, rw: usize) -> Result<()> {
    if rh == 0 || rw == 0 || height % rh != 0 || width % rw != 0 {
        return Err(Error::config(
            "region size",
            format!("{rh}x{rw} regions must tile a {height}x{width} image exactly"),
        ));
    }
    Ok(())
}
