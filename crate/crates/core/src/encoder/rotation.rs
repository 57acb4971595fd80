use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, LabeledDataset, Payload, Raster};
use crate::error::{Error, Result};

/// Clockwise rotation by `quarter_turns * 90` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const ALL: [RotationLabel; 4] = [
        RotationLabel(0),
        RotationLabel(1),
        RotationLabel(2),
        RotationLabel(3),
    ];

    pub fn new(quarter_turns: u8) -> Result<Self> {
        if quarter_turns > 3 {
            return Err(Error::Argument(format!(
                "rotation label {quarter_turns} outside 0..=3"
            )));
        }
        Ok(RotationLabel(quarter_turns))
    }

    pub fn quarter_turns(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

/// Rotates a square raster clockwise. One quarter turn maps output pixel
/// `(r, c)` to input pixel `(H - 1 - c, r)`.
pub fn rotate(image: &Raster, turns: RotationLabel) -> Result<Raster> {
    let n = image.height();
    if n != image.width() {
        return Err(Error::Shape(format!(
            "cannot rotate a non-square {}x{} raster",
            n,
            image.width()
        )));
    }
    let src = image.pixels();
    let pixels: Vec<f32> = (0..n * n)
        .map(|idx| {
            let (r, c) = (idx / n, idx % n);
            let (sr, sc) = match turns.0 {
                0 => (r, c),
                1 => (n - 1 - c, r),
                2 => (n - 1 - r, n - 1 - c),
                _ => (c, n - 1 - r),
            };
            src[sr * n + sc]
        })
        .collect();
    Raster::new(n, n, pixels)
}

/// A batch expanded four-fold: item-major, rotation-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub images: Vec<Raster>,
    pub class_labels: Vec<usize>,
    pub rot_labels: Vec<RotationLabel>,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn augment_with_rotations(batch: &Batch, dataset: &LabeledDataset) -> Result<AugmentedBatch> {
    let n = batch.size() * 4;
    let mut out = AugmentedBatch {
        images: Vec::with_capacity(n),
        class_labels: Vec::with_capacity(n),
        rot_labels: Vec::with_capacity(n),
    };
    for &(item_id, class) in &batch.items {
        let Payload::Raster(raster) = &dataset.item(item_id).payload else {
            return Err(Error::Shape("rotation needs raster payloads".into()));
        };
        for rot in RotationLabel::ALL {
            out.images.push(rotate(raster, rot)?);
            out.class_labels.push(class);
            out.rot_labels.push(rot);
        }
    }
    Ok(out)
}
