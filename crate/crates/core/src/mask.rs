//! Per-pixel class maps and the class alphabet.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;
pub const BACKGROUND: u8 = 0;
pub const LAV: u8 = 1;
pub const RAV: u8 = 2;
pub const LNH: u8 = 3;
pub const RNH: u8 = 4;
pub const NEEDLE: u8 = 5;
pub const WIRE: u8 = 6;

/// Short names indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "LAV", "RAV", "LNH", "RNH", "ND", "WR"];

/// Display colours of the indexed mask palette, indexed by class id.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] =
    [[0, 0, 0], [220, 60, 60], [60, 60, 220], [60, 200, 60], [220, 200, 60], [200, 60, 220], [60, 220, 220]];

/// Row-major map of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::dim("label_mask", format!("{height}x{width} mask cannot hold {} labels", labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, labels: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    /// Fails with a label error if any id is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::Label(format!("label {l} outside 0..{num_classes}"))),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Window `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dim("crop", format!("window exceeds {}x{} mask", self.height, self.width)));
        }
        let labels = (top..top + height)
            .flat_map(|y| self.labels[y * self.width + left..y * self.width + left + width].iter().copied())
            .collect();
        Self::new(height, width, labels)
    }

    /// Per-pixel argmax of a `[C, H, W]` score map; ties resolve to the lowest class.
    pub fn argmax<F: Scalar>(scores: &Tensor<F>) -> Result<Self> {
        let &[c, h, w] = scores.shape() else {
            return Err(Error::dim("argmax", format!("expected [C,H,W], got {:?}", scores.shape())));
        };
        let plane = h * w;
        let d = scores.data();
        let labels = (0..plane)
            .map(|i| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * plane + i] > d[best * plane + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(h, w, labels)
    }
}

/// Stacks masks into a `[N, C, H, W]` one-hot tensor.
pub fn one_hot<F: Scalar>(masks: &[LabelMask], num_classes: usize) -> Result<Tensor<F>> {
    let first = masks.first().ok_or_else(|| Error::Contract("one_hot needs at least one mask".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut data = vec![F::zero(); masks.len() * num_classes * plane];
    for (n, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::dim("one_hot", "masks differ in extent"));
        }
        m.check_classes(num_classes)?;
        for (i, &l) in m.labels.iter().enumerate() {
            data[(n * num_classes + l as usize) * plane + i] = F::one();
        }
    }
    Tensor::new(&[masks.len(), num_classes, h, w], data)
}
