//! Forgery masks: the two-way mask decoder, the per-pixel loss, binarisation
//! and the 8-bit PNG convention (255 forged, 0 pristine).

mod decoder;

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

pub use decoder::{MaskDecoder, MaskDecoderConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Row-major `H×W` grid of per-pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(dim_err!(
                "{} mask values for a {height}×{width} grid",
                values.len()
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_on(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts([self.height, self.width], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        Self::new(h, w, t.data().to_vec())
    }

    fn same_shape(&self, other: &MaskGrid) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(dim_err!(
                "mask shapes {}×{} and {}×{} differ",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }
}

/// `1` where `value > threshold`, else `0`.
pub fn binarize(pred: &MaskGrid, threshold: f64) -> MaskGrid {
    MaskGrid {
        height: pred.height,
        width: pred.width,
        values: pred
            .values
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect(),
    }
}

fn check_mask_target(pred: Var<'_>, gt: &MaskGrid) -> Result<()> {
    if pred.shape() != [gt.height, gt.width] {
        return Err(dim_err!(
            "mask prediction {:?} against {}×{} ground truth",
            pred.shape(),
            gt.height,
            gt.width
        ));
    }
    if !gt.is_binary() {
        return Err(contract_err!("ground-truth mask must be binary"));
    }
    Ok(())
}

fn weighted_sum<'t>(gt: &MaskGrid, pos: Var<'t>, neg: Var<'t>) -> Result<Var<'t>> {
    let tape = pos.tape();
    let y = tape.constant(gt.to_tensor());
    let not_y = tape.constant(Tensor::from_parts(
        [gt.height, gt.width],
        gt.values.iter().map(|v| 1.0 - v).collect(),
    ));
    y.mul(pos)?.add(not_y.mul(neg)?)?.mean()?.scale(-1.0)
}

/// Mean per-pixel binary cross entropy of `H×W` probabilities against a binary mask.
pub fn mask_loss<'t>(pred: Var<'t>, gt: &MaskGrid) -> Result<Var<'t>> {
    check_mask_target(pred, gt)?;
    weighted_sum(gt, pred.log_clamped()?, pred.rsub_scalar(1.0)?.log_clamped()?)
}

/// [`mask_loss`] of `sigmoid(logits)`, computed without rounding the
/// probabilities first.
pub fn mask_loss_logits<'t>(logits: Var<'t>, gt: &MaskGrid) -> Result<Var<'t>> {
    check_mask_target(logits, gt)?;
    weighted_sum(
        gt,
        logits.log_sigmoid_clamped()?,
        logits.scale(-1.0)?.log_sigmoid_clamped()?,
    )
}

/// [`mask_loss`] on plain grids.
pub fn mask_loss_value(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    pred.same_shape(gt)?;
    let tape = Tape::new();
    Ok(mask_loss(tape.constant(pred.to_tensor()), gt)?.item())
}

pub fn write_mask_png(mask: &MaskGrid, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) > 0.5 { 255 } else { 0 }])
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::decode(path, e))
}

/// Reads an 8-bit mask; pixels above 127 are forged.
pub fn read_mask_png(path: &Path) -> Result<MaskGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::decode(path, e))?
        .to_luma8();
    Ok(MaskGrid::from_fn(
        img.height() as usize,
        img.width() as usize,
        |y, x| f64::from(u8::from(img.get_pixel(x as u32, y as u32)[0] > 127)),
    ))
}
