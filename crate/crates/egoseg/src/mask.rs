//! Rasters, masks and the class taxonomy shared by every other module.
//!
//! Ground truth is stored single-channel with one class index per pixel;
//! binary per-class masks are derived views. Spatial convention is row-major
//! `(y, x)` and shapes are stated as `(C, H, W)`.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::fmt;
use std::path::Path;

/// Pixel classes. Background plus the five interactive categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    LeftHand = 1,
    RightHand = 2,
    LeftObject = 3,
    RightObject = 4,
    TwoHandObject = 5,
}

impl ClassId {
    pub const ALL: [ClassId; 6] = [
        ClassId::Background,
        ClassId::LeftHand,
        ClassId::RightHand,
        ClassId::LeftObject,
        ClassId::RightObject,
        ClassId::TwoHandObject,
    ];

    /// The five scored (non-background) classes.
    pub const FOREGROUND: [ClassId; 5] = [
        ClassId::LeftHand,
        ClassId::RightHand,
        ClassId::LeftObject,
        ClassId::RightObject,
        ClassId::TwoHandObject,
    ];

    pub fn from_u8(value: u8) -> Result<Self> {
        match value {
            0 => Ok(ClassId::Background),
            1 => Ok(ClassId::LeftHand),
            2 => Ok(ClassId::RightHand),
            3 => Ok(ClassId::LeftObject),
            4 => Ok(ClassId::RightObject),
            5 => Ok(ClassId::TwoHandObject),
            v => Err(Error::InvalidClass {
                value: v as u32,
                source_file: None,
            }),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::LeftHand => "left_hand",
            ClassId::RightHand => "right_hand",
            ClassId::LeftObject => "left_object",
            ClassId::RightObject => "right_object",
            ClassId::TwoHandObject => "two_hand_object",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-pixel class-index ground truth, one `ClassId` per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    data: Array2<u8>,
}

impl LabelRaster {
    /// Builds from raw class values, rejecting anything outside `0..=5`.
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&v| v > 5) {
            return Err(Error::InvalidClass {
                value: bad as u32,
                source_file: None,
            });
        }
        Ok(LabelRaster { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelRaster {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        ClassId::from_u8(self.data[[y, x]]).expect("raster holds validated classes")
    }

    pub fn set(&mut self, y: usize, x: usize, cls: ClassId) {
        self.data[[y, x]] = cls.as_u8();
    }

    /// Binary view of a single class: 1 where the pixel holds `cls`.
    pub fn class_mask(&self, cls: ClassId) -> BinaryMask {
        let v = cls.as_u8();
        BinaryMask {
            data: self.data.mapv(|p| (p == v) as u8),
        }
    }

    /// Loads an 8-bit single-channel PNG holding class values `0..=5`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32).0[0]
        });
        LabelRaster::new(data).map_err(|e| match e {
            Error::InvalidClass { value, .. } => Error::InvalidClass {
                value,
                source_file: Some(path.display().to_string()),
            },
            other => other,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut img = image::GrayImage::new(w, h);
        for ((y, x), &v) in self.data.indexed_iter() {
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
        img.save(path)?;
        Ok(())
    }
}

/// Strictly binary `{0,1}` raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

/// Pixelwise boolean algebra on masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetOp {
    Union,
    Intersection,
    /// `a \ b`: elements in `a` that are not in `b`.
    Difference,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Config("binary mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        BinaryMask {
            data: Array2::from_shape_fn((height, width), |(y, x)| f(y, x) as u8),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[[y, x]] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    fn check_same_shape(&self, other: &BinaryMask, context: &str) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.height(), self.width()),
                format!("{}x{}", other.height(), other.width()),
            ));
        }
        Ok(())
    }

    /// Loads a mask PNG where any nonzero pixel counts as foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            (img.get_pixel(x as u32, y as u32).0[0] != 0) as u8
        });
        Ok(BinaryMask { data })
    }

    /// Saves as an 8-bit PNG with foreground at 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut img = image::GrayImage::new(w, h);
        for ((y, x), &v) in self.data.indexed_iter() {
            img.put_pixel(x as u32, y as u32, image::Luma([if v != 0 { 255 } else { 0 }]));
        }
        img.save(path)?;
        Ok(())
    }
}

/// `output pixel = 1` iff the label pixel equals `cls`.
pub fn label_to_binary(labels: &LabelRaster, cls: ClassId) -> BinaryMask {
    labels.class_mask(cls)
}

/// Pixelwise set algebra; both masks must share a shape.
pub fn binary_set_op(a: &BinaryMask, b: &BinaryMask, op: SetOp) -> Result<BinaryMask> {
    a.check_same_shape(b, "binary_set_op")?;
    let data = match op {
        SetOp::Union => ndarray::Zip::from(&a.data).and(&b.data).map_collect(|&x, &y| x | y),
        SetOp::Intersection => ndarray::Zip::from(&a.data).and(&b.data).map_collect(|&x, &y| x & y),
        SetOp::Difference => ndarray::Zip::from(&a.data).and(&b.data).map_collect(|&x, &y| x & (1 - y)),
    };
    Ok(BinaryMask { data })
}

/// 8-bit RGB image in `(H, W, 3)` layout, raw `0..=255` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    data: Array3<u8>,
}

impl ImageRaster {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::shape(
                "ImageRaster::new",
                "(H, W, 3)",
                format!("{:?}", data.dim()),
            ));
        }
        Ok(ImageRaster { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageRaster {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<u8> {
        &mut self.data
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c]
        });
        Ok(ImageRaster { data })
    }

    pub fn center_crop(&self, crop: usize) -> Result<ImageRaster> {
        let (h, w) = (self.height(), self.width());
        if crop > h.min(w) {
            return Err(Error::Config(format!("crop {crop} larger than image {h}x{w}")));
        }
        let (oy, ox) = ((h - crop) / 2, (w - crop) / 2);
        let data = Array3::from_shape_fn((crop, crop, 3), |(y, x, c)| {
            self.data[[oy + y, ox + x, c]]
        });
        Ok(ImageRaster { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut img = image::RgbImage::new(w, h);
        for y in 0..self.height() {
            for x in 0..self.width() {
                let px = [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}
