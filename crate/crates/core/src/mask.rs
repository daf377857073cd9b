//! Binary masks, normalized boxes and the run-length encoding shared by the
//! dataset and the tracker result files.
//!
//! RLE convention: row-major scan, `counts[0]` is the length of the leading
//! run of *background* pixels (possibly zero), then runs alternate
//! foreground/background. The counts always sum to `height * width`.

use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(OokdError::Shape(format!(
                "mask data has {} pixels, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Clears every pixel of `self` that is set in `other`.
    pub fn subtract(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            if b {
                *a = false;
            }
        }
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the set pixels.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            for (x, _) in row.iter().enumerate().filter(|(_, &v)| v) {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        bounds
    }

    /// Tight normalized box of the mask, or `None` when the mask is empty.
    pub fn tight_box(&self) -> Option<BoxCxcywh> {
        self.pixel_bounds().map(|(x0, y0, x1, y1)| {
            let w = self.width as f64;
            let h = self.height as f64;
            BoxCxcywh {
                cx: (x0 + x1 + 1) as f64 / (2.0 * w),
                cy: (y0 + y1 + 1) as f64 / (2.0 * h),
                w: (x1 + 1 - x0) as f64 / w,
                h: (y1 + 1 - y0) as f64 / h,
            }
        })
    }

    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in &self.data {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (height * width) as u64 {
            return Err(OokdError::Shape(format!(
                "rle counts sum to {total}, expected {}",
                height * width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        let mut value = false;
        for &c in counts {
            data.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

/// Box in normalized center form. Image coordinates run over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub const SENTINEL: BoxCxcywh = BoxCxcywh {
        cx: 0.0,
        cy: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_corners(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        *self == Self::SENTINEL
    }

    /// Largest per-edge deviation, measured in pixels of an image of the given size.
    pub fn max_edge_deviation_px(&self, other: &BoxCxcywh, height: usize, width: usize) -> f64 {
        let a = self.to_corners();
        let b = other.to_corners();
        let w = width as f64;
        let h = height as f64;
        [
            (a.x1 - b.x1).abs() * w,
            (a.x2 - b.x2).abs() * w,
            (a.y1 - b.y1).abs() * h,
            (a.y2 - b.y2).abs() * h,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}
