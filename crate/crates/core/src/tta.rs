//! Test-time augmentation merging: sliding-window stitching and
//! horizontal-flip averaging.

use thiserror::Error;

use crate::tensor_io::{FormatError, ProbMap};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TtaError {
    #[error("window {window} is larger than image dimension {dim}")]
    WindowTooLarge { window: usize, dim: usize },
    #[error("window and stride must be >= 1")]
    ZeroSize,
    #[error("stride {stride} leaves pixels between windows of size {window} uncovered")]
    StrideGap { window: usize, stride: usize },
    #[error("plan has {expected} windows, got {found} maps")]
    Count { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Default stride for a window: two thirds of its size, at least one pixel.
pub fn default_stride(window: usize) -> usize {
    (2 * window / 3).max(1)
}

/// Window origins for one axis. The last origin is clamped so the final
/// window ends on the image edge.
pub fn axis_origins(dim: usize, window: usize, stride: usize) -> Result<Vec<usize>, TtaError> {
    if window == 0 || stride == 0 {
        return Err(TtaError::ZeroSize);
    }
    if window > dim {
        return Err(TtaError::WindowTooLarge { window, dim });
    }
    let last = dim - window;
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o < last)
        .collect();
    origins.push(last);
    origins.dedup();
    if origins.windows(2).any(|w| w[1] - w[0] > window) {
        return Err(TtaError::StrideGap { window, stride });
    }
    Ok(origins)
}

/// A grid of equally sized windows covering an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub height: usize,
    pub width: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    /// `(x0, y0)` origins, rows outer and columns inner.
    pub windows: Vec<(usize, usize)>,
}

pub fn plan_windows(
    height: usize,
    width: usize,
    window_h: usize,
    window_w: usize,
    stride: usize,
) -> Result<WindowPlan, TtaError> {
    let ys = axis_origins(height, window_h, stride)?;
    let xs = axis_origins(width, window_w, stride)?;
    let windows = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(WindowPlan {
        height,
        width,
        window_h,
        window_w,
        stride,
        windows,
    })
}

impl WindowPlan {
    /// How many windows cover each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cover = vec![0u32; self.height * self.width];
        for &(x0, y0) in &self.windows {
            for y in y0..y0 + self.window_h {
                for x in x0..x0 + self.window_w {
                    cover[y * self.width + x] += 1;
                }
            }
        }
        cover
    }

    /// Crops a full-size map into the plan's windows, in plan order.
    pub fn crop(&self, full: &ProbMap) -> Result<Vec<ProbMap>, TtaError> {
        if full.height() != self.height || full.width() != self.width {
            return Err(TtaError::Shape(format!(
                "map is {}x{}, plan expects {}x{}",
                full.height(),
                full.width(),
                self.height,
                self.width
            )));
        }
        let c = full.classes();
        self.windows
            .iter()
            .map(|&(x0, y0)| {
                let mut v = Vec::with_capacity(c * self.window_h * self.window_w);
                for ch in 0..c {
                    for y in y0..y0 + self.window_h {
                        for x in x0..x0 + self.window_w {
                            v.push(full.get(ch, y, x));
                        }
                    }
                }
                ProbMap::new(c, self.window_h, self.window_w, full.is_normalized(), v)
                    .map_err(TtaError::from)
            })
            .collect()
    }
}

/// Per-pixel mean over all windows covering that pixel.
pub fn stitch(plan: &WindowPlan, window_maps: &[ProbMap]) -> Result<ProbMap, TtaError> {
    if window_maps.len() != plan.windows.len() {
        return Err(TtaError::Count {
            expected: plan.windows.len(),
            found: window_maps.len(),
        });
    }
    let classes = window_maps.first().map_or(0, ProbMap::classes);
    for (i, m) in window_maps.iter().enumerate() {
        if m.shape() != (classes, plan.window_h, plan.window_w) {
            let (c, h, w) = m.shape();
            return Err(TtaError::Shape(format!(
                "window {i} is {c}x{h}x{w}, expected {classes}x{}x{}",
                plan.window_h, plan.window_w
            )));
        }
    }
    let (h, w) = (plan.height, plan.width);
    let mut acc = vec![0.0f64; classes * h * w];
    for (&(x0, y0), m) in plan.windows.iter().zip(window_maps) {
        for ch in 0..classes {
            for wy in 0..plan.window_h {
                for wx in 0..plan.window_w {
                    acc[(ch * h + y0 + wy) * w + x0 + wx] += f64::from(m.get(ch, wy, wx));
                }
            }
        }
    }
    let cover = plan.coverage();
    for ch in 0..classes {
        for (pix, &n) in cover.iter().enumerate() {
            acc[ch * h * w + pix] /= f64::from(n);
        }
    }
    let normalized = window_maps.iter().all(ProbMap::is_normalized);
    Ok(ProbMap::new(
        classes,
        h,
        w,
        normalized,
        acc.into_iter().map(|v| v as f32).collect(),
    )?)
}

/// Reverses the x axis of every channel.
pub fn mirror(p: &ProbMap) -> ProbMap {
    let (c, h, w) = p.shape();
    let mut v = Vec::with_capacity(p.values().len());
    for row in p.values().chunks_exact(w.max(1)).take(c * h) {
        v.extend(row.iter().rev());
    }
    ProbMap::new(c, h, w, p.is_normalized(), v).expect("mirror keeps shape and values")
}

/// `0.5 * (p + mirror(p_flip))`, where `p_flip` is the output for the
/// mirrored input.
pub fn hflip_merge(p: &ProbMap, p_flip: &ProbMap) -> Result<ProbMap, TtaError> {
    if !p.same_shape(p_flip) {
        return Err(TtaError::Shape(format!(
            "{:?} vs {:?}",
            p.shape(),
            p_flip.shape()
        )));
    }
    let back = mirror(p_flip);
    let values: Vec<f64> = p
        .values()
        .iter()
        .zip(back.values())
        .map(|(&a, &b)| 0.5 * (f64::from(a) + f64::from(b)))
        .collect();
    Ok(p.with_values_f64(p.is_normalized() && p_flip.is_normalized(), &values)?)
}
