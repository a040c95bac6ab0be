//! Mask and tensor interchange formats.
//!
//! Masks are binary PGM (`P5`, maxval 255). Float tensors use the `LGT1`
//! container: 4-byte magic, little-endian `u32` channel/height/width, one
//! flag byte (`1` = normalized probabilities, `0` = raw scores) and then
//! `C·H·W` little-endian `f32` values in channel-major, row-major order.

use thiserror::Error;

/// Reserved label for pixels excluded from losses, voting and evaluation.
pub const IGNORE: u8 = 255;

/// Per-pixel sum tolerance for tensors flagged as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

const LGT_MAGIC: &[u8; 4] = b"LGT1";
const LGT_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("byte {offset}: payload truncated, expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("byte {offset}: {extra} trailing bytes after payload")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("value {index} is not finite")]
    NonFinite { index: usize },
    #[error("pixel ({x}, {y}): {message}")]
    NotNormalized { x: usize, y: usize, message: String },
}

fn malformed(offset: usize, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        offset,
        message: message.into(),
    }
}

/// A per-pixel class-id raster. `IGNORE` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, FormatError> {
        let (w, h) = dims_u32(width, height)?;
        if labels.len() != width * height {
            return Err(FormatError::Dimensions(format!(
                "{width}x{height} mask needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self {
            width: w,
            height: h,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Result<Self, FormatError> {
        Self::new(width, height, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width() + x]
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn same_dims(&self, other: &SegMask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// A `C×H×W` tensor of per-pixel class scores.
///
/// When `normalized` is set every value is non-negative and each pixel's
/// channel sum lies within [`NORMALIZATION_TOLERANCE`] of one. Raw logits
/// share the container with the flag cleared and are only required to be
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: u32,
    height: u32,
    width: u32,
    normalized: bool,
    values: Vec<f32>,
}

impl ProbMap {
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        normalized: bool,
        values: Vec<f32>,
    ) -> Result<Self, FormatError> {
        let map = Self::new_unchecked_values(classes, height, width, normalized, values)?;
        map.validate()?;
        Ok(map)
    }

    fn new_unchecked_values(
        classes: usize,
        height: usize,
        width: usize,
        normalized: bool,
        values: Vec<f32>,
    ) -> Result<Self, FormatError> {
        let c = u32::try_from(classes)
            .map_err(|_| FormatError::Dimensions(format!("class count {classes} exceeds u32")))?;
        let (w, h) = dims_u32(width, height)?;
        let expected = classes
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| FormatError::Dimensions("C*H*W overflows".into()))?;
        if values.len() != expected {
            return Err(FormatError::Dimensions(format!(
                "{classes}x{height}x{width} tensor needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            classes: c,
            height: h,
            width: w,
            normalized,
            values,
        })
    }

    fn validate(&self) -> Result<(), FormatError> {
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index });
        }
        if !self.normalized {
            return Ok(());
        }
        let plane = self.plane();
        for pix in 0..plane {
            let (x, y) = (pix % self.width(), pix / self.width());
            let mut sum = 0.0f64;
            for c in 0..self.classes() {
                let v = self.values[c * plane + pix];
                if v < 0.0 {
                    return Err(FormatError::NotNormalized {
                        x,
                        y,
                        message: format!("negative probability {v} in class {c}"),
                    });
                }
                sum += f64::from(v);
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(FormatError::NotNormalized {
                    x,
                    y,
                    message: format!("class sum {sum} is not 1"),
                });
            }
        }
        Ok(())
    }

    /// Builds a map from per-pixel class vectors, `pixels[y * width + x][c]`.
    pub fn from_pixels(
        height: usize,
        width: usize,
        normalized: bool,
        pixels: &[Vec<f32>],
    ) -> Result<Self, FormatError> {
        let classes = pixels.first().map_or(0, Vec::len);
        if pixels.len() != height * width || pixels.iter().any(|p| p.len() != classes) {
            return Err(FormatError::Dimensions("ragged pixel list".into()));
        }
        let plane = height * width;
        let mut values = vec![0.0; classes * plane];
        for (pix, probs) in pixels.iter().enumerate() {
            for (c, &v) in probs.iter().enumerate() {
                values[c * plane + pix] = v;
            }
        }
        Self::new(classes, height, width, normalized, values)
    }

    pub fn classes(&self) -> usize {
        self.classes as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn plane(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height() + y) * self.width() + x]
    }

    /// Class vector of one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        let pix = y * self.width() + x;
        (0..self.classes())
            .map(|c| self.values[c * self.plane() + pix])
            .collect()
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.classes == other.classes && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.classes(), self.height(), self.width())
    }

    /// Rebuilds a map with this shape from f64 accumulators, rounding once to f32.
    pub(crate) fn with_values_f64(
        &self,
        normalized: bool,
        values: &[f64],
    ) -> Result<Self, FormatError> {
        let (c, h, w) = self.shape();
        Self::new(
            c,
            h,
            w,
            normalized,
            values.iter().map(|&v| v as f32).collect(),
        )
    }
}

fn dims_u32(width: usize, height: usize) -> Result<(u32, u32), FormatError> {
    let w = u32::try_from(width)
        .map_err(|_| FormatError::Dimensions(format!("width {width} exceeds u32")))?;
    let h = u32::try_from(height)
        .map_err(|_| FormatError::Dimensions(format!("height {height} exceeds u32")))?;
    Ok((w, h))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_separators(&mut self) -> Result<(), FormatError> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(malformed(self.pos, "expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<u32, FormatError> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(start, format!("{what} out of range")))
    }
}

/// Parses a binary PGM (`P5`, maxval 255) into a mask.
pub fn read_mask(bytes: &[u8]) -> Result<SegMask, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(malformed(0, "missing P5 magic"));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    cur.skip_separators()?;
    let width = cur.number("width")? as usize;
    cur.skip_separators()?;
    let height = cur.number("height")? as usize;
    cur.skip_separators()?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(malformed(maxval_at, format!("maxval {maxval} is not 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(malformed(
                cur.pos,
                "expected single whitespace after maxval",
            ))
        }
    }
    let offset = cur.pos;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| FormatError::Dimensions("width*height overflows".into()))?;
    let found = bytes.len() - offset;
    if found < expected {
        return Err(FormatError::Truncated {
            offset,
            expected,
            found,
        });
    }
    if found > expected {
        return Err(FormatError::Trailing {
            offset: offset + expected,
            extra: found - expected,
        });
    }
    SegMask::new(width, height, bytes[offset..].to_vec())
}

/// Serializes a mask with the canonical header `P5\n<w> <h>\n255\n`.
pub fn write_mask(mask: &SegMask) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", mask.width, mask.height);
    let mut out = Vec::with_capacity(header.len() + mask.labels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&mask.labels);
    out
}

fn read_u32_le(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn read_tensor(bytes: &[u8]) -> Result<ProbMap, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != LGT_MAGIC {
        return Err(malformed(0, "missing LGT1 magic"));
    }
    if bytes.len() < LGT_HEADER_LEN {
        return Err(FormatError::Truncated {
            offset: 4,
            expected: LGT_HEADER_LEN - 4,
            found: bytes.len() - 4,
        });
    }
    let classes = read_u32_le(bytes, 4) as usize;
    let height = read_u32_le(bytes, 8) as usize;
    let width = read_u32_le(bytes, 12) as usize;
    let normalized = match bytes[16] {
        0 => false,
        1 => true,
        other => return Err(malformed(16, format!("flag byte {other} is not 0 or 1"))),
    };
    let count = classes
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| FormatError::Dimensions("C*H*W overflows".into()))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| FormatError::Dimensions("payload size overflows".into()))?;
    let found = bytes.len() - LGT_HEADER_LEN;
    if found < expected {
        return Err(FormatError::Truncated {
            offset: LGT_HEADER_LEN,
            expected,
            found,
        });
    }
    if found > expected {
        return Err(FormatError::Trailing {
            offset: LGT_HEADER_LEN + expected,
            extra: found - expected,
        });
    }
    let values = bytes[LGT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    ProbMap::new(classes, height, width, normalized, values)
}

pub fn write_tensor(map: &ProbMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(LGT_HEADER_LEN + 4 * map.values.len());
    out.extend_from_slice(LGT_MAGIC);
    out.extend_from_slice(&map.classes.to_le_bytes());
    out.extend_from_slice(&map.height.to_le_bytes());
    out.extend_from_slice(&map.width.to_le_bytes());
    out.push(u8::from(map.normalized));
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
