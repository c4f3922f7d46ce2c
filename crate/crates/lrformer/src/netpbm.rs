//! Binary PPM (`P6`) images and PGM (`P5`) label masks, maxval 255.

use std::fmt;
use std::path::Path;

use lrformer_core::Tensor;

/// Malformed or unsupported netpbm data, located by byte offset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("byte {offset}: {kind}")]
pub struct FormatError {
    pub offset: usize,
    pub kind: FormatErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    Magic { expected: &'static str },
    Header(&'static str),
    Maxval(u32),
    Truncated { needed: usize, available: usize },
    Label { value: u32, classes: usize },
    TooLarge { what: &'static str },
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Magic { expected } => write!(f, "bad magic, expected {expected}"),
            Self::Header(what) => write!(f, "malformed header: {what}"),
            Self::Maxval(v) => write!(f, "maxval {v} unsupported (only 255)"),
            Self::Truncated { needed, available } => {
                write!(f, "truncated payload: need {needed} bytes, {available} present")
            }
            Self::Label { value, classes } => {
                write!(f, "label {value} out of range for {classes} classes")
            }
            Self::TooLarge { what } => write!(f, "{what} does not fit in 8 bits"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetpbmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: String, source: FormatError },
}

fn err(offset: usize, kind: FormatErrorKind) -> FormatError {
    FormatError { offset, kind }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<u32, FormatError> {
        self.skip_space();
        let start = self.pos;
        let mut v: u32 = 0;
        while let Some(d) = self.bytes.get(self.pos).filter(|b| b.is_ascii_digit()) {
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add(u32::from(d - b'0')))
                .ok_or(err(start, FormatErrorKind::Header(what)))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(err(start, FormatErrorKind::Header(what)));
        }
        Ok(v)
    }
}

/// Parses the header and returns `(width, height, payload offset)`.
fn decode(bytes: &[u8], magic: &'static str, channels: usize) -> Result<(usize, usize, usize), FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(err(0, FormatErrorKind::Magic { expected: magic }));
    }
    let mut c = Cursor { bytes, pos: 2 };
    if !c.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(err(2, FormatErrorKind::Header("whitespace after magic")));
    }
    let width = c.number("width")? as usize;
    let height = c.number("height")? as usize;
    let max_at = {
        c.skip_space();
        c.pos
    };
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(max_at, FormatErrorKind::Header("zero extent")));
    }
    if maxval != 255 {
        return Err(err(max_at, FormatErrorKind::Maxval(maxval)));
    }
    if !c.bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(c.pos, FormatErrorKind::Header("single whitespace before payload")));
    }
    let start = c.pos + 1;
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(err(0, FormatErrorKind::Header("extents overflow")))?;
    let available = bytes.len() - start;
    if available < needed {
        return Err(err(bytes.len(), FormatErrorKind::Truncated { needed, available }));
    }
    Ok((width, height, start))
}

/// Decodes a `P6` image into a `[3,H,W]` tensor scaled to `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let (w, h, start) = decode(bytes, "P6", 3)?;
    let n = w * h;
    let px = &bytes[start..start + 3 * n];
    let mut data = vec![0.0f32; 3 * n];
    for (p, rgb) in px.chunks_exact(3).enumerate() {
        for (ch, &v) in rgb.iter().enumerate() {
            data[ch * n + p] = f32::from(v) / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("extents match payload"))
}

/// Encodes a `[3,H,W]` tensor; values are clamped to `[0,1]` and rounded.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>, FormatError> {
    let [3, h, w] = *image.shape() else {
        return Err(err(0, FormatErrorKind::Header("image must be [3,H,W]")));
    };
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..n {
        for ch in 0..3 {
            out.push((d[ch * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// A row-major label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

/// Decodes a `P5` mask, rejecting labels `>= classes`.
pub fn decode_pgm(bytes: &[u8], classes: usize) -> Result<Mask, FormatError> {
    let (width, height, start) = decode(bytes, "P5", 1)?;
    let px = &bytes[start..start + width * height];
    let mut labels = Vec::with_capacity(px.len());
    for (i, &v) in px.iter().enumerate() {
        if usize::from(v) >= classes {
            return Err(err(start + i, FormatErrorKind::Label { value: v.into(), classes }));
        }
        labels.push(u32::from(v));
    }
    Ok(Mask { height, width, labels })
}

pub fn encode_pgm(mask: &Mask) -> Result<Vec<u8>, FormatError> {
    if mask.labels.len() != mask.height * mask.width {
        return Err(err(0, FormatErrorKind::Header("label count does not match extents")));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    for &l in &mask.labels {
        out.push(u8::try_from(l).map_err(|_| err(out.len(), FormatErrorKind::TooLarge { what: "label" }))?);
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>, NetpbmError> {
    std::fs::read(path).map_err(|source| NetpbmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), NetpbmError> {
    std::fs::write(path, bytes).map_err(|source| NetpbmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn located(path: &Path) -> impl FnOnce(FormatError) -> NetpbmError + '_ {
    move |source| NetpbmError::Format {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>, NetpbmError> {
    decode_ppm(&read(path)?).map_err(located(path))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), NetpbmError> {
    write(path, &encode_ppm(image).map_err(located(path))?)
}

pub fn read_mask(path: &Path, classes: usize) -> Result<Mask, NetpbmError> {
    decode_pgm(&read(path)?, classes).map_err(located(path))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), NetpbmError> {
    write(path, &encode_pgm(mask).map_err(located(path))?)
}
