use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    /// Integer values in `[0, 255]`.
    Byte,
    /// Finite `f64` values.
    Real,
}

/// Planar pixel storage: channel-major, then row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    Byte(Vec<u8>),
    Real(Vec<f64>),
}

impl Pixels {
    pub fn len(&self) -> usize {
        match self {
            Pixels::Byte(v) => v.len(),
            Pixels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Pixels::Byte(_) => Dtype::Byte,
            Pixels::Real(_) => Dtype::Real,
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Pixels::Byte(v) => f64::from(v[i]),
            Pixels::Real(v) => v[i],
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Pixels::Byte(v) => v.iter().map(|&b| f64::from(b)).collect(),
            Pixels::Real(v) => v.clone(),
        }
    }

    /// Copies the values at `indices` into a new buffer of the same dtype.
    pub(crate) fn gather(&self, indices: impl Iterator<Item = usize>) -> Pixels {
        match self {
            Pixels::Byte(v) => Pixels::Byte(indices.map(|i| v[i]).collect()),
            Pixels::Real(v) => Pixels::Real(indices.map(|i| v[i]).collect()),
        }
    }

    /// Writes `src` (same dtype) into `self` at `indices`, in order.
    pub(crate) fn scatter(&mut self, src: &Pixels, indices: impl Iterator<Item = usize>) {
        match (self, src) {
            (Pixels::Byte(dst), Pixels::Byte(src)) => {
                for (k, i) in indices.enumerate() {
                    dst[i] = src[k];
                }
            }
            (Pixels::Real(dst), Pixels::Real(src)) => {
                for (k, i) in indices.enumerate() {
                    dst[i] = src[k];
                }
            }
            _ => panic!("scatter between mismatched dtypes"),
        }
    }

    pub(crate) fn zeros_like(&self, len: usize) -> Pixels {
        match self {
            Pixels::Byte(_) => Pixels::Byte(vec![0; len]),
            Pixels::Real(_) => Pixels::Real(vec![0.0; len]),
        }
    }
}

/// A labeled pixel tensor of shape `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Pixels,
    label: Option<u32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Pixels) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if pixels.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} pixel values for {channels}x{height}x{width}, got {}",
                pixels.len()
            )));
        }
        if let Pixels::Real(v) = &pixels {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(
                    "real-valued image contains NaN or infinite values".into(),
                ));
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            label: None,
        })
    }

    pub fn from_bytes(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(channels, height, width, Pixels::Byte(data))
    }

    pub fn from_real(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(channels, height, width, Pixels::Real(data))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: u8) -> Result<Self> {
        Self::from_bytes(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn set_label(&mut self, label: Option<u32>) {
        self.label = label;
    }

    pub fn dtype(&self) -> Dtype {
        self.pixels.dtype()
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    pub fn into_pixels(self) -> Pixels {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.get(self.index(c, y, x))
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::Byte(v) => Some(v),
            Pixels::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.pixels {
            Pixels::Real(v) => Some(v),
            Pixels::Byte(_) => None,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.to_f64()
    }

    /// Rounds and clamps every value to `[0, 255]`.
    pub fn to_byte_rounded(&self) -> Image {
        let data = match &self.pixels {
            Pixels::Byte(v) => v.clone(),
            Pixels::Real(v) => v
                .iter()
                .map(|x| x.round().clamp(0.0, 255.0) as u8)
                .collect(),
        };
        Image {
            pixels: Pixels::Byte(data),
            ..self.clone()
        }
    }

    pub fn to_real(&self) -> Image {
        Image {
            pixels: Pixels::Real(self.pixels.to_f64()),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }
}
