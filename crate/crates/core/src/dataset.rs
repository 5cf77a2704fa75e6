//! Dataset ingestion and the `DGDS` disguised-dataset container.
//!
//! `DGDS` layout, little-endian:
//!
//! ```text
//! magic "DGDS" | version u16 | mechanism u8 (0 rmt, 1 aes, 2 mixup, 255 none)
//! | dtype u8 (0 = u8, 1 = f64) | channels u32 | height u32 | width u32
//! | count u32 | t u32 | k u32 | param f64 (noise level or flip probability)
//! | labels u32 * count (0xffffffff = unlabeled) | pixel payload
//! ```
//!
//! The payload stores each image planar (channel, row, column) in order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Dtype, Image, Pixels};
use crate::keyfile::{Mechanism, Reader, Writer};
use crate::rng::SeededRng;

pub const DATASET_MAGIC: &[u8; 4] = b"DGDS";
pub const DATASET_VERSION: u16 = 1;
const NO_LABEL: u32 = u32::MAX;
const NO_MECHANISM: u8 = 255;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Idx,
    PngDir,
    Dgds,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DatasetFormat::Idx),
            "png_dir" | "png" => Ok(DatasetFormat::PngDir),
            "dgds" => Ok(DatasetFormat::Dgds),
            other => Err(Error::InvalidParameter(format!(
                "unknown dataset format '{other}'"
            ))),
        }
    }
}

/// Disguising parameters recorded alongside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DatasetMeta {
    pub mechanism: Option<Mechanism>,
    pub t: u32,
    pub k: u32,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Vec<Image>) -> Self {
        Self {
            images,
            meta: DatasetMeta::default(),
        }
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn check_uniform(&self) -> Result<()> {
        if let Some(first) = self.images.first() {
            for (i, im) in self.images.iter().enumerate() {
                if im.dims() != first.dims() || im.dtype() != first.dtype() {
                    return Err(Error::Dimension(format!(
                        "image {i} is {:?} {:?}, dataset is {:?} {:?}",
                        im.dims(),
                        im.dtype(),
                        first.dims(),
                        first.dtype()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_dgds_bytes(&self) -> Result<Vec<u8>> {
        self.check_uniform()?;
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::EmptyDataset("refusing to write an empty dataset".into()))?;
        let (c, l, m) = first.dims();
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u16(DATASET_VERSION);
        w.u8(self.meta.mechanism.map_or(NO_MECHANISM, |mech| mech as u8));
        w.u8(match first.dtype() {
            Dtype::Byte => 0,
            Dtype::Real => 1,
        });
        w.u32(c);
        w.u32(l);
        w.u32(m);
        w.u32(self.images.len());
        w.u32(self.meta.t as usize);
        w.u32(self.meta.k as usize);
        w.f64(self.meta.param);
        for im in &self.images {
            w.bytes(&im.label().unwrap_or(NO_LABEL).to_le_bytes());
        }
        for im in &self.images {
            match im.pixels() {
                Pixels::Byte(v) => w.bytes(v),
                Pixels::Real(v) => v.iter().for_each(|&x| w.f64(x)),
            }
        }
        Ok(w.buf)
    }

    pub fn from_dgds_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a DGDS file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported DGDS version {version}")));
        }
        let mechanism = match r.u8()? {
            NO_MECHANISM => None,
            tag => Some(Mechanism::from_tag(tag)?),
        };
        let dtype = match r.u8()? {
            0 => Dtype::Byte,
            1 => Dtype::Real,
            d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
        };
        let c = r.u32()? as usize;
        let l = r.u32()? as usize;
        let m = r.u32()? as usize;
        let count = r.u32()? as usize;
        let meta = DatasetMeta {
            mechanism,
            t: r.u32()?,
            k: r.u32()?,
            param: r.f64()?,
        };
        let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = c * l * m;
        let mut images = Vec::with_capacity(count);
        for label in labels {
            let pixels = match dtype {
                Dtype::Byte => Pixels::Byte(r.take(n)?.to_vec()),
                Dtype::Real => Pixels::Real((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?),
            };
            let label = (label != NO_LABEL).then_some(label);
            images.push(
                Image::new(c, l, m, pixels)
                    .map_err(|e| Error::Format(e.to_string()))?
                    .with_label(label),
            );
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after DGDS payload".into()));
        }
        Ok(Dataset { images, meta })
    }

    pub fn save_dgds(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_dgds_bytes()?)?;
        Ok(())
    }

    pub fn load_dgds(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_dgds_bytes(&fs::read(path)?)
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.images.iter().map(Image::label).collect()
    }
}

fn be_u32(data: &[u8], at: usize) -> Result<u32> {
    data.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parses an IDX image file (magic `0x00000803`).
pub fn parse_idx_images(data: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(data, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = be_u32(data, 4)? as usize;
    let rows = be_u32(data, 8)? as usize;
    let cols = be_u32(data, 12)? as usize;
    let n = rows * cols;
    let body = &data[16..];
    if body.len() != count * n {
        return Err(Error::Format(format!(
            "IDX header declares {count} images of {rows}x{cols}, payload has {} bytes",
            body.len()
        )));
    }
    body.chunks_exact(n.max(1))
        .take(count)
        .map(|px| Image::from_bytes(1, rows, cols, px.to_vec()))
        .collect()
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(data: &[u8]) -> Result<Vec<u32>> {
    let magic = be_u32(data, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let count = be_u32(data, 4)? as usize;
    let body = &data[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX header declares {count} labels, payload has {} bytes",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| u32::from(b)).collect())
}

pub fn idx_image_bytes(images: &[Image]) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyDataset("no images to write".into()))?;
    let (_, rows, cols) = first.dims();
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        match (im.dims(), im.as_bytes()) {
            ((1, r, c), Some(px)) if r == rows && c == cols => out.extend_from_slice(px),
            _ => {
                return Err(Error::Dimension(
                    "IDX output requires uniform single-channel byte images".into(),
                ))
            }
        }
    }
    Ok(out)
}

pub fn idx_label_bytes(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(
            u8::try_from(l)
                .map_err(|_| Error::InvalidParameter(format!("label {l} exceeds a byte")))?,
        );
    }
    Ok(out)
}

/// Labels file conventionally paired with an IDX image file
/// (`*-images-idx3-ubyte` to `*-labels-idx1-ubyte`).
pub fn idx_labels_path(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    let labels = name
        .replace("images-idx3", "labels-idx1")
        .replace("images.idx3", "labels.idx1");
    (labels != name).then(|| images.with_file_name(labels))
}

/// Reads IDX images and, when given, their labels.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Vec<Image>> {
    let mut out = parse_idx_images(&fs::read(images)?)?;
    if let Some(lp) = labels {
        let ls = parse_idx_labels(&fs::read(lp)?)?;
        if ls.len() != out.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                out.len(),
                ls.len()
            )));
        }
        for (im, l) in out.iter_mut().zip(ls) {
            im.set_label(Some(l));
        }
    }
    Ok(out)
}

fn decode_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let (channels, take): (usize, usize) = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => (1, 1),
        png::ColorType::Rgb | png::ColorType::Rgba => (3, 3),
        png::ColorType::Indexed => {
            return Err(Error::Format(format!(
                "{}: unexpanded palette",
                path.display()
            )))
        }
    };
    let mut planar = vec![0u8; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..take {
                planar[(c * h + y) * w + x] = bytes[(y * w + x) * stride + c];
            }
        }
    }
    Image::from_bytes(channels, h, w, planar)
}

pub fn encode_png(image: &Image, path: &Path) -> Result<()> {
    let bytes = image
        .as_bytes()
        .ok_or_else(|| Error::InvalidParameter("PNG output needs a byte image".into()))?;
    let (c, h, w) = image.dims();
    let mut interleaved = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                interleaved[(y * w + x) * c + ch] = bytes[(ch * h + y) * w + x];
            }
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(&interleaved)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// One subdirectory per class. Directory names that all parse as integers
/// are used as class ids; otherwise classes are numbered in sorted order.
pub fn load_png_dir(root: &Path) -> Result<Vec<Image>> {
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| Some((e.file_name().to_str()?.to_owned(), e.path())))
        .collect();
    classes.sort();
    let numeric: Option<Vec<u32>> = classes.iter().map(|(n, _)| n.parse().ok()).collect();
    let mut images = Vec::new();
    for (idx, (_, dir)) in classes.iter().enumerate() {
        let label = numeric.as_ref().map_or(idx as u32, |ids| ids[idx]);
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("png"))
            })
            .collect();
        files.sort();
        for f in files {
            images.push(decode_png(&f)?.with_label(Some(label)));
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no PNG images under {}",
            root.display()
        )));
    }
    Ok(images)
}

/// Writes `root/<label>/<index>.png` for every image.
pub fn save_png_dir(images: &[Image], root: &Path) -> Result<()> {
    for (i, im) in images.iter().enumerate() {
        let dir = root.join(
            im.label()
                .map_or("unlabeled".to_string(), |l| l.to_string()),
        );
        fs::create_dir_all(&dir)?;
        encode_png(im, &dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let ds = match format {
        DatasetFormat::Idx => {
            let labels = idx_labels_path(path).filter(|p| p.exists());
            Dataset::new(load_idx(path, labels.as_deref())?)
        }
        DatasetFormat::PngDir => Dataset::new(load_png_dir(path)?),
        DatasetFormat::Dgds => Dataset::load_dgds(path)?,
    };
    if ds.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} holds no images",
            path.display()
        )));
    }
    Ok(ds)
}

/// Guesses the format from the path: directories are PNG trees, `.dgds`
/// files are containers, anything else is IDX.
pub fn infer_format(path: &Path) -> DatasetFormat {
    if path.is_dir() {
        DatasetFormat::PngDir
    } else if path.extension().is_some_and(|e| e == "dgds") {
        DatasetFormat::Dgds
    } else {
        DatasetFormat::Idx
    }
}

/// Writes a dataset. IDX labels go next to the images under the
/// conventional `labels-idx1` name when the images path follows the
/// `images-idx3` convention, else to `<path>.labels`.
pub fn save_dataset(data: &Dataset, path: &Path, format: DatasetFormat) -> Result<()> {
    match format {
        DatasetFormat::Dgds => data.save_dgds(path),
        DatasetFormat::PngDir => save_png_dir(&data.images, path),
        DatasetFormat::Idx => {
            fs::write(path, idx_image_bytes(&data.images)?)?;
            let labels: Option<Vec<u32>> = data.images.iter().map(Image::label).collect();
            if let Some(labels) = labels {
                let lp = idx_labels_path(path).unwrap_or_else(|| {
                    let mut name = path.as_os_str().to_owned();
                    name.push(".labels");
                    PathBuf::from(name)
                });
                fs::write(lp, idx_label_bytes(&labels)?)?;
            }
            Ok(())
        }
    }
}

/// Labeled byte images drawn around per-class random prototypes with
/// uniform per-pixel jitter in `[-spread, spread]`.
pub fn synthetic_classes(
    count: usize,
    classes: usize,
    (channels, height, width): (usize, usize, usize),
    spread: u8,
    seed: u64,
) -> Result<Vec<Image>> {
    if classes == 0 {
        return Err(Error::InvalidParameter("need at least one class".into()));
    }
    let n = channels * height * width;
    let mut rng = SeededRng::new(seed);
    let prototypes: Vec<Vec<u8>> = (0..classes)
        .map(|_| (0..n).map(|_| rng.below(256) as u8).collect())
        .collect();
    let spread = i32::from(spread);
    (0..count)
        .map(|i| {
            let class = i % classes;
            let px = prototypes[class]
                .iter()
                .map(|&p| {
                    let jitter = rng.below((2 * spread + 1) as usize) as i32 - spread;
                    (i32::from(p) + jitter).clamp(0, 255) as u8
                })
                .collect();
            Ok(Image::from_bytes(channels, height, width, px)?.with_label(Some(class as u32)))
        })
        .collect()
}

/// Uniformly random byte images with random labels in `0..classes`.
pub fn random_images(
    count: usize,
    classes: u32,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Vec<Image>> {
    let (c, l, m) = dims;
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|_| {
            let px = (0..c * l * m).map(|_| rng.below(256) as u8).collect();
            let label = rng.below(classes.max(1) as usize) as u32;
            Ok(Image::from_bytes(c, l, m, px)?.with_label(Some(label)))
        })
        .collect()
}
