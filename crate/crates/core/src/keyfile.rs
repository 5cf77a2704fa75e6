//! Binary key files (`DGKY`).
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! header: magic "DGKY" | version u16 | mechanism u8 | master_seed u64 | prng u8
//! rmt:    channels u32 | height u32 | width u32 | grid_rows u32 | grid_cols u32
//!         | orientation u8 | orthogonal u8 | noise f64 | noise_per_image u8
//!         | permutation_seed u64 | permutation u32 * t
//!         | r u32 | t matrices of r*r f64, row-major
//! aes:    channels u32 | source_height u32 | source_width u32 | scale u32
//!         | grid_rows u32 | grid_cols u32 | salt_pepper_p f64 | mode u8
//!         | permutation_seed u64 | permutation u32 * t | t keys of 16 bytes
//! mixup:  channels u32 | height u32 | width u32 | k_mix u32
//! ```
//!
//! Grid dimensions refer to the encrypted (scaled-up) image for AES keys.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::aes_disguise::{AesKey, CipherMode, UNIT_SIZE};
use crate::blocks::{BlockLayout, Permutation};
use crate::error::{Error, Result};
use crate::rmt::{NoiseSpec, Orientation, RmtKey};
use crate::rng::PRNG_CHACHA8;

pub const KEY_MAGIC: &[u8; 4] = b"DGKY";
pub const KEY_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Mechanism {
    Rmt = 0,
    Aes = 1,
    InstaHide = 2,
}

impl Mechanism {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Mechanism::Rmt),
            1 => Ok(Mechanism::Aes),
            2 => Ok(Mechanism::InstaHide),
            other => Err(Error::Format(format!("unknown mechanism tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Rmt => "rmt",
            Mechanism::Aes => "aes",
            Mechanism::InstaHide => "instahide",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmt" => Ok(Mechanism::Rmt),
            "aes" => Ok(Mechanism::Aes),
            "instahide" | "mixup" => Ok(Mechanism::InstaHide),
            other => Err(Error::InvalidParameter(format!(
                "unknown mechanism '{other}'"
            ))),
        }
    }
}

/// Parameters of the mixup baseline. Per-image randomness derives from the
/// master seed and the image id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixupKey {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k_mix: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyMaterial {
    Rmt(RmtKey),
    Aes(AesKey),
    InstaHide(MixupKey),
}

impl KeyMaterial {
    pub fn mechanism(&self) -> Mechanism {
        match self {
            KeyMaterial::Rmt(_) => Mechanism::Rmt,
            KeyMaterial::Aes(_) => Mechanism::Aes,
            KeyMaterial::InstaHide(_) => Mechanism::InstaHide,
        }
    }

    pub fn mechanism_name(&self) -> &'static str {
        self.mechanism().name()
    }

    pub fn master_seed(&self) -> u64 {
        match self {
            KeyMaterial::Rmt(k) => k.master_seed,
            KeyMaterial::Aes(k) => k.master_seed,
            KeyMaterial::InstaHide(k) => k.master_seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(KEY_MAGIC);
        w.u16(KEY_VERSION);
        w.u8(self.mechanism() as u8);
        w.u64(self.master_seed());
        w.u8(PRNG_CHACHA8);
        match self {
            KeyMaterial::Rmt(k) => {
                write_layout(&mut w, k.layout.channels, k.layout.height, k.layout.width);
                w.u32(k.layout.grid_rows);
                w.u32(k.layout.grid_cols);
                w.u8(match k.orientation {
                    Orientation::Left => 0,
                });
                w.u8(u8::from(k.orthogonal));
                w.f64(k.noise.level);
                w.u8(u8::from(k.noise.per_image));
                write_permutation(&mut w, &k.permutation);
                w.u32(k.layout.block_rows());
                for m in &k.matrices {
                    for i in 0..m.nrows() {
                        for j in 0..m.ncols() {
                            w.f64(m[(i, j)]);
                        }
                    }
                }
            }
            KeyMaterial::Aes(k) => {
                let (c, l, m) = k.source_dims();
                write_layout(&mut w, c, l, m);
                w.u32(k.scale);
                w.u32(k.layout.grid_rows);
                w.u32(k.layout.grid_cols);
                w.f64(k.salt_pepper_p);
                w.u8(match k.mode {
                    CipherMode::Ecb => 0,
                    CipherMode::Cbc => 1,
                });
                write_permutation(&mut w, &k.permutation);
                for key in &k.block_keys {
                    w.bytes(key);
                }
            }
            KeyMaterial::InstaHide(k) => {
                write_layout(&mut w, k.channels, k.height, k.width);
                w.u32(k.k_mix);
            }
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4)? != KEY_MAGIC {
            return Err(Error::Format("not a key file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != KEY_VERSION {
            return Err(Error::Format(format!(
                "unsupported key file version {version}"
            )));
        }
        let mechanism = Mechanism::from_tag(r.u8()?)?;
        let master_seed = r.u64()?;
        let prng = r.u8()?;
        if prng != PRNG_CHACHA8 {
            return Err(Error::Format(format!("unknown PRNG id {prng}")));
        }
        let key = match mechanism {
            Mechanism::Rmt => {
                let (channels, height, width) = read_dims(&mut r)?;
                let layout = read_grid(&mut r, channels, height, width)?;
                let orientation = match r.u8()? {
                    0 => Orientation::Left,
                    o => return Err(Error::Format(format!("unknown orientation {o}"))),
                };
                let orthogonal = read_flag(&mut r)?;
                let level = r.f64()?;
                let per_image = read_flag(&mut r)?;
                let noise =
                    NoiseSpec::new(level, per_image).map_err(|e| Error::Format(e.to_string()))?;
                let permutation = read_permutation(&mut r, layout.t())?;
                let size = r.u32()? as usize;
                if size != layout.block_rows() {
                    return Err(Error::Format(format!(
                        "matrix size {size} does not match block rows {}",
                        layout.block_rows()
                    )));
                }
                let matrices = (0..layout.t())
                    .map(|_| {
                        let vals = (0..size * size)
                            .map(|_| r.f64())
                            .collect::<Result<Vec<_>>>()?;
                        Ok(DMatrix::from_row_slice(size, size, &vals))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let key = RmtKey {
                    layout,
                    permutation,
                    matrices,
                    noise,
                    orthogonal,
                    orientation,
                    master_seed,
                };
                key.validate()?;
                KeyMaterial::Rmt(key)
            }
            Mechanism::Aes => {
                let (channels, height, width) = read_dims(&mut r)?;
                let scale = r.u32()? as usize;
                if scale == 0 {
                    return Err(Error::Format("scale factor is zero".into()));
                }
                let layout = read_grid(&mut r, channels, height * scale, width * scale)?;
                let salt_pepper_p = r.f64()?;
                let mode = match r.u8()? {
                    0 => CipherMode::Ecb,
                    1 => CipherMode::Cbc,
                    m => return Err(Error::Format(format!("unknown cipher mode {m}"))),
                };
                let permutation = read_permutation(&mut r, layout.t())?;
                let block_keys = (0..layout.t())
                    .map(|_| Ok(r.take(UNIT_SIZE)?.try_into().expect("16 bytes")))
                    .collect::<Result<Vec<_>>>()?;
                let key = AesKey {
                    layout,
                    scale,
                    permutation,
                    block_keys,
                    salt_pepper_p,
                    mode,
                    master_seed,
                };
                key.validate()?;
                KeyMaterial::Aes(key)
            }
            Mechanism::InstaHide => {
                let (channels, height, width) = read_dims(&mut r)?;
                let k_mix = r.u32()? as usize;
                if k_mix < 2 {
                    return Err(Error::Format(format!("k_mix {k_mix} below 2")));
                }
                KeyMaterial::InstaHide(MixupKey {
                    channels,
                    height,
                    width,
                    k_mix,
                    master_seed,
                })
            }
        };
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after key body".into()));
        }
        Ok(key)
    }

    /// First 16 hex digits of the SHA-256 of the serialized key.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_layout(w: &mut Writer, c: usize, l: usize, m: usize) {
    w.u32(c);
    w.u32(l);
    w.u32(m);
}

fn write_permutation(w: &mut Writer, p: &Permutation) {
    w.u64(p.seed());
    for &i in p.indices() {
        w.buf.extend_from_slice(&i.to_le_bytes());
    }
}

fn read_dims(r: &mut Reader) -> Result<(usize, usize, usize)> {
    let c = r.u32()? as usize;
    let l = r.u32()? as usize;
    let m = r.u32()? as usize;
    if !(c == 1 || c == 3) || l == 0 || m == 0 {
        return Err(Error::Format(format!("invalid image dims {c}x{l}x{m}")));
    }
    Ok((c, l, m))
}

fn read_grid(r: &mut Reader, channels: usize, height: usize, width: usize) -> Result<BlockLayout> {
    let grid_rows = r.u32()? as usize;
    let grid_cols = r.u32()? as usize;
    if grid_rows == 0
        || grid_cols == 0
        || !height.is_multiple_of(grid_rows)
        || !width.is_multiple_of(grid_cols)
    {
        return Err(Error::Format(format!(
            "{grid_rows}x{grid_cols} grid does not tile {height}x{width}"
        )));
    }
    Ok(BlockLayout {
        channels,
        height,
        width,
        grid_rows,
        grid_cols,
    })
}

fn read_flag(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        f => Err(Error::Format(format!("invalid flag byte {f}"))),
    }
}

fn read_permutation(r: &mut Reader, t: usize) -> Result<Permutation> {
    let seed = r.u64()?;
    let indices = (0..t).map(|_| r.u32_raw()).collect::<Result<Vec<_>>>()?;
    Permutation::new(indices, seed).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Default)]
pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32_raw(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.u32_raw()
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.data.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes_disguise::keygen_aes;
    use crate::rmt::keygen_rmt;

    #[test]
    fn header_layout() {
        let key = KeyMaterial::InstaHide(MixupKey {
            channels: 1,
            height: 28,
            width: 28,
            k_mix: 4,
            master_seed: 0x0102_0304_0506_0708,
        });
        let bytes = key.to_bytes();
        assert_eq!(&bytes[..4], b"DGKY");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(bytes[15], PRNG_CHACHA8);
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(KeyMaterial::from_bytes(&bytes).unwrap(), key);
    }

    #[test]
    fn rmt_and_aes_round_trip() {
        let rmt = KeyMaterial::Rmt(
            keygen_rmt(
                9,
                3,
                (32, 32),
                16,
                NoiseSpec::new(25.0, false).unwrap(),
                false,
            )
            .unwrap(),
        );
        assert_eq!(KeyMaterial::from_bytes(&rmt.to_bytes()).unwrap(), rmt);
        let aes =
            KeyMaterial::Aes(keygen_aes(9, 1, (28, 28), 49, 0.02, 1, CipherMode::Ecb).unwrap());
        assert_eq!(KeyMaterial::from_bytes(&aes.to_bytes()).unwrap(), aes);
        assert_ne!(rmt.fingerprint(), aes.fingerprint());
        assert_eq!(rmt.fingerprint().len(), 16);
    }

    #[test]
    fn corrupt_files_rejected() {
        let aes =
            KeyMaterial::Aes(keygen_aes(9, 1, (28, 28), 49, 0.02, 1, CipherMode::Ecb).unwrap());
        let bytes = aes.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(KeyMaterial::from_bytes(&bad).is_err());
        assert!(KeyMaterial::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(KeyMaterial::from_bytes(&long).is_err());
        let mut tag = bytes;
        tag[6] = 7;
        assert!(KeyMaterial::from_bytes(&tag).is_err());
    }
}
