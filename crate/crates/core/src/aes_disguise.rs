//! Block permutation plus per-position AES-128 encryption of 16-byte units,
//! with optional pixel-replication scale-up and salt-and-pepper noise.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use rayon::prelude::*;

use crate::blocks::{self, BlockGrid, BlockLayout, Permutation};
use crate::error::{Error, Result};
use crate::image::{Image, Pixels};
use crate::rng::{derive_seed, stream, SeededRng};

pub const UNIT_SIZE: usize = 16;

pub type Unit = [u8; UNIT_SIZE];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherMode {
    /// Each unit encrypted independently.
    Ecb,
    /// Units chained within a pixel block from a zero IV. Only useful to show
    /// how chaining destroys unit-level repeat structure.
    Cbc,
}

/// Single-block AES-128 encryption.
pub fn encrypt_unit(unit: &[u8], cipher_key: &[u8]) -> Result<Unit> {
    if unit.len() != UNIT_SIZE {
        return Err(Error::InvalidParameter(format!(
            "encryption unit must be {UNIT_SIZE} bytes, got {}",
            unit.len()
        )));
    }
    if cipher_key.len() != UNIT_SIZE {
        return Err(Error::InvalidParameter(format!(
            "cipher key must be {UNIT_SIZE} bytes, got {}",
            cipher_key.len()
        )));
    }
    let cipher = Aes128::new(GenericArray::from_slice(cipher_key));
    let mut block = GenericArray::clone_from_slice(unit);
    cipher.encrypt_block(&mut block);
    Ok(block.into())
}

pub fn decrypt_unit(unit: &[u8], cipher_key: &[u8]) -> Result<Unit> {
    if unit.len() != UNIT_SIZE || cipher_key.len() != UNIT_SIZE {
        return Err(Error::InvalidParameter(format!(
            "unit and key must be {UNIT_SIZE} bytes, got {} and {}",
            unit.len(),
            cipher_key.len()
        )));
    }
    let cipher = Aes128::new(GenericArray::from_slice(cipher_key));
    let mut block = GenericArray::clone_from_slice(unit);
    cipher.decrypt_block(&mut block);
    Ok(block.into())
}

/// Pixel replication: `out[y][x] = in[y / ky][x / kx]`.
pub fn scale_up(image: &Image, kx: usize, ky: usize) -> Result<Image> {
    if kx == 0 || ky == 0 {
        return Err(Error::InvalidParameter(
            "scale factors must be at least 1".into(),
        ));
    }
    let (c, l, m) = image.dims();
    if kx == 1 && ky == 1 {
        return Ok(image.clone());
    }
    let (ol, om) = (l * ky, m * kx);
    let src = (0..c).flat_map(|ch| {
        (0..ol).flat_map(move |y| (0..om).map(move |x| (ch * l + y / ky) * m + x / kx))
    });
    let pixels = image.pixels().gather(src);
    Ok(Image::new(c, ol, om, pixels)?.with_label(image.label()))
}

/// Each `ky x kx` tile becomes the round-half-up mean of its pixels.
pub fn scale_down(image: &Image, kx: usize, ky: usize) -> Result<Image> {
    if kx == 0 || ky == 0 {
        return Err(Error::InvalidParameter(
            "scale factors must be at least 1".into(),
        ));
    }
    let (c, l, m) = image.dims();
    if l % ky != 0 || m % kx != 0 {
        return Err(Error::Dimension(format!(
            "{l}x{m} image is not divisible into {ky}x{kx} tiles"
        )));
    }
    let bytes = image
        .as_bytes()
        .ok_or_else(|| Error::InvalidParameter("scale_down expects a byte image".into()))?;
    let (ol, om) = (l / ky, m / kx);
    let n = (kx * ky) as u32;
    let mut out = Vec::with_capacity(c * ol * om);
    for ch in 0..c {
        for ty in 0..ol {
            for tx in 0..om {
                let mut sum = 0u32;
                for dy in 0..ky {
                    let row = (ch * l + ty * ky + dy) * m + tx * kx;
                    sum += bytes[row..row + kx]
                        .iter()
                        .map(|&b| u32::from(b))
                        .sum::<u32>();
                }
                out.push(((2 * sum + n) / (2 * n)) as u8);
            }
        }
    }
    Ok(Image::from_bytes(c, ol, om, out)?.with_label(image.label()))
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "salt-and-pepper probability must be in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Flips each byte to 0 or 255 with probability `p`; records flipped
/// positions in `mask` when given.
fn salt_pepper_bytes(buf: &mut [u8], p: f64, rng: &mut SeededRng, mut mask: Option<&mut [u8]>) {
    for (i, v) in buf.iter_mut().enumerate() {
        if rng.uniform() < p {
            *v = if rng.uniform() < 0.5 { 0 } else { 255 };
            if let Some(m) = mask.as_deref_mut() {
                m[i] = 1;
            }
        }
    }
}

pub fn salt_pepper(image: &Image, p: f64, seed: u64) -> Result<Image> {
    salt_pepper_with_mask(image, p, seed).map(|(img, _)| img)
}

/// Like [`salt_pepper`], also returning which pixels were replaced.
pub fn salt_pepper_with_mask(image: &Image, p: f64, seed: u64) -> Result<(Image, Vec<bool>)> {
    check_probability(p)?;
    let mut bytes = image
        .as_bytes()
        .ok_or_else(|| {
            Error::InvalidParameter("salt-and-pepper noise expects a byte image".into())
        })?
        .to_vec();
    let mut mask = vec![0u8; bytes.len()];
    salt_pepper_bytes(&mut bytes, p, &mut SeededRng::new(seed), Some(&mut mask));
    let (c, l, m) = image.dims();
    let out = Image::from_bytes(c, l, m, bytes)?.with_label(image.label());
    Ok((out, mask.into_iter().map(|b| b == 1).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AesKey {
    /// Layout of the scaled-up image that is actually encrypted.
    pub layout: BlockLayout,
    pub scale: usize,
    pub permutation: Permutation,
    pub block_keys: Vec<Unit>,
    pub salt_pepper_p: f64,
    pub mode: CipherMode,
    pub master_seed: u64,
}

impl AesKey {
    /// Dimensions of the images this key accepts (before scale-up).
    pub fn source_dims(&self) -> (usize, usize, usize) {
        (
            self.layout.channels,
            self.layout.height / self.scale,
            self.layout.width / self.scale,
        )
    }

    pub fn units_per_block(&self) -> usize {
        self.layout.channels * self.layout.block_rows() * self.layout.block_cols() / UNIT_SIZE
    }

    pub fn units_per_image(&self) -> usize {
        self.units_per_block() * self.layout.t()
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(&self.layout)?;
        check_probability(self.salt_pepper_p)?;
        if self.scale == 0 {
            return Err(Error::Config("scale factor must be at least 1".into()));
        }
        if self.block_keys.len() != self.layout.t() || self.permutation.len() != self.layout.t() {
            return Err(Error::Config(format!(
                "key holds {} cipher keys and {} permutation entries for {} blocks",
                self.block_keys.len(),
                self.permutation.len(),
                self.layout.t()
            )));
        }
        Ok(())
    }
}

fn check_layout(layout: &BlockLayout) -> Result<()> {
    let block_bytes = layout.channels * layout.block_rows() * layout.block_cols();
    if !block_bytes.is_multiple_of(UNIT_SIZE) {
        return Err(Error::Config(format!(
            "{}x{} blocks with {} channel(s) hold {block_bytes} bytes, not a multiple of {UNIT_SIZE}",
            layout.block_rows(),
            layout.block_cols(),
            layout.channels
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn keygen_aes(
    master_seed: u64,
    channels: usize,
    (height, width): (usize, usize),
    t: usize,
    salt_pepper_p: f64,
    scale: usize,
    mode: CipherMode,
) -> Result<AesKey> {
    if scale == 0 {
        return Err(Error::Config("scale factor must be at least 1".into()));
    }
    check_probability(salt_pepper_p)?;
    let layout = BlockLayout::new(channels, height * scale, width * scale, t)?;
    check_layout(&layout)?;
    let permutation = blocks::gen_permutation(derive_seed(master_seed, &[stream::PERMUTATION]), t)?;
    let block_keys = (0..t)
        .map(|i| {
            let mut key = [0u8; UNIT_SIZE];
            SeededRng::child(master_seed, &[stream::CIPHER_KEY, i as u64]).fill_bytes(&mut key);
            key
        })
        .collect();
    Ok(AesKey {
        layout,
        scale,
        permutation,
        block_keys,
        salt_pepper_p,
        mode,
        master_seed,
    })
}

/// Encrypted image (scale-up resolution) and, when `scale > 1`, its
/// scaled-down companion at the source resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AesDisguised {
    pub encrypted: Image,
    pub view: Option<Image>,
}

/// Planar `channels x r x s` block to unit byte order (row-major, channel last).
pub(crate) fn planar_to_units(block: &[u8], c: usize, r: usize, s: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(block.len());
    for y in 0..r {
        for x in 0..s {
            for ch in 0..c {
                out.push(block[(ch * r + y) * s + x]);
            }
        }
    }
    out
}

pub(crate) fn units_to_planar(units: &[u8], c: usize, r: usize, s: usize) -> Vec<u8> {
    let mut out = vec![0u8; units.len()];
    for y in 0..r {
        for x in 0..s {
            for ch in 0..c {
                out[(ch * r + y) * s + x] = units[(y * s + x) * c + ch];
            }
        }
    }
    out
}

fn encrypt_stream(buf: &mut [u8], cipher: &Aes128, mode: CipherMode) {
    let mut prev = [0u8; UNIT_SIZE];
    for chunk in buf.chunks_exact_mut(UNIT_SIZE) {
        if mode == CipherMode::Cbc {
            chunk.iter_mut().zip(prev.iter()).for_each(|(b, p)| *b ^= p);
        }
        cipher.encrypt_block(GenericArray::from_mut_slice(chunk));
        prev.copy_from_slice(chunk);
    }
}

fn decrypt_stream(buf: &mut [u8], cipher: &Aes128, mode: CipherMode) {
    let mut prev = [0u8; UNIT_SIZE];
    for chunk in buf.chunks_exact_mut(UNIT_SIZE) {
        let this: Unit = chunk.try_into().expect("exact chunk");
        cipher.decrypt_block(GenericArray::from_mut_slice(chunk));
        if mode == CipherMode::Cbc {
            chunk.iter_mut().zip(prev.iter()).for_each(|(b, p)| *b ^= p);
        }
        prev = this;
    }
}

fn block_bytes(block: &Pixels) -> &[u8] {
    match block {
        Pixels::Byte(v) => v,
        Pixels::Real(_) => unreachable!("AES path only handles byte grids"),
    }
}

/// Scaled-up, partitioned and permuted source image.
pub(crate) fn prepare_grid(image: &Image, key: &AesKey) -> Result<BlockGrid> {
    if image.dims() != key.source_dims() {
        let (c, l, m) = key.source_dims();
        return Err(Error::Dimension(format!(
            "image is {:?}, key expects {c}x{l}x{m}",
            image.dims()
        )));
    }
    if image.as_bytes().is_none() {
        return Err(Error::InvalidParameter(
            "AES disguising expects a byte image".into(),
        ));
    }
    let scaled = scale_up(image, key.scale, key.scale)?;
    blocks::permute(
        &blocks::partition(&scaled, key.layout.t())?,
        &key.permutation,
    )
}

fn disguise_inner(
    image: &Image,
    key: &AesKey,
    image_id: u64,
    trace: bool,
) -> Result<(AesDisguised, Option<Image>)> {
    let mut grid = prepare_grid(image, key)?;
    let (c, r, s) = (
        key.layout.channels,
        key.layout.block_rows(),
        key.layout.block_cols(),
    );
    let mut masks = trace.then(|| grid.clone());
    for (i, block) in grid.blocks.iter_mut().enumerate() {
        let mut planar = block_bytes(block).to_vec();
        if key.salt_pepper_p > 0.0 {
            let mut rng =
                SeededRng::child(key.master_seed, &[stream::SALT_PEPPER, image_id, i as u64]);
            let mut mask = vec![0u8; planar.len()];
            salt_pepper_bytes(&mut planar, key.salt_pepper_p, &mut rng, Some(&mut mask));
            if let Some(m) = masks.as_mut() {
                m.blocks[i] = Pixels::Byte(mask);
            }
        } else if let Some(m) = masks.as_mut() {
            m.blocks[i] = Pixels::Byte(vec![0; planar.len()]);
        }
        let mut units = planar_to_units(&planar, c, r, s);
        let cipher = Aes128::new(GenericArray::from_slice(&key.block_keys[i]));
        encrypt_stream(&mut units, &cipher, key.mode);
        *block = Pixels::Byte(units_to_planar(&units, c, r, s));
    }
    let encrypted = blocks::reassemble(&grid)?;
    let view = (key.scale > 1)
        .then(|| scale_down(&encrypted, key.scale, key.scale))
        .transpose()?;
    let mask = masks
        .map(|m| blocks::reassemble(&blocks::inverse_permute(&m, &key.permutation)?))
        .transpose()?;
    Ok((AesDisguised { encrypted, view }, mask))
}

pub fn disguise_aes(image: &Image, key: &AesKey, image_id: u64) -> Result<AesDisguised> {
    disguise_inner(image, key, image_id, false).map(|(d, _)| d)
}

/// Also returns the salt-and-pepper mask in scaled-up, unpermuted
/// coordinates (one flag per pixel value).
pub fn disguise_aes_traced(
    image: &Image,
    key: &AesKey,
    image_id: u64,
) -> Result<(AesDisguised, Vec<bool>)> {
    let (d, mask) = disguise_inner(image, key, image_id, true)?;
    let mask = mask
        .expect("traced run records a mask")
        .as_bytes()
        .expect("mask is bytes")
        .iter()
        .map(|&b| b == 1)
        .collect();
    Ok((d, mask))
}

pub fn disguise_aes_all(images: &[Image], key: &AesKey) -> Result<Vec<AesDisguised>> {
    images
        .par_iter()
        .enumerate()
        .map(|(id, img)| disguise_aes(img, key, id as u64))
        .collect()
}

/// Keyed inverse of [`disguise_aes`] on the scaled-up encrypted image.
/// Returns the noised, scaled-up source image.
pub fn decrypt_with_key(disguised: &Image, key: &AesKey) -> Result<Image> {
    if disguised.dims() != key.layout.dims() {
        return Err(Error::Alignment(format!(
            "encrypted image is {:?}, key units tile {:?}",
            disguised.dims(),
            key.layout.dims()
        )));
    }
    if disguised.as_bytes().is_none() {
        return Err(Error::Alignment("encrypted image must hold bytes".into()));
    }
    let (c, r, s) = (
        key.layout.channels,
        key.layout.block_rows(),
        key.layout.block_cols(),
    );
    let mut grid = blocks::partition(disguised, key.layout.t())?;
    for (i, block) in grid.blocks.iter_mut().enumerate() {
        let mut units = planar_to_units(block_bytes(block), c, r, s);
        let cipher = Aes128::new(GenericArray::from_slice(&key.block_keys[i]));
        decrypt_stream(&mut units, &cipher, key.mode);
        *block = Pixels::Byte(units_to_planar(&units, c, r, s));
    }
    blocks::reassemble(&blocks::inverse_permute(&grid, &key.permutation)?)
}

/// [`decrypt_with_key`] followed by scale-down to the source resolution.
pub fn recover_aes(disguised: &Image, key: &AesKey) -> Result<Image> {
    let scaled = decrypt_with_key(disguised, key)?;
    scale_down(&scaled, key.scale, key.scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex16(s: &str) -> Vec<u8> {
        (0..16)
            .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap())
            .collect()
    }

    fn random_image(seed: u64, c: usize, l: usize, m: usize) -> Image {
        let mut rng = SeededRng::new(seed);
        let data = (0..c * l * m).map(|_| rng.below(256) as u8).collect();
        Image::from_bytes(c, l, m, data).unwrap()
    }

    #[test]
    fn fips197_vector() {
        let key = hex16("000102030405060708090a0b0c0d0e0f");
        let pt = hex16("00112233445566778899aabbccddeeff");
        let ct = encrypt_unit(&pt, &key).unwrap();
        assert_eq!(ct.to_vec(), hex16("69c4e0d86a7b0430d8cdb78070b4c55a"));
        assert_eq!(decrypt_unit(&ct, &key).unwrap().to_vec(), pt);
    }

    #[test]
    fn unit_size_errors() {
        assert!(encrypt_unit(&[0; 15], &[0; 16]).is_err());
        assert!(encrypt_unit(&[0; 16], &[0; 17]).is_err());
    }

    #[test]
    fn ecb_determinism_and_key_dependence() {
        let key = keygen_aes(5, 1, (16, 16), 4, 0.0, 1, CipherMode::Ecb).unwrap();
        let unit = [7u8; 16];
        let a = encrypt_unit(&unit, &key.block_keys[0]).unwrap();
        assert_eq!(a, encrypt_unit(&unit, &key.block_keys[0]).unwrap());
        assert_ne!(a, encrypt_unit(&unit, &key.block_keys[1]).unwrap());
    }

    #[test]
    fn scale_up_cases() {
        let img = random_image(1, 1, 5, 5);
        assert_eq!(scale_up(&img, 1, 1).unwrap(), img);
        let small = Image::from_bytes(1, 2, 2, vec![1, 2, 3, 4]).unwrap();
        let big = scale_up(&small, 2, 2).unwrap();
        assert_eq!(
            big.as_bytes().unwrap(),
            &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
        let cifar = random_image(2, 3, 32, 32);
        assert_eq!(scale_up(&cifar, 8, 8).unwrap().dims(), (3, 256, 256));
        let rect = scale_up(&small, 3, 1).unwrap();
        assert_eq!(rect.dims(), (1, 2, 6));
        assert_eq!(
            rect.as_bytes().unwrap(),
            &[1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
        );
    }

    #[test]
    fn scale_down_cases() {
        let c = Image::filled(1, 8, 8, 77).unwrap();
        assert_eq!(scale_down(&c, 4, 4).unwrap().as_bytes().unwrap(), &[77; 4]);
        let img = random_image(3, 3, 6, 6);
        assert_eq!(
            scale_down(&scale_up(&img, 3, 3).unwrap(), 3, 3).unwrap(),
            img
        );
        let tile = Image::from_bytes(1, 2, 2, vec![0, 255, 0, 255]).unwrap();
        assert_eq!(scale_down(&tile, 2, 2).unwrap().as_bytes().unwrap(), &[128]);
        assert!(matches!(scale_down(&img, 4, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn salt_pepper_extremes() {
        let img = random_image(4, 1, 20, 20);
        assert_eq!(salt_pepper(&img, 0.0, 1).unwrap(), img);
        let all = salt_pepper(&img, 1.0, 1).unwrap();
        assert!(all.as_bytes().unwrap().iter().all(|&b| b == 0 || b == 255));
        assert!(salt_pepper(&img, 1.5, 1).is_err());
        assert!(salt_pepper(&img, -0.1, 1).is_err());
        assert_eq!(
            salt_pepper(&img, 0.3, 9).unwrap(),
            salt_pepper(&img, 0.3, 9).unwrap()
        );
    }

    #[test]
    fn keygen_enforces_unit_tiling() {
        // 28x28 into 16 blocks gives 7x7 = 49 bytes per block.
        assert!(matches!(
            keygen_aes(1, 1, (28, 28), 16, 0.0, 1, CipherMode::Ecb),
            Err(Error::Config(_))
        ));
        // 49 blocks of 4x4.
        let key = keygen_aes(1, 1, (28, 28), 49, 0.0, 1, CipherMode::Ecb).unwrap();
        assert_eq!(key.units_per_image(), 49);
        key.validate().unwrap();
    }

    #[test]
    fn exact_round_trip_without_noise() {
        let key = keygen_aes(2, 3, (32, 32), 16, 0.0, 1, CipherMode::Ecb).unwrap();
        let img = random_image(5, 3, 32, 32);
        let d = disguise_aes(&img, &key, 0).unwrap();
        assert!(d.view.is_none());
        assert_ne!(d.encrypted, img);
        assert_eq!(decrypt_with_key(&d.encrypted, &key).unwrap(), img);
    }

    #[test]
    fn cbc_round_trip() {
        let key = keygen_aes(2, 1, (16, 16), 4, 0.0, 1, CipherMode::Cbc).unwrap();
        let img = random_image(6, 1, 16, 16);
        let d = disguise_aes(&img, &key, 0).unwrap();
        assert_eq!(decrypt_with_key(&d.encrypted, &key).unwrap(), img);
    }

    #[test]
    fn noise_only_at_flipped_pixels() {
        let key = keygen_aes(3, 1, (28, 28), 49, 0.02, 1, CipherMode::Ecb).unwrap();
        let img = random_image(7, 1, 28, 28);
        let (d, mask) = disguise_aes_traced(&img, &key, 4).unwrap();
        let rec = decrypt_with_key(&d.encrypted, &key).unwrap();
        assert!(mask.iter().any(|&m| m));
        for ((a, b), m) in rec
            .as_bytes()
            .unwrap()
            .iter()
            .zip(img.as_bytes().unwrap())
            .zip(&mask)
        {
            if !m {
                assert_eq!(a, b);
            } else {
                assert!(*a == 0 || *a == 255);
            }
        }
    }

    #[test]
    fn wrong_key_is_garbage() {
        let key = keygen_aes(3, 1, (28, 28), 49, 0.0, 1, CipherMode::Ecb).unwrap();
        let other = keygen_aes(4, 1, (28, 28), 49, 0.0, 1, CipherMode::Ecb).unwrap();
        let img = Image::filled(1, 28, 28, 0).unwrap();
        let d = disguise_aes(&img, &key, 0).unwrap();
        let rec = decrypt_with_key(&d.encrypted, &other).unwrap();
        let mae = rec
            .as_bytes()
            .unwrap()
            .iter()
            .map(|&b| f64::from(b))
            .sum::<f64>()
            / 784.0;
        assert!(mae > 64.0, "mae={mae}");
    }

    #[test]
    fn misaligned_input_rejected() {
        let key = keygen_aes(3, 1, (28, 28), 49, 0.0, 1, CipherMode::Ecb).unwrap();
        let img = random_image(1, 1, 32, 32);
        assert!(matches!(
            decrypt_with_key(&img, &key),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn scaled_view_has_source_size() {
        let key = keygen_aes(8, 3, (32, 32), 64, 0.0, 8, CipherMode::Ecb).unwrap();
        let img = random_image(9, 3, 32, 32);
        let d = disguise_aes(&img, &key, 0).unwrap();
        assert_eq!(d.encrypted.dims(), (3, 256, 256));
        assert_eq!(d.view.as_ref().unwrap().dims(), (3, 32, 32));
        assert_eq!(recover_aes(&d.encrypted, &key).unwrap(), img);
    }
}
