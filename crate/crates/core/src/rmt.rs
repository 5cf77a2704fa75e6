//! Randomized multidimensional transformation: block permutation followed by
//! a secret per-position linear map `Y_i = R_i (X_i + D_i)` with optional
//! uniform noise `D_i` in `[0, N]`.
//!
//! Every `r x s` block is treated as `s` column vectors of length `r`, so each
//! `R_i` is `r x r` and left-multiplies the block. All channels of a block
//! share the same `R_i`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::blocks::{self, BlockLayout, Permutation};
use crate::error::{Error, Result};
use crate::image::{Image, Pixels};
use crate::rng::{derive_seed, stream, SeededRng};

/// Condition-number ceiling for random invertible (non-orthogonal) keys.
pub const MAX_CONDITION: f64 = 1e6;

/// Multiplication side of `R_i`. Only left multiplication is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub level: f64,
    /// Draw a fresh noise matrix per image and block. When false, one noise
    /// matrix per block position is shared by the whole dataset.
    pub per_image: bool,
}

impl NoiseSpec {
    pub fn new(level: f64, per_image: bool) -> Result<Self> {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise level must be a non-negative finite number, got {level}"
            )));
        }
        Ok(Self { level, per_image })
    }

    pub fn none() -> Self {
        Self {
            level: 0.0,
            per_image: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmtKey {
    pub layout: BlockLayout,
    pub permutation: Permutation,
    pub matrices: Vec<DMatrix<f64>>,
    pub noise: NoiseSpec,
    pub orthogonal: bool,
    pub orientation: Orientation,
    pub master_seed: u64,
}

impl RmtKey {
    /// Checks shapes and invertibility of stored key material.
    pub fn validate(&self) -> Result<()> {
        let t = self.layout.t();
        let r = self.layout.block_rows();
        if self.permutation.len() != t {
            return Err(Error::PermutationLength {
                expected: t,
                got: self.permutation.len(),
            });
        }
        if self.matrices.len() != t {
            return Err(Error::Config(format!(
                "key holds {} matrices for {t} block positions",
                self.matrices.len()
            )));
        }
        for (i, mat) in self.matrices.iter().enumerate() {
            if mat.nrows() != r || mat.ncols() != r {
                return Err(Error::Config(format!(
                    "matrix {i} is {}x{}, expected {r}x{r}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        NoiseSpec::new(self.noise.level, self.noise.per_image)?;
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut SeededRng, m: usize) -> DMatrix<f64> {
    // Row-major fill so the draw order is independent of storage order.
    let mut mat = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            mat[(i, j)] = rng.gaussian();
        }
    }
    mat
}

/// Haar-distributed random orthogonal `m x m` matrix: QR of a Gaussian
/// matrix with the columns of `Q` sign-corrected so `diag(R) > 0`.
pub fn gen_orthogonal(seed: u64, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter(
            "matrix size must be at least 1".into(),
        ));
    }
    let mut rng = SeededRng::new(seed);
    let qr = gaussian_matrix(&mut rng, m).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

pub fn condition_number(mat: &DMatrix<f64>) -> f64 {
    let sv = mat.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Gaussian random matrix, redrawn until its condition number is at most
/// [`MAX_CONDITION`].
pub fn gen_invertible(seed: u64, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter(
            "matrix size must be at least 1".into(),
        ));
    }
    let mut rng = SeededRng::new(seed);
    loop {
        let mat = gaussian_matrix(&mut rng, m);
        if condition_number(&mat) <= MAX_CONDITION {
            return Ok(mat);
        }
    }
}

pub fn keygen_rmt(
    master_seed: u64,
    channels: usize,
    (height, width): (usize, usize),
    t: usize,
    noise: NoiseSpec,
    orthogonal: bool,
) -> Result<RmtKey> {
    let layout = BlockLayout::new(channels, height, width, t)?;
    let noise = NoiseSpec::new(noise.level, noise.per_image)?;
    let permutation = blocks::gen_permutation(derive_seed(master_seed, &[stream::PERMUTATION]), t)?;
    let r = layout.block_rows();
    let matrices = (0..t)
        .map(|i| {
            let seed = derive_seed(master_seed, &[stream::MATRIX, i as u64]);
            if orthogonal {
                gen_orthogonal(seed, r)
            } else {
                gen_invertible(seed, r)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RmtKey {
        layout,
        permutation,
        matrices,
        noise,
        orthogonal,
        orientation: Orientation::Left,
        master_seed,
    })
}

/// Noise stream for block position `block` of image `image_id`.
pub(crate) fn noise_rng(key: &RmtKey, image_id: u64, block: usize) -> SeededRng {
    if key.noise.per_image {
        SeededRng::child(key.master_seed, &[stream::NOISE, image_id, block as u64])
    } else {
        SeededRng::child(key.master_seed, &[stream::NOISE, block as u64])
    }
}

/// Views one channel of a planar block as an `r x s` matrix.
pub(crate) fn block_channel(values: &[f64], c: usize, r: usize, s: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, s, &values[c * r * s..(c + 1) * r * s])
}

fn write_channel(dst: &mut [f64], mat: &DMatrix<f64>, c: usize) {
    let (r, s) = mat.shape();
    for y in 0..r {
        for x in 0..s {
            dst[c * r * s + y * s + x] = mat[(y, x)];
        }
    }
}

/// Permuted blocks of `image` as `f64` buffers, in disguised block order.
pub(crate) fn permuted_blocks(
    image: &Image,
    layout: &BlockLayout,
    perm: &Permutation,
) -> Result<Vec<Vec<f64>>> {
    layout.check_image(image)?;
    let grid = blocks::permute(&blocks::partition(image, layout.t())?, perm)?;
    Ok(grid.blocks.iter().map(Pixels::to_f64).collect())
}

/// Disguises one image. `image_id` selects the noise stream when noise is
/// drawn per image. The result is real-valued.
pub fn disguise_rmt(image: &Image, key: &RmtKey, image_id: u64) -> Result<Image> {
    key.layout.check_image(image)?;
    let (c, r, s) = (
        key.layout.channels,
        key.layout.block_rows(),
        key.layout.block_cols(),
    );
    let mut grid = blocks::permute(&blocks::partition(image, key.layout.t())?, &key.permutation)?;
    for (i, block) in grid.blocks.iter_mut().enumerate() {
        let mut values = block.to_f64();
        if key.noise.level > 0.0 {
            let mut rng = noise_rng(key, image_id, i);
            for v in values.iter_mut() {
                *v += key.noise.level * rng.uniform();
            }
        }
        let mut out = vec![0.0; values.len()];
        for ch in 0..c {
            let y = &key.matrices[i] * block_channel(&values, ch, r, s);
            write_channel(&mut out, &y, ch);
        }
        *block = Pixels::Real(out);
    }
    blocks::reassemble(&grid)
}

/// Disguises a dataset; image `k` uses image id `k`.
pub fn disguise_rmt_all(images: &[Image], key: &RmtKey) -> Result<Vec<Image>> {
    images
        .par_iter()
        .enumerate()
        .map(|(id, img)| disguise_rmt(img, key, id as u64))
        .collect()
}

fn inverse_matrices(key: &RmtKey) -> Result<Vec<DMatrix<f64>>> {
    key.matrices
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if key.orthogonal {
                Ok(m.transpose())
            } else {
                m.clone()
                    .try_inverse()
                    .ok_or_else(|| Error::Singular(format!("key matrix {i} is not invertible")))
            }
        })
        .collect()
}

/// Applies `R_i^{-1}` per block and undoes the permutation. The result equals
/// the original plus the noise that was added.
pub fn recover_rmt(disguised: &Image, key: &RmtKey) -> Result<Image> {
    let inverses = inverse_matrices(key)?;
    recover_with(disguised, key, &inverses)
}

pub fn recover_rmt_all(disguised: &[Image], key: &RmtKey) -> Result<Vec<Image>> {
    let inverses = inverse_matrices(key)?;
    disguised
        .par_iter()
        .map(|img| recover_with(img, key, &inverses))
        .collect()
}

fn recover_with(disguised: &Image, key: &RmtKey, inverses: &[DMatrix<f64>]) -> Result<Image> {
    key.layout.check_image(disguised)?;
    let (c, r, s) = (
        key.layout.channels,
        key.layout.block_rows(),
        key.layout.block_cols(),
    );
    let mut grid = blocks::partition(&disguised.to_real(), key.layout.t())?;
    for (i, block) in grid.blocks.iter_mut().enumerate() {
        let values = block.to_f64();
        let mut out = vec![0.0; values.len()];
        for ch in 0..c {
            let x = &inverses[i] * block_channel(&values, ch, r, s);
            write_channel(&mut out, &x, ch);
        }
        *block = Pixels::Real(out);
    }
    let grid = blocks::inverse_permute(&grid, &key.permutation)?;
    blocks::reassemble(&grid)
}
