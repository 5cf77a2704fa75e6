//! Pixel-block partitioning, block permutation and reassembly.

use crate::error::{Error, Result};
use crate::image::{Image, Pixels};
use crate::rng::SeededRng;

/// A bijection on `0..t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    indices: Vec<u32>,
    seed: u64,
}

impl Permutation {
    pub fn new(indices: Vec<u32>, seed: u64) -> Result<Self> {
        let mut seen = vec![false; indices.len()];
        for &i in &indices {
            let i = i as usize;
            if i >= seen.len() || seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "permutation index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { indices, seed })
    }

    pub fn identity(t: usize) -> Self {
        Self {
            indices: (0..t as u32).collect(),
            seed: 0,
        }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.indices
            .iter()
            .enumerate()
            .all(|(j, &i)| i as usize == j)
    }

    /// `inverse()[indices[j]] == j`.
    pub fn inverse(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.indices.len()];
        for (j, &i) in self.indices.iter().enumerate() {
            inv[i as usize] = j as u32;
        }
        inv
    }
}

/// Image and block dimensions shared by every image under one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl BlockLayout {
    pub fn new(channels: usize, height: usize, width: usize, t: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        let (grid_rows, grid_cols) = grid_factorization(height, width, t)?;
        Ok(Self {
            channels,
            height,
            width,
            grid_rows,
            grid_cols,
        })
    }

    pub fn t(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn block_rows(&self) -> usize {
        self.height / self.grid_rows
    }

    pub fn block_cols(&self) -> usize {
        self.width / self.grid_cols
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.dims() != self.dims() {
            let (c, l, m) = image.dims();
            return Err(Error::Dimension(format!(
                "image is {c}x{l}x{m}, key expects {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Uniform random permutation of `0..t` by Fisher-Yates.
pub fn gen_permutation(seed: u64, t: usize) -> Result<Permutation> {
    if t == 0 {
        return Err(Error::InvalidParameter(
            "block count must be at least 1".into(),
        ));
    }
    let mut indices: Vec<u32> = (0..t as u32).collect();
    SeededRng::new(seed).shuffle(&mut indices);
    Ok(Permutation { indices, seed })
}

/// Chooses `(grid_rows, grid_cols)` with `grid_rows * grid_cols == t`,
/// `grid_rows | l` and `grid_cols | m`, whose aspect ratio is closest to
/// `l / m`. Ties go to the smaller `grid_rows`.
pub fn grid_factorization(l: usize, m: usize, t: usize) -> Result<(usize, usize)> {
    let err = || Error::Partition { l, m, t };
    if t == 0 || l == 0 || m == 0 {
        return Err(err());
    }
    // Distance between gr/gc and l/m as the rational max(a,b)/min(a,b) with
    // a = gr*m, b = gc*l; compared exactly by cross-multiplication.
    let mut best: Option<(usize, usize, u128, u128)> = None;
    for gr in 1..=t {
        if !t.is_multiple_of(gr) {
            continue;
        }
        let gc = t / gr;
        if !l.is_multiple_of(gr) || !m.is_multiple_of(gc) {
            continue;
        }
        let a = (gr * m) as u128;
        let b = (gc * l) as u128;
        let (num, den) = (a.max(b), a.min(b));
        let better = match best {
            None => true,
            Some((_, _, bn, bd)) => num * bd < bn * den,
        };
        if better {
            best = Some((gr, gc, num, den));
        }
    }
    best.map(|(gr, gc, _, _)| (gr, gc)).ok_or_else(err)
}

/// An image cut into `t` uniform `r x s` blocks. Each block stores all
/// channels planar (`channels x r x s`). Blocks are row-major over the
/// block grid unless permuted.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub channels: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub origin_dims: (usize, usize),
    pub blocks: Vec<Pixels>,
    pub label: Option<u32>,
}

impl BlockGrid {
    pub fn t(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_len(&self) -> usize {
        self.channels * self.block_rows * self.block_cols
    }

    fn check_consistent(&self) -> Result<()> {
        let (l, m) = self.origin_dims;
        let expected = self.grid_rows * self.grid_cols;
        if self.t() != expected {
            return Err(Error::InconsistentGrid(format!(
                "{} blocks present, grid is {}x{}",
                self.t(),
                self.grid_rows,
                self.grid_cols
            )));
        }
        if self.grid_rows * self.block_rows != l || self.grid_cols * self.block_cols != m {
            return Err(Error::InconsistentGrid(format!(
                "{}x{} blocks of {}x{} do not tile {l}x{m}",
                self.grid_rows, self.grid_cols, self.block_rows, self.block_cols
            )));
        }
        if let Some(bad) = self.blocks.iter().position(|b| b.len() != self.block_len()) {
            return Err(Error::InconsistentGrid(format!(
                "block {bad} has {} values, expected {}",
                self.blocks[bad].len(),
                self.block_len()
            )));
        }
        if let Some(first) = self.blocks.first() {
            if self.blocks.iter().any(|b| b.dtype() != first.dtype()) {
                return Err(Error::InconsistentGrid("blocks have mixed dtypes".into()));
            }
        }
        Ok(())
    }
}

/// Pixel indices (planar, into the whole image) covered by block `(gi, gj)`,
/// in the block's own planar order.
fn block_indices(
    channels: usize,
    (l, m): (usize, usize),
    (r, s): (usize, usize),
    (gi, gj): (usize, usize),
) -> impl Iterator<Item = usize> {
    (0..channels).flat_map(move |c| {
        (0..r).flat_map(move |y| (0..s).map(move |x| (c * l + gi * r + y) * m + gj * s + x))
    })
}

/// Places `image` in the top-left corner of a `target_l x target_m` canvas
/// filled with `fill`.
pub fn pad_to(image: &Image, target_l: usize, target_m: usize, fill: u8) -> Result<Image> {
    let (c, l, m) = image.dims();
    if target_l < l || target_m < m {
        return Err(Error::Dimension(format!(
            "cannot pad {l}x{m} image to smaller target {target_l}x{target_m}"
        )));
    }
    let n = c * target_l * target_m;
    let mut out = match image.pixels() {
        Pixels::Byte(_) => Pixels::Byte(vec![fill; n]),
        Pixels::Real(_) => Pixels::Real(vec![f64::from(fill); n]),
    };
    let src_indices = 0..c * l * m;
    let dst_indices = (0..c).flat_map(|ch| {
        (0..l).flat_map(move |y| (0..m).map(move |x| (ch * target_l + y) * target_m + x))
    });
    out.scatter(&image.pixels().gather(src_indices), dst_indices);
    Ok(Image::new(c, target_l, target_m, out)?.with_label(image.label()))
}

pub fn partition(image: &Image, t: usize) -> Result<BlockGrid> {
    let (c, l, m) = image.dims();
    let (gr, gc) = grid_factorization(l, m, t)?;
    let (r, s) = (l / gr, m / gc);
    let blocks = (0..gr)
        .flat_map(|gi| (0..gc).map(move |gj| (gi, gj)))
        .map(|pos| image.pixels().gather(block_indices(c, (l, m), (r, s), pos)))
        .collect();
    Ok(BlockGrid {
        channels: c,
        block_rows: r,
        block_cols: s,
        grid_rows: gr,
        grid_cols: gc,
        origin_dims: (l, m),
        blocks,
        label: image.label(),
    })
}

/// Output block `j` is input block `permutation.indices()[j]`.
pub fn permute(grid: &BlockGrid, permutation: &Permutation) -> Result<BlockGrid> {
    if permutation.len() != grid.t() {
        return Err(Error::PermutationLength {
            expected: grid.t(),
            got: permutation.len(),
        });
    }
    let blocks = permutation
        .indices()
        .iter()
        .map(|&i| grid.blocks[i as usize].clone())
        .collect();
    Ok(BlockGrid {
        blocks,
        ..grid.clone()
    })
}

pub fn inverse_permute(grid: &BlockGrid, permutation: &Permutation) -> Result<BlockGrid> {
    if permutation.len() != grid.t() {
        return Err(Error::PermutationLength {
            expected: grid.t(),
            got: permutation.len(),
        });
    }
    let blocks = permutation
        .inverse()
        .iter()
        .map(|&j| grid.blocks[j as usize].clone())
        .collect();
    Ok(BlockGrid {
        blocks,
        ..grid.clone()
    })
}

pub fn reassemble(grid: &BlockGrid) -> Result<Image> {
    grid.check_consistent()?;
    let (l, m) = grid.origin_dims;
    let c = grid.channels;
    let n = c * l * m;
    let mut out = match grid.blocks.first() {
        Some(b) => b.zeros_like(n),
        None => return Err(Error::InconsistentGrid("grid has no blocks".into())),
    };
    for (k, block) in grid.blocks.iter().enumerate() {
        let pos = (k / grid.grid_cols, k % grid.grid_cols);
        out.scatter(
            block,
            block_indices(c, (l, m), (grid.block_rows, grid.block_cols), pos),
        );
    }
    Ok(Image::new(c, l, m, out)?.with_label(grid.label))
}
