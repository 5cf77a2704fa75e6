//! Known-pair attacks: the codebook attack on AES-ECB disguising, linear
//! regression estimation of RMT projection matrices, and the brute-force
//! key-space bound for orthogonal RMT keys.
//!
//! Both attacks assume the attacker knows the block layout and, by default,
//! the block permutation. Without the permutation the attacks align blocks
//! by position as if no permutation had been applied.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::aes_disguise::{self, planar_to_units, units_to_planar, AesKey, Unit, UNIT_SIZE};
use crate::blocks::{self, BlockLayout, Permutation};
use crate::error::{Error, Result};
use crate::image::{Image, Pixels};
use crate::rmt::{self, RmtKey};

/// An original image and its disguised form.
#[derive(Debug, Clone)]
pub struct KnownPair {
    pub original: Image,
    pub disguised: Image,
    pub image_id: u64,
}

/// What the attacker knows about the disguising configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerKnowledge {
    pub layout: BlockLayout,
    pub scale: usize,
    /// `None` means the attacker aligns blocks without un-permuting.
    pub permutation: Option<Permutation>,
}

impl AttackerKnowledge {
    pub fn from_aes_key(key: &AesKey, knows_permutation: bool) -> Self {
        Self {
            layout: key.layout,
            scale: key.scale,
            permutation: knows_permutation.then(|| key.permutation.clone()),
        }
    }

    pub fn from_rmt_key(key: &RmtKey, knows_permutation: bool) -> Self {
        Self {
            layout: key.layout,
            scale: 1,
            permutation: knows_permutation.then(|| key.permutation.clone()),
        }
    }

    fn permutation(&self) -> Permutation {
        self.permutation
            .clone()
            .unwrap_or_else(|| Permutation::identity(self.layout.t()))
    }

    fn source_dims(&self) -> (usize, usize, usize) {
        (
            self.layout.channels,
            self.layout.height / self.scale,
            self.layout.width / self.scale,
        )
    }
}

/// How unmatched ciphertext units are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadRule {
    #[default]
    Zero,
    /// Count-weighted mean of every plaintext unit in the codebook.
    MeanPlaintext,
}

/// Ciphertext unit to observed plaintext units with occurrence counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Codebook {
    entries: HashMap<Unit, HashMap<Unit, u64>>,
    pairs_consumed: usize,
}

impl Codebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn unit_size(&self) -> usize {
        UNIT_SIZE
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pairs_consumed(&self) -> usize {
        self.pairs_consumed
    }

    pub fn insert(&mut self, ciphertext: Unit, plaintext: Unit) {
        *self
            .entries
            .entry(ciphertext)
            .or_default()
            .entry(plaintext)
            .or_insert(0) += 1;
    }

    pub fn plaintexts(&self, ciphertext: &Unit) -> Option<&HashMap<Unit, u64>> {
        self.entries.get(ciphertext)
    }

    /// Number of ciphertext units that map to more than one plaintext.
    pub fn ambiguous_entries(&self) -> usize {
        self.entries.values().filter(|p| p.len() > 1).count()
    }

    /// Most frequent plaintext; ties go to the lexicographically smallest.
    pub fn lookup(&self, ciphertext: &Unit) -> Option<Unit> {
        self.entries.get(ciphertext).and_then(|candidates| {
            candidates
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|(p, _)| *p)
        })
    }

    pub fn merge(mut self, other: Codebook) -> Codebook {
        for (ct, plains) in other.entries {
            let slot = self.entries.entry(ct).or_default();
            for (pt, n) in plains {
                *slot.entry(pt).or_insert(0) += n;
            }
        }
        self.pairs_consumed += other.pairs_consumed;
        self
    }

    fn mean_plaintext(&self) -> Unit {
        let mut sums = [0u64; UNIT_SIZE];
        let mut total = 0u64;
        for plains in self.entries.values() {
            for (pt, &n) in plains {
                for (s, &b) in sums.iter_mut().zip(pt) {
                    *s += u64::from(b) * n;
                }
                total += n;
            }
        }
        let mut out = [0u8; UNIT_SIZE];
        if total > 0 {
            for (o, s) in out.iter_mut().zip(sums) {
                *o = ((2 * s + total) / (2 * total)) as u8;
            }
        }
        out
    }
}

fn image_units(grid_blocks: &[Pixels], layout: &BlockLayout) -> Vec<Unit> {
    let (c, r, s) = (layout.channels, layout.block_rows(), layout.block_cols());
    grid_blocks
        .iter()
        .flat_map(|b| match b {
            Pixels::Byte(v) => planar_to_units(v, c, r, s),
            Pixels::Real(_) => unreachable!("units are only formed from byte blocks"),
        })
        .collect::<Vec<u8>>()
        .chunks_exact(UNIT_SIZE)
        .map(|ch| ch.try_into().expect("exact chunk"))
        .collect()
}

fn ciphertext_units(disguised: &Image, knowledge: &AttackerKnowledge) -> Result<Vec<Unit>> {
    if disguised.dims() != knowledge.layout.dims() || disguised.as_bytes().is_none() {
        return Err(Error::Alignment(format!(
            "disguised image {:?} ({:?}) does not align with {:?} byte units",
            disguised.dims(),
            disguised.dtype(),
            knowledge.layout.dims()
        )));
    }
    let grid = blocks::partition(disguised, knowledge.layout.t())?;
    Ok(image_units(&grid.blocks, &knowledge.layout))
}

fn plaintext_units(original: &Image, knowledge: &AttackerKnowledge) -> Result<Vec<Unit>> {
    if original.dims() != knowledge.source_dims() || original.as_bytes().is_none() {
        return Err(Error::Dimension(format!(
            "known original {:?} does not match source dims {:?}",
            original.dims(),
            knowledge.source_dims()
        )));
    }
    let scaled = aes_disguise::scale_up(original, knowledge.scale, knowledge.scale)?;
    let grid = blocks::permute(
        &blocks::partition(&scaled, knowledge.layout.t())?,
        &knowledge.permutation(),
    )?;
    Ok(image_units(&grid.blocks, &knowledge.layout))
}

/// Builds a codebook from every aligned unit of every known pair.
pub fn build_codebook(pairs: &[KnownPair], knowledge: &AttackerKnowledge) -> Result<Codebook> {
    pairs
        .par_iter()
        .map(|pair| {
            let plain = plaintext_units(&pair.original, knowledge)?;
            let cipher = ciphertext_units(&pair.disguised, knowledge)?;
            let mut book = Codebook::new();
            for (ct, pt) in cipher.into_iter().zip(plain) {
                book.insert(ct, pt);
            }
            book.pairs_consumed = 1;
            Ok(book)
        })
        .try_reduce(Codebook::new, |a, b| Ok(a.merge(b)))
}

/// Replaces each ciphertext unit with its codebook plaintext (or the pad),
/// un-permutes and scales down to the source resolution. Returns the
/// reconstruction and the fraction of units found in the codebook.
pub fn codebook_attack(
    target: &Image,
    codebook: &Codebook,
    knowledge: &AttackerKnowledge,
    pad: PadRule,
) -> Result<(Image, f64)> {
    let pad_unit = match pad {
        PadRule::Zero => [0u8; UNIT_SIZE],
        PadRule::MeanPlaintext => codebook.mean_plaintext(),
    };
    attack_one(target, codebook, knowledge, &pad_unit)
}

fn attack_one(
    target: &Image,
    codebook: &Codebook,
    knowledge: &AttackerKnowledge,
    pad_unit: &Unit,
) -> Result<(Image, f64)> {
    let units = ciphertext_units(target, knowledge)?;
    let mut hits = 0usize;
    let recovered: Vec<u8> = units
        .iter()
        .flat_map(|ct| match codebook.lookup(ct) {
            Some(pt) => {
                hits += 1;
                pt
            }
            None => *pad_unit,
        })
        .collect();

    let layout = &knowledge.layout;
    let (c, r, s) = (layout.channels, layout.block_rows(), layout.block_cols());
    let block_len = c * r * s;
    let mut grid = blocks::partition(target, layout.t())?;
    for (block, bytes) in grid
        .blocks
        .iter_mut()
        .zip(recovered.chunks_exact(block_len))
    {
        *block = Pixels::Byte(units_to_planar(bytes, c, r, s));
    }
    let scaled = blocks::reassemble(&blocks::inverse_permute(&grid, &knowledge.permutation())?)?;
    let image = aes_disguise::scale_down(&scaled, knowledge.scale, knowledge.scale)?;
    Ok((image, hits as f64 / units.len() as f64))
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub reconstructed: Vec<Image>,
    /// Matched units over all units, pooled across targets.
    pub hit_rate: f64,
    pub per_image_hit: Vec<f64>,
    pub pairs_used: usize,
    pub noise_level: f64,
}

pub fn codebook_attack_all(
    targets: &[Image],
    codebook: &Codebook,
    knowledge: &AttackerKnowledge,
    pad: PadRule,
    noise_level: f64,
) -> Result<AttackReport> {
    let pad_unit = match pad {
        PadRule::Zero => [0u8; UNIT_SIZE],
        PadRule::MeanPlaintext => codebook.mean_plaintext(),
    };
    let results = targets
        .par_iter()
        .map(|t| attack_one(t, codebook, knowledge, &pad_unit))
        .collect::<Result<Vec<_>>>()?;
    let per_image_hit: Vec<f64> = results.iter().map(|(_, h)| *h).collect();
    let hit_rate = if per_image_hit.is_empty() {
        0.0
    } else {
        // Every target has the same unit count, so the pooled rate is the mean.
        per_image_hit.iter().sum::<f64>() / per_image_hit.len() as f64
    };
    Ok(AttackReport {
        reconstructed: results.into_iter().map(|(img, _)| img).collect(),
        hit_rate,
        per_image_hit,
        pairs_used: codebook.pairs_consumed(),
        noise_level,
    })
}

/// Which factorization produced a block estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverPath {
    Cholesky,
    Svd,
}

/// Normal-equation condition estimates above this use the SVD path.
pub const FALLBACK_CONDITION: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub matrix: DMatrix<f64>,
    /// Root-mean-square residual of `matrix * X - Y` per entry.
    pub residual_rms: f64,
    /// Condition number of the Gram matrix `X X^T`.
    pub condition: f64,
    pub solver: SolverPath,
}

/// Solves `min_R ||R X - Y||_F` for square `R`, where `X` and `Y` hold one
/// observation per column.
pub fn fit_projection(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LeastSquaresFit> {
    let (r, n) = x.shape();
    if y.shape() != (r, n) {
        return Err(Error::Dimension(format!(
            "design is {r}x{n}, response is {}x{}",
            y.nrows(),
            y.ncols()
        )));
    }
    if n < r {
        return Err(Error::Underdetermined(format!(
            "{n} columns cannot determine a {r}x{r} matrix"
        )));
    }
    let gram = x * x.transpose();
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo <= 0.0 { f64::INFINITY } else { hi / lo };

    let cholesky = (condition <= FALLBACK_CONDITION)
        .then(|| gram.clone().cholesky())
        .flatten();
    let (matrix, solver) = match cholesky {
        Some(ch) => {
            // R G = Y X^T  =>  G R^T = X Y^T.
            let rt = ch.solve(&(x * y.transpose()));
            (rt.transpose(), SolverPath::Cholesky)
        }
        None => {
            let svd = x.transpose().svd(true, true);
            let tol = svd.singular_values.max() * (n.max(r) as f64) * f64::EPSILON;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            if rank < r {
                return Err(Error::Singular(format!(
                    "design columns span rank {rank} < {r}; normal system is singular"
                )));
            }
            let rt = svd
                .solve(&y.transpose(), tol)
                .map_err(|e| Error::Singular(e.to_string()))?;
            (rt.transpose(), SolverPath::Svd)
        }
    };
    let resid = &matrix * x - y;
    let residual_rms = (resid.norm_squared() / (r * n) as f64).sqrt();
    Ok(LeastSquaresFit {
        matrix,
        residual_rms,
        condition,
        solver,
    })
}

/// Original and disguised block columns for every block position, stacked
/// over all pairs and channels.
fn regression_design(
    pairs: &[KnownPair],
    knowledge: &AttackerKnowledge,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let layout = &knowledge.layout;
    let (c, r, s, t) = (
        layout.channels,
        layout.block_rows(),
        layout.block_cols(),
        layout.t(),
    );
    let perm = knowledge.permutation();
    let mut xs: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); t];
    let mut ys: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); t];
    for pair in pairs {
        if pair.original.dims() != layout.dims() {
            return Err(Error::Dimension(format!(
                "known original {:?} does not match key layout {:?}",
                pair.original.dims(),
                layout.dims()
            )));
        }
        let xb = rmt::permuted_blocks(&pair.original, layout, &perm)?;
        layout.check_image(&pair.disguised)?;
        let yb = blocks::partition(&pair.disguised, t)?;
        for i in 0..t {
            let yv = yb.blocks[i].to_f64();
            for ch in 0..c {
                xs[i].push(rmt::block_channel(&xb[i], ch, r, s));
                ys[i].push(rmt::block_channel(&yv, ch, r, s));
            }
        }
    }
    let stack = |mats: &[DMatrix<f64>]| {
        let cols: Vec<_> = mats.iter().flat_map(|m| m.column_iter()).collect();
        if cols.is_empty() {
            DMatrix::zeros(r, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    };
    Ok(xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (stack(x), stack(y)))
        .collect())
}

/// Per-position least-squares estimates of the projection matrices.
pub fn estimate_projections(
    pairs: &[KnownPair],
    knowledge: &AttackerKnowledge,
) -> Result<Vec<LeastSquaresFit>> {
    if knowledge.scale != 1 {
        return Err(Error::InvalidParameter(
            "regression attack expects scale 1".into(),
        ));
    }
    regression_design(pairs, knowledge)?
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            fit_projection(x, y).map_err(|e| match e {
                Error::Underdetermined(msg) => Error::Underdetermined(format!("block {i}: {msg}")),
                Error::Singular(msg) => Error::Singular(format!("block {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RegressionOutcome {
    pub fits: Vec<LeastSquaresFit>,
    pub reconstructed: Vec<Image>,
}

impl RegressionOutcome {
    pub fn matrices(&self) -> Vec<&DMatrix<f64>> {
        self.fits.iter().map(|f| &f.matrix).collect()
    }
}

/// Applies estimated matrices as if they were the key: `X_i = R_i^{-1} Y_i`.
pub fn reconstruct_with(
    target: &Image,
    inverses: &[DMatrix<f64>],
    knowledge: &AttackerKnowledge,
) -> Result<Image> {
    let layout = &knowledge.layout;
    layout.check_image(target)?;
    let (c, r, s) = (layout.channels, layout.block_rows(), layout.block_cols());
    let mut grid = blocks::partition(&target.to_real(), layout.t())?;
    for (i, block) in grid.blocks.iter_mut().enumerate() {
        let values = block.to_f64();
        let mut out = vec![0.0; values.len()];
        for ch in 0..c {
            let x = &inverses[i] * rmt::block_channel(&values, ch, r, s);
            for yy in 0..r {
                for xx in 0..s {
                    out[(ch * r + yy) * s + xx] = x[(yy, xx)];
                }
            }
        }
        *block = Pixels::Real(out);
    }
    blocks::reassemble(&blocks::inverse_permute(&grid, &knowledge.permutation())?)
}

pub fn regression_attack(
    pairs: &[KnownPair],
    knowledge: &AttackerKnowledge,
    targets: &[Image],
) -> Result<RegressionOutcome> {
    let fits = estimate_projections(pairs, knowledge)?;
    let inverses =
        fits.iter()
            .enumerate()
            .map(|(i, f)| {
                f.matrix.clone().try_inverse().ok_or_else(|| {
                    Error::Singular(format!("estimated matrix {i} is not invertible"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
    let reconstructed = targets
        .par_iter()
        .map(|t| reconstruct_with(t, &inverses, knowledge))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegressionOutcome {
        fits,
        reconstructed,
    })
}

/// Exponent `e` of the `O(2^e)` count of candidate orthogonal `m x m`
/// matrices with `h`-bit entries.
pub fn brute_force_bound(h: u32, m: u32) -> Result<u64> {
    if h == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "bit width and matrix size must be at least 1, got h={h} m={m}"
        )));
    }
    Ok(u64::from(h) * u64::from(m))
}
