//! Key and dataset lifecycle, experiment sweeps and timing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::aes_disguise::{self, keygen_aes, recover_aes, CipherMode};
use crate::attacks::{self, AttackerKnowledge, KnownPair, PadRule};
use crate::dataset::{self, Dataset, DatasetFormat, DatasetMeta};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instahide::mixup_disguise;
use crate::keyfile::{KeyMaterial, Mechanism, MixupKey};
use crate::metrics::{self, format_value};
use crate::rmt::{self, keygen_rmt, NoiseSpec};
use crate::rng::{derive_seed, stream, SeededRng};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "DISGUISE_SEED";

pub fn parse_cipher_mode(s: &str) -> Result<CipherMode> {
    match s {
        "ecb" => Ok(CipherMode::Ecb),
        "cbc" => Ok(CipherMode::Cbc),
        other => Err(Error::InvalidParameter(format!(
            "unknown cipher mode '{other}'"
        ))),
    }
}

pub fn parse_pad_rule(s: &str) -> Result<PadRule> {
    match s {
        "zero" => Ok(PadRule::Zero),
        "mean" => Ok(PadRule::MeanPlaintext),
        other => Err(Error::InvalidParameter(format!(
            "unknown pad rule '{other}'"
        ))),
    }
}

/// Everything needed to generate a key.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySpec {
    pub mechanism: Mechanism,
    pub dims: (usize, usize, usize),
    pub t: usize,
    /// RMT noise level.
    pub noise: f64,
    pub per_image_noise: bool,
    pub orthogonal: bool,
    /// AES salt-and-pepper probability.
    pub p: f64,
    /// AES scale factor or mixup partner count, by mechanism.
    pub k: usize,
    pub mode: CipherMode,
    pub seed: u64,
}

impl KeySpec {
    pub fn new(mechanism: Mechanism, dims: (usize, usize, usize), t: usize, seed: u64) -> Self {
        Self {
            mechanism,
            dims,
            t,
            noise: 0.0,
            per_image_noise: true,
            orthogonal: true,
            p: 0.0,
            k: match mechanism {
                Mechanism::InstaHide => 4,
                _ => 1,
            },
            mode: CipherMode::Ecb,
            seed,
        }
    }
}

pub fn generate_key(spec: &KeySpec) -> Result<KeyMaterial> {
    let (c, h, w) = spec.dims;
    Ok(match spec.mechanism {
        Mechanism::Rmt => KeyMaterial::Rmt(keygen_rmt(
            spec.seed,
            c,
            (h, w),
            spec.t,
            NoiseSpec::new(spec.noise, spec.per_image_noise)?,
            spec.orthogonal,
        )?),
        Mechanism::Aes => KeyMaterial::Aes(keygen_aes(
            spec.seed,
            c,
            (h, w),
            spec.t,
            spec.p,
            spec.k,
            spec.mode,
        )?),
        Mechanism::InstaHide => {
            if spec.k < 2 {
                return Err(Error::InvalidParameter(format!(
                    "k_mix must be at least 2, got {}",
                    spec.k
                )));
            }
            if c == 0 || h == 0 || w == 0 {
                return Err(Error::InvalidParameter(
                    "image dimensions must be positive".into(),
                ));
            }
            KeyMaterial::InstaHide(MixupKey {
                channels: c,
                height: h,
                width: w,
                k_mix: spec.k,
                master_seed: spec.seed,
            })
        }
    })
}

fn key_meta(key: &KeyMaterial) -> DatasetMeta {
    let (t, k, param) = match key {
        KeyMaterial::Rmt(k) => (k.layout.t(), 1, k.noise.level),
        KeyMaterial::Aes(k) => (k.layout.t(), k.scale, k.salt_pepper_p),
        KeyMaterial::InstaHide(k) => (1, k.k_mix, 0.0),
    };
    DatasetMeta {
        mechanism: Some(key.mechanism()),
        t: t as u32,
        k: k as u32,
        param,
    }
}

fn mixup_one(image: &Image, id: u64, pool: &[Image], key: &MixupKey) -> Result<Image> {
    if image.dims() != (key.channels, key.height, key.width) {
        return Err(Error::Dimension(format!(
            "image is {:?}, key expects {:?}",
            image.dims(),
            (key.channels, key.height, key.width)
        )));
    }
    let seed = derive_seed(key.master_seed, &[stream::MIXUP, id]);
    mixup_disguise(image, pool, key.k_mix, seed).map(|(img, _)| img)
}

/// Disguises one image with any key. Mixup draws partners from `pool`.
pub fn disguise_one(image: &Image, id: u64, key: &KeyMaterial, pool: &[Image]) -> Result<Image> {
    match key {
        KeyMaterial::Rmt(k) => rmt::disguise_rmt(image, k, id),
        KeyMaterial::Aes(k) => Ok(aes_disguise::disguise_aes(image, k, id)?.encrypted),
        KeyMaterial::InstaHide(k) => mixup_one(image, id, pool, k),
    }
}

/// Disguises every image, using the dataset index as image id. Mixup uses
/// the dataset itself as its partner pool.
pub fn disguise_dataset(data: &Dataset, key: &KeyMaterial) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("nothing to disguise".into()));
    }
    let images = data
        .images
        .par_iter()
        .enumerate()
        .map(|(i, im)| disguise_one(im, i as u64, key, &data.images))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(images).with_meta(key_meta(key)))
}

pub fn recover_dataset(data: &Dataset, key: &KeyMaterial) -> Result<Dataset> {
    if let Some(m) = data.meta.mechanism {
        if m != key.mechanism() {
            return Err(Error::MechanismMismatch {
                expected: key.mechanism_name(),
                got: m.name(),
            });
        }
    }
    let images = match key {
        KeyMaterial::Rmt(k) => rmt::recover_rmt_all(&data.images, k)?,
        KeyMaterial::Aes(k) => data
            .images
            .par_iter()
            .map(|im| recover_aes(im, k))
            .collect::<Result<Vec<_>>>()?,
        KeyMaterial::InstaHide(_) => {
            return Err(Error::InvalidParameter(
                "mixup disguising has no keyed inverse".into(),
            ))
        }
    };
    Ok(Dataset::new(images))
}

/// RMT outputs rounded back to bytes when every value is within `tol` of an
/// integer in range; otherwise left real.
pub fn to_bytes_if_integral(images: Vec<Image>, tol: f64) -> Vec<Image> {
    let integral = images.iter().all(|im| {
        im.to_f64()
            .iter()
            .all(|&v| (v - v.round()).abs() <= tol && (-0.5..255.5).contains(&v))
    });
    if integral {
        images.iter().map(Image::to_byte_rounded).collect()
    } else {
        images
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic`, `idx`, `png_dir` or `dgds`.
    pub format: String,
    pub path: Option<PathBuf>,
    /// Separate source for targets; otherwise targets are split off `path`.
    pub test_path: Option<PathBuf>,
    /// Cap on the known-pair and examiner pool.
    pub limit: Option<usize>,
    #[serde(default = "default_targets")]
    pub targets: usize,
    // synthetic only
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_spread")]
    pub spread: u8,
}

fn default_targets() -> usize {
    50
}
fn default_count() -> usize {
    400
}
fn default_classes() -> usize {
    10
}
fn default_dims() -> [usize; 3] {
    [1, 16, 16]
}
fn default_spread() -> u8 {
    40
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one_block")]
    pub t: Vec<usize>,
    /// RMT noise level or AES salt-and-pepper probability.
    #[serde(default = "no_noise")]
    pub noise: Vec<f64>,
    #[serde(default = "no_pairs")]
    pub pairs: Vec<usize>,
    /// AES scale factor or mixup partner count.
    pub k: Option<Vec<usize>>,
}

fn one_block() -> Vec<usize> {
    vec![1]
}
fn no_noise() -> Vec<f64> {
    vec![0.0]
}
fn no_pairs() -> Vec<usize> {
    vec![0]
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RmtConfig {
    #[serde(default = "yes")]
    pub orthogonal: bool,
    #[serde(default = "yes")]
    pub per_image_noise: bool,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AesConfig {
    #[serde(default = "ecb")]
    pub mode: String,
    #[serde(default = "zero_pad")]
    pub pad: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// `auto`, `codebook`, `regression` or `none`.
    #[serde(default = "auto")]
    pub kind: String,
    #[serde(default = "yes")]
    pub knows_permutation: bool,
}

fn yes() -> bool {
    true
}
fn ecb() -> String {
    "ecb".into()
}
fn zero_pad() -> String {
    "zero".into()
}
fn auto() -> String {
    "auto".into()
}

impl Default for RmtConfig {
    fn default() -> Self {
        Self {
            orthogonal: true,
            per_image_noise: true,
        }
    }
}

impl Default for AesConfig {
    fn default() -> Self {
        Self {
            mode: ecb(),
            pad: zero_pad(),
        }
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: auto(),
            knows_permutation: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mechanism: String,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    /// Fixed key used for every cell instead of generating one per seed.
    pub key: Option<PathBuf>,
    pub workers: Option<usize>,
    #[serde(default = "default_examiner_k")]
    pub examiner_k: usize,
    #[serde(default = "yes")]
    pub utility: bool,
    pub dataset: DatasetConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub rmt: RmtConfig,
    #[serde(default)]
    pub aes: AesConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

fn default_examiner_k() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Codebook,
    Regression,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Replaces the seed list with `DISGUISE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))
            })?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn mechanism(&self) -> Result<Mechanism> {
        self.mechanism
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn attack_kind(&self) -> Result<AttackKind> {
        let mech = self.mechanism()?;
        let kind = match (self.attack.kind.as_str(), mech) {
            ("auto", Mechanism::Aes) | ("codebook", Mechanism::Aes) => AttackKind::Codebook,
            ("auto", Mechanism::Rmt) | ("regression", Mechanism::Rmt) => AttackKind::Regression,
            ("auto", Mechanism::InstaHide) | ("none", _) => AttackKind::None,
            (other, m) => {
                return Err(Error::Config(format!(
                    "attack '{other}' does not apply to mechanism '{}'",
                    m.name()
                )))
            }
        };
        Ok(kind)
    }

    fn k_values(&self, mech: Mechanism) -> Vec<usize> {
        self.grid.k.clone().unwrap_or_else(|| match mech {
            Mechanism::InstaHide => vec![4],
            _ => vec![1],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mech = self.mechanism()?;
        self.attack_kind()?;
        parse_cipher_mode(&self.aes.mode).map_err(|e| Error::Config(e.to_string()))?;
        parse_pad_rule(&self.aes.pad).map_err(|e| Error::Config(e.to_string()))?;
        let g = &self.grid;
        let ks = self.k_values(mech);
        if self.seeds.is_empty()
            || g.t.is_empty()
            || g.noise.is_empty()
            || g.pairs.is_empty()
            || ks.is_empty()
        {
            return Err(Error::Config(
                "seeds and every grid axis must be non-empty".into(),
            ));
        }
        if g.t.contains(&0) {
            return Err(Error::Config("block counts must be positive".into()));
        }
        if let Some(bad) = g.noise.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Config(format!(
                "noise {bad} must be finite and non-negative"
            )));
        }
        match mech {
            Mechanism::Aes => {
                if let Some(bad) = g.noise.iter().find(|v| **v > 1.0) {
                    return Err(Error::Config(format!(
                        "salt-and-pepper probability {bad} exceeds 1"
                    )));
                }
                if ks.contains(&0) {
                    return Err(Error::Config("scale factors must be positive".into()));
                }
            }
            Mechanism::InstaHide => {
                if g.noise.iter().any(|v| *v != 0.0) {
                    return Err(Error::Config(
                        "mixup has no noise parameter; use noise = [0]".into(),
                    ));
                }
                if ks.iter().any(|&k| k < 2) {
                    return Err(Error::Config("mixup needs k >= 2".into()));
                }
            }
            Mechanism::Rmt => {}
        }
        if self.key.is_some() && (g.t.len() > 1 || g.noise.len() > 1 || self.grid.k.is_some()) {
            return Err(Error::Config(
                "a fixed key pins t, noise and k; leave those axes single-valued".into(),
            ));
        }
        if self.examiner_k == 0 {
            return Err(Error::Config("examiner_k must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        let d = &self.dataset;
        let format = d.format.as_str();
        if format != "synthetic" {
            format
                .parse::<DatasetFormat>()
                .map_err(|e| Error::Config(e.to_string()))?;
            if d.path.is_none() {
                return Err(Error::Config(format!(
                    "dataset format '{format}' needs a path"
                )));
            }
        }
        if d.targets == 0 {
            return Err(Error::Config("need at least one target".into()));
        }
        Ok(())
    }

    /// Cells in output order: t, noise, pairs, k, then seed varies fastest.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mech = self.mechanism()?;
        let mut out = Vec::new();
        for &t in &self.grid.t {
            for &noise in &self.grid.noise {
                for &pairs in &self.grid.pairs {
                    for &k in &self.k_values(mech) {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                t,
                                noise,
                                pairs,
                                k,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub t: usize,
    pub noise: f64,
    pub pairs: usize,
    pub k: usize,
    pub seed: u64,
}

pub const EXPERIMENT_COLUMNS: [&str; 12] = [
    "mechanism",
    "pairs",
    "noise",
    "hit_rate",
    "success_rate",
    "mse",
    "seed",
    "t",
    "k",
    "utility_gap",
    "key_fingerprint",
    "status",
];

/// One result row. Missing measurements are left blank in CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub mechanism: Mechanism,
    pub cell: Cell,
    pub hit_rate: Option<f64>,
    pub success_rate: Option<f64>,
    pub mse: Option<f64>,
    pub utility_gap: Option<f64>,
    pub key_fingerprint: String,
    /// `ok` or the error kind that stopped the cell.
    pub status: String,
    pub disguise_ms_per_image: f64,
}

impl ExperimentRow {
    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(format_value).unwrap_or_default();
        vec![
            self.mechanism.name().to_string(),
            self.cell.pairs.to_string(),
            format_value(self.cell.noise),
            opt(self.hit_rate),
            opt(self.success_rate),
            opt(self.mse),
            self.cell.seed.to_string(),
            self.cell.t.to_string(),
            self.cell.k.to_string(),
            opt(self.utility_gap),
            self.key_fingerprint.clone(),
            self.status.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EXPERIMENT_COLUMNS)?;
        for row in &self.rows {
            w.write_record(row.record())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wall-clock timing lives apart from the results so that the results
    /// file is reproducible byte for byte.
    pub fn write_timing_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "mechanism",
            "t",
            "noise",
            "pairs",
            "k",
            "seed",
            "disguise_ms_per_image",
        ])?;
        for row in &self.rows {
            let c = &row.cell;
            w.write_record([
                row.mechanism.name().to_string(),
                c.t.to_string(),
                format_value(c.noise),
                c.pairs.to_string(),
                c.k.to_string(),
                c.seed.to_string(),
                format!("{:.6}", row.disguise_ms_per_image),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `results.csv` -> `results.timing.csv`.
pub fn timing_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    output.with_file_name(format!("{stem}.timing.csv"))
}

struct Sources {
    /// Known-pair and examiner pool, original dataset order.
    train: Vec<Image>,
    /// Target pool when loaded separately.
    test: Option<Vec<Image>>,
}

fn load_sources(cfg: &DatasetConfig) -> Result<Sources> {
    if cfg.format == "synthetic" {
        let [c, h, w] = cfg.dims;
        let train =
            dataset::synthetic_classes(cfg.count, cfg.classes, (c, h, w), cfg.spread, 0x5eed)?;
        return Ok(Sources { train, test: None });
    }
    let format: DatasetFormat = cfg.format.parse()?;
    let path = cfg
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("dataset path missing".into()))?;
    let train = dataset::load_dataset(path, format)?.images;
    let test = cfg
        .test_path
        .as_ref()
        .map(|p| dataset::load_dataset(p, format).map(|d| d.images))
        .transpose()?;
    Ok(Sources { train, test })
}

type Indexed = Vec<(u64, Image)>;

/// Seeded resampling without replacement: `(targets, pool)` as
/// `(dataset index, image)` lists.
fn split(sources: &Sources, cfg: &DatasetConfig, seed: u64) -> Result<(Indexed, Indexed)> {
    let mut rng = SeededRng::child(seed, &[stream::SAMPLE]);
    let mut order: Vec<usize> = (0..sources.train.len()).collect();
    rng.shuffle(&mut order);
    let pick = |src: &[Image], idx: &[usize], offset: u64| -> Indexed {
        idx.iter()
            .map(|&i| (offset + i as u64, src[i].clone()))
            .collect()
    };
    let (targets, pool_idx) = match &sources.test {
        Some(test) => {
            let mut t_order: Vec<usize> = (0..test.len()).collect();
            rng.shuffle(&mut t_order);
            if t_order.len() < cfg.targets {
                return Err(Error::InvalidParameter(format!(
                    "{} test images cannot supply {} targets",
                    t_order.len(),
                    cfg.targets
                )));
            }
            // Target ids live past the training ids so noise streams differ.
            let t = pick(test, &t_order[..cfg.targets], sources.train.len() as u64);
            (t, order)
        }
        None => {
            if order.len() <= cfg.targets {
                return Err(Error::InvalidParameter(format!(
                    "{} images cannot supply {} targets and a pool",
                    order.len(),
                    cfg.targets
                )));
            }
            let rest = order.split_off(cfg.targets);
            (pick(&sources.train, &order, 0), rest)
        }
    };
    let limit = cfg.limit.unwrap_or(usize::MAX).min(pool_idx.len());
    Ok((targets, pick(&sources.train, &pool_idx[..limit], 0)))
}

fn cell_key(
    cfg: &ExperimentConfig,
    mech: Mechanism,
    cell: &Cell,
    dims: (usize, usize, usize),
) -> Result<KeyMaterial> {
    if let Some(path) = &cfg.key {
        let key = KeyMaterial::load(path)?;
        if key.mechanism() != mech {
            return Err(Error::MechanismMismatch {
                expected: mech.name(),
                got: key.mechanism_name(),
            });
        }
        return Ok(key);
    }
    let mut spec = KeySpec::new(mech, dims, cell.t, cell.seed);
    spec.orthogonal = cfg.rmt.orthogonal;
    spec.per_image_noise = cfg.rmt.per_image_noise;
    spec.mode = parse_cipher_mode(&cfg.aes.mode)?;
    spec.k = cell.k;
    match mech {
        Mechanism::Rmt => spec.noise = cell.noise,
        Mechanism::Aes => spec.p = cell.noise,
        Mechanism::InstaHide => {}
    }
    generate_key(&spec)
}

/// Image the data owner would train on: the scaled-down view for scaled
/// AES, the encrypted image otherwise.
fn training_view(image: &Image, id: u64, key: &KeyMaterial, pool: &[Image]) -> Result<Image> {
    match key {
        KeyMaterial::Aes(k) => {
            let d = aes_disguise::disguise_aes(image, k, id)?;
            Ok(d.view.unwrap_or(d.encrypted))
        }
        _ => disguise_one(image, id, key, pool),
    }
}

struct CellOutcome {
    hit_rate: Option<f64>,
    success_rate: Option<f64>,
    mse: Option<f64>,
    utility_gap: Option<f64>,
    status: String,
}

fn run_cell(
    cfg: &ExperimentConfig,
    mech: Mechanism,
    attack: AttackKind,
    key: &KeyMaterial,
    cell: &Cell,
    sources: &Sources,
) -> Result<(CellOutcome, f64)> {
    let (targets, pool) = split(sources, &cfg.dataset, cell.seed)?;
    if cell.pairs > pool.len() {
        return Err(Error::InvalidParameter(format!(
            "{} known pairs requested from a pool of {}",
            cell.pairs,
            pool.len()
        )));
    }
    let pool_images: Vec<Image> = pool.iter().map(|(_, im)| im.clone()).collect();
    let target_images: Vec<Image> = targets.iter().map(|(_, im)| im.clone()).collect();

    let started = Instant::now();
    let disguised_targets = targets
        .par_iter()
        .map(|(id, im)| disguise_one(im, *id, key, &pool_images))
        .collect::<Result<Vec<_>>>()?;
    let per_image_ms = started.elapsed().as_secs_f64() * 1e3 / targets.len() as f64;

    let mut out = CellOutcome {
        hit_rate: None,
        success_rate: None,
        mse: None,
        utility_gap: None,
        status: "ok".into(),
    };
    let knowledge = match key {
        KeyMaterial::Rmt(k) => Some(AttackerKnowledge::from_rmt_key(
            k,
            cfg.attack.knows_permutation,
        )),
        KeyMaterial::Aes(k) => Some(AttackerKnowledge::from_aes_key(
            k,
            cfg.attack.knows_permutation,
        )),
        KeyMaterial::InstaHide(_) => None,
    };
    let known: Vec<KnownPair> = pool[..cell.pairs]
        .par_iter()
        .map(|(id, im)| {
            Ok(KnownPair {
                original: im.clone(),
                disguised: disguise_one(im, *id, key, &pool_images)?,
                image_id: *id,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let reconstructed: Option<Vec<Image>> = match (attack, knowledge) {
        (AttackKind::Codebook, Some(kn)) => {
            let book = attacks::build_codebook(&known, &kn)?;
            let report = attacks::codebook_attack_all(
                &disguised_targets,
                &book,
                &kn,
                parse_pad_rule(&cfg.aes.pad)?,
                cell.noise,
            )?;
            out.hit_rate = Some(report.hit_rate);
            Some(report.reconstructed)
        }
        (AttackKind::Regression, Some(kn)) => {
            match attacks::regression_attack(&known, &kn, &disguised_targets) {
                Ok(o) => Some(o.reconstructed),
                Err(e @ (Error::Underdetermined(_) | Error::Singular(_))) => {
                    out.status = e.kind().to_string();
                    None
                }
                Err(e) => return Err(e),
            }
        }
        _ => None,
    };
    let examiner_train: Vec<Image> = pool_images.clone();
    if let Some(rec) = &reconstructed {
        out.mse = Some(metrics::mean_mse(&target_images, rec)?);
        let acc_rec = metrics::knn_examiner(&examiner_train, rec, cfg.examiner_k)?;
        let acc_orig = metrics::knn_examiner(&examiner_train, &target_images, cfg.examiner_k)?;
        match metrics::attack_success_rate(acc_rec, acc_orig) {
            Ok(v) => out.success_rate = Some(v),
            Err(e) => out.status = e.kind().to_string(),
        }
    } else if mech == Mechanism::InstaHide {
        // Leakage of the mixed image itself.
        out.mse = Some(metrics::mean_mse(&target_images, &disguised_targets)?);
    }

    if cfg.utility {
        let disguised_train = pool
            .par_iter()
            .map(|(id, im)| training_view(im, *id, key, &pool_images))
            .collect::<Result<Vec<_>>>()?;
        let disguised_eval = targets
            .par_iter()
            .map(|(id, im)| training_view(im, *id, key, &pool_images))
            .collect::<Result<Vec<_>>>()?;
        let acc_d = metrics::knn_examiner(&disguised_train, &disguised_eval, cfg.examiner_k)?;
        let acc_b = metrics::knn_examiner(&examiner_train, &target_images, cfg.examiner_k)?;
        out.utility_gap = Some(metrics::utility_gap(acc_d, acc_b)?);
    }
    Ok((out, per_image_ms))
}

/// Runs every cell of the grid. Cells run on a bounded pool; rows come back
/// in grid order regardless of completion order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mech = cfg.mechanism()?;
    let attack = cfg.attack_kind()?;
    let sources = load_sources(&cfg.dataset)?;
    let dims = sources
        .train
        .first()
        .map(Image::dims)
        .ok_or_else(|| Error::EmptyDataset("experiment dataset is empty".into()))?;
    if let Some(bad) = sources
        .train
        .iter()
        .chain(sources.test.iter().flatten())
        .find(|im| im.dims() != dims)
    {
        return Err(Error::Dimension(format!(
            "dataset mixes {dims:?} and {:?}",
            bad.dims()
        )));
    }
    let cells = cfg.cells()?;

    let exec = |cell: &Cell| -> Result<ExperimentRow> {
        let key = cell_key(cfg, mech, cell, dims)?;
        let fingerprint = key.fingerprint();
        let (outcome, ms) = match run_cell(cfg, mech, attack, &key, cell, &sources) {
            Ok(v) => v,
            Err(e @ (Error::Io(_) | Error::Csv(_))) => return Err(e),
            Err(e) => (
                CellOutcome {
                    hit_rate: None,
                    success_rate: None,
                    mse: None,
                    utility_gap: None,
                    status: e.kind().to_string(),
                },
                0.0,
            ),
        };
        Ok(ExperimentRow {
            mechanism: mech,
            cell: *cell,
            hit_rate: outcome.hit_rate,
            success_rate: outcome.success_rate,
            mse: outcome.mse,
            utility_gap: outcome.utility_gap,
            key_fingerprint: fingerprint,
            status: outcome.status,
            disguise_ms_per_image: ms,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let rows = pool.install(|| cells.par_iter().map(exec).collect::<Result<Vec<_>>>())?;
    Ok(ExperimentReport { rows })
}

/// Runs the experiment and writes the results CSV plus its timing sidecar.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let report = run_experiment(cfg)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    fs::write(&cfg.output, buf)?;
    let mut timing = Vec::new();
    report.write_timing_csv(&mut timing)?;
    fs::write(timing_path(&cfg.output), timing)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mechanism: Mechanism,
    pub dims: (usize, usize, usize),
    pub t: usize,
    pub runs: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Per-image disguise time on the calling thread: `warmup` discarded runs,
/// then the median of `runs` timed runs, each on a fresh random image.
pub fn bench_disguise(spec: &KeySpec, runs: usize, warmup: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::InvalidParameter(
            "need at least one timed run".into(),
        ));
    }
    let key = generate_key(spec)?;
    let classes = 10;
    let images = dataset::random_images(
        runs + warmup,
        classes,
        spec.dims,
        derive_seed(spec.seed, &[stream::SAMPLE]),
    )?;
    let pool = dataset::random_images(spec.k.max(2) * 2, classes, spec.dims, spec.seed)?;
    let mut times = Vec::with_capacity(runs);
    for (i, im) in images.iter().enumerate() {
        let started = Instant::now();
        let out = disguise_one(im, i as u64, &key, &pool)?;
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        if i >= warmup {
            times.push(elapsed);
        }
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 {
        times[runs / 2]
    } else {
        (times[runs / 2 - 1] + times[runs / 2]) / 2.0
    };
    Ok(BenchReport {
        mechanism: spec.mechanism,
        dims: spec.dims,
        t: spec.t,
        runs,
        median_ms: median,
        min_ms: times[0],
        max_ms: times[runs - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(mech: &str) -> String {
        format!(
            r#"
schema_version = 1
mechanism = "{mech}"
output = "unused.csv"
seeds = [1, 2]
workers = 2

[dataset]
format = "synthetic"
count = 120
targets = 20
classes = 4
dims = [1, 8, 8]

[grid]
t = [1, 4, 16]
noise = [0, 25, 100]
"#
        )
    }

    #[test]
    fn grid_row_count_and_determinism() {
        let cfg = ExperimentConfig::from_toml(&base_config("rmt")).unwrap();
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows.len(), 18);
        let b = run_experiment(&cfg).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with("mechanism,pairs,noise,hit_rate,success_rate,mse,seed,"));
        // zero pairs cannot fit a regression
        assert!(a.rows.iter().all(|r| r.status == "underdetermined"));
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let extra = base_config("rmt") + "bogus = 1\n";
        assert!(matches!(
            ExperimentConfig::from_toml(&extra),
            Err(Error::Config(_))
        ));
        let old = base_config("rmt").replace("schema_version = 1", "schema_version = 7");
        assert!(ExperimentConfig::from_toml(&old).is_err());
    }

    #[test]
    fn invalid_grids_rejected() {
        let mut cfg = ExperimentConfig::from_toml(&base_config("aes")).unwrap();
        assert!(cfg.validate().is_err(), "noise 25 is not a probability");
        cfg.grid.noise = vec![0.0];
        cfg.grid.t = vec![];
        assert!(cfg.validate().is_err());
        cfg.grid.t = vec![4];
        cfg.validate().unwrap();
        cfg.attack.kind = "regression".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn codebook_cells_report_hit_rates() {
        let mut cfg = ExperimentConfig::from_toml(&base_config("aes")).unwrap();
        cfg.grid.noise = vec![0.0];
        cfg.grid.t = vec![4];
        cfg.grid.pairs = vec![0, 50];
        let rep = run_experiment(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 4);
        for r in &rep.rows {
            assert_eq!(r.status, "ok");
            let h = r.hit_rate.unwrap();
            if r.cell.pairs == 0 {
                assert_eq!(h, 0.0);
            }
            assert!(r.utility_gap.is_some());
        }
    }

    #[test]
    fn regression_cells_succeed_with_enough_pairs() {
        let mut cfg = ExperimentConfig::from_toml(&base_config("rmt")).unwrap();
        cfg.grid.t = vec![4];
        cfg.grid.noise = vec![0.0];
        cfg.grid.pairs = vec![10];
        let rep = run_experiment(&cfg).unwrap();
        for r in &rep.rows {
            assert_eq!(r.status, "ok");
            assert!(r.mse.unwrap() < 1e-9);
            assert!((r.success_rate.unwrap() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn key_round_trips_through_dataset() {
        let imgs = dataset::random_images(6, 3, (3, 8, 8), 4).unwrap();
        let data = Dataset::new(imgs.clone());
        for mech in [Mechanism::Rmt, Mechanism::Aes] {
            let key = generate_key(&KeySpec::new(mech, (3, 8, 8), 4, 9)).unwrap();
            let d = disguise_dataset(&data, &key).unwrap();
            assert_eq!(d.meta.mechanism, Some(mech));
            let back = recover_dataset(&d, &key).unwrap();
            let back = to_bytes_if_integral(back.images, 1e-9);
            for (a, b) in imgs.iter().zip(&back) {
                assert_eq!(a.as_bytes(), b.as_bytes());
            }
        }
    }

    #[test]
    fn timing_sidecar_name() {
        assert_eq!(
            timing_path(Path::new("/x/out.csv")),
            Path::new("/x/out.timing.csv")
        );
    }

    #[test]
    fn bench_reports_median() {
        let spec = KeySpec::new(Mechanism::Rmt, (3, 32, 32), 4, 1);
        let r = bench_disguise(&spec, 11, 2).unwrap();
        assert!(r.min_ms <= r.median_ms && r.median_ms <= r.max_ms);
    }
}
