use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use disguise_core::attacks::{self, AttackerKnowledge, KnownPair};
use disguise_core::dataset::{self, Dataset, DatasetFormat};
use disguise_core::harness::{self, ExperimentConfig, KeySpec, SEED_ENV};
use disguise_core::keyfile::Mechanism;
use disguise_core::metrics::{self, format_value, MetricRow};
use disguise_core::rng::{stream, SeededRng};
use disguise_core::{Error, Image, KeyMaterial};

#[derive(Parser)]
#[command(
    name = "disguise",
    version,
    about = "Block-wise image disguising, attacks and metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key file.
    Keygen(KeygenOpts),
    /// Disguise a dataset into a DGDS container.
    Disguise(DisguiseOpts),
    /// Invert a disguised DGDS container with its key.
    Recover(RecoverOpts),
    /// Simulate a known-pair attack.
    Attack {
        #[command(subcommand)]
        kind: AttackCommand,
    },
    /// Utility and distance metrics for a key over a dataset.
    Eval(EvalOpts),
    /// Median per-image disguise time.
    Bench(BenchOpts),
    /// Brute-force search exponent for h-bit m x m matrices.
    Bound(BoundOpts),
    /// Run an experiment grid from a config file.
    Run(RunOpts),
}

#[derive(Subcommand)]
enum AttackCommand {
    Codebook(AttackOpts),
    Regress(AttackOpts),
}

/// Fills unset fields from a config file. Flags win; boolean flags are
/// set when either source sets them.
macro_rules! merge_config {
    ($opts:ident: $ty:ty; $($field:ident),* ; $($flag:ident),*) => {{
        if let Some(path) = $opts.config.clone() {
            let file: $ty = read_config(&path)?;
            $( $opts.$field = $opts.$field.take().or(file.$field); )*
            $( $opts.$flag = $opts.$flag || file.$flag; )*
        }
    }};
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct KeygenOpts {
    /// Option file (TOML, same names as the flags with underscores).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// rmt, aes or instahide.
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Take channels, height and width from this dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Number of blocks.
    #[arg(long)]
    t: Option<usize>,
    /// RMT noise level.
    #[arg(long)]
    noise: Option<f64>,
    /// Draw RMT noise once per block position instead of per image.
    #[arg(long)]
    #[serde(default)]
    shared_noise: bool,
    /// Random invertible matrices instead of orthogonal ones.
    #[arg(long)]
    #[serde(default)]
    invertible: bool,
    /// AES salt-and-pepper probability.
    #[arg(long)]
    p: Option<f64>,
    /// AES scale-up factor or mixup partner count.
    #[arg(long)]
    k: Option<usize>,
    /// ecb or cbc.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DisguiseOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RecoverOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// dgds, png_dir or idx.
    #[arg(long)]
    out_format: Option<String>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AttackOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    /// Original images; known pairs and targets are drawn from it.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Number of known pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Number of target images.
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fill for unmatched units: zero or mean.
    #[arg(long)]
    pad: Option<String>,
    /// Attacker does not know the block permutation.
    #[arg(long)]
    #[serde(default)]
    blind_permutation: bool,
    #[arg(long)]
    examiner_k: Option<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Held-out evaluation images for the k-NN examiners.
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    examiner_k: Option<usize>,
    /// Image pairs sampled for distance preservation.
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BenchOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BoundOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Bits per matrix entry.
    #[arg(long)]
    h: Option<u32>,
    /// Matrix size.
    #[arg(long)]
    m: Option<u32>,
}

#[derive(Args)]
struct RunOpts {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output path.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

type CliResult<T> = std::result::Result<T, Error>;

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn required<T>(value: Option<T>, name: &str) -> CliResult<T> {
    value.ok_or_else(|| {
        Error::Config(format!(
            "missing required option --{}",
            name.replace('_', "-")
        ))
    })
}

/// Flag, then `DISGUISE_SEED`, then config file value, then 0.
fn resolve_seed(flag: Option<u64>, from_file: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")));
    }
    Ok(from_file.unwrap_or(0))
}

fn load_data(path: &Path, format: Option<&str>) -> CliResult<Dataset> {
    let format = match format {
        Some(f) => f.parse()?,
        None => dataset::infer_format(path),
    };
    dataset::load_dataset(path, format)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn keygen(mut o: KeygenOpts) -> CliResult<()> {
    let flag_seed = o.seed;
    merge_config!(o: KeygenOpts; mechanism, channels, height, width, data, format, t, noise, p, k, mode, seed, out; shared_noise, invertible);
    let mechanism: Mechanism = required(o.mechanism, "mechanism")?.parse()?;
    let dims = match &o.data {
        Some(path) => {
            let data = load_data(path, o.format.as_deref())?;
            data.images[0].dims()
        }
        None => (
            o.channels.unwrap_or(1),
            required(o.height, "height")?,
            required(o.width, "width")?,
        ),
    };
    let seed = resolve_seed(flag_seed, o.seed)?;
    let mut spec = KeySpec::new(mechanism, dims, o.t.unwrap_or(1), seed);
    spec.noise = o.noise.unwrap_or(0.0);
    spec.per_image_noise = !o.shared_noise;
    spec.orthogonal = !o.invertible;
    spec.p = o.p.unwrap_or(0.0);
    if let Some(k) = o.k {
        spec.k = k;
    }
    if let Some(m) = &o.mode {
        spec.mode = harness::parse_cipher_mode(m)?;
    }
    let key = harness::generate_key(&spec)?;
    let out = required(o.out, "out")?;
    key.save(&out)?;
    println!(
        "{} key {} written to {}",
        key.mechanism_name(),
        key.fingerprint(),
        out.display()
    );
    Ok(())
}

fn disguise(mut o: DisguiseOpts) -> CliResult<()> {
    merge_config!(o: DisguiseOpts; key, input, format, out;);
    let key = KeyMaterial::load(required(o.key, "key")?)?;
    let data = load_data(&required(o.input, "input")?, o.format.as_deref())?;
    let out = required(o.out, "out")?;
    let disguised = harness::disguise_dataset(&data, &key)?;
    disguised.save_dgds(&out)?;
    println!(
        "{} images disguised into {}",
        disguised.len(),
        out.display()
    );
    Ok(())
}

fn recover(mut o: RecoverOpts) -> CliResult<()> {
    merge_config!(o: RecoverOpts; key, input, out, out_format;);
    let key = KeyMaterial::load(required(o.key, "key")?)?;
    let data = Dataset::load_dgds(required(o.input, "input")?)?;
    let out = required(o.out, "out")?;
    let format: DatasetFormat = o.out_format.as_deref().unwrap_or("dgds").parse()?;
    let recovered = harness::recover_dataset(&data, &key)?;
    let labels: Vec<Option<u32>> = data.labels();
    let mut images = harness::to_bytes_if_integral(recovered.images, 1e-6);
    for (im, l) in images.iter_mut().zip(labels) {
        im.set_label(l);
    }
    let recovered = Dataset::new(images);
    dataset::save_dataset(&recovered, &out, format)?;
    println!(
        "{} images recovered into {}",
        recovered.len(),
        out.display()
    );
    Ok(())
}

/// Seeded disjoint draw of known pairs and targets, and the examiner
/// training set (every non-target image).
fn draw(
    data: &Dataset,
    pairs: usize,
    targets: usize,
    seed: u64,
) -> CliResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if pairs + targets > data.len() {
        return Err(Error::InvalidParameter(format!(
            "{pairs} pairs and {targets} targets need more than the {} images available",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    SeededRng::child(seed, &[stream::SAMPLE]).shuffle(&mut order);
    let target_idx = order[..targets].to_vec();
    let rest = order[targets..].to_vec();
    Ok((rest[..pairs].to_vec(), target_idx, rest))
}

fn attack(kind: AttackCommand) -> CliResult<()> {
    let (codebook, mut o) = match kind {
        AttackCommand::Codebook(o) => (true, o),
        AttackCommand::Regress(o) => (false, o),
    };
    let flag_seed = o.seed;
    merge_config!(o: AttackOpts; key, data, format, pairs, targets, seed, pad, examiner_k, out; blind_permutation);
    let key = KeyMaterial::load(required(o.key, "key")?)?;
    let data = load_data(&required(o.data, "data")?, o.format.as_deref())?;
    let seed = resolve_seed(flag_seed, o.seed)?;
    let pairs = o.pairs.unwrap_or(0);
    let targets = o
        .targets
        .unwrap_or(100.min(data.len().saturating_sub(pairs)));
    let knows = !o.blind_permutation;
    let (pair_idx, target_idx, train_idx) = draw(&data, pairs, targets, seed)?;

    let (knowledge, noise) = match (&key, codebook) {
        (KeyMaterial::Aes(k), true) => (AttackerKnowledge::from_aes_key(k, knows), k.salt_pepper_p),
        (KeyMaterial::Rmt(k), false) => (AttackerKnowledge::from_rmt_key(k, knows), k.noise.level),
        (other, _) => {
            return Err(Error::MechanismMismatch {
                expected: if codebook { "aes" } else { "rmt" },
                got: other.mechanism_name(),
            })
        }
    };
    let disguise = |i: usize| harness::disguise_one(&data.images[i], i as u64, &key, &data.images);
    let known = pair_idx
        .iter()
        .map(|&i| {
            Ok(KnownPair {
                original: data.images[i].clone(),
                disguised: disguise(i)?,
                image_id: i as u64,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let originals: Vec<Image> = target_idx.iter().map(|&i| data.images[i].clone()).collect();
    let disguised = target_idx
        .iter()
        .map(|&i| disguise(i))
        .collect::<CliResult<Vec<_>>>()?;

    let (hit_rate, reconstructed) = if codebook {
        let book = attacks::build_codebook(&known, &knowledge)?;
        let pad = harness::parse_pad_rule(o.pad.as_deref().unwrap_or("zero"))?;
        let report = attacks::codebook_attack_all(&disguised, &book, &knowledge, pad, noise)?;
        (Some(report.hit_rate), report.reconstructed)
    } else {
        let outcome = attacks::regression_attack(&known, &knowledge, &disguised)?;
        (None, outcome.reconstructed)
    };
    let mse = metrics::mean_mse(&originals, &reconstructed)?;
    let examiner: Vec<Image> = train_idx.iter().map(|&i| data.images[i].clone()).collect();
    let labeled = examiner
        .iter()
        .chain(&originals)
        .all(|im| im.label().is_some());
    let success = if labeled && !examiner.is_empty() && !originals.is_empty() {
        let k = o.examiner_k.unwrap_or(5);
        let acc_rec = metrics::knn_examiner(&examiner, &reconstructed, k)?;
        let acc_orig = metrics::knn_examiner(&examiner, &originals, k)?;
        metrics::attack_success_rate(acc_rec, acc_orig).ok()
    } else {
        None
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mechanism",
        "pairs",
        "noise",
        "hit_rate",
        "success_rate",
        "mse",
        "seed",
    ])?;
    let opt = |v: Option<f64>| v.map(format_value).unwrap_or_default();
    w.write_record([
        key.mechanism_name().to_string(),
        pairs.to_string(),
        format_value(noise),
        opt(hit_rate),
        opt(success),
        format_value(mse),
        seed.to_string(),
    ])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    emit(o.out.as_deref(), &bytes)
}

fn eval(mut o: EvalOpts) -> CliResult<()> {
    let flag_seed = o.seed;
    merge_config!(o: EvalOpts; key, data, format, targets, seed, examiner_k, max_pairs, out;);
    let key = KeyMaterial::load(required(o.key, "key")?)?;
    let data = load_data(&required(o.data, "data")?, o.format.as_deref())?;
    let seed = resolve_seed(flag_seed, o.seed)?;
    let k = o.examiner_k.unwrap_or(5);
    let targets = o.targets.unwrap_or(data.len() / 5).max(1);
    let (_, target_idx, train_idx) = draw(&data, 0, targets, seed)?;
    if train_idx.is_empty() {
        return Err(Error::InvalidParameter(
            "no images left to train the examiners".into(),
        ));
    }
    let disguised = harness::disguise_dataset(&data, &key)?;
    // AES utility is measured on the scaled-down view when scaling is on.
    let disguised_view: Vec<Image> = match &key {
        KeyMaterial::Aes(k) if k.scale > 1 => data
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| {
                let d = disguise_core::aes_disguise::disguise_aes(im, k, i as u64)?;
                Ok(d.view.unwrap_or(d.encrypted))
            })
            .collect::<CliResult<Vec<_>>>()?,
        _ => disguised.images.clone(),
    };
    let pick =
        |src: &[Image], idx: &[usize]| idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
    let acc_b = metrics::knn_examiner(
        &pick(&data.images, &train_idx),
        &pick(&data.images, &target_idx),
        k,
    )?;
    let acc_d = metrics::knn_examiner(
        &pick(&disguised_view, &train_idx),
        &pick(&disguised_view, &target_idx),
        k,
    )?;

    let mech = key.mechanism_name().to_string();
    let params = format!("k={k};targets={targets};fingerprint={}", key.fingerprint());
    let row = |metric: &str, value: f64| MetricRow {
        metric: metric.into(),
        mechanism: mech.clone(),
        params: params.clone(),
        seed,
        value,
    };
    let mut rows = vec![
        row("knn_accuracy_original", acc_b),
        row("knn_accuracy_disguised", acc_d),
        row("utility_gap", metrics::utility_gap(acc_d, acc_b)?),
    ];
    if matches!(key, KeyMaterial::Rmt(_)) {
        let dev = metrics::distance_preservation(
            &data.images,
            &disguised.images,
            &key,
            o.max_pairs.unwrap_or(200),
            seed,
        )?;
        rows.push(row("distance_deviation", dev));
    }
    if !matches!(key, KeyMaterial::InstaHide(_)) {
        let recovered = harness::recover_dataset(&disguised, &key)?;
        rows.push(row(
            "recovery_mse",
            metrics::mean_mse(&data.images, &recovered.images)?,
        ));
    }
    let mut buf = Vec::new();
    metrics::write_metric_rows(&mut buf, &rows)?;
    emit(o.out.as_deref(), &buf)
}

fn bench(mut o: BenchOpts) -> CliResult<()> {
    let flag_seed = o.seed;
    merge_config!(o: BenchOpts; mechanism, channels, height, width, t, noise, p, k, runs, warmup, seed;);
    let mechanism: Mechanism = o.mechanism.as_deref().unwrap_or("rmt").parse()?;
    let dims = (
        o.channels.unwrap_or(3),
        o.height.unwrap_or(32),
        o.width.unwrap_or(32),
    );
    let mut spec = KeySpec::new(
        mechanism,
        dims,
        o.t.unwrap_or(4),
        resolve_seed(flag_seed, o.seed)?,
    );
    spec.noise = o.noise.unwrap_or(0.0);
    spec.p = o.p.unwrap_or(0.0);
    if let Some(k) = o.k {
        spec.k = k;
    }
    let r = harness::bench_disguise(&spec, o.runs.unwrap_or(100), o.warmup.unwrap_or(10))?;
    println!("mechanism,channels,height,width,t,runs,median_ms,min_ms,max_ms");
    println!(
        "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
        r.mechanism.name(),
        r.dims.0,
        r.dims.1,
        r.dims.2,
        r.t,
        r.runs,
        r.median_ms,
        r.min_ms,
        r.max_ms
    );
    Ok(())
}

fn bound(mut o: BoundOpts) -> CliResult<()> {
    merge_config!(o: BoundOpts; h, m;);
    let e = attacks::brute_force_bound(required(o.h, "h")?, required(o.m, "m")?)?;
    println!("2^{e}");
    Ok(())
}

fn run(o: RunOpts) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(&o.config)?;
    cfg.apply_env()?;
    if let Some(s) = o.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = o.output {
        cfg.output = out;
    }
    if o.workers.is_some() {
        cfg.workers = o.workers;
    }
    let report = harness::run_and_write(&cfg)?;
    println!(
        "{} rows written to {}",
        report.rows.len(),
        cfg.output.display()
    );
    Ok(())
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Keygen(o) => keygen(o),
        Command::Disguise(o) => disguise(o),
        Command::Recover(o) => recover(o),
        Command::Attack { kind } => attack(kind),
        Command::Eval(o) => eval(o),
        Command::Bench(o) => bench(o),
        Command::Bound(o) => bound(o),
        Command::Run(o) => run(o),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", error_line("usage", &e.kind().to_string()));
            }
            return ExitCode::from(code as u8);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            // Missing or malformed options are usage errors.
            if matches!(e, Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
