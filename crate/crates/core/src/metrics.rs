//! Utility and attack-resilience measurements.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;

use crate::blocks;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::keyfile::KeyMaterial;
use crate::rmt;
use crate::rng::{stream, SeededRng};

pub const DISTANCE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionError {
    pub mse: f64,
    /// `+inf` when `mse == 0`.
    pub psnr: f64,
}

pub fn reconstruction_error(
    original: &Image,
    reconstructed: &Image,
) -> Result<ReconstructionError> {
    if !original.same_shape(reconstructed) {
        return Err(Error::Dimension(format!(
            "cannot compare {:?} with {:?}",
            original.dims(),
            reconstructed.dims()
        )));
    }
    let a = original.to_f64();
    let b = reconstructed.to_f64();
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    };
    Ok(ReconstructionError { mse, psnr })
}

/// Mean squared error over a set of image pairs.
pub fn mean_mse(originals: &[Image], reconstructed: &[Image]) -> Result<f64> {
    if originals.len() != reconstructed.len() || originals.is_empty() {
        return Err(Error::Dimension(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructed.len()
        )));
    }
    let total = originals
        .iter()
        .zip(reconstructed)
        .map(|(a, b)| reconstruction_error(a, b).map(|e| e.mse))
        .sum::<Result<f64>>()?;
    Ok(total / originals.len() as f64)
}

/// Largest relative change in block-column distance between image pairs,
/// `| |dy| - |dx| | / max(|dx|, eps)`, over all pairs (or `max_pairs`
/// sampled pairs) and all block columns.
pub fn distance_preservation(
    originals: &[Image],
    disguised: &[Image],
    key: &KeyMaterial,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let key = match key {
        KeyMaterial::Rmt(k) => k,
        other => {
            return Err(Error::MechanismMismatch {
                expected: "rmt",
                got: other.mechanism_name(),
            })
        }
    };
    if originals.len() != disguised.len() {
        return Err(Error::Dimension(format!(
            "{} originals vs {} disguised images",
            originals.len(),
            disguised.len()
        )));
    }
    let layout = &key.layout;
    let (c, r, s, t) = (
        layout.channels,
        layout.block_rows(),
        layout.block_cols(),
        layout.t(),
    );
    let xs = originals
        .iter()
        .map(|im| rmt::permuted_blocks(im, layout, &key.permutation))
        .collect::<Result<Vec<_>>>()?;
    let ys = disguised
        .iter()
        .map(|im| {
            layout.check_image(im)?;
            Ok(blocks::partition(im, t)?
                .blocks
                .iter()
                .map(|b| b.to_f64())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let n = originals.len();
    let all_pairs = n * n.saturating_sub(1) / 2;
    let pairs: Vec<(usize, usize)> = if all_pairs <= max_pairs {
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect()
    } else {
        let mut rng = SeededRng::child(seed, &[stream::SAMPLE]);
        (0..max_pairs)
            .map(|_| {
                let a = rng.below(n);
                let mut b = rng.below(n - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect()
    };

    let column_dist = |u: &[f64], v: &[f64], ch: usize, col: usize| -> f64 {
        (0..r)
            .map(|row| {
                let k = (ch * r + row) * s + col;
                (u[k] - v[k]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };

    let worst = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut worst = 0.0f64;
            for i in 0..t {
                for ch in 0..c {
                    for col in 0..s {
                        let dx = column_dist(&xs[a][i], &xs[b][i], ch, col);
                        let dy = column_dist(&ys[a][i], &ys[b][i], ch, col);
                        worst = worst.max((dy - dx).abs() / dx.max(DISTANCE_EPSILON));
                    }
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn labels_of(images: &[Image], what: &str) -> Result<Vec<u32>> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            im.label()
                .ok_or_else(|| Error::InvalidParameter(format!("{what} image {i} has no label")))
        })
        .collect()
}

/// k-nearest-neighbor classifier accuracy with Euclidean pixel distance.
/// Vote ties go to the tied label whose nearest member is closest.
pub fn knn_examiner(train: &[Image], eval: &[Image], k: usize) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyDataset(
            "k-NN examiner needs training images".into(),
        ));
    }
    if eval.is_empty() {
        return Err(Error::EmptyDataset(
            "k-NN examiner needs evaluation images".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let dims = train[0].dims();
    if let Some(bad) = train.iter().chain(eval).find(|im| im.dims() != dims) {
        return Err(Error::Dimension(format!(
            "k-NN inputs differ in shape: {dims:?} vs {:?}",
            bad.dims()
        )));
    }
    let train_labels = labels_of(train, "training")?;
    let eval_labels = labels_of(eval, "evaluation")?;
    let train_px: Vec<Vec<f64>> = train.iter().map(Image::to_f64).collect();
    let k = k.min(train.len());

    let correct = eval
        .par_iter()
        .zip(&eval_labels)
        .filter(|(query, &truth)| {
            let q = query.to_f64();
            let mut dists: Vec<(f64, usize)> = train_px
                .iter()
                .enumerate()
                .map(|(i, t)| (squared_distance(&q, t), i))
                .collect();
            dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let mut nearest = dists[..k].to_vec();
            nearest.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));

            // (label, votes, rank of its closest member)
            let mut votes: Vec<(u32, usize, usize)> = Vec::new();
            for (rank, &(_, i)) in nearest.iter().enumerate() {
                let label = train_labels[i];
                match votes.iter_mut().find(|v| v.0 == label) {
                    Some(v) => v.1 += 1,
                    None => votes.push((label, 1, rank)),
                }
            }
            let winner = votes
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
                .map(|v| v.0)
                .expect("k >= 1");
            winner == truth
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

/// For each image, the set of other images at minimal Euclidean distance
/// (within a relative tolerance).
pub fn nearest_neighbor_sets(images: &[Image], rel_tol: f64) -> Vec<Vec<usize>> {
    let px: Vec<Vec<f64>> = images.iter().map(Image::to_f64).collect();
    (0..px.len())
        .into_par_iter()
        .map(|a| {
            let d: Vec<(usize, f64)> = (0..px.len())
                .filter(|&b| b != a)
                .map(|b| (b, squared_distance(&px[a], &px[b]).sqrt()))
                .collect();
            let min = d.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            d.into_iter()
                .filter(|&(_, v)| v <= min + rel_tol * min.max(1.0))
                .map(|(b, _)| b)
                .collect()
        })
        .collect()
}

/// Examiner accuracy on reconstructed images relative to its accuracy on the
/// originals, in percent.
pub fn attack_success_rate(acc_reconstructed: f64, acc_original: f64) -> Result<f64> {
    if acc_original.is_nan() || acc_original <= 0.0 {
        return Err(Error::UndefinedBaseline(format!(
            "examiner accuracy on originals is {acc_original}"
        )));
    }
    Ok(acc_reconstructed / acc_original * 100.0)
}

/// `|Err(disguised) - Err(baseline)|` from accuracies.
pub fn utility_gap(acc_disguised: f64, acc_baseline: f64) -> Result<f64> {
    for (name, v) in [("disguised", acc_disguised), ("baseline", acc_baseline)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!(
                "{name} accuracy {v} is outside [0, 1]"
            )));
        }
    }
    Ok(((1.0 - acc_disguised) - (1.0 - acc_baseline)).abs())
}

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub mechanism: String,
    pub params: String,
    pub seed: u64,
    pub value: f64,
}

pub const METRIC_COLUMNS: [&str; 5] = ["metric", "mechanism", "params", "seed", "value"];

pub fn write_metric_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_COLUMNS)?;
    for row in rows {
        w.write_record([
            row.metric.as_str(),
            row.mechanism.as_str(),
            row.params.as_str(),
            &row.seed.to_string(),
            &format_value(row.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal; `inf`/`nan` spelled out.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}
