//! Distributional checks against closed-form references.

use disguise_core::aes_disguise::salt_pepper_with_mask;
use disguise_core::attacks::{regression_attack, AttackerKnowledge, KnownPair};
use disguise_core::blocks::gen_permutation;
use disguise_core::dataset::random_images;
use disguise_core::metrics::{knn_examiner, mean_mse};
use disguise_core::rmt::{disguise_rmt, gen_orthogonal, keygen_rmt, NoiseSpec};
use disguise_core::rng::SeededRng;
use disguise_core::Image;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn permutations_are_uniform_per_position() {
    let t = 16;
    let draws = 16_000;
    let mut counts = vec![vec![0u32; t]; t];
    for seed in 0..draws {
        let p = gen_permutation(seed as u64, t).unwrap();
        for (pos, &v) in p.indices().iter().enumerate() {
            counts[pos][v as usize] += 1;
        }
    }
    let expected = draws as f64 / t as f64;
    let stat: f64 = counts
        .iter()
        .flatten()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let df = (t * (t - 1)) as f64;
    let critical = ChiSquared::new(df).unwrap().inverse_cdf(0.99);
    assert_eq!(df, 240.0);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn haar_entries_have_zero_mean_and_unit_columns() {
    let m = 7;
    let n = 4000;
    let mut sums = vec![0.0; m * m];
    for seed in 0..n {
        let q = gen_orthogonal(seed as u64, m).unwrap();
        let qtq = q.transpose() * &q;
        assert!((qtq - nalgebra::DMatrix::identity(m, m)).amax() < 1e-12);
        for (s, v) in sums.iter_mut().zip(q.iter()) {
            *s += v;
        }
    }
    let per_entry_sd = 1.0 / ((n * m) as f64).sqrt();
    for s in &sums {
        assert!((s / n as f64).abs() < 4.5 * per_entry_sd);
    }
    let pooled = sums.iter().sum::<f64>() / (n * m * m) as f64;
    let pooled_sd = 1.0 / ((n * m * m * m) as f64).sqrt();
    assert!(pooled.abs() < 4.5 * pooled_sd, "pooled mean {pooled}");
}

#[test]
fn salt_and_pepper_rate() {
    let img = Image::filled(1, 1000, 1000, 128).unwrap();
    let (noisy, mask) = salt_pepper_with_mask(&img, 0.02, 99).unwrap();
    let flipped = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    assert!((flipped - 0.02).abs() <= 0.002, "rate {flipped}");
    let bytes = noisy.as_bytes().unwrap();
    let salt = bytes.iter().filter(|&&b| b == 255).count() as f64;
    let pepper = bytes.iter().filter(|&&b| b == 0).count() as f64;
    assert!((salt / (salt + pepper) - 0.5).abs() < 0.02);
}

#[test]
fn knn_random_labels_is_chance() {
    let train = random_images(1000, 10, (1, 8, 8), 1).unwrap();
    let eval = random_images(1000, 10, (1, 8, 8), 2).unwrap();
    let acc = knn_examiner(&train, &eval, 5).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
}

fn blob(rng: &mut SeededRng, centre: f64, label: u32) -> Image {
    let px = (0..64).map(|_| centre + 10.0 * rng.gaussian()).collect();
    Image::from_real(1, 8, 8, px)
        .unwrap()
        .with_label(Some(label))
}

#[test]
fn knn_separates_gaussian_blobs() {
    let mut rng = SeededRng::new(3);
    let make = |rng: &mut SeededRng, n: usize| -> Vec<Image> {
        (0..n)
            .map(|i| blob(rng, if i % 2 == 0 { 60.0 } else { 80.0 }, (i % 2) as u32))
            .collect()
    };
    let train = make(&mut rng, 200);
    let eval = make(&mut rng, 200);
    let acc = knn_examiner(&train, &eval, 3).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn regression_error_falls_with_more_pairs() {
    let counts = [1usize, 2, 4, 8, 16, 32];
    let mut errors = Vec::new();
    for &n in &counts {
        let mut per_seed = Vec::new();
        for seed in 0..5u64 {
            let key = keygen_rmt(
                seed,
                1,
                (14, 14),
                4,
                NoiseSpec::new(50.0, true).unwrap(),
                true,
            )
            .unwrap();
            let imgs = random_images(n + 10, 10, (1, 14, 14), seed + 100).unwrap();
            let pairs: Vec<KnownPair> = imgs[..n]
                .iter()
                .enumerate()
                .map(|(i, im)| KnownPair {
                    original: im.clone(),
                    disguised: disguise_rmt(im, &key, i as u64).unwrap(),
                    image_id: i as u64,
                })
                .collect();
            let originals = &imgs[n..];
            let targets: Vec<Image> = originals
                .iter()
                .enumerate()
                .map(|(i, im)| disguise_rmt(im, &key, (n + i) as u64).unwrap())
                .collect();
            let out = regression_attack(
                &pairs,
                &AttackerKnowledge::from_rmt_key(&key, true),
                &targets,
            )
            .unwrap();
            per_seed.push(mean_mse(originals, &out.reconstructed).unwrap());
        }
        per_seed.sort_by(f64::total_cmp);
        errors.push(per_seed[per_seed.len() / 2]);
    }
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let rho = spearman(&xs, &errors);
    assert!(rho <= -0.9, "spearman {rho}, errors {errors:?}");
}
