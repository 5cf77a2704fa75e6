use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

/// Random bijection from original class ids onto `0..n_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    forward: BTreeMap<u32, u32>,
    seed: u64,
}

impl LabelMap {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn apply(&self, label: u32) -> Option<u32> {
        self.forward.get(&label).copied()
    }

    pub fn invert(&self, disguised: u32) -> Option<u32> {
        self.forward
            .iter()
            .find_map(|(&orig, &d)| (d == disguised).then_some(orig))
    }

    pub fn mapping(&self) -> &BTreeMap<u32, u32> {
        &self.forward
    }
}

/// Draws a random class bijection over the labels' class set and applies it.
pub fn remap_labels(labels: &[u32], seed: u64) -> Result<(LabelMap, Vec<u32>)> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("no labels to remap".into()));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut targets: Vec<u32> = (0..classes.len() as u32).collect();
    SeededRng::child(seed, &[stream::LABELS]).shuffle(&mut targets);

    let forward: BTreeMap<u32, u32> = classes.into_iter().zip(targets).collect();
    let remapped = labels.iter().map(|l| forward[l]).collect();
    Ok((LabelMap { forward, seed }, remapped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_frequencies() {
        let labels = [0, 1, 1, 2, 2, 2];
        let (_, out) = remap_labels(&labels, 5).unwrap();
        let mut counts: Vec<usize> = (0..3)
            .map(|c| out.iter().filter(|&&l| l == c).count())
            .collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![1, 2, 3]);
    }

    #[test]
    fn ten_classes_map_to_permutation() {
        let labels: Vec<u32> = (0..100).map(|i| i % 10).collect();
        let (map, _) = remap_labels(&labels, 11).unwrap();
        let mut image: Vec<u32> = map.mapping().values().copied().collect();
        image.sort_unstable();
        assert_eq!(image, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn inverse_restores() {
        let labels = [3, 7, 7, 1, 9, 3];
        let (map, out) = remap_labels(&labels, 2).unwrap();
        let back: Vec<u32> = out.iter().map(|&d| map.invert(d).unwrap()).collect();
        assert_eq!(back, labels);
    }

    #[test]
    fn empty_is_error() {
        assert!(remap_labels(&[], 1).is_err());
    }
}
