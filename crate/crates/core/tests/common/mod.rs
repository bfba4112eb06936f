//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use asda::feature::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Non-negative feature map, like post-ReLU activations.
pub fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    let data = (0..h * w * c).map(|_| rng.random_range(0.0..2.0)).collect();
    FeatureMap::new(h, w, c, data).unwrap()
}

/// AP as the area under the stepwise precision-recall curve of the cleaned
/// ranking: sum over cutoffs of precision(k) * (recall(k) - recall(k-1)).
pub fn brute_force_ap(ranking: &[usize], positives: &BTreeSet<usize>, ignore: &BTreeSet<usize>) -> f64 {
    let cleaned: Vec<usize> = ranking.iter().copied().filter(|i| !ignore.contains(i)).collect();
    let total = positives.len() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=cleaned.len() {
        let hits = cleaned[..k].iter().filter(|i| positives.contains(i)).count() as f64;
        let precision = hits / k as f64;
        let recall = hits / total;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    area
}

/// Contrastive loss of one tuple and its gradient with respect to each
/// descriptor, written out from the loss definition.
pub fn tuple_loss_and_grad(q: &[f64], p: &[f64], negs: &[&[f64]], margin: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let diff: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let mut loss: f64 = diff.iter().map(|d| d * d).sum();
    let mut dq: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    let dp: Vec<f64> = diff.iter().map(|d| -2.0 * d).collect();
    let mut dns = Vec::new();
    for n in negs {
        let dist = q.iter().zip(*n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let mut dn = vec![0.0; q.len()];
        if dist < margin {
            loss += (margin - dist).powi(2);
            if dist > 0.0 {
                for j in 0..q.len() {
                    let g = -2.0 * (margin - dist) * (q[j] - n[j]) / dist;
                    dq[j] += g;
                    dn[j] = -g;
                }
            }
        }
        dns.push(dn);
    }
    (loss, dq, dp, dns)
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
