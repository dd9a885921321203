//! Synthetic Gaussian-cluster datasets.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cli::config::SynthSection;
use crate::error::{Error, Result};
use crate::model::{Dataset, MultiHot};

/// Draws `total` items from `c` isotropic Gaussian clusters.
///
/// Centers are random directions scaled to radius `4 * noise_sigma` (unit
/// radius when `noise_sigma` is 0). Each item belongs to one cluster; with
/// probability `multi_label_prob` it also takes the label of the nearest
/// other center.
pub fn generate(cfg: &SynthSection, total: usize) -> Result<Dataset> {
    let SynthSection {
        d,
        c,
        multi_label_prob,
        noise_sigma,
        seed,
        ..
    } = *cfg;
    if c < 2 || d < 2 || total < c {
        return Err(Error::Config(format!("invalid synthetic sizes: n={total}, d={d}, c={c}")));
    }
    if !(0.0..=1.0).contains(&multi_label_prob) || !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config("invalid synthetic noise or label probability".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = if noise_sigma > 0.0 { 4.0 * noise_sigma } else { 1.0 };

    let mut centers = Array2::<f64>::zeros((c, d));
    for mut row in centers.rows_mut() {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.dot(&v).sqrt();
        row.assign(&(v * (radius / norm)));
    }

    let mut features = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        // every cluster gets at least one item
        let cluster = if i < c { i } else { rng.gen_range(0..c) };
        let mut x = centers.row(cluster).to_owned();
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sigma * z;
        }
        let mut classes = vec![cluster];
        if rng.gen_bool(multi_label_prob) {
            let second = (0..c)
                .filter(|&j| j != cluster)
                .map(|j| {
                    let diff = &x - &centers.row(j);
                    (j, diff.dot(&diff))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j)
                .expect("at least two classes");
            classes.push(second);
        }
        features.row_mut(i).assign(&x);
        labels.push(MultiHot::from_classes(c, &classes)?);
    }
    Dataset::new(features, labels, c)
}

/// Generates a database of `cfg.n` items and `cfg.num_queries` held-out
/// queries from the same clusters.
pub fn generate_split(cfg: &SynthSection) -> Result<(Dataset, Dataset)> {
    let all = generate(cfg, cfg.n + cfg.num_queries)?;
    Ok(split(&all, cfg.n))
}

fn split(data: &Dataset, at: usize) -> (Dataset, Dataset) {
    let part = |range: std::ops::Range<usize>| {
        let features = data.features().slice(ndarray::s![range.clone(), ..]).to_owned();
        let labels = data.labels()[range].to_vec();
        Dataset::new(features, labels, data.num_classes()).expect("subset of a valid dataset")
    };
    (part(0..at), part(at..data.num_items()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthSection {
        SynthSection {
            n: 120,
            d: 6,
            c: 3,
            multi_label_prob: 0.0,
            noise_sigma: 0.5,
            seed: 4,
            num_queries: 10,
        }
    }

    #[test]
    fn single_labels_without_multi_label_prob() {
        let data = generate(&cfg(), 120).unwrap();
        assert!(data.labels().iter().all(|l| l.count() == 1));
    }

    #[test]
    fn multi_labels_appear() {
        let data = generate(
            &SynthSection {
                multi_label_prob: 0.5,
                ..cfg()
            },
            120,
        )
        .unwrap();
        let multi = data.labels().iter().filter(|l| l.count() == 2).count();
        assert!(multi > 30 && multi < 90, "{multi}");
    }

    #[test]
    fn zero_noise_items_sit_on_centers() {
        let data = generate(
            &SynthSection {
                noise_sigma: 0.0,
                ..cfg()
            },
            60,
        )
        .unwrap();
        // nearest of the first c items (one per cluster) recovers each label
        for i in 0..data.num_items() {
            let x = data.feature(i);
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da = (&x - &data.feature(a)).mapv(|v| v * v).sum();
                    let db = (&x - &data.feature(b)).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(data.label(i), data.label(nearest));
            assert_eq!((&x - &data.feature(nearest)).mapv(f64::abs).sum(), 0.0);
        }
    }

    #[test]
    fn deterministic_and_split() {
        let (db, q) = generate_split(&cfg()).unwrap();
        let (db2, q2) = generate_split(&cfg()).unwrap();
        assert_eq!(db, db2);
        assert_eq!(q, q2);
        assert_eq!((db.num_items(), q.num_items()), (120, 10));
    }

    #[test]
    fn invalid_sizes() {
        assert!(generate(&SynthSection { c: 1, ..cfg() }, 10).is_err());
        assert!(generate(&cfg(), 2).is_err());
        assert!(generate(&SynthSection { d: 1, ..cfg() }, 10).is_err());
    }
}
