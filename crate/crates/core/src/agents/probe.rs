//! Linear probes from frozen embeddings to ground-truth attributes.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Continuous(Vec<f64>),
    Categorical(Vec<String>),
}

impl Labels {
    fn len(&self) -> usize {
        match self {
            Labels::Continuous(v) => v.len(),
            Labels::Categorical(v) => v.len(),
        }
    }
}

/// Held-out R² for regression, held-out accuracy for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub attribute: String,
    pub task: ProbeTask,
    pub score: f64,
}

pub const TRAIN_FRACTION: f64 = 0.8;
const L2: f64 = 1e-4;
const ITERATIONS: usize = 2000;
const STEP: f64 = 0.5;

/// Seeded 80/20 split; both parts are nonempty.
fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
        seed,
        purpose::SPLIT,
        0,
    )));
    let cut = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(cut);
    (idx, test)
}

fn design(x: &[Vec<f64>], rows: &[usize], mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    let d = mean.len();
    DMatrix::from_fn(rows.len(), d + 1, |r, c| {
        if c == d {
            1.0
        } else {
            (x[rows[r]][c] - mean[c]) / scale[c]
        }
    })
}

fn standardizer(x: &[Vec<f64>], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(&x[r]) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for &r in rows {
        for ((s, v), m) in scale.iter_mut().zip(&x[r]).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

fn regression(x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<f64> {
    let (train, test) = split(x.len(), seed);
    let (mean, scale) = standardizer(x, &train);
    let a = design(x, &train, &mean, &scale);
    let b = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
    let w = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numeric(format!("least squares: {e}")))?;
    let pred = design(x, &test, &mean, &scale) * w;
    let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let ss_res: f64 = pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum();
    let centre_on = |vals: &[f64]| {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let mut ss_tot = centre_on(&truth);
    if ss_tot == 0.0 {
        ss_tot = centre_on(y) * truth.len() as f64 / y.len() as f64;
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One-vs-rest L2 logistic regression by full-batch gradient descent.
fn classification(x: &[Vec<f64>], y: &[String], seed: u64) -> Result<f64> {
    let mut classes: Vec<&String> = y.iter().collect();
    classes.sort();
    classes.dedup();
    let (train, test) = split(x.len(), seed);
    let (mean, scale) = standardizer(x, &train);
    let a = design(x, &train, &mean, &scale);
    let at = design(x, &test, &mean, &scale);
    let n = train.len() as f64;
    let mut weights = Vec::with_capacity(classes.len());
    for class in &classes {
        let target = DVector::from_iterator(
            train.len(),
            train.iter().map(|&i| f64::from(u8::from(&y[i] == *class))),
        );
        let mut w = DVector::zeros(a.ncols());
        for _ in 0..ITERATIONS {
            let p = (&a * &w).map(sigmoid);
            let mut g = a.tr_mul(&(p - &target)) / n;
            for k in 0..w.len() - 1 {
                g[k] += L2 * w[k];
            }
            w -= STEP * g;
        }
        weights.push(w);
    }
    let scores: Vec<DVector<f64>> = weights.iter().map(|w| &at * w).collect();
    let correct = (0..test.len())
        .filter(|&r| {
            let best = (0..classes.len())
                .max_by(|&p, &q| scores[p][r].total_cmp(&scores[q][r]))
                .expect("at least two classes");
            classes[best] == &y[test[r]]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn linear_probe(
    attribute: &str,
    embeddings: &[Vec<f64>],
    labels: &Labels,
    seed: u64,
) -> Result<ProbeResult> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "probe needs at least 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings must share a nonzero width".into()));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite embedding value".into()));
    }
    let (task, score) = match labels {
        Labels::Continuous(y) => {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite label".into()));
            }
            if y.iter().all(|v| *v == y[0]) {
                return Err(Error::Argument(format!("{attribute}: constant labels")));
            }
            (ProbeTask::Regression, regression(embeddings, y, seed)?)
        }
        Labels::Categorical(y) => {
            if y.iter().all(|v| *v == y[0]) {
                return Err(Error::Argument(format!("{attribute}: a single class")));
            }
            (
                ProbeTask::Classification,
                classification(embeddings, y, seed)?,
            )
        }
    };
    Ok(ProbeResult {
        attribute: attribute.to_string(),
        task,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_hot(n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<String>) {
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let x = labels
            .iter()
            .map(|&c| (0..k).map(|j| f64::from(u8::from(j == c))).collect())
            .collect();
        (x, labels.iter().map(|c| format!("c{c}")).collect())
    }

    #[test]
    fn one_hot_is_perfectly_separable() {
        let (x, y) = one_hot(100, 4);
        let r = linear_probe("weather", &x, &Labels::Categorical(y), 0).unwrap();
        assert_eq!(r.task, ProbeTask::Classification);
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn linear_functional_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|e| {
                0.3 + e
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (j as f64 - 2.0) * v)
                    .sum::<f64>()
            })
            .collect();
        let r = linear_probe("peak", &x, &Labels::Continuous(y), 1).unwrap();
        assert!((r.score - 1.0).abs() < 1e-9, "{}", r.score);
    }

    #[test]
    fn permuted_labels_stay_near_chance() {
        // Binomial(40, 1/2) at 99%: [12, 28] correct.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut y: Vec<String> = (0..200).map(|i| format!("c{}", i % 2)).collect();
        y.shuffle(&mut rng);
        let r = linear_probe("noise", &x, &Labels::Categorical(y), 4).unwrap();
        assert!(
            (12.0 / 40.0..=28.0 / 40.0).contains(&r.score),
            "{}",
            r.score
        );
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let same = Labels::Categorical(vec!["a".into(); 3]);
        assert!(matches!(
            linear_probe("w", &x, &same, 0),
            Err(Error::Argument(_))
        ));
        let flat = Labels::Continuous(vec![0.5; 3]);
        assert!(matches!(
            linear_probe("p", &x, &flat, 0),
            Err(Error::Argument(_))
        ));
        let one = Labels::Continuous(vec![0.5]);
        assert!(linear_probe("p", &x[..1], &one, 0).is_err());
        assert!(matches!(
            linear_probe("p", &x, &Labels::Continuous(vec![0.0, 1.0]), 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn split_is_seeded_and_covers_everything() {
        let (a, b) = split(10, 5);
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all = [a.clone(), b.clone()].concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(10, 5), (a, b));
        assert_eq!(split(2, 0).1.len(), 1);
    }
}
