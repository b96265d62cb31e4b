//! Synthetic 2-D/d-D classification sets, mapped into `[0, 1]`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nd::{slots, Real, StreamKey, Tensor};

fn blob_centers(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim >= classes {
                // pairwise distance is exactly `separation`
                v[c] = separation / std::f64::consts::SQRT_2;
            } else if dim == 1 {
                v[0] = c as f64 * separation;
            } else {
                // regular polygon in the first two axes, adjacent centers `separation` apart
                let r = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                v[0] = r * a.cos();
                v[1] = r * a.sin();
            }
            v
        })
        .collect()
}

/// Isotropic Gaussian blobs; example `i` has label `i % classes`.
pub fn synth_blobs<T: Real>(
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    key: StreamKey,
) -> Result<Dataset<T>> {
    if classes < 2 || dim == 0 || !(sigma > 0.0) || !(separation >= 0.0) {
        return Err(Error::Domain(format!(
            "blobs need classes >= 2, dim >= 1, sigma > 0, separation >= 0; got {classes}, {dim}, {sigma}, {separation}"
        )));
    }
    let centers = blob_centers(classes, dim, separation);
    let all = centers.iter().flatten();
    let lo = all.clone().fold(f64::INFINITY, |a, &b| a.min(b)) - 4.0 * sigma;
    let hi = all.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 4.0 * sigma;
    let mut rng = key.with_slot(slots::DATA).rng();
    let mut data = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &y in &labels {
        for &c in &centers[y] {
            let v = c + sigma * rng.sample::<f64, _>(StandardNormal);
            data.push(T::of(((v - lo) / (hi - lo)).clamp(0.0, 1.0)));
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Two interleaved half circles with Gaussian noise.
pub fn synth_two_moons<T: Real>(n: usize, noise: f64, key: StreamKey) -> Result<Dataset<T>> {
    if !(noise >= 0.0) {
        return Err(Error::Domain(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = key.with_slot(slots::DATA).rng();
    let mut data = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (mut x0, mut x1) = if y == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        x0 += noise * rng.sample::<f64, _>(StandardNormal);
        x1 += noise * rng.sample::<f64, _>(StandardNormal);
        data.push(T::of(((x0 + 1.5) / 4.0).clamp(0.0, 1.0)));
        data.push(T::of(((x1 + 1.75) / 4.0).clamp(0.0, 1.0)));
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_are_separated() {
        for (c, d) in [(3, 5), (5, 2), (3, 1)] {
            let centers = blob_centers(c, d, 2.0);
            let mut min = f64::INFINITY;
            for i in 0..c {
                for j in i + 1..c {
                    let dist: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    min = min.min(dist.sqrt());
                }
            }
            assert!((min - 2.0).abs() < 1e-12, "{c} classes in {d}-D: {min}");
        }
    }

    #[test]
    fn blobs_in_unit_box_and_balanced() {
        let d = synth_blobs::<f64>(300, 3, 4, 3.0, 0.5, StreamKey::new(1)).unwrap();
        assert_eq!(d.inputs().shape(), &[300, 4]);
        assert!(d.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in 0..3 {
            assert_eq!(d.labels().iter().filter(|&&y| y == c).count(), 100);
        }
        assert_eq!(d, synth_blobs(300, 3, 4, 3.0, 0.5, StreamKey::new(1)).unwrap());
        assert_ne!(d, synth_blobs(300, 3, 4, 3.0, 0.5, StreamKey::new(2)).unwrap());
    }

    #[test]
    fn moons_shape() {
        let d = synth_two_moons::<f32>(101, 0.1, StreamKey::new(4)).unwrap();
        assert_eq!(d.inputs().shape(), &[101, 2]);
        assert_eq!(d.classes(), 2);
        assert!(synth_two_moons::<f32>(1, -0.1, StreamKey::new(4)).is_err());
    }
}
