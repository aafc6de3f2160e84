//! Proxy quality metrics over the repo's own discriminator features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::frequency::high_freq_energy;
use crate::gan::DiscriminatorNet;
use crate::structural::laplacian_energy;
use crate::tensor::Tensor;

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] if n >= 2 && d >= 1 => Ok((n, d)),
        _ => Err(Error::shape(format!(
            "feature sets must be [n >= 2, d], got {:?}",
            t.shape()
        ))),
    }
}

fn gaussian_fit(t: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = rows(t)?;
    let x = DMatrix::from_row_iterator(n, d, t.data().iter().map(|&v| v as f64));
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets `[n, d]`:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The square root
/// trace is taken as the sum of root eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`,
/// eigenvalues clamped at zero.
pub fn proxy_frechet(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, da) = rows(a)?;
    let (_, db) = rows(b)?;
    if da != db {
        return Err(Error::shape(format!("feature dimensions {da} vs {db}")));
    }
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Mean per-pixel L1 distance over all unordered pairs; 0 for fewer than two.
pub fn pairwise_l1(images: &[Tensor]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            let l1: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64)
                .sum();
            total += l1 / a.len() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Proxy metrics comparing real images with generated ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SetMetrics {
    pub frechet: f64,
    pub pairwise_l1: f64,
    pub laplacian_gap: f64,
    pub highfreq_gap: f64,
}

/// `reals` and every fake are `[C, H, W]`; `fakes` is grouped by episode
/// for the diversity term.
pub fn evaluate_sets(
    features: &DiscriminatorNet,
    reals: &[Tensor],
    fakes: &[Vec<Tensor>],
) -> Result<SetMetrics> {
    let flat: Vec<Tensor> = fakes.iter().flatten().cloned().collect();
    if reals.len() < 2 || flat.len() < 2 {
        return Err(Error::InsufficientSamples {
            category: "<evaluation set>".into(),
            available: reals.len().min(flat.len()),
            required: 2,
        });
    }
    let real = Tensor::stack(reals)?;
    let fake = Tensor::stack(&flat)?;
    let frechet = proxy_frechet(
        &batched_features(features, &real)?,
        &batched_features(features, &fake)?,
    )?;
    let diversity = fakes.iter().map(|e| pairwise_l1(e)).sum::<f64>() / fakes.len() as f64;
    Ok(SetMetrics {
        frechet,
        pairwise_l1: diversity,
        laplacian_gap: (laplacian_energy(&real)? - laplacian_energy(&fake)?).abs(),
        highfreq_gap: (high_freq_energy(&real)? - high_freq_energy(&fake)?).abs(),
    })
}

fn batched_features(net: &DiscriminatorNet, images: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    let chunk = 64;
    let mut data = Vec::new();
    let mut dim = 0;
    for start in (0..n).step_by(chunk) {
        let len = chunk.min(n - start);
        let part = Tensor::new(
            &[len, c, h, w],
            images.data()[start * c * h * w..(start + len) * c * h * w].to_vec(),
        )?;
        let f = net.tap_features(&part)?;
        dim = f.shape()[1];
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[n, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[200, 8], 1.0, &mut rng);
        assert!(proxy_frechet(&a, &a).unwrap() < 1e-4);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        let a = Tensor::from_fn(&[10_000, 1], |_| n.sample(&mut rng));
        let b = Tensor::from_fn(&[10_000, 1], |_| 2.0 + n.sample(&mut rng));
        let d = proxy_frechet(&a, &b).unwrap();
        assert!((d - 4.0).abs() < 0.2, "{d}");
    }

    #[test]
    fn symmetric_non_negative_and_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[50, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[40, 6], 2.0, &mut rng).map(|v| v + 0.3);
        let (ab, ba) = (
            proxy_frechet(&a, &b).unwrap(),
            proxy_frechet(&b, &a).unwrap(),
        );
        assert!((ab - ba).abs() < 1e-6 * ab.max(1.0));
        assert!(ab > 0.0);
        assert!(matches!(
            proxy_frechet(&a, &Tensor::zeros(&[5, 3])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            proxy_frechet(&a, &Tensor::zeros(&[1, 6])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pairwise_l1_values() {
        let a = Tensor::full(&[1, 2, 2], 0.5);
        let b = Tensor::full(&[1, 2, 2], -0.5);
        assert_eq!(pairwise_l1(&[a.clone()]), 0.0);
        assert_eq!(pairwise_l1(&[a.clone(), b.clone()]), 1.0);
        assert!((pairwise_l1(&[a.clone(), b, a]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
