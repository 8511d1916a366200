//! Latent attribute directions and latent-space arithmetic.
//!
//! An attribute direction is the difference between the mean posterior code
//! of samples carrying a binary attribute and the mean of those without it.
//! Means use the posterior mean `mu` (not sampled z), so the statistic is
//! deterministic, and each coordinate is accumulated in a canonical value
//! order, so the result is exactly invariant to dataset permutation.

use thiserror::Error;

use crate::data::AttributedDataset;
use crate::models::{ModelError, VaeGan};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("attribute index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("attribute {attr} has an empty {side} class")]
    EmptyClass { attr: usize, side: &'static str },
    #[error("direction has dimension {dir} but the latent space has {latent}")]
    DimensionMismatch { dir: usize, latent: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AttributeError>;

/// A latent direction for one binary attribute, with class sizes recorded
/// for provenance.
#[derive(Debug, Clone)]
pub struct AttributeVector {
    pub attr_index: usize,
    pub direction: Tensor,
    pub with_count: usize,
    pub without_count: usize,
}

/// Mean of the selected rows, accumulated per coordinate in ascending value
/// order. Sorting makes the sum independent of row order.
fn canonical_mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut column: Vec<f64> = Vec::with_capacity(rows.len());
    for j in 0..dim {
        column.clear();
        column.extend(rows.iter().map(|r| r[j]));
        column.sort_by(f64::total_cmp);
        let sum: f64 = column.iter().sum();
        out.push(sum / rows.len() as f64);
    }
    out
}

/// Encode every dataset image and return per-attribute posterior means split
/// by class, as the attribute direction.
pub fn compute_attribute_vector(
    model: &mut VaeGan,
    dataset: &AttributedDataset,
    attr_index: usize,
) -> Result<AttributeVector> {
    if attr_index >= dataset.attr_count() {
        return Err(AttributeError::IndexOutOfRange(attr_index));
    }
    let n = dataset.len();
    let d_z = model.config().latent_dim;
    let conditional = model.is_conditional();

    // Encode in chunks; evaluation-mode encoding is row-independent.
    let mut codes: Vec<f64> = Vec::with_capacity(n * d_z);
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, attrs) = dataset.gather(&idx);
        let code = model.encode(&images, conditional.then_some(&attrs))?;
        codes.extend_from_slice(code.mu.data());
        start = end;
    }

    let with_rows: Vec<&[f64]> = (0..n)
        .filter(|&i| dataset.attributes().data()[i * dataset.attr_count() + attr_index] == 1.0)
        .map(|i| &codes[i * d_z..(i + 1) * d_z])
        .collect();
    let without_rows: Vec<&[f64]> = (0..n)
        .filter(|&i| dataset.attributes().data()[i * dataset.attr_count() + attr_index] == 0.0)
        .map(|i| &codes[i * d_z..(i + 1) * d_z])
        .collect();
    if with_rows.is_empty() {
        return Err(AttributeError::EmptyClass { attr: attr_index, side: "with" });
    }
    if without_rows.is_empty() {
        return Err(AttributeError::EmptyClass { attr: attr_index, side: "without" });
    }

    let mean_with = canonical_mean(&with_rows, d_z);
    let mean_without = canonical_mean(&without_rows, d_z);
    let direction: Vec<f64> = mean_with.iter().zip(&mean_without).map(|(a, b)| a - b).collect();
    Ok(AttributeVector {
        attr_index,
        direction: Tensor::from_vec(&[d_z], direction).unwrap(),
        with_count: with_rows.len(),
        without_count: without_rows.len(),
    })
}

/// `z + alpha * direction`, rowwise over a [N, d_z] batch of codes.
pub fn apply_attribute(z: &Tensor, vec: &AttributeVector, alpha: f64) -> Result<Tensor> {
    let d = vec.direction.numel();
    let d_z = *z.shape().last().unwrap();
    if d != d_z {
        return Err(AttributeError::DimensionMismatch { dir: d, latent: d_z });
    }
    let dir = vec.direction.data();
    let data: Vec<f64> = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + alpha * dir[i % d])
        .collect();
    Ok(Tensor::from_vec(z.shape(), data).unwrap())
}

/// Reconstruct `x` with the attribute direction added to its mean code.
pub fn edit_image(
    model: &mut VaeGan,
    x: &Tensor,
    vec: &AttributeVector,
    alpha: f64,
    attrs: Option<&Tensor>,
) -> Result<Tensor> {
    let code = model.encode(x, attrs)?;
    let edited = apply_attribute(&code.mu, vec, alpha)?;
    Ok(model.decode(&edited, attrs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::models::ModelConfig;
    use crate::rng::SeedRng;

    fn toy_model() -> VaeGan {
        let mut rng = SeedRng::new(1);
        VaeGan::new(ModelConfig::new(16, 3, 0.125).with_latent_dim(4), &mut rng).unwrap()
    }

    fn toy_dataset(n: usize, seed: u64) -> AttributedDataset {
        crate::data::generate_synthetic(&crate::data::SyntheticSpec::new(16, n, seed)).unwrap()
    }

    #[test]
    fn two_point_means() {
        // With-class codes all (1,0), without-class all (0,0): direction (1,0).
        let with_rows_data = [[1.0, 0.0], [1.0, 0.0]];
        let without_rows_data = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let with_rows: Vec<&[f64]> = with_rows_data.iter().map(|r| &r[..]).collect();
        let without_rows: Vec<&[f64]> = without_rows_data.iter().map(|r| &r[..]).collect();
        let mw = canonical_mean(&with_rows, 2);
        let mo = canonical_mean(&without_rows, 2);
        assert_eq!(mw, vec![1.0, 0.0]);
        assert_eq!(mo, vec![0.0, 0.0]);
    }

    #[test]
    fn matches_two_pass_mean_oracle_exactly() {
        // 20 random codes with random labels: direction equals an
        // independent two-pass mean computation (same canonical ordering).
        let mut rng = SeedRng::new(33);
        let n = 20;
        let d = 4;
        let codes: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();

        let with_rows: Vec<&[f64]> = codes
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l)
            .map(|(c, _)| &c[..])
            .collect();
        let without_rows: Vec<&[f64]> = codes
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| !l)
            .map(|(c, _)| &c[..])
            .collect();

        // Oracle: per-coordinate gather, canonical sort, sum, divide.
        let oracle = |rows: &[&[f64]], j: usize| -> f64 {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let mw = canonical_mean(&with_rows, d);
        let mo = canonical_mean(&without_rows, d);
        for j in 0..d {
            assert_eq!(mw[j].to_bits(), oracle(&with_rows, j).to_bits());
            assert_eq!(mo[j].to_bits(), oracle(&without_rows, j).to_bits());
        }
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let mut model = toy_model();
        let ds = toy_dataset(40, 2);
        let v1 = compute_attribute_vector(&mut model, &ds, 0).unwrap();

        // Rebuild the dataset with rows in reverse order.
        let rev: Vec<usize> = (0..ds.len()).rev().collect();
        let (img, attrs) = ds.gather(&rev);
        let reversed =
            AttributedDataset::new(img, attrs, ds.attr_names().to_vec(), Split::Train).unwrap();
        let v2 = compute_attribute_vector(&mut model, &reversed, 0).unwrap();

        assert_eq!(v1.with_count, v2.with_count);
        assert!(v1.direction.bits_eq(&v2.direction));
    }

    #[test]
    fn negated_labels_negate_the_direction_exactly() {
        let mut model = toy_model();
        let ds = toy_dataset(30, 3);
        let v = compute_attribute_vector(&mut model, &ds, 1).unwrap();

        let flipped_attrs = ds.attributes().map(|b| 1.0 - b);
        let flipped = AttributedDataset::new(
            ds.images().clone(),
            flipped_attrs,
            ds.attr_names().to_vec(),
            Split::Train,
        )
        .unwrap();
        let vf = compute_attribute_vector(&mut model, &flipped, 1).unwrap();
        assert_eq!(v.with_count, vf.without_count);
        for (a, b) in v.direction.data().iter().zip(vf.direction.data()) {
            assert_eq!(a.to_bits(), (-b).to_bits());
        }
    }

    #[test]
    fn degenerate_class_is_an_error() {
        let mut model = toy_model();
        let ds = toy_dataset(10, 4);
        let ones = Tensor::ones(&[10, 3]);
        let all_with =
            AttributedDataset::new(ds.images().clone(), ones, ds.attr_names().to_vec(), Split::Train).unwrap();
        assert!(matches!(
            compute_attribute_vector(&mut model, &all_with, 0),
            Err(AttributeError::EmptyClass { side: "without", .. })
        ));
    }

    #[test]
    fn apply_attribute_arithmetic() {
        let vec = AttributeVector {
            attr_index: 0,
            direction: Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap(),
            with_count: 1,
            without_count: 1,
        };
        let z = Tensor::from_vec(&[1, 2], vec![0.0, 3.0]).unwrap();
        // alpha = 0 leaves z unchanged.
        assert!(apply_attribute(&z, &vec, 0.0).unwrap().bits_eq(&z));
        // alpha = 2 with direction (1,0): (0,3) -> (2,3).
        let moved = apply_attribute(&z, &vec, 2.0).unwrap();
        assert_eq!(moved.data(), &[2.0, 3.0]);
        // Dimension mismatch rejected.
        let bad = Tensor::zeros(&[1, 3]);
        assert!(apply_attribute(&bad, &vec, 1.0).is_err());
    }

    #[test]
    fn linearity_exact_on_grid_values() {
        // On dyadic-grid values no rounding occurs, so adding alpha and then
        // beta equals adding alpha+beta exactly, and +1/-1 round-trips.
        let grid = |k: i64| k as f64 / 1024.0;
        let direction = Tensor::from_vec(&[3], vec![grid(513), grid(-257), grid(85)]).unwrap();
        let vec = AttributeVector {
            attr_index: 0,
            direction,
            with_count: 2,
            without_count: 2,
        };
        let z = Tensor::from_vec(&[1, 3], vec![grid(9000), grid(-123), grid(4095)]).unwrap();
        for (a, b) in [(1.0, -1.0), (2.0, 3.0), (0.5, 0.25)] {
            let two_step = apply_attribute(&apply_attribute(&z, &vec, a).unwrap(), &vec, b).unwrap();
            let one_step = apply_attribute(&z, &vec, a + b).unwrap();
            assert!(two_step.bits_eq(&one_step), "alpha {a} beta {b}");
        }
        let back = apply_attribute(&apply_attribute(&z, &vec, 1.0).unwrap(), &vec, -1.0).unwrap();
        assert!(back.bits_eq(&z));
    }

    #[test]
    fn edit_zero_alpha_is_plain_reconstruction() {
        let mut model = toy_model();
        let ds = toy_dataset(10, 5);
        let vec = compute_attribute_vector(&mut model, &ds, 0).unwrap();
        let x = ds.image(0);
        let edited = edit_image(&mut model, &x, &vec, 0.0, None).unwrap();
        let recon = model.reconstruct(&x, None).unwrap();
        assert!(edited.bits_eq(&recon));
        assert!(edited.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
