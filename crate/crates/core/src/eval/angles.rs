use super::{Split, SplitValues};
use crate::error::{Error, Result};
use crate::numkern::{kernels, Tensor};

/// Centroids whose pre-normalization norm falls below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Angle in degrees between unit vectors with dot product `dot`.
pub fn angle_deg(dot: f64) -> f64 {
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_labels(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<(usize, usize)> {
    let (n, e) = features.require_matrix("class features")?;
    if labels.len() != n {
        return Err(Error::shape("labels", &[labels.len()], &[n]));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok((n, e))
}

/// Per-class mean of the (unit) features, re-normalized to unit length.
pub fn class_centroids(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let (_, e) = check_labels(features, labels, num_classes)?;
    let mut sums = vec![0.0; num_classes * e];
    let mut counts = vec![0usize; num_classes];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, &f) in sums[c * e..(c + 1) * e].iter_mut().zip(features.row(i)) {
            *s += f;
        }
    }
    for c in 0..num_classes {
        if counts[c] == 0 {
            return Err(Error::EmptyClass { class: c });
        }
        let row = &mut sums[c * e..(c + 1) * e];
        let inv = 1.0 / counts[c] as f64;
        row.iter_mut().for_each(|v| *v *= inv);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateCentroid { class: c });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::matrix(num_classes, e, sums)
}

fn check_centroids(centroids: &Tensor, splits: &[Split]) -> Result<(usize, usize)> {
    let (c, e) = centroids.require_matrix("centroids")?;
    if splits.len() != c {
        return Err(Error::shape("class splits", &[splits.len()], &[c]));
    }
    Ok((c, e))
}

/// Mean sample-to-centroid angle per class, then macro-averaged per split.
pub fn intra_compactness(
    features: &Tensor,
    labels: &[usize],
    centroids: &Tensor,
    splits: &[Split],
) -> Result<SplitValues> {
    let (c, e) = check_centroids(centroids, splits)?;
    let (_, fe) = check_labels(features, labels, c)?;
    if fe != e {
        return Err(Error::shape("intra_compactness", features.shape(), centroids.shape()));
    }
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (i, &k) in labels.iter().enumerate() {
        sums[k] += angle_deg(dot(features.row(i), centroids.row(k)));
        counts[k] += 1;
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        if counts[k] == 0 {
            return Err(Error::EmptyClass { class: k });
        }
        per_class.push(sums[k] / counts[k] as f64);
    }
    Ok(SplitValues::macro_average(per_class, splits))
}

/// Mean angle from each centroid to every other centroid.
pub fn inter_separability(centroids: &Tensor, splits: &[Split]) -> Result<SplitValues> {
    let (c, _) = check_centroids(centroids, splits)?;
    if c < 2 {
        return Err(Error::Contract(
            "inter-class separability needs at least 2 classes".into(),
        ));
    }
    let gram = kernels::matmul_nt(centroids, centroids)?;
    let per_class = (0..c)
        .map(|i| {
            let total: f64 = (0..c).filter(|&j| j != i).map(|j| angle_deg(gram.get(i, j))).sum();
            total / (c - 1) as f64
        })
        .collect();
    Ok(SplitValues::macro_average(per_class, splits))
}

/// Mean angle between each class centroid and every OOD feature.
pub fn id_ood_separability(centroids: &Tensor, ood_features: &Tensor, splits: &[Split]) -> Result<SplitValues> {
    let (c, e) = check_centroids(centroids, splits)?;
    let (m, oe) = ood_features.require_matrix("ood features")?;
    if oe != e {
        return Err(Error::shape(
            "id_ood_separability",
            ood_features.shape(),
            centroids.shape(),
        ));
    }
    if m == 0 {
        return Err(Error::Contract("no OOD features".into()));
    }
    let cross = kernels::matmul_nt(centroids, ood_features)?;
    let per_class = (0..c)
        .map(|k| cross.row(k).iter().map(|&d| angle_deg(d)).sum::<f64>() / m as f64)
        .collect();
    Ok(SplitValues::macro_average(per_class, splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn one_sample_per_class_is_its_own_centroid() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mu = class_centroids(&f, &[0, 1], 2).unwrap();
        assert_eq!(mu, f);
    }

    #[test]
    fn antipodal_pair_is_degenerate() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert!(matches!(
            class_centroids(&f, &[0, 0], 1),
            Err(Error::DegenerateCentroid { class: 0 })
        ));
    }

    #[test]
    fn missing_class_is_named() {
        let f = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            class_centroids(&f, &[0], 3),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn orthonormal_pair_sits_at_45_degrees() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mu = class_centroids(&f, &[0, 0], 1).unwrap();
        assert!((mu.get(0, 0) - S).abs() < 1e-15 && (mu.get(0, 1) - S).abs() < 1e-15);
        let intra = intra_compactness(&f, &[0, 0], &mu, &[Split::Many]).unwrap();
        assert!((intra.all - 45.0).abs() < 1e-12);
        assert!((intra.many.unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(intra.few, None);
    }

    #[test]
    fn samples_on_centroid_give_zero() {
        let f = Tensor::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.0, 1.0]]).unwrap();
        let mu = class_centroids(&f, &[0, 0, 1], 2).unwrap();
        let intra = intra_compactness(&f, &[0, 0, 1], &mu, &[Split::Many, Split::Few]).unwrap();
        assert!(intra.all.abs() < 1e-6);
    }

    #[test]
    fn inter_closed_forms() {
        let anti = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(
            inter_separability(&anti, &[Split::Many, Split::Few]).unwrap().all,
            180.0
        );
        let ortho = Tensor::identity(3);
        let r = inter_separability(&ortho, &[Split::Many; 3]).unwrap();
        assert_eq!(r.all, 90.0);
        assert!(inter_separability(&Tensor::identity(1), &[Split::Many]).is_err());
    }

    #[test]
    fn id_ood_closed_forms() {
        let mu = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let ood = Tensor::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap();
        let r = id_ood_separability(&mu, &ood, &[Split::Many, Split::Medium]).unwrap();
        assert_eq!(r.per_class, vec![90.0, 90.0]);
        let ood = Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        let r = id_ood_separability(&mu, &ood, &[Split::Many, Split::Medium]).unwrap();
        assert_eq!(r.per_class[1], 0.0);
        assert_eq!(r.medium, Some(0.0));
    }
}
