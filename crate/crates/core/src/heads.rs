//! Classification head `L` (tempered softmax over `L z / tau`) and target
//! embedding head `E` (`sqrt(d) · E u / ||E u||`).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::rng::std_normal;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_TAU_COL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `K × d` logit matrix.
    pub logits: Array2<f64>,
    /// `d × K` embedding matrix.
    pub embedding: Array2<f64>,
    pub tau: f64,
    pub tau_col: f64,
}

impl HeadParams {
    /// `L` uniform in `±1/sqrt(d)`; columns of `E` are random unit vectors.
    pub fn new<R: Rng + ?Sized>(k: usize, d: usize, tau: f64, tau_col: f64, rng: &mut R) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::invalid("heads need K >= 1 and d >= 1"));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let logits = Array2::from_shape_simple_fn((k, d), || rng.random_range(-bound..bound));
        let mut embedding = Array2::from_shape_simple_fn((d, k), || std_normal(rng));
        for mut col in embedding.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            col.mapv_inplace(|v| v / norm);
        }
        let heads = Self {
            logits,
            embedding,
            tau,
            tau_col,
        };
        heads.validate()?;
        Ok(heads)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_col > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        let (k, d) = self.logits.dim();
        if self.embedding.dim() != (d, k) {
            return Err(Error::invalid(format!(
                "E has shape {:?}, expected ({d}, {k})",
                self.embedding.dim()
            )));
        }
        if !self.logits.iter().chain(self.embedding.iter()).all(|v| v.is_finite()) {
            return Err(Error::numerical("heads", "non-finite head parameter"));
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.logits.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.logits.ncols()
    }

    /// `p(k | z0)`: tempered softmax of `L z0`.
    pub fn cluster_probs(&self, z0: &[f64]) -> Result<ClusterProbs> {
        if z0.len() != self.embed_dim() {
            return Err(Error::invalid(format!(
                "embedding has {} entries, head expects {}",
                z0.len(),
                self.embed_dim()
            )));
        }
        let logits = self.logits.dot(&ArrayView1::from(z0));
        let mut p = logits.to_vec();
        softmax_in_place(&mut p, self.tau)?;
        Ok(ClusterProbs(p))
    }

    /// Row `m` holds `L z_m`.
    pub fn logits_matrix(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.embed_dim() {
            return Err(Error::invalid(format!(
                "embedding batch width {} does not match d = {}",
                z.ncols(),
                self.embed_dim()
            )));
        }
        Ok(z.dot(&self.logits.t()))
    }

    /// Row-wise tempered softmax of `L z_m`.
    pub fn probs_rows(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut p = self.logits_matrix(z)?;
        for mut row in p.axis_iter_mut(Axis(0)) {
            softmax_in_place(row.as_slice_mut().expect("row-major"), self.tau)?;
        }
        Ok(p)
    }

    /// `sqrt(d) · E u / ||E u||`.
    pub fn target_embedding(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.clusters() {
            return Err(Error::invalid("probability vector length differs from K"));
        }
        let (z, _) = target_from(&self.embedding, ArrayView1::from(u))?;
        Ok(z.to_vec())
    }

    /// Target embeddings for every row of `u`, plus the pre-normalization norms.
    pub fn target_rows(&self, u: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        if u.ncols() != self.clusters() {
            return Err(Error::invalid("probability matrix width differs from K"));
        }
        let mut out = Array2::zeros((u.nrows(), self.embed_dim()));
        let mut norms = Vec::with_capacity(u.nrows());
        for (row, mut dst) in u.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let (z, norm) = target_from(&self.embedding, row)?;
            dst.assign(&z);
            norms.push(norm);
        }
        Ok((out, norms))
    }
}

fn target_from(e: &Array2<f64>, u: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
    let v = e.dot(&u);
    let norm = v.dot(&v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateTarget);
    }
    let scale = (v.len() as f64).sqrt() / norm;
    Ok((v * scale, norm))
}

/// Stable softmax of `x / tau`, in place.
pub(crate) fn softmax_in_place(x: &mut [f64], tau: f64) -> Result<()> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numerical("softmax", "non-finite logits"));
    }
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
    Ok(())
}

/// A point on the probability simplex over `K` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProbs(Vec<f64>);

impl ClusterProbs {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("not a probability vector"));
        }
        Ok(Self(p))
    }

    pub(crate) fn from_raw(p: Vec<f64>) -> Self {
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Most probable cluster; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    fn heads(l: Array2<f64>, e: Array2<f64>, tau: f64) -> HeadParams {
        HeadParams {
            logits: l,
            embedding: e,
            tau,
            tau_col: 0.05,
        }
    }

    #[test]
    fn uniform_when_logits_equal() {
        let h = heads(Array2::ones((4, 3)), Array2::ones((3, 4)), 0.1);
        let p = h.cluster_probs(&[0.2, -0.1, 0.7]).unwrap();
        for v in p.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_reference() {
        let h = heads(array![[1.0], [0.0]], array![[1.0, 1.0]], 1.0);
        let p = h.cluster_probs(&[2.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((p.as_slice()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p.as_slice()[0] - 0.8808).abs() < 1e-4);
        assert!((p.as_slice()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn low_temperature_concentrates() {
        let h = heads(array![[1.0], [0.9], [0.0]], Array2::ones((1, 3)), 1e-3);
        let p = h.cluster_probs(&[1.0]).unwrap();
        assert!(p.as_slice()[0] > 1.0 - 1e-12);
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn shift_invariance() {
        let mut r = rng::stream(9);
        let h = HeadParams::new(5, 4, 0.1, 0.05, &mut r).unwrap();
        let z = [0.3, 0.1, -0.4, 0.9];
        let p = h.cluster_probs(&z).unwrap();
        let mut raw = h.logits.dot(&ArrayView1::from(&z[..])).to_vec();
        raw.iter_mut().for_each(|v| *v += 123.0);
        softmax_in_place(&mut raw, 0.1).unwrap();
        for (a, b) in p.as_slice().iter().zip(&raw) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_embedding_cases() {
        let d = 3;
        let h = heads(Array2::zeros((3, 3)), Array2::eye(3), 0.1);
        let t = h.target_embedding(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(t, vec![0.0, (d as f64).sqrt(), 0.0]);

        let mut r = rng::stream(2);
        let h = HeadParams::new(4, 6, 0.1, 0.05, &mut r).unwrap();
        let u = [0.1, 0.2, 0.3, 0.4];
        let a = h.target_embedding(&u).unwrap();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 6f64.sqrt()).abs() < 1e-9);
        let scaled: Vec<f64> = u.iter().map(|v| v * 7.5).collect();
        let b = h.target_embedding(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_target_is_an_error() {
        let h = heads(Array2::zeros((2, 2)), array![[1.0, -1.0], [1.0, -1.0]], 0.1);
        assert!(matches!(h.target_embedding(&[0.5, 0.5]), Err(Error::DegenerateTarget)));
    }

    #[test]
    fn logits_matrix_rows() {
        let mut r = rng::stream(4);
        let h = HeadParams::new(3, 2, 0.1, 0.05, &mut r).unwrap();
        let z = array![[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]];
        let m = h.logits_matrix(z.view()).unwrap();
        for (row, zr) in m.axis_iter(Axis(0)).zip(z.axis_iter(Axis(0))) {
            assert_eq!(row.to_vec(), h.logits.dot(&zr).to_vec());
        }
        assert!(m.row(2).iter().all(|v| *v == 0.0));
        let swapped = array![[-1.0, 0.5], [1.0, 2.0]];
        let ms = h.logits_matrix(swapped.view()).unwrap();
        assert_eq!(ms.row(0), m.row(1));
        assert_eq!(ms.row(1), m.row(0));
        assert!(h.logits_matrix(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
