//! Per-situation design matrices.

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{bits, UtilityVector, MAX_ALTERNATIVES};

/// One choice situation: a `J x L` covariate block (row-major, one row per
/// alternative), the chosen alternative, availability and cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Situation {
    pub id: String,
    pub x: Vec<f64>,
    pub chosen: usize,
    pub available: u64,
    /// Index into [`DesignMatrix::cluster_ids`].
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    alternatives: Vec<String>,
    columns: Vec<String>,
    cluster_ids: Vec<String>,
    situations: Vec<Situation>,
}

impl DesignMatrix {
    pub fn new(
        alternatives: Vec<String>,
        columns: Vec<String>,
        cluster_ids: Vec<String>,
        situations: Vec<Situation>,
    ) -> Result<Self> {
        let j = alternatives.len();
        let l = columns.len();
        if !(2..=MAX_ALTERNATIVES).contains(&j) {
            return Err(Error::validation(format!(
                "need between 2 and {MAX_ALTERNATIVES} alternatives, got {j}"
            )));
        }
        if l == 0 {
            return Err(Error::validation("model has no coefficients"));
        }
        for s in &situations {
            if s.x.len() != j * l {
                return Err(Error::validation(format!(
                    "situation {}: covariate block has {} cells, expected {}",
                    s.id,
                    s.x.len(),
                    j * l
                )));
            }
            if j < 64 && s.available >> j != 0 {
                return Err(Error::validation(format!(
                    "situation {}: availability refers to unknown alternatives",
                    s.id
                )));
            }
            if s.available.count_ones() < 2 {
                return Err(Error::validation(format!(
                    "situation {}: fewer than two available alternatives",
                    s.id
                )));
            }
            if s.chosen >= j || s.available >> s.chosen & 1 == 0 {
                return Err(Error::validation(format!(
                    "situation {}: chosen alternative is not available",
                    s.id
                )));
            }
            if s.cluster >= cluster_ids.len() {
                return Err(Error::validation(format!(
                    "situation {}: unknown cluster index {}",
                    s.id, s.cluster
                )));
            }
            for k in bits(s.available) {
                if s.x[k * l..(k + 1) * l].iter().any(|x| !x.is_finite()) {
                    return Err(Error::validation(format!(
                        "situation {}: non-finite covariate for alternative {}",
                        s.id, alternatives[k]
                    )));
                }
            }
        }
        Ok(Self {
            alternatives,
            columns,
            cluster_ids,
            situations,
        })
    }

    /// Design where every situation is its own cluster.
    pub fn unclustered(alternatives: Vec<String>, columns: Vec<String>, mut situations: Vec<Situation>) -> Result<Self> {
        let ids: Vec<String> = situations.iter().map(|s| s.id.clone()).collect();
        for (i, s) in situations.iter_mut().enumerate() {
            s.cluster = i;
        }
        Self::new(alternatives, columns, ids, situations)
    }

    pub fn n(&self) -> usize {
        self.situations.len()
    }

    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn n_params(&self) -> usize {
        self.columns.len()
    }

    pub fn alternatives(&self) -> &[String] {
        &self.alternatives
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }

    pub fn situations(&self) -> &[Situation] {
        &self.situations
    }

    /// Covariate row of alternative `k` in situation `i`.
    #[inline]
    pub fn row(&self, i: usize, k: usize) -> &[f64] {
        let l = self.n_params();
        &self.situations[i].x[k * l..(k + 1) * l]
    }

    /// Systematic utilities `X_i beta` (zero for unavailable alternatives).
    pub fn utilities_into(&self, i: usize, beta: &[f64], out: &mut [f64]) -> Result<()> {
        let s = &self.situations[i];
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in bits(s.available) {
            let v: f64 = self.row(i, k).iter().zip(beta).map(|(x, b)| x * b).sum();
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "situation {}: utility of alternative {} is not finite",
                    s.id, self.alternatives[k]
                )));
            }
            out[k] = v;
        }
        Ok(())
    }

    pub fn utility_vector(&self, i: usize, beta: &[f64]) -> Result<UtilityVector> {
        let mut v = vec![0.0; self.n_alternatives()];
        self.utilities_into(i, beta, &mut v)?;
        UtilityVector::with_mask(v, self.situations[i].available)
    }

    /// Same design with every covariate negated (cost minimization).
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.situations {
            s.x.iter_mut().for_each(|x| *x = -*x);
        }
        out
    }

    /// Situations whose chosen alternative lies in `subset`, with choice sets
    /// cut down to `subset`. Situations left with fewer than two available
    /// alternatives are dropped.
    pub fn restrict_to(&self, subset: u64) -> Result<Self> {
        let situations: Vec<Situation> = self
            .situations
            .iter()
            .filter(|s| subset >> s.chosen & 1 == 1)
            .filter(|s| (s.available & subset).count_ones() >= 2)
            .map(|s| Situation {
                available: s.available & subset,
                ..s.clone()
            })
            .collect();
        Self::new(
            self.alternatives.clone(),
            self.columns.clone(),
            self.cluster_ids.clone(),
            situations,
        )
    }

    /// Order-independent hash of situation ids, choices and availability.
    pub fn fingerprint(&self) -> String {
        let mut acc: u128 = 0;
        for s in &self.situations {
            let mut h = Sha256::new();
            h.update((s.id.len() as u64).to_le_bytes());
            h.update(s.id.as_bytes());
            h.update((s.chosen as u64).to_le_bytes());
            h.update(s.available.to_le_bytes());
            let d = h.finalize();
            let mut b = [0u8; 16];
            b.copy_from_slice(&d[..16]);
            acc = acc.wrapping_add(u128::from_le_bytes(b));
        }
        format!("{:032x}-{}", acc, self.situations.len())
    }

    /// Gram matrix of the covariates differenced against the first available
    /// alternative of each situation.
    pub fn differenced_gram(&self) -> DMatrix<f64> {
        let l = self.n_params();
        let mut g = DMatrix::zeros(l, l);
        let mut d = vec![0.0; l];
        for (i, s) in self.situations.iter().enumerate() {
            let base = s.available.trailing_zeros() as usize;
            for k in bits(s.available & !(1u64 << base)) {
                for (c, dc) in d.iter_mut().enumerate() {
                    *dc = self.row(i, k)[c] - self.row(i, base)[c];
                }
                for a in 0..l {
                    if d[a] == 0.0 {
                        continue;
                    }
                    for b in 0..l {
                        g[(a, b)] += d[a] * d[b];
                    }
                }
            }
        }
        g
    }

    /// Columns that are linear combinations of earlier columns in the
    /// differenced design (including all-zero columns).
    pub fn dependent_columns(&self) -> Vec<String> {
        let g = self.differenced_gram();
        let l = g.nrows();
        let scale = (0..l).map(|a| g[(a, a)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        let mut kept: Vec<usize> = Vec::new();
        let mut out = Vec::new();
        for c in 0..l {
            let residual = if kept.is_empty() {
                g[(c, c)]
            } else {
                let gk = DMatrix::from_fn(kept.len(), kept.len(), |a, b| g[(kept[a], kept[b])]);
                let gc = DMatrix::from_fn(kept.len(), 1, |a, _| g[(kept[a], c)]);
                match gk.cholesky() {
                    Some(ch) => g[(c, c)] - (gc.transpose() * ch.solve(&gc))[(0, 0)],
                    None => 0.0,
                }
            };
            if residual <= 1e-10 * g[(c, c)].max(1e-12 * scale) {
                out.push(self.columns[c].clone());
            } else {
                kept.push(c);
            }
        }
        out
    }

    /// Identification precondition: the differenced design has full rank.
    pub fn check_rank(&self) -> Result<()> {
        let dependent = self.dependent_columns();
        if dependent.is_empty() {
            Ok(())
        } else {
            Err(Error::Identification {
                message: "differenced design is rank deficient".into(),
                columns: dependent,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(x: Vec<Vec<f64>>, columns: &[&str]) -> DesignMatrix {
        let alts = vec!["a".to_string(), "b".into(), "c".into()];
        let l = columns.len();
        let situations = x
            .into_iter()
            .enumerate()
            .map(|(i, x)| {
                assert_eq!(x.len(), 3 * l);
                Situation {
                    id: format!("s{i}"),
                    x,
                    chosen: i % 3,
                    available: 0b111,
                    cluster: 0,
                }
            })
            .collect();
        DesignMatrix::unclustered(alts, columns.iter().map(|c| c.to_string()).collect(), situations).unwrap()
    }

    #[test]
    fn all_ones_generic_column_is_unidentified() {
        let d = tiny(
            vec![vec![0.3, 1.0, -0.2, 1.0, 0.9, 1.0], vec![1.1, 1.0, 0.4, 1.0, -0.5, 1.0]],
            &["price", "one"],
        );
        match d.check_rank() {
            Err(Error::Identification { columns, .. }) => assert_eq!(columns, vec!["one".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collinear_pair_reports_the_later_column() {
        let d = tiny(
            vec![
                vec![0.3, 0.6, 0.0, -0.2, -0.4, 0.0, 0.9, 1.8, 1.0],
                vec![1.1, 2.2, 0.5, 0.4, 0.8, -1.0, -0.5, -1.0, 0.2],
            ],
            &["x", "twice_x", "z"],
        );
        match d.check_rank() {
            Err(Error::Identification { columns, .. }) => assert_eq!(columns, vec!["twice_x".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fingerprint_ignores_order() {
        let a = tiny(vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]], &["x"]);
        let mut s = a.situations().to_vec();
        s.reverse();
        let b = DesignMatrix::unclustered(a.alternatives().to_vec(), a.columns().to_vec(), s).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = tiny(vec![vec![0.1, 0.2, 0.3]], &["x"]);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn unavailable_choice_is_rejected() {
        let s = Situation {
            id: "s".into(),
            x: vec![0.0; 3],
            chosen: 2,
            available: 0b011,
            cluster: 0,
        };
        let r = DesignMatrix::unclustered(vec!["a".into(), "b".into(), "c".into()], vec!["x".into()], vec![s]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
