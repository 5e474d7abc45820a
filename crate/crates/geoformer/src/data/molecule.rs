//! Molecule and pairwise-distance types.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::elements::MAX_ATOMIC_NUMBER;

/// One dataset record: atom types, positions (angstrom), named scalar
/// properties and optional per-atom forces (property-unit per angstrom).
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub atomic_numbers: Vec<u8>,
    pub positions: Vec<[f64; 3]>,
    pub properties: BTreeMap<String, f64>,
    /// Unit declarations carried through from the input file, by property.
    pub units: BTreeMap<String, String>,
    pub forces: Option<Vec<[f64; 3]>>,
}

impl Molecule {
    pub fn new(atomic_numbers: Vec<u8>, positions: Vec<[f64; 3]>) -> Result<Self> {
        let m = Molecule {
            atomic_numbers,
            positions,
            properties: BTreeMap::new(),
            units: BTreeMap::new(),
            forces: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atomic_numbers.len();
        if n == 0 {
            return Err(Error::Data("molecule has no atoms".to_string()));
        }
        if self.positions.len() != n {
            return Err(Error::Data(format!(
                "{} atoms but {} positions",
                n,
                self.positions.len()
            )));
        }
        if let Some(&z) = self
            .atomic_numbers
            .iter()
            .find(|&&z| z == 0 || z as usize > MAX_ATOMIC_NUMBER)
        {
            return Err(Error::Data(format!(
                "atomic number {z} outside supported range 1..={MAX_ATOMIC_NUMBER}"
            )));
        }
        if let Some(f) = &self.forces {
            if f.len() != n {
                return Err(Error::Data(format!(
                    "{} atoms but {} force rows",
                    n,
                    f.len()
                )));
            }
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Data(format!("non-finite coordinate at atom {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    pub fn property(&self, name: &str) -> Option<f64> {
        self.properties.get(name).copied()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        c
    }

    /// Copy with positions translated so the centroid sits at the origin.
    pub fn centered(&self) -> Molecule {
        let c = self.centroid();
        let mut m = self.clone();
        for p in &mut m.positions {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        m
    }
}

/// Symmetric interatomic Euclidean distances with zero diagonal, angstrom.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Wrap raw row-major values, checking the distance-matrix contract:
    /// square, symmetric, zero diagonal, non-negative.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Data(format!(
                "{} values do not fill an {n}x{n} distance matrix",
                values.len()
            )));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::Data(format!("nonzero diagonal at atom {i}")));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!("invalid distance at ({i}, {j})")));
                }
                if (v - values[j * n + i]).abs() > 1e-9 {
                    return Err(Error::Data(format!("asymmetry at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Exact Euclidean pairwise distances. The tape-resident variant used in
/// force mode lives in the model; this one feeds ordinary batches.
pub fn pairwise_distances(positions: &[[f64; 3]]) -> Result<DistanceMatrix> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::Data("no positions".to_string()));
    }
    for (i, p) in positions.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Data(format!("non-finite coordinate at atom {i}")));
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            let dz = positions[i][2] - positions[j][2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five_triangle() {
        let d = pairwise_distances(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn single_atom() {
        let d = pairwise_distances(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(d.n(), 1);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn non_finite_coordinate_names_atom() {
        let err = pairwise_distances(&[[0.0; 3], [f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("atom 1"), "{err}");
    }

    #[test]
    fn isometry_invariance() {
        // rotate by 90 degrees around z and translate; distances agree to 1e-9
        let pos = [[0.3, -1.2, 0.7], [1.5, 0.2, -0.4], [-0.8, 0.9, 1.1]];
        let moved: Vec<[f64; 3]> = pos
            .iter()
            .map(|p| [-p[1] + 10.0, p[0] - 3.0, p[2] + 0.5])
            .collect();
        let d1 = pairwise_distances(&pos).unwrap();
        let d2 = pairwise_distances(&moved).unwrap();
        for (a, b) in d1.values().iter().zip(d2.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn molecule_validation() {
        assert!(Molecule::new(vec![], vec![]).is_err());
        assert!(Molecule::new(vec![101], vec![[0.0; 3]]).is_err());
        assert!(Molecule::new(vec![1, 6], vec![[0.0; 3]]).is_err());
        let mut m = Molecule::new(vec![1, 6], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        m.forces = Some(vec![[0.0; 3]]);
        assert!(m.validate().is_err());
    }
}
