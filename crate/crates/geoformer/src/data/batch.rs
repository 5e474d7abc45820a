//! Padded batching: fixed-width atom-type matrix, pairwise-distance tensor
//! and validity mask. Padded entries only ever reach the model through
//! masked softmax rows and masked sums, so their values are irrelevant.

use crate::error::{Error, Result};

use super::molecule::{pairwise_distances, Molecule};

#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    pub n_max: usize,
    /// b x n_max; 0 marks padding.
    pub atom_types: Vec<usize>,
    /// b x n_max x n_max; padded entries zero.
    pub distances: Vec<f64>,
    /// b x n_max.
    pub mask: Vec<bool>,
    /// b regression targets.
    pub targets: Vec<f64>,
    /// b x n_max x 3 reference forces, when every molecule carries them.
    pub forces: Option<Vec<f64>>,
    /// b x n_max x 3 positions, retained only when force prediction is on.
    pub positions: Option<Vec<f64>>,
}

impl Batch {
    pub fn atom_count(&self, item: usize) -> usize {
        self.mask[item * self.n_max..(item + 1) * self.n_max]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn total_real_atoms(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn make_batch(molecules: &[&Molecule], target: &str, with_positions: bool) -> Result<Batch> {
    if molecules.is_empty() {
        return Err(Error::Contract("batch of zero molecules".to_string()));
    }
    let b = molecules.len();
    let n_max = molecules.iter().map(|m| m.len()).max().unwrap();

    let mut atom_types = vec![0usize; b * n_max];
    let mut distances = vec![0.0f64; b * n_max * n_max];
    let mut mask = vec![false; b * n_max];
    let mut targets = Vec::with_capacity(b);
    let all_forces = molecules.iter().all(|m| m.forces.is_some());
    let mut forces = if all_forces {
        Some(vec![0.0f64; b * n_max * 3])
    } else {
        None
    };
    let mut positions = if with_positions {
        Some(vec![0.0f64; b * n_max * 3])
    } else {
        None
    };

    for (bi, mol) in molecules.iter().enumerate() {
        let n = mol.len();
        let t = mol.property(target).ok_or_else(|| {
            Error::Data(format!(
                "molecule {bi} in batch is missing target property {target:?}"
            ))
        })?;
        targets.push(t);
        for i in 0..n {
            atom_types[bi * n_max + i] = mol.atomic_numbers[i] as usize;
            mask[bi * n_max + i] = true;
        }
        let d = pairwise_distances(&mol.positions)?;
        for i in 0..n {
            for j in 0..n {
                distances[bi * n_max * n_max + i * n_max + j] = d.get(i, j);
            }
        }
        if let Some(f) = &mut forces {
            let mf = mol.forces.as_ref().expect("all_forces checked");
            for i in 0..n {
                for k in 0..3 {
                    f[(bi * n_max + i) * 3 + k] = mf[i][k];
                }
            }
        }
        if let Some(p) = &mut positions {
            for i in 0..n {
                for k in 0..3 {
                    p[(bi * n_max + i) * 3 + k] = mol.positions[i][k];
                }
            }
        }
    }

    Ok(Batch {
        b,
        n_max,
        atom_types,
        distances,
        mask,
        targets,
        forces,
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn mol(n: usize, target: f64) -> Molecule {
        let mut m = Molecule::new(
            vec![6; n],
            (0..n).map(|i| [i as f64, 0.0, 0.0]).collect(),
        )
        .unwrap();
        m.properties = BTreeMap::from([("U0".to_string(), target)]);
        m
    }

    #[test]
    fn pads_to_largest_molecule() {
        let a = mol(2, 1.0);
        let b = mol(3, 2.0);
        let batch = make_batch(&[&a, &b], "U0", false).unwrap();
        assert_eq!(batch.n_max, 3);
        assert_eq!(batch.mask, vec![true, true, false, true, true, true]);
        assert_eq!(batch.atom_types[2], 0);
        assert_eq!(batch.targets, vec![1.0, 2.0]);
        assert_eq!(batch.atom_count(0), 2);
    }

    #[test]
    fn batch_of_one_has_no_padding() {
        let a = mol(4, 1.5);
        let batch = make_batch(&[&a], "U0", false).unwrap();
        assert_eq!(batch.n_max, 4);
        assert!(batch.mask.iter().all(|&m| m));
    }

    #[test]
    fn missing_target_is_a_data_error() {
        let a = mol(2, 1.0);
        let err = make_batch(&[&a], "mu", false).unwrap_err();
        assert!(err.to_string().contains("mu"), "{err}");
    }

    #[test]
    fn positions_and_forces_carried_when_requested() {
        let mut a = mol(2, 1.0);
        a.forces = Some(vec![[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]]);
        let batch = make_batch(&[&a], "U0", true).unwrap();
        assert_eq!(batch.positions.as_ref().unwrap().len(), 6);
        assert_eq!(batch.forces.as_ref().unwrap()[4], 0.2);
    }
}
