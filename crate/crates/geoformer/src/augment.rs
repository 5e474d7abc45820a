//! Molecule mixup: build a two-molecule system whose parts sit far apart, and
//! label it with the sum of the parts' properties. Because interactions decay
//! with distance, the model is pushed to treat the union as two independent
//! systems, which regularizes training where dropout cannot be used.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Molecule;
use crate::error::{Error, Result};

/// Cross-molecule distances below this floor invalidate a mixed sample.
pub const MIN_CROSS_DISTANCE: f64 = 1e3;

#[derive(Clone, Copy, Debug)]
pub struct MixConfig {
    /// Translation scalar t (angstrom); the second molecule is moved by
    /// t * (1, 1, 1) after a random rotation.
    pub t: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { t: 1e4 }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.t.is_finite() || self.t * 3f64.sqrt() <= MIN_CROSS_DISTANCE {
            return Err(Error::Config(format!(
                "mix translation t = {} cannot guarantee cross distances above {MIN_CROSS_DISTANCE} angstrom",
                self.t
            )));
        }
        Ok(())
    }
}

/// Rotation matrix distributed uniformly over SO(3) (unit-quaternion method).
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let two_pi = 2.0 * std::f64::consts::PI;
    let (w, x, y, z) = (
        (1.0 - u1).sqrt() * (two_pi * u2).sin(),
        (1.0 - u1).sqrt() * (two_pi * u2).cos(),
        u1.sqrt() * (two_pi * u3).sin(),
        u1.sqrt() * (two_pi * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Merge two molecules into one far-separated system labelled with the sum
/// of their `property` values. Both parts are centered first; the second is
/// randomly rotated and translated by t * (1, 1, 1). Forces, when both parts
/// carry them, concatenate, with the second part's forces co-rotated.
pub fn mix(
    mi: &Molecule,
    mj: &Molecule,
    cfg: &MixConfig,
    property: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Molecule> {
    cfg.validate()?;
    let pi = mi.property(property).ok_or_else(|| {
        Error::Data(format!("first molecule is missing property {property:?}"))
    })?;
    let pj = mj.property(property).ok_or_else(|| {
        Error::Data(format!("second molecule is missing property {property:?}"))
    })?;

    let a = mi.centered();
    let b = mj.centered();
    let rot = random_rotation(rng);

    let mut atomic_numbers = a.atomic_numbers.clone();
    atomic_numbers.extend_from_slice(&b.atomic_numbers);
    let mut positions = a.positions.clone();
    positions.extend(b.positions.iter().map(|&p| {
        let r = rotate(&rot, p);
        [r[0] + cfg.t, r[1] + cfg.t, r[2] + cfg.t]
    }));

    let forces = match (&a.forces, &b.forces) {
        (Some(fa), Some(fb)) => {
            // gradients co-rotate with coordinates
            let mut f = fa.clone();
            f.extend(fb.iter().map(|&v| rotate(&rot, v)));
            Some(f)
        }
        _ => None,
    };

    // distance floor, asserted per mixed sample
    let na = a.len();
    let mut min_cross = f64::INFINITY;
    for i in 0..na {
        for j in na..positions.len() {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            let dz = positions[i][2] - positions[j][2];
            min_cross = min_cross.min((dx * dx + dy * dy + dz * dz).sqrt());
        }
    }
    if min_cross <= MIN_CROSS_DISTANCE {
        return Err(Error::Data(format!(
            "mixed system has cross distance {min_cross} <= {MIN_CROSS_DISTANCE} angstrom; increase t"
        )));
    }

    let mut out = Molecule::new(atomic_numbers, positions)?;
    out.properties.insert(property.to_string(), pi + pj);
    if let Some(u) = mi.units.get(property) {
        out.units.insert(property.to_string(), u.clone());
    }
    out.forces = forces;
    Ok(out)
}

/// Replace the second half of a shuffled batch by mixed systems built from
/// consecutive pairs. An odd designated half passes its last molecule
/// through unmixed; the output batch is smaller accordingly.
pub fn augment_half_batch(
    molecules: &[Molecule],
    cfg: &MixConfig,
    property: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Molecule>> {
    if molecules.len() < 2 {
        return Err(Error::Contract(
            "augmentation needs a batch of at least two molecules".to_string(),
        ));
    }
    let designated = molecules.len() / 2;
    let keep = molecules.len() - designated;
    let mut out: Vec<Molecule> = molecules[..keep].to_vec();
    let tail = &molecules[keep..];
    let mut i = 0;
    while i + 1 < tail.len() {
        out.push(mix(&tail[i], &tail[i + 1], cfg, property, rng)?);
        i += 2;
    }
    if i < tail.len() {
        out.push(tail[i].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pairwise_distances;
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn mol(zs: &[u8], pos: &[[f64; 3]], p: f64) -> Molecule {
        let mut m = Molecule::new(zs.to_vec(), pos.to_vec()).unwrap();
        m.properties = BTreeMap::from([("U0".to_string(), p)]);
        m
    }

    #[test]
    fn rotations_are_orthogonal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_entries_have_zero_mean() {
        // statistical uniformity: column means over 1e5 samples within 3
        // sigma of the Monte-Carlo error (entry variance 1/3)
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples = 100_000;
        let mut sums = [[0.0f64; 3]; 3];
        for _ in 0..samples {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    sums[i][j] += r[i][j];
                }
            }
        }
        let three_sigma = 3.0 * (1.0 / 3.0 / samples as f64).sqrt();
        for row in &sums {
            for &s in row {
                let mean = s / samples as f64;
                assert!(mean.abs() < three_sigma, "mean {mean} vs {three_sigma}");
            }
        }
    }

    #[test]
    fn labels_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = mol(&[1, 6], &[[0.0; 3], [1.0, 0.0, 0.0]], 2.0);
        let b = mol(&[8], &[[0.5, 0.5, 0.5]], 3.5);
        let m = mix(&a, &b, &MixConfig::default(), "U0", &mut rng).unwrap();
        assert_eq!(m.property("U0"), Some(5.5));
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn intra_molecular_distances_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = mol(
            &[6, 1, 1],
            &[[0.0; 3], [1.1, 0.0, 0.2], [-0.3, 0.9, -0.4]],
            1.0,
        );
        let b = mol(&[8, 1], &[[0.2, -0.1, 0.4], [1.0, 0.8, -0.2]], 2.0);
        let mixed = mix(&a, &b, &MixConfig::default(), "U0", &mut rng).unwrap();
        let da = pairwise_distances(&a.positions).unwrap();
        let db = pairwise_distances(&b.positions).unwrap();
        let dm = pairwise_distances(&mixed.positions).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dm.get(i, j) - da.get(i, j)).abs() < 1e-9);
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((dm.get(3 + i, 3 + j) - db.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_distances_respect_triangle_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MixConfig::default();
        let a = mol(
            &[6, 1, 1, 1],
            &[
                [0.0; 3],
                [1.1, 0.0, 0.2],
                [-0.3, 0.9, -0.4],
                [0.4, -0.8, 0.7],
            ],
            1.0,
        );
        let b = mol(&[8, 1], &[[0.2, -0.1, 0.4], [1.0, 0.8, -0.2]], 2.0);
        let mixed = mix(&a, &b, &cfg, "U0", &mut rng).unwrap();
        let ac = a.centered();
        let bc = b.centered();
        let radius = |m: &Molecule| {
            m.positions
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0f64, f64::max)
        };
        let bound = cfg.t * 3f64.sqrt() - radius(&ac) - radius(&bc);
        let dm = pairwise_distances(&mixed.positions).unwrap();
        let na = a.len();
        for i in 0..na {
            for j in na..mixed.len() {
                assert!(dm.get(i, j) >= bound, "{} < {bound}", dm.get(i, j));
                assert!(dm.get(i, j) > MIN_CROSS_DISTANCE);
            }
        }
    }

    #[test]
    fn forces_concatenate_and_co_rotate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = mol(&[1], &[[0.0; 3]], 1.0);
        a.forces = Some(vec![[0.5, -0.25, 0.125]]);
        let mut b = mol(&[1], &[[0.0; 3]], 1.0);
        b.forces = Some(vec![[1.0, 0.0, 0.0]]);
        let mixed = mix(&a, &b, &MixConfig::default(), "U0", &mut rng).unwrap();
        let f = mixed.forces.unwrap();
        assert_eq!(f[0], [0.5, -0.25, 0.125]); // untransformed part unchanged
        let norm = (f[1][0] * f[1][0] + f[1][1] * f[1][1] + f[1][2] * f[1][2]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12); // rotation preserves magnitude
    }

    #[test]
    fn half_batch_counts_and_determinism() {
        let mols: Vec<Molecule> = (0..4)
            .map(|i| mol(&[6], &[[i as f64, 0.0, 0.0]], i as f64))
            .collect();
        let cfg = MixConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment_half_batch(&mols, &cfg, "U0", &mut rng).unwrap();
        assert_eq!(out.len(), 3); // 2 originals + 1 mixed
        assert_eq!(out[2].len(), 2); // sizes add
        assert_eq!(out[2].property("U0"), Some(5.0)); // 2 + 3

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let again = augment_half_batch(&mols, &cfg, "U0", &mut rng2).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn odd_designated_half_passes_last_through() {
        let mols: Vec<Molecule> = (0..6)
            .map(|i| mol(&[6], &[[i as f64, 0.0, 0.0]], i as f64))
            .collect();
        let cfg = MixConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = augment_half_batch(&mols, &cfg, "U0", &mut rng).unwrap();
        // keep 3, designated 3 -> one mix + one passthrough
        assert_eq!(out.len(), 5);
        assert_eq!(out[4], mols[5]);
    }

    #[test]
    fn tiny_batch_is_rejected() {
        let mols = vec![mol(&[6], &[[0.0; 3]], 0.0)];
        let cfg = MixConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(augment_half_batch(&mols, &cfg, "U0", &mut rng).is_err());
    }

    #[test]
    fn too_small_translation_is_rejected() {
        let cfg = MixConfig { t: 100.0 };
        assert!(cfg.validate().is_err());
    }
}
