//! Geometry-aware initial embeddings.
//!
//! The primary encoder adds, to each atom-type embedding, a learned
//! projection of the summed elementwise mapping of that atom's pairwise
//! distances: y_i = Emb(z_i) + W * sum_{j != i} f_pos(d_ij). Padded rows come
//! out exactly zero and the whole map is permutation-equivariant.
//!
//! A Laplacian-eigenmap encoder is included as the spectral baseline: it
//! appends the eigenvectors of the k smallest nonzero eigenvalues of a
//! Gaussian-affinity graph Laplacian through a learned linear map.

use nalgebra::DMatrix;

use crate::data::DistanceMatrix;
use crate::error::Result;
use crate::tensor::{Elem, Tensor};

/// Bound parameter tensors of the geometric positional encoder net
/// (scalar -> hidden -> scalar, GELU in between) and its projection vector.
pub struct GpeNet<E: Elem> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub proj: Tensor<E>,
}

/// Elementwise scalar net over the distance tensor: [B,N,N] -> [B,N,N].
pub fn fpos_matrix<E: Elem>(net: &GpeNet<E>, dist: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = dist.shape().to_vec();
    let total = dist.numel();
    let hidden = net.b1.shape()[0];
    let flat = dist.reshape(&[total, 1])?;
    let h = flat
        .matmul(&net.w1)?
        .add(&net.b1.broadcast_to(&[total, hidden])?)?
        .gelu();
    let out = h
        .matmul(&net.w2)?
        .add(&net.b2.broadcast_to(&[total, 1])?)?;
    out.reshape(&shape)
}

/// Aggregation stage of the encoder: emb + proj * rowsum(masked fp), with
/// padded rows zeroed. Factored out so the distance mapping can be stubbed.
pub fn aggregate_gpe<E: Elem>(
    emb: &Tensor<E>,       // [B, N, d]
    fp: &Tensor<E>,        // [B, N, N]
    proj: &Tensor<E>,      // [d]
    sum_mask: &Tensor<E>,  // [B, N, N]; 1 for real j != i
    row_mask: &Tensor<E>,  // [B, N, 1]; 1 for real atoms
) -> Result<Tensor<E>> {
    let (b, n, d) = (emb.shape()[0], emb.shape()[1], emb.shape()[2]);
    let summed = fp.mul(sum_mask)?.sum_axis(2)?; // [B, N]
    let outer = summed
        .reshape(&[b, n, 1])?
        .broadcast_to(&[b, n, d])?
        .mul(&proj.broadcast_to(&[b, n, d])?)?;
    let y = emb.add(&outer)?;
    y.mul(&row_mask.broadcast_to(&[b, n, d])?)
}

/// Full geometric positional encoding.
pub fn encode_gpe<E: Elem>(
    net: &GpeNet<E>,
    emb: &Tensor<E>,
    dist: &Tensor<E>,
    sum_mask: &Tensor<E>,
    row_mask: &Tensor<E>,
) -> Result<Tensor<E>> {
    let fp = fpos_matrix(net, dist)?;
    aggregate_gpe(emb, &fp, &net.proj, sum_mask, row_mask)
}

/// Eigenvectors of the `k` smallest nonzero eigenvalues of the graph
/// Laplacian L = Deg - A with Gaussian affinity A_ij = exp(-d_ij^2 / 2 s^2),
/// s the median off-diagonal distance. Row-major N x k, zero-padded when
/// fewer than k nonzero modes exist; sign fixed so the first nonzero
/// coordinate of each vector is positive. A single atom yields all zeros.
pub fn laplacian_eigenmaps(dist: &DistanceMatrix, k: usize) -> Vec<f64> {
    let n = dist.n();
    let mut out = vec![0.0; n * k];
    if n < 2 || k == 0 {
        return out;
    }

    let mut offd: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| dist.get(i, j))
        .collect();
    offd.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = offd.len() / 2;
    let median = if offd.len() % 2 == 1 {
        offd[mid]
    } else {
        0.5 * (offd[mid - 1] + offd[mid])
    };
    let sigma = if median > 0.0 { median } else { 1.0 };

    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist.get(i, j);
            let a = (-d * d / (2.0 * sigma * sigma)).exp();
            lap[(i, j)] = -a;
            degree += a;
        }
        lap[(i, i)] = degree;
    }

    let eig = lap.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_tol = 1e-10 * max_ev.max(1.0);

    let mut col = 0usize;
    for &idx in &order {
        if col >= k {
            break;
        }
        if eig.eigenvalues[idx].abs() <= zero_tol {
            continue; // kernel of L (constant vector on a connected graph)
        }
        let v = eig.eigenvectors.column(idx);
        let flip = match v.iter().find(|x| x.abs() > 1e-12) {
            Some(&x) if x < 0.0 => -1.0,
            _ => 1.0,
        };
        for i in 0..n {
            out[i * k + col] = flip * v[i];
        }
        col += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pairwise_distances;
    use crate::tensor::Tape;

    fn chain(n: usize) -> DistanceMatrix {
        let pos: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 1.1, 0.0, 0.0]).collect();
        pairwise_distances(&pos).unwrap()
    }

    #[test]
    fn single_atom_eigenmaps_are_zero() {
        let d = pairwise_distances(&[[0.0; 3]]).unwrap();
        assert_eq!(laplacian_eigenmaps(&d, 4), vec![0.0; 4]);
    }

    #[test]
    fn identical_molecules_identical_maps() {
        let a = laplacian_eigenmaps(&chain(5), 3);
        let b = laplacian_eigenmaps(&chain(5), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let n = 6;
        let k = 4;
        let v = laplacian_eigenmaps(&chain(n), k);
        for c1 in 0..k {
            for c2 in 0..k {
                let dot: f64 = (0..n).map(|i| v[i * k + c1] * v[i * k + c2]).sum();
                let expect = if c1 == c2 { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).abs() < 1e-8,
                    "col {c1} . col {c2} = {dot}"
                );
            }
        }
    }

    #[test]
    fn constant_vector_is_excluded() {
        // every returned column must be orthogonal to the all-ones kernel
        let n = 5;
        let k = 3;
        let v = laplacian_eigenmaps(&chain(n), k);
        for c in 0..k {
            let s: f64 = (0..n).map(|i| v[i * k + c]).sum();
            assert!(s.abs() < 1e-8, "column {c} sums to {s}");
        }
    }

    #[test]
    fn truncates_and_zero_pads_when_k_exceeds_modes() {
        // n = 2 has exactly one nonzero mode; ask for 3
        let v = laplacian_eigenmaps(&chain(2), 3);
        assert_ne!(v[0], 0.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn gpe_zero_network_reduces_to_embedding() {
        // zero weights and biases: f_pos == 0 so y == emb on real rows
        let tape: Tape<f64> = Tape::new();
        let (b, n, d, h) = (1, 3, 2, 4);
        let net = GpeNet {
            w1: tape.zeros(&[1, h]),
            b1: tape.zeros(&[h]),
            w2: tape.zeros(&[h, 1]),
            b2: tape.zeros(&[1]),
            proj: tape.constant(vec![1.0, 0.0], &[d]).unwrap(),
        };
        let emb = tape
            .constant((0..b * n * d).map(|v| v as f64).collect(), &[b, n, d])
            .unwrap();
        let dist = tape.ones(&[b, n, n]);
        let sum_mask = tape.ones(&[b, n, n]);
        let row_mask = tape.ones(&[b, n, 1]);
        let y = encode_gpe(&net, &emb, &dist, &sum_mask, &row_mask).unwrap();
        assert_eq!(y.values(), emb.values());
    }

    #[test]
    fn gpe_stubbed_identity_fpos_hand_case() {
        // d=2, proj=[1,0], f_pos = identity, two atoms at distance 5:
        // y_i = emb_i + [5, 0]
        let tape: Tape<f64> = Tape::new();
        let emb = tape
            .constant(vec![10.0, 20.0, 30.0, 40.0], &[1, 2, 2])
            .unwrap();
        let dist = tape
            .constant(vec![0.0, 5.0, 5.0, 0.0], &[1, 2, 2])
            .unwrap();
        let proj = tape.constant(vec![1.0, 0.0], &[2]).unwrap();
        let sum_mask = tape
            .constant(vec![0.0, 1.0, 1.0, 0.0], &[1, 2, 2])
            .unwrap();
        let row_mask = tape.ones(&[1, 2, 1]);
        let y = aggregate_gpe(&emb, &dist, &proj, &sum_mask, &row_mask).unwrap();
        assert_eq!(y.values(), vec![15.0, 20.0, 35.0, 40.0]);
    }
}
