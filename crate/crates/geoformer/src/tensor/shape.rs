//! Row-major shape arithmetic shared by the op kernels.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides; stride of a size-1 or trailing axis follows the usual
/// contiguous layout.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// True when `from` broadcasts to `to` under right-aligned numpy rules
/// (each aligned extent equal or 1 on the `from` side).
pub fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .zip(&to[off..])
        .all(|(&f, &t)| f == t || f == 1)
}

/// Advance a multi-index in row-major order. Returns false on wrap-around.
pub fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for i in (0..shape.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return true;
        }
        idx[i] = 0;
    }
    false
}

pub fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_rules() {
        assert!(broadcastable(&[1, 3], &[2, 5, 3]));
        assert!(broadcastable(&[], &[4, 2]));
        assert!(!broadcastable(&[2, 3], &[3, 3]));
    }
}
