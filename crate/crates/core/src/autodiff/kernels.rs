use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back to flat indices of one input.
pub(crate) enum Bcast {
    Same,
    /// Input equals a trailing block of the output repeated (includes scalars).
    Period(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let n_in: usize = input.iter().product();
        if input == out {
            return Bcast::Same;
        }
        if n_in == 1 {
            return Bcast::Period(1);
        }
        // Strip leading ones, then check for a trailing-suffix match.
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Period(n_in);
        }
        Bcast::Map(index_map(input, out))
    }

    #[inline]
    pub(crate) fn idx(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Period(p) => i % p,
            Bcast::Map(m) => m[i],
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn index_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let in_strides = strides(input);
    let mut bstrides = vec![0; rank];
    for i in 0..input.len() {
        if input[i] != 1 {
            bstrides[i + offset] = in_strides[i];
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += bstrides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= bstrides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

pub(crate) fn permute<T: Copy + Default>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..data.len() {
        out.push(data[cur]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, dim, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
