use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// `out[b] = a[b]·c[b]` for row-major `a[b]` (`m×k`) and `c[b]` (`k×n`),
/// with optional transposes applied to the stored operands.
fn batched(
    a: &[f64],
    c: &[f64],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    a_t: bool,
    c_t: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let cb = &c[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if a_t { ab[p * m + i] } else { ab[i * k + p] };
                if c_t {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * cb[j * k + p];
                    }
                } else {
                    for (o, &cv) in orow.iter_mut().zip(&cb[p * n..(p + 1) * n]) {
                        *o += av * cv;
                    }
                }
            }
        }
    }
    out
}

impl<'g> Var<'g> {
    /// Batched matrix product `B×M×K · B×K×N → B×M×N`.
    pub fn bmm(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, c) = (self.value(), other.value());
        let (&[b, m, k], &[b2, k2, n]) = (a.shape(), c.shape()) else {
            return Err(shape_err!("bmm needs rank-3 operands"));
        };
        if b != b2 || k != k2 {
            return Err(shape_err!("bmm: {:?} × {:?}", a.shape(), c.shape()));
        }
        let out = Tensor::from_vec(&[b, m, n], batched(a.data(), c.data(), b, (m, k, n), false, false))?;
        Ok(self.graph.op(out, &[self, other], move |g| {
            // dA = G·Cᵀ, dC = Aᵀ·G
            let da = batched(g.data(), c.data(), b, (m, n, k), false, true);
            let dc = batched(a.data(), g.data(), b, (k, m, n), true, false);
            vec![
                Tensor::from_vec(&[b, m, k], da).unwrap(),
                Tensor::from_vec(&[b, k, n], dc).unwrap(),
            ]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Result<Var<'g>> {
        let x = self.value();
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err!("softmax of a rank-0 tensor"))?;
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = std::rc::Rc::new(out.clone());
        Ok(self.graph.op(out, &[self], move |g| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (d, &yv) in drow.iter_mut().zip(yrow) {
                    *d = yv * (*d - dot);
                }
            }
            vec![dx]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn bmm_small_case() {
        let g = Graph::inference();
        let a = g.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(&[1, 2, 1], vec![1.0, 1.0]).unwrap());
        assert_eq!(a.bmm(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 800.0]).unwrap());
        let y = x.softmax_last().unwrap().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
