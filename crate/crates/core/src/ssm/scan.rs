//! Discretization and the reference (non-differentiable) selective scans.
//!
//! Layouts: `a: [D,S]`, `delta: [L,D]`, `b, c: [L,S]`, `a_bar, b_bar: [L,D,S]`,
//! `u, y: [L,D]`, `d_skip: [D]`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Zero-order hold on the state matrix with the simplified input hold:
/// `a_bar = exp(delta * a)`, `b_bar = delta * b` broadcast over channels.
pub fn discretize(a: &Tensor, delta: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let conform = a.rank() == 2
        && delta.rank() == 2
        && b.rank() == 2
        && delta.shape()[1] == a.shape()[0]
        && b.shape() == [delta.shape()[0], a.shape()[1]];
    if !conform {
        return Err(Error::shape(
            "discretize",
            format!("a {:?}, delta {:?}, b {:?}", a.shape(), delta.shape(), b.shape()),
        ));
    }
    let (l, d, s) = (delta.shape()[0], a.shape()[0], a.shape()[1]);
    let mut a_bar = Vec::with_capacity(l * d * s);
    let mut b_bar = Vec::with_capacity(l * d * s);
    for t in 0..l {
        for ch in 0..d {
            let dt = delta.data()[t * d + ch];
            for k in 0..s {
                a_bar.push((dt * a.data()[ch * s + k]).exp());
                b_bar.push(dt * b.data()[t * s + k]);
            }
        }
    }
    Ok((
        Tensor::new(vec![l, d, s], a_bar)?,
        Tensor::new(vec![l, d, s], b_bar)?,
    ))
}

fn check_scan_shapes(u: &Tensor, a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d_skip: &Tensor) -> Result<(usize, usize, usize)> {
    let ok = u.rank() == 2
        && a_bar.rank() == 3
        && a_bar.shape()[..2] == *u.shape()
        && b_bar.shape() == a_bar.shape()
        && c.shape() == [u.shape()[0], a_bar.shape()[2]]
        && d_skip.shape() == [u.shape()[1]];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?}, a_bar {:?}, b_bar {:?}, c {:?}, d {:?}",
                u.shape(),
                a_bar.shape(),
                b_bar.shape(),
                c.shape(),
                d_skip.shape()
            ),
        ));
    }
    Ok((u.shape()[0], u.shape()[1], a_bar.shape()[2]))
}

/// `h_t = a_bar_t * h_{t-1} + b_bar_t * u_t`, `y_t = <c_t, h_t> + d_skip * u_t`, `h_{-1} = 0`.
pub fn selective_scan_sequential(
    u: &Tensor,
    a_bar: &Tensor,
    b_bar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let (l, d, s) = check_scan_shapes(u, a_bar, b_bar, c, d_skip)?;
    let mut h = vec![0.0; d * s];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let ut = u.data()[t * d + ch];
            let base = (t * d + ch) * s;
            let mut acc = 0.0;
            for k in 0..s {
                let hk = &mut h[ch * s + k];
                *hk = a_bar.data()[base + k] * *hk + b_bar.data()[base + k] * ut;
                acc += c.data()[t * s + k] * *hk;
            }
            y[t * d + ch] = acc + d_skip.data()[ch] * ut;
        }
    }
    Tensor::new(vec![l, d], y)
}

/// Same recurrence evaluated chunk by chunk.
///
/// Each chunk is scanned from a zero state while tracking the running
/// product of `a_bar`; the carried state of the previous chunk is then
/// folded in as `h_t = h_local_t + prod_t * carry`. Chunks are independent
/// until the carry pass, which only touches chunk boundaries.
pub fn selective_scan_chunked(
    u: &Tensor,
    a_bar: &Tensor,
    b_bar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    let (l, d, s) = check_scan_shapes(u, a_bar, b_bar, c, d_skip)?;
    if chunk == 0 || chunk > l {
        return Err(Error::contract(format!("chunk must be in 1..={l}, got {chunk}")));
    }
    let ds = d * s;
    // local states and cumulative decay products, [L, D, S]
    let mut local = vec![0.0; l * ds];
    let mut prod = vec![0.0; l * ds];
    for start in (0..l).step_by(chunk) {
        let end = (start + chunk).min(l);
        let mut h = vec![0.0; ds];
        let mut p = vec![1.0; ds];
        for t in start..end {
            for ch in 0..d {
                let ut = u.data()[t * d + ch];
                for k in 0..s {
                    let i = ch * s + k;
                    let ab = a_bar.data()[t * ds + i];
                    h[i] = ab * h[i] + b_bar.data()[t * ds + i] * ut;
                    p[i] *= ab;
                }
            }
            local[t * ds..(t + 1) * ds].copy_from_slice(&h);
            prod[t * ds..(t + 1) * ds].copy_from_slice(&p);
        }
    }
    // carry pass over chunk boundaries
    let n_chunks = l.div_ceil(chunk);
    let mut carries = vec![vec![0.0; ds]; n_chunks];
    for ci in 1..n_chunks {
        let last = ci * chunk - 1;
        let (prev, cur) = carries.split_at_mut(ci);
        for i in 0..ds {
            cur[0][i] = local[last * ds + i] + prod[last * ds + i] * prev[ci - 1][i];
        }
    }
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let carry = &carries[t / chunk];
        for ch in 0..d {
            let mut acc = 0.0;
            for k in 0..s {
                let i = ch * s + k;
                let h = local[t * ds + i] + prod[t * ds + i] * carry[i];
                acc += c.data()[t * s + k] * h;
            }
            y[t * d + ch] = acc + d_skip.data()[ch] * u.data()[t * d + ch];
        }
    }
    Tensor::new(vec![l, d], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn discretize_closed_forms() {
        let (ab, _) = discretize(&t(&[1, 1], &[-1.0]), &t(&[1, 1], &[2f64.ln()]), &t(&[1, 1], &[1.0])).unwrap();
        assert!((ab.data()[0] - 0.5).abs() < 1e-15);
        let (ab, bb) = discretize(&t(&[1, 1], &[-2.0]), &t(&[1, 1], &[0.1]), &t(&[1, 1], &[3.0])).unwrap();
        assert!((ab.data()[0] - 0.818_730_753_077_981_9).abs() < 1e-12);
        assert!((bb.data()[0] - 0.3).abs() < 1e-15);
        let (ab, _) = discretize(&t(&[1, 1], &[-5.0]), &t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0])).unwrap();
        assert_eq!(ab.data()[0], 1.0);
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        let u = t(&[3, 1], &[1.0, 1.0, 1.0]);
        let a_bar = t(&[3, 1, 1], &[0.5; 3]);
        let b_bar = t(&[3, 1, 1], &[1.0; 3]);
        let c = t(&[3, 1], &[1.0; 3]);
        let y = selective_scan_sequential(&u, &a_bar, &b_bar, &c, &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn memoryless_when_a_bar_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, d, s) = (5, 3, 4);
        let u = Tensor::randn(&[l, d], 1.0, &mut rng);
        let b_bar = Tensor::randn(&[l, d, s], 1.0, &mut rng);
        let c = Tensor::randn(&[l, s], 1.0, &mut rng);
        let dk = Tensor::randn(&[d], 1.0, &mut rng);
        let y = selective_scan_sequential(&u, &Tensor::zeros(&[l, d, s]), &b_bar, &c, &dk).unwrap();
        for ti in 0..l {
            for ch in 0..d {
                let cb: f64 = (0..s).map(|k| c.data()[ti * s + k] * b_bar.data()[(ti * d + ch) * s + k]).sum();
                let ut = u.data()[ti * d + ch];
                let expected = cb * ut + dk.data()[ch] * ut;
                assert!((y.data()[ti * d + ch] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunk_zero_is_rejected() {
        let u = Tensor::zeros(&[2, 1]);
        let ab = Tensor::zeros(&[2, 1, 1]);
        let c = Tensor::zeros(&[2, 1]);
        let d = Tensor::zeros(&[1]);
        assert!(matches!(selective_scan_chunked(&u, &ab, &ab, &c, &d, 0), Err(Error::Contract(_))));
        assert!(selective_scan_chunked(&u, &ab, &ab, &c, &d, 3).is_err());
    }
}
