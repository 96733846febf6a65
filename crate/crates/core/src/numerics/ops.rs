//! Dense primitives with their hand-derived reverse-mode rules.

use super::{SeededRng, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// `a · b` for 2-D operands. Each output entry accumulates over the inner index in ascending
/// order starting from zero, matching the textbook triple loop bit for bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let crow = &mut out[i * m..(i + 1) * m];
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &bd[p * m..(p + 1) * m];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (n2, m) = (b.rows(), b.cols());
    if n != n2 {
        return Err(Error::Shape(format!(
            "matmul_tn leading dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; k * m];
    let (ad, bd) = (a.data(), b.data());
    for r in 0..n {
        let brow = &bd[r * m..(r + 1) * m];
        for (i, &ari) in ad[r * k..(r + 1) * k].iter().enumerate() {
            let crow = &mut out[i * m..(i + 1) * m];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += ari * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![k, m], out))
}

/// Affine map `x · Wᵀ + b` with `W` stored as `d_out × d_in`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, &w.transpose())?;
    if let Some(b) = b {
        let m = y.cols();
        if b.len() != m {
            return Err(Error::Shape(format!("bias length {} vs {}", b.len(), m)));
        }
        for row in y.data_mut().chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`linear`]: returns `dx` (if requested), and accumulates into `dw` and `db`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
    need_dx: bool,
) -> Option<Tensor> {
    let gw = matmul_tn(dy, x).expect("linear_backward shapes");
    dw.add_assign(&gw.reshape(dw.shape()).expect("dw shape"));
    if let Some(db) = db {
        let m = dy.cols();
        let g = db.data_mut();
        for row in dy.data().chunks(m) {
            for (gv, dv) in g.iter_mut().zip(row) {
                *gv += dv;
            }
        }
    }
    need_dx.then(|| matmul(dy, w).expect("linear_backward dx"))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// `dx` given the pre-activation input and upstream gradient.
pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies `gain` and `shift`.
pub fn layer_norm(
    x: &Tensor,
    eps: f64,
    gain: &Tensor,
    shift: &Tensor,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let d = x.cols();
    if d == 0 {
        return Err(Error::Empty("layer_norm row".into()));
    }
    if gain.len() != d || shift.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm affine length {}/{} vs row {}",
            gain.len(),
            shift.len(),
            d
        )));
    }
    let n = x.rows();
    let mut out = vec![0.0; n * d];
    let mut normalized = vec![0.0; n * d];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            normalized[i * d + j] = xh;
            out[i * d + j] = xh * gain.data()[j] + shift.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormCache {
            normalized: Tensor::from_parts(x.shape().to_vec(), normalized),
            inv_std,
        },
    ))
}

/// Returns `dx`; accumulates into `dgain` and `dshift`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
    dgain: &mut Tensor,
    dshift: &mut Tensor,
) -> Tensor {
    let d = dy.cols();
    let n = dy.rows();
    let mut dx = vec![0.0; n * d];
    let mut dxh = vec![0.0; d];
    for i in 0..n {
        let xh = cache.normalized.row(i);
        let g = dy.row(i);
        for j in 0..d {
            dgain.data_mut()[j] += g[j] * xh[j];
            dshift.data_mut()[j] += g[j];
            dxh[j] = g[j] * gain.data()[j];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh) * cache.inv_std[i];
        }
    }
    Tensor::from_parts(dy.shape().to_vec(), dx)
}

/// Inverted-dropout mask: kept entries carry `1/(1-p)`, so inference needs no rescaling.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut SeededRng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.bernoulli(keep) {
            *v = scale;
        }
    }
    Ok(t)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * m + j];
                }
                out.data_mut()[i * m + j] = s;
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        t
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = SeededRng::new(3);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_consistency() {
        let mut rng = SeededRng::new(4);
        let a = random(&[6, 3], &mut rng);
        let b = random(&[6, 5], &mut rng);
        let lhs = matmul_tn(&a, &b).unwrap().transpose();
        let rhs = matmul_tn(&b, &a).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let via_t = matmul(&a.transpose(), &b).unwrap();
        assert_eq!(via_t, matmul_tn(&a, &b).unwrap());
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::ones(&[3]);
        let zero = Tensor::zeros(&[3]);
        let x = Tensor::from_rows(&[vec![2.5, 2.5, 2.5]]).unwrap();
        let (y, _) = layer_norm(&x, 1e-5, &one, &zero).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let one2 = Tensor::ones(&[2]);
        let zero2 = Tensor::zeros(&[2]);
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let (y, _) = layer_norm(&x, 1e-300, &one2, &zero2).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_matches_direct_moments() {
        let mut rng = SeededRng::new(5);
        let x = random(&[4, 7], &mut rng);
        let gain = random(&[7], &mut rng);
        let shift = random(&[7], &mut rng);
        let (y, _) = layer_norm(&x, 1e-5, &gain, &shift).unwrap();
        for i in 0..4 {
            let row = x.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 7.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            for j in 0..7 {
                let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.data()[j] + shift.data()[j];
                assert!((y.row(i)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rejects_bad_inputs() {
        let x = Tensor::zeros(&[2, 0]);
        let e = Tensor::zeros(&[0]);
        assert!(matches!(layer_norm(&x, 1e-5, &e, &e), Err(Error::Empty(_))));
        let x = Tensor::zeros(&[1, 2]);
        let g = Tensor::ones(&[2]);
        assert!(layer_norm(&x, 0.0, &g, &g).is_err());
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor::vector(vec![2.0, -2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[2.0, -0.02]);
        let x = Tensor::vector(vec![-1.0, 1.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.0).data(), &[0.0, 1.0]);
        let x = Tensor::vector(vec![-3.0, 3.0]).unwrap();
        assert_eq!(leaky_relu(&x, 1.0).data(), &[-3.0, 3.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeededRng::new(1);
        let m = dropout_mask(&[10], 0.0, &mut rng, true).unwrap();
        assert!(m.data().iter().all(|v| *v == 1.0));
        let m = dropout_mask(&[10], 0.2, &mut rng, false).unwrap();
        assert!(m.data().iter().all(|v| *v == 1.0));
        assert!(dropout_mask(&[1], 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_keep_frequency() {
        let mut rng = SeededRng::new(11);
        let m = dropout_mask(&[100_000], 0.2, &mut rng, true).unwrap();
        let kept = m.data().iter().filter(|v| **v > 0.0).count() as f64 / 1e5;
        assert!((kept - 0.8).abs() < 0.01, "kept fraction {kept}");
        assert!(m.data().iter().all(|v| *v == 0.0 || (*v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn tensor_rejects_nan() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![3], vec![1.0]).is_err());
    }
}
