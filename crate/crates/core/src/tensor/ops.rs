use statrs::function::erf::erf;

use super::{linalg, numel_of, Tensor};
use crate::error::{Error, Result};
use crate::flops::{self, OpCategory};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale,
    Silu,
    Gelu,
}

/// Second operand of [`elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    None,
    Scalar(f64),
    Tensor(&'a Tensor),
}

pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    use ElementwiseKind::*;
    match (kind, b) {
        (Add, Operand::Tensor(b)) => a.add(b),
        (Sub, Operand::Tensor(b)) => a.sub(b),
        (Mul, Operand::Tensor(b)) => a.mul(b),
        (Add, Operand::Scalar(s)) => a.add_scalar(s),
        (Sub, Operand::Scalar(s)) => a.add_scalar(-s),
        (Mul | Scale, Operand::Scalar(s)) => a.scale(s),
        (Silu, Operand::None) => a.silu(),
        (Gelu, Operand::None) => a.gelu(),
        (kind, _) => Err(Error::config(format!("operand does not fit elementwise kind {kind:?}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
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
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps every flat index of `out` to the flat index of a broadcast `src`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel_of(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut out = vec![0.0; len];
            for (g, &i) in grad.iter().zip(m) {
                out[i] += g;
            }
            out
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let src_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let rank = shape.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        return data.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut produced = 0;
    while produced < total {
        for j in 0..inner_len {
            out.push(data[pos + j * inner_stride]);
        }
        produced += inner_len;
        for ax in (0..last).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    Ok(())
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape(), op)?;
        let map_a = (self.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, self.shape()));
        let map_b = (other.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, other.shape()));
        let (a, b) = (self.data(), other.data());
        let n = numel_of(&out_shape);
        let at = |i: usize, m: &Option<Vec<usize>>| m.as_ref().map_or(i, |m| m[i]);
        let data: Vec<f64> = match (&map_a, &map_b) {
            (None, None) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(a[at(i, &map_a)], b[at(i, &map_b)])).collect(),
        };
        let (sa, sb) = (self.clone(), other.clone());
        let (la, lb) = (self.numel(), other.numel());
        Tensor::from_op(op, data, out_shape, vec![self.clone(), other.clone()], move |g| {
            let (a, b) = (sa.data(), sb.data());
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for (i, &gi) in g.iter().enumerate() {
                let (x, y) = (a[at(i, &map_a)], b[at(i, &map_b)]);
                ga.push(gi * da(x, y));
                gb.push(gi * db(x, y));
            }
            let ga = sa.requires_grad_flag().then(|| reduce_to(&ga, &map_a, la));
            let gb = sb.requires_grad_flag().then(|| reduce_to(&gb, &map_b, lb));
            vec![ga, gb]
        })
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let src = self.clone();
        Tensor::from_op(op, data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(src.data()).map(|(&gi, &x)| gi * df(x)).collect())]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// x·σ(x)
    pub fn silu(&self) -> Result<Tensor> {
        self.unary("silu", |x| x * sigmoid(x), |x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2)),
            |x| 0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp(),
        )
    }

    /// [B,M,K] × [B,K,N] → [B,M,N]
    pub fn matmul_batched(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul_batched",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (&[b, m, k], &[b2, k2, n]) = (self.shape(), other.shape()) else {
            return Err(mismatch());
        };
        if b != b2 || k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; b * m * n];
        let (x, y) = (self.data(), other.data());
        for i in 0..b {
            linalg::gemm_nn(m, k, n, &x[i * m * k..], &y[i * k * n..], &mut out[i * m * n..(i + 1) * m * n]);
        }
        flops::record(OpCategory::Matmul, 2 * (b * m * k * n) as u64, 0);
        let (sa, sb) = (self.clone(), other.clone());
        Tensor::from_op("matmul_batched", out, vec![b, m, n], vec![self.clone(), other.clone()], move |g| {
            let (x, y) = (sa.data(), sb.data());
            let ga = sa.requires_grad_flag().then(|| {
                let mut ga = vec![0.0; b * m * k];
                for i in 0..b {
                    linalg::gemm_nt(m, n, k, &g[i * m * n..], &y[i * k * n..], &mut ga[i * m * k..(i + 1) * m * k]);
                }
                ga
            });
            let gb = sb.requires_grad_flag().then(|| {
                let mut gb = vec![0.0; b * k * n];
                for i in 0..b {
                    linalg::gemm_tn(k, m, n, &x[i * m * k..], &g[i * m * n..], &mut gb[i * k * n..(i + 1) * k * n]);
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
        flops::record(OpCategory::Softmax, 3 * x.len() as u64, 0);
        let y_saved = y.clone();
        Tensor::from_op("softmax", y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y_saved[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        dx[p] = y_saved[p] * (g[p] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ElementCount {
                shape: shape.to_vec(),
                expected: numel_of(shape),
                got: self.numel(),
            });
        }
        Ok(Tensor::from_op_shared("reshape", self, shape.to_vec(), |g| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::geometry(format!("{perm:?} is not a permutation of {rank} axes")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_c = out_shape.clone();
        Tensor::from_op("permute", data, out_shape, vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &out_shape_c, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![1], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        if start + len > full || len == 0 {
            return Err(Error::geometry(format!("narrow {start}+{len} out of range {full}")));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Tensor::from_op("narrow", data, shape, vec![self.clone()], move |g| {
            let mut dx = vec![0.0; total];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn cat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::geometry("cat of zero tensors"))?;
        check_axis(axis, first.rank())?;
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        Tensor::from_op("cat", data, shape, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Zero-pads an NCHW tensor on the bottom and right.
    pub fn pad_bottom_right(&self, bottom: usize, right: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if bottom == 0 && right == 0 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h + bottom, w + right);
        let x = self.data();
        let mut data = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for r in 0..h {
                let src = plane * h * w + r * w;
                let dst = plane * ho * wo + r * wo;
                data[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
        Tensor::from_op("pad", data, vec![n, c, ho, wo], vec![self.clone()], move |g| {
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for r in 0..h {
                    let dst = plane * h * w + r * w;
                    let src = plane * ho * wo + r * wo;
                    dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Mean cross-entropy of `[N,K]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let &[n, k] = self.shape() else {
            return Err(Error::geometry(format!("cross_entropy expects [N,K], got {:?}", self.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::geometry("labels do not match logits"));
        }
        let x = self.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / sum;
            }
            loss -= row[labels[i]] - max - sum.ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Tensor::from_op("cross_entropy", vec![loss], vec![1], vec![self.clone()], move |g| {
            let mut dx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                dx[i * k + l] -= 1.0;
            }
            let s = g[0] / n as f64;
            dx.iter_mut().for_each(|v| *v *= s);
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_and_broadcast() {
        assert_eq!(t(&[1., 2.], &[2]).add(&t(&[3., 4.], &[2])).unwrap().to_vec(), vec![4., 6.]);
        let x = t(&[1., 2., 3., 4.], &[1, 2, 2, 1]);
        let b = t(&[10., 20.], &[1, 2, 1, 1]);
        assert_eq!(x.add(&b).unwrap().to_vec(), vec![11., 12., 23., 24.]);
        assert!(t(&[1., 2., 3.], &[3]).add(&t(&[1., 2.], &[2])).is_err());
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let x = Tensor::param(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::param(vec![5., 7.], &[2]).unwrap();
        x.mul(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().to_vec(), vec![4., 6.]);
        assert_eq!(x.grad().unwrap().to_vec(), vec![5., 7., 5., 7.]);
    }

    #[test]
    fn activations_at_known_points() {
        let z = t(&[0.0], &[1]);
        assert_eq!(z.silu().unwrap().to_vec(), vec![0.0]);
        assert_eq!(z.gelu().unwrap().to_vec(), vec![0.0]);
        // 1/(1+e^-1), evaluated by hand
        let s = t(&[1.0], &[1]).silu().unwrap().item().unwrap();
        assert!((s - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn matmul_small_cases() {
        let a = t(&[1., 2., 3., 4.], &[1, 2, 2]);
        let v = t(&[1., 1.], &[1, 2, 1]);
        assert_eq!(a.matmul_batched(&v).unwrap().to_vec(), vec![3., 7.]);
        let eye = t(&[1., 0., 0., 1.], &[1, 2, 2]);
        assert_eq!(eye.matmul_batched(&a).unwrap().to_vec(), a.to_vec());
        assert!(a.matmul_batched(&t(&[1., 2., 3.], &[1, 3, 1])).is_err());
    }

    #[test]
    fn softmax_known_values() {
        assert_eq!(t(&[0., 0.], &[2]).softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        assert_eq!(t(&[1000., 1000.], &[2]).softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let y = t(&[0., 3f64.ln()], &[2]).softmax(0).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
        assert!(matches!(t(&[0., 0.], &[2]).softmax(1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_middle_axis_rows_sum_to_one() {
        let x = t(&(0..24).map(|i| (i as f64 * 1.3).sin() * 4.0).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y.data()[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reshape_and_permute() {
        let x = t(&[0., 1., 2., 3., 4., 5.], &[2, 3]);
        let r = x.reshape(&[3, 2]).unwrap();
        assert_eq!(r.to_vec(), x.to_vec());
        assert!(x.reshape(&[4, 2]).is_err());
        let p = x.permute(&[1, 0]).unwrap();
        assert_eq!(p.to_vec(), vec![0., 3., 1., 4., 2., 5.]);
        assert_eq!(p.permute(&[1, 0]).unwrap().to_vec(), x.to_vec());
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn permute_nchw_to_nhwc_matches_index_formula() {
        let (n, c, h, w) = (2, 3, 4, 5);
        let x = t(&(0..n * c * h * w).map(|v| v as f64).collect::<Vec<_>>(), &[n, c, h, w]);
        let y = x.permute(&[0, 2, 3, 1]).unwrap();
        assert_eq!(y.shape(), &[n, h, w, c]);
        for a in 0..n {
            for b in 0..h {
                for d in 0..w {
                    for e in 0..c {
                        let src = ((a * c + e) * h + b) * w + d;
                        assert_eq!(y.data()[((a * h + b) * w + d) * c + e], src as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn narrow_cat_pad() {
        let x = t(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), &[1, 4, 2, 2]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 2).unwrap();
        assert_eq!(Tensor::cat(&[a, b], 1).unwrap().to_vec(), x.to_vec());
        let p = x.pad_bottom_right(1, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 3, 3]);
        assert_eq!(&p.data()[..9], &[0., 1., 0., 2., 3., 0., 0., 0., 0.]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::zeros(&[3, 4]);
        let l = x.cross_entropy(&[0, 1, 3]).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn elementwise_dispatch() {
        let a = t(&[1., 2.], &[2]);
        let b = t(&[3., 4.], &[2]);
        assert_eq!(elementwise(ElementwiseKind::Add, &a, Operand::Tensor(&b)).unwrap().to_vec(), vec![4., 6.]);
        assert_eq!(elementwise(ElementwiseKind::Scale, &a, Operand::Scalar(2.)).unwrap().to_vec(), vec![2., 4.]);
        assert!(elementwise(ElementwiseKind::Silu, &a, Operand::Scalar(2.)).is_err());
    }
}
