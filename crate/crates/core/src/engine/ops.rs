//! Forward kernels. Every kernel validates its operands and never panics on
//! mismatched shapes.

use super::{EngineError, Result, Tensor, WeightTensor};
use crate::graph::{Padding, TensorShape};

pub const BN_EPS: f64 = 1e-5;

fn kernel_dims(weight: &WeightTensor, what: &str) -> Result<[usize; 4]> {
    match weight.shape[..] {
        [a, b, kh, kw] if kh == kw && kh > 0 => Ok([a, b, kh, kw]),
        _ => Err(EngineError::Shape(format!(
            "{what} weight must be (a, b, k, k), got {:?}",
            weight.shape
        ))),
    }
}

fn check_bias(bias: Option<&[f32]>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != n => Err(EngineError::Shape(format!(
            "bias has {} entries, expected {n}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(EngineError::Shape("stride must be at least 1".into()));
    }
    if n + pad < k {
        return Err(EngineError::Shape(format!(
            "kernel {k} exceeds padded extent {}",
            n + pad
        )));
    }
    Ok((n + pad - k) / stride + 1)
}

/// 2-D cross-correlation. `weight` is `(C_out, C_in, k, k)`.
pub fn conv2d(
    input: &Tensor,
    weight: &WeightTensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let [c_out, c_in, k, _] = kernel_dims(weight, "conv")?;
    let s = input.shape();
    if s.channels != c_in {
        return Err(EngineError::Shape(format!(
            "conv expects {c_in} input channels, got {}",
            s.channels
        )));
    }
    check_bias(bias, c_out)?;
    let oh = out_extent(s.height, k, stride, padding.total())?;
    let ow = out_extent(s.width, k, stride, padding.total())?;
    let n = oh * ow;
    let depth = c_in * k * k;

    let direct = k == 1 && stride == 1 && padding.total() == 0;
    let cols;
    let patches: &[f32] = if direct {
        input.data()
    } else {
        cols = im2col(input, k, stride, padding, oh, ow);
        &cols
    };

    let mut out = vec![0f32; c_out * n];
    gemm_f64(&weight.data, patches, &mut out, c_out, depth, n);
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(n).enumerate() {
            for v in row {
                *v = (*v as f64 + b[o] as f64) as f32;
            }
        }
    }
    Tensor::new(TensorShape::new(c_out, oh, ow), out)
}

/// Rows are (input channel, kernel row, kernel column); columns are output
/// pixels. Out-of-range taps read zero.
fn im2col(input: &Tensor, k: usize, stride: usize, pad: Padding, oh: usize, ow: usize) -> Vec<f32> {
    let s = input.shape();
    let (h, w) = (s.height as isize, s.width as isize);
    let n = oh * ow;
    let mut cols = vec![0f32; s.channels * k * k * n];
    let data = input.data();
    for c in 0..s.channels {
        let plane = &data[c * s.spatial()..(c + 1) * s.spatial()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((c * k + kh) * k + kw) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad.begin as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * s.width..][..s.width];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad.begin as isize;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[m][n] = sum_k a[m][k] * b[k][n]`, accumulated in f64 with `k`
/// ascending for every output element.
fn gemm_f64(a: &[f32], b: &[f32], out: &mut [f32], m: usize, depth: usize, n: usize) {
    let mut n0 = 0;
    while n0 < n {
        let nb = NR.min(n - n0);
        let mut m0 = 0;
        while m0 < m {
            let mb = MR.min(m - m0);
            if mb == MR && nb == NR {
                micro_kernel(a, b, out, m0, n0, depth, n);
            } else {
                for r in m0..m0 + mb {
                    let arow = &a[r * depth..][..depth];
                    for c in n0..n0 + nb {
                        let mut acc = 0f64;
                        for (kk, &av) in arow.iter().enumerate() {
                            acc += av as f64 * b[kk * n + c] as f64;
                        }
                        out[r * n + c] = acc as f32;
                    }
                }
            }
            m0 += mb;
        }
        n0 += nb;
    }
}

#[inline(always)]
fn micro_kernel(a: &[f32], b: &[f32], out: &mut [f32], m0: usize, n0: usize, depth: usize, n: usize) {
    let rows: [&[f32]; MR] = std::array::from_fn(|r| &a[(m0 + r) * depth..][..depth]);
    let mut acc = [[0f64; NR]; MR];
    for kk in 0..depth {
        let bs = &b[kk * n + n0..][..NR];
        let bv: [f64; NR] = std::array::from_fn(|j| bs[j] as f64);
        for r in 0..MR {
            let av = rows[r][kk] as f64;
            for j in 0..NR {
                acc[r][j] += av * bv[j];
            }
        }
    }
    for r in 0..MR {
        let dst = &mut out[(m0 + r) * n + n0..][..NR];
        for j in 0..NR {
            dst[j] = acc[r][j] as f32;
        }
    }
}

/// Transposed convolution as a scatter-add of strided kernel copies.
/// `weight` is `(C_in, C_out, k, k)`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &WeightTensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let [c_in, c_out, k, _] = kernel_dims(weight, "conv_transpose")?;
    let s = input.shape();
    if s.channels != c_in {
        return Err(EngineError::Shape(format!(
            "conv_transpose expects {c_in} input channels, got {}",
            s.channels
        )));
    }
    check_bias(bias, c_out)?;
    if stride == 0 || output_padding >= stride {
        return Err(EngineError::Shape(format!(
            "invalid stride {stride} / output_padding {output_padding}"
        )));
    }
    let extent = |n: usize| {
        ((n - 1) * stride + k + output_padding)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| EngineError::Shape(format!("padding {padding} too large")))
    };
    let oh = extent(s.height)?;
    let ow = extent(s.width)?;
    let mut acc = vec![0f64; c_out * oh * ow];
    let x = input.data();
    let w = &weight.data;
    for ic in 0..c_in {
        for iy in 0..s.height {
            for ix in 0..s.width {
                let xv = x[(ic * s.height + iy) * s.width + ix] as f64;
                for oc in 0..c_out {
                    let kern = &w[(ic * c_out + oc) * k * k..][..k * k];
                    let plane = &mut acc[oc * oh * ow..][..oh * ow];
                    for kh in 0..k {
                        let oy = (iy * stride + kh) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let orow = &mut plane[oy as usize * ow..][..ow];
                        for kw in 0..k {
                            let ox = (ix * stride + kw) as isize - padding as isize;
                            if ox >= 0 && ox < ow as isize {
                                orow[ox as usize] += xv * kern[kh * k + kw] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let plane = oh * ow;
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| match bias {
            Some(b) => (v + b[i / plane] as f64) as f32,
            None => v as f32,
        })
        .collect();
    Tensor::new(TensorShape::new(c_out, oh, ow), data)
}

/// Inference batch norm: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> Result<Tensor> {
    let s = input.shape();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if v.len() != s.channels {
            return Err(EngineError::Shape(format!(
                "batch norm {name} has {} entries for {} channels",
                v.len(),
                s.channels
            )));
        }
    }
    let plane = s.spatial();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = i / plane;
            let denom = (var[c] as f64 + eps).sqrt();
            ((x as f64 - mean[c] as f64) / denom * gamma[c] as f64 + beta[c] as f64) as f32
        })
        .collect();
    Tensor::new(s, data)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape(),
        data,
    }
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Max pooling; padded positions never win.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let s = input.shape();
    let oh = out_extent(s.height, kernel, stride, 2 * padding)?;
    let ow = out_extent(s.width, kernel, stride, 2 * padding)?;
    let mut out = Vec::with_capacity(s.channels * oh * ow);
    for c in 0..s.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for kh in 0..kernel {
                    let iy = (oy * stride + kh) as isize - padding as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let ix = (ox * stride + kw) as isize - padding as isize;
                        if ix >= 0 && ix < s.width as isize {
                            best = best.max(input.at(c, iy as usize, ix as usize));
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(TensorShape::new(s.channels, oh, ow), out)
}

/// `y = W x + b` with `W` as `(out, in)`.
pub fn linear(input: &[f32], weight: &WeightTensor, bias: &[f32]) -> Result<Vec<f32>> {
    let (out_f, in_f) = match weight.shape[..] {
        [o, i] => (o, i),
        _ => {
            return Err(EngineError::Shape(format!(
                "linear weight must be (out, in), got {:?}",
                weight.shape
            )))
        }
    };
    if input.len() != in_f || bias.len() != out_f {
        return Err(EngineError::Shape(format!(
            "linear {in_f}->{out_f} given input {} and bias {}",
            input.len(),
            bias.len()
        )));
    }
    Ok(weight
        .data
        .chunks(in_f)
        .zip(bias)
        .map(|(row, &b)| {
            let dot: f64 = row
                .iter()
                .zip(input)
                .fold(0f64, |acc, (&w, &x)| acc + w as f64 * x as f64);
            (dot + b as f64) as f32
        })
        .collect())
}

/// Mean over each channel, summed in row-major order.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.spatial();
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| (ch.iter().fold(0f64, |acc, &v| acc + v as f64) / plane as f64) as f32)
        .collect();
    Tensor {
        shape: TensorShape::vector(s.channels),
        data,
    }
}

/// Element-wise sum of two equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(EngineError::Shape(format!(
            "cannot add {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Scale `x` to l2 norm `sqrt(len)`, i.e. unit average power per entry.
pub fn normalize_scale(x: &[f32]) -> Result<Vec<f32>> {
    let norm = x.iter().fold(0f64, |acc, &v| acc + v as f64 * v as f64).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EngineError::DegenerateFeature);
    }
    let gain = (x.len() as f64).sqrt() / norm;
    Ok(x.iter().map(|&v| (v as f64 * gain) as f32).collect())
}

/// Index of the first maximal entry.
pub fn argmax(x: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
