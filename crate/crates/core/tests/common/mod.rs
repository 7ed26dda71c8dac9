//! Brute-force reference implementations and randomized case drivers shared
//! by the integration tests and the acceptance runner.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitwire::engine::ops;
use splitwire::engine::{Tensor, WeightTensor};
use splitwire::graph::{Padding, TensorShape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec_in(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Direct convolution, one output at a time, padding by bounds checks.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    weight: &[f32],
    c_out: usize,
    k: usize,
    bias: Option<&[f32]>,
    stride: usize,
    pad: (usize, usize),
) -> (Vec<f32>, usize, usize) {
    let oh = (h + pad.0 + pad.1 - k) / stride + 1;
    let ow = (w + pad.0 + pad.1 - k) / stride + 1;
    let mut out = vec![0f32; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o] as f64);
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride + kx) as isize - pad.0 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[i * h * w + iy as usize * w + ix as usize] as f64;
                            let wv = weight[((o * c + i) * k + ky) * k + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    (out, oh, ow)
}

/// Transposed convolution written as a gather: each output sums the inputs
/// whose strided footprint covers it. Weight layout is (in, out, k, k).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_transpose2d(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    weight: &[f32],
    c_out: usize,
    k: usize,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = (h - 1) * stride + k + output_padding - 2 * padding;
    let ow = (w - 1) * stride + k + output_padding - 2 * padding;
    let mut out = vec![0f32; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o] as f64);
                for i in 0..c {
                    for iy in 0..h {
                        for ix in 0..w {
                            let ky = (oy + padding) as isize - (iy * stride) as isize;
                            let kx = (ox + padding) as isize - (ix * stride) as isize;
                            if ky < 0 || kx < 0 || ky >= k as isize || kx >= k as isize {
                                continue;
                            }
                            let xv = x[(i * h + iy) * w + ix] as f64;
                            let wv = weight[((i * c_out + o) * k + ky as usize) * k + kx as usize] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_batchnorm(
    x: &[f32],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> Vec<f32> {
    let plane = x.len() / c;
    x.iter()
        .enumerate()
        .map(|(idx, &v)| {
            let ch = idx / plane;
            let norm = (v as f64 - mean[ch] as f64) / (var[ch] as f64 + eps).sqrt();
            (norm * gamma[ch] as f64 + beta[ch] as f64) as f32
        })
        .collect()
}

pub fn naive_linear(x: &[f32], weight: &[f32], out_f: usize, bias: &[f32]) -> Vec<f32> {
    let in_f = x.len();
    (0..out_f)
        .map(|o| {
            let dot: f64 = (0..in_f).map(|i| weight[o * in_f + i] as f64 * x[i] as f64).sum();
            (dot + bias[o] as f64) as f32
        })
        .collect()
}

pub fn naive_gap(x: &[f32], c: usize) -> Vec<f32> {
    let plane = x.len() / c;
    (0..c)
        .map(|ch| (x[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect()
}

/// Outcome of a randomized comparison against an oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleRun {
    pub cases: usize,
    pub max_err: f64,
}

pub fn check_conv2d(cases: usize, seed: u64) -> OracleRun {
    let mut r = rng(seed);
    let mut max_err = 0f64;
    for _ in 0..cases {
        let c = r.gen_range(1..=5);
        let c_out = r.gen_range(1..=6);
        let k = r.gen_range(1..=4);
        let stride = r.gen_range(1..=3);
        let pad = (r.gen_range(0..=2), r.gen_range(0..=2));
        let h = r.gen_range(k.max(1)..=9);
        let w = r.gen_range(k.max(1)..=9);
        let x = vec_in(&mut r, c * h * w, -1.0, 1.0);
        let wt = vec_in(&mut r, c_out * c * k * k, -1.0, 1.0);
        let bias = r.gen_bool(0.5).then(|| vec_in(&mut r, c_out, -1.0, 1.0));
        let input = Tensor::new(TensorShape::new(c, h, w), x.clone()).unwrap();
        let weight = WeightTensor::new(vec![c_out, c, k, k], wt.clone()).unwrap();
        let padding = Padding {
            begin: pad.0,
            end: pad.1,
        };
        let got = ops::conv2d(&input, &weight, bias.as_deref(), stride, padding).unwrap();
        let (want, oh, ow) = naive_conv2d(&x, (c, h, w), &wt, c_out, k, bias.as_deref(), stride, pad);
        assert_eq!(got.shape(), TensorShape::new(c_out, oh, ow));
        max_err = max_err.max(max_abs_diff(got.data(), &want));
    }
    OracleRun { cases, max_err }
}

pub fn check_conv_transpose2d(cases: usize, seed: u64) -> OracleRun {
    let mut r = rng(seed);
    let mut max_err = 0f64;
    let mut done = 0;
    while done < cases {
        let c = r.gen_range(1..=5);
        let c_out = r.gen_range(1..=5);
        let k = r.gen_range(1..=4);
        let stride = r.gen_range(1..=3);
        let padding = r.gen_range(0..k);
        let output_padding = r.gen_range(0..stride);
        let h = r.gen_range(1..=6);
        let w = r.gen_range(1..=6);
        if (h - 1) * stride + k + output_padding <= 2 * padding
            || (w - 1) * stride + k + output_padding <= 2 * padding
        {
            continue;
        }
        let x = vec_in(&mut r, c * h * w, -1.0, 1.0);
        let wt = vec_in(&mut r, c * c_out * k * k, -1.0, 1.0);
        let bias = r.gen_bool(0.5).then(|| vec_in(&mut r, c_out, -1.0, 1.0));
        let input = Tensor::new(TensorShape::new(c, h, w), x.clone()).unwrap();
        let weight = WeightTensor::new(vec![c, c_out, k, k], wt.clone()).unwrap();
        let got =
            ops::conv_transpose2d(&input, &weight, bias.as_deref(), stride, padding, output_padding).unwrap();
        let (want, oh, ow) = naive_conv_transpose2d(
            &x,
            (c, h, w),
            &wt,
            c_out,
            k,
            bias.as_deref(),
            stride,
            padding,
            output_padding,
        );
        assert_eq!(got.shape(), TensorShape::new(c_out, oh, ow));
        max_err = max_err.max(max_abs_diff(got.data(), &want));
        done += 1;
    }
    OracleRun { cases, max_err }
}

pub fn check_batchnorm(cases: usize, seed: u64) -> OracleRun {
    let mut r = rng(seed);
    let mut max_err = 0f64;
    for _ in 0..cases {
        let (c, h, w) = (r.gen_range(1..=8), r.gen_range(1..=6), r.gen_range(1..=6));
        let x = vec_in(&mut r, c * h * w, -3.0, 3.0);
        let gamma = vec_in(&mut r, c, 0.5, 1.5);
        let beta = vec_in(&mut r, c, -0.5, 0.5);
        let mean = vec_in(&mut r, c, -0.5, 0.5);
        let var = vec_in(&mut r, c, 0.1, 2.0);
        let input = Tensor::new(TensorShape::new(c, h, w), x.clone()).unwrap();
        let got = ops::batchnorm_infer(&input, &gamma, &beta, &mean, &var, ops::BN_EPS).unwrap();
        let want = naive_batchnorm(&x, c, &gamma, &beta, &mean, &var, ops::BN_EPS);
        max_err = max_err.max(max_abs_diff(got.data(), &want));
    }
    OracleRun { cases, max_err }
}

pub fn check_linear(cases: usize, seed: u64) -> OracleRun {
    let mut r = rng(seed);
    let mut max_err = 0f64;
    for _ in 0..cases {
        let (in_f, out_f) = (r.gen_range(1..=64), r.gen_range(1..=16));
        let x = vec_in(&mut r, in_f, -1.0, 1.0);
        let wt = vec_in(&mut r, out_f * in_f, -1.0, 1.0);
        let bias = vec_in(&mut r, out_f, -1.0, 1.0);
        let weight = WeightTensor::new(vec![out_f, in_f], wt.clone()).unwrap();
        let got = ops::linear(&x, &weight, &bias).unwrap();
        let want = naive_linear(&x, &wt, out_f, &bias);
        max_err = max_err.max(max_abs_diff(&got, &want));
    }
    OracleRun { cases, max_err }
}

pub fn check_global_avg_pool(cases: usize, seed: u64) -> OracleRun {
    let mut r = rng(seed);
    let mut max_err = 0f64;
    for _ in 0..cases {
        let (c, h, w) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8));
        let x = vec_in(&mut r, c * h * w, -2.0, 2.0);
        let input = Tensor::new(TensorShape::new(c, h, w), x.clone()).unwrap();
        let got = ops::global_avg_pool(&input);
        assert_eq!(got.shape(), TensorShape::vector(c));
        max_err = max_err.max(max_abs_diff(got.data(), &naive_gap(&x, c)));
    }
    OracleRun { cases, max_err }
}

/// Published per-split budgets of the CIFAR-100 ResNet-34 with two-stage
/// decompression at n_c = 1024, in millions:
/// (transmitter FLOPs, transmitter %, transmitter params, receiver FLOPs,
/// receiver params).
pub const REFERENCE_SPLITS: [(f64, f64, f64, f64, f64); 5] = [
    (2.82, 0.12, 0.067, 2298.53, 26.55),
    (229.31, 9.96, 0.29, 2072.04, 26.33),
    (515.57, 37.83, 1.47, 847.30, 24.69),
    (953.88, 79.12, 8.41, 251.71, 15.39),
    (1167.79, 98.93, 21.78, 12.63, 1.62),
];

/// Empirical SNR in dB over `vectors` unit-power feature vectors of length
/// `n`, each corrupted with its own noise seed.
pub fn empirical_snr_db(snr_db: f64, vectors: usize, n: usize, seed: u64) -> f64 {
    use splitwire::channel::{awgn, normalize_and_scale, sigma_from_snr, FeatureVector};
    let sigma = sigma_from_snr(snr_db);
    let mut r = rng(seed);
    let (mut signal, mut noise) = (0f64, 0f64);
    for i in 0..vectors {
        let raw = FeatureVector::raw(vec_in(&mut r, n, -1.0, 1.0));
        let z = normalize_and_scale(&raw).unwrap();
        let z_hat = awgn(&z, sigma, seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1)).unwrap();
        for (a, b) in z.values().iter().zip(z_hat.values()) {
            signal += (*a as f64).powi(2);
            noise += (*b as f64 - *a as f64).powi(2);
        }
    }
    10.0 * (signal / noise).log10()
}

/// Table FLOPs in millions at n_c = 1024 and the unsplit total used to
/// normalize them.
pub fn reference_normalized_comp(split: usize, beta: f64) -> f64 {
    const F_M: f64 = 1160.0;
    let (ft, _, _, fr, _) = REFERENCE_SPLITS[split - 1];
    ft / F_M + beta * fr / F_M
}

/// Exhaustive planner reference: cost every row at the SNR it is matched
/// to, keep the ones meeting the floor, take the cheapest (ties: smaller
/// n_c, then earlier split).
#[allow(clippy::too_many_arguments)]
pub fn exhaustive_plan(
    table: &splitwire::planner::AccuracyTable,
    catalog: &splitwire::planner::FlopCatalog,
    alpha_t: f64,
    alpha_r: f64,
    rate: f64,
    snr_db: f64,
    dtype: splitwire::channel::PayloadDtype,
    floor: f64,
) -> Option<(splitwire::graph::SplitPoint, usize, f64)> {
    let mut best: Option<(splitwire::graph::SplitPoint, usize, f64)> = None;
    for r in &table.records {
        // rows at the largest table SNR not above the link SNR, per split
        let matched = table
            .records
            .iter()
            .filter(|o| o.split == r.split && o.snr_db <= snr_db)
            .map(|o| o.snr_db)
            .fold(f64::NEG_INFINITY, f64::max);
        if r.snr_db != matched || r.top1 < floor {
            continue;
        }
        let e = catalog.get(r.split, r.n_c).expect("catalog covers the table");
        let bits = if r.split == splitwire::graph::SplitPoint::Sp6 {
            16.0
        } else {
            match dtype {
                splitwire::channel::PayloadDtype::F32 => 32.0 * e.payload_elements as f64,
                splitwire::channel::PayloadDtype::U8 => 8.0 * e.payload_elements as f64 + 64.0,
            }
        };
        let t = alpha_t * e.f_m_t as f64 + alpha_r * e.f_m_r as f64 + bits / rate;
        let better = match best {
            None => true,
            Some((bs, bn, bt)) => t < bt || (t == bt && (r.n_c, r.split) < (bn, bs)),
        };
        if better {
            best = Some((r.split, r.n_c, t));
        }
    }
    best
}

/// Compare `plan` against [`exhaustive_plan`] on randomized device and link
/// settings. Returns how many settings agreed and how many of those were
/// feasible.
pub fn check_plan_against_oracle(
    table: &splitwire::planner::AccuracyTable,
    catalog: &splitwire::planner::FlopCatalog,
    settings: usize,
    seed: u64,
) -> (usize, usize) {
    use splitwire::channel::{ChannelProfile, PayloadDtype};
    use splitwire::cost::DeviceProfile;
    let mut r = rng(seed);
    let log_uniform = |r: &mut ChaCha8Rng, lo: f64, hi: f64| 10f64.powf(r.gen_range(lo..hi));
    let (mut agree, mut feasible) = (0, 0);
    for _ in 0..settings {
        let alpha_t = log_uniform(&mut r, -12.0, -8.0);
        let alpha_r = log_uniform(&mut r, -13.0, -10.0);
        let rate = log_uniform(&mut r, 4.0, 9.0);
        let snr = r.gen_range(-1.0..7.0);
        let floor = r.gen_range(0.3..0.8);
        let dtype = if r.gen_bool(0.5) { PayloadDtype::F32 } else { PayloadDtype::U8 };
        let ch = ChannelProfile::new(snr, rate, dtype).unwrap();
        let got = splitwire::planner::plan(
            table,
            catalog,
            DeviceProfile::new(alpha_t).unwrap(),
            DeviceProfile::new(alpha_r).unwrap(),
            &ch,
            floor,
        )
        .unwrap();
        let want = exhaustive_plan(table, catalog, alpha_t, alpha_r, rate, snr, dtype, floor);
        let same = match (want, got.feasible) {
            (None, false) => got.split.is_none(),
            (Some((s, n, t)), true) => {
                got.split == Some(s)
                    && got.n_c == Some(n)
                    && (got.cost.unwrap().t_task - t).abs() <= 1e-12 * t.max(1.0)
            }
            _ => false,
        };
        if same {
            agree += 1;
            feasible += usize::from(got.feasible);
        }
    }
    (agree, feasible)
}

/// Run every inner split of `graph` locally at sigma 0 and against the
/// joined graph. Returns per split: (max |logit difference|, labels agree).
pub fn composition_check(
    graph: &splitwire::graph::ModelGraph,
    n_c: usize,
    weight_seed: u64,
    input_seed: u64,
) -> Vec<(splitwire::graph::SplitPoint, f64, bool)> {
    use splitwire::channel::PayloadDtype;
    use splitwire::engine::{run_graph, WeightStore};
    use splitwire::graph::{apply_split, SplitPoint};
    use splitwire::wire::simulate_local;
    SplitPoint::INNER
        .iter()
        .map(|&sp| {
            let m = apply_split(graph, sp, n_c, 2).unwrap();
            let w = WeightStore::random_for(&[&m.encoder, &m.decoder], weight_seed).unwrap();
            let x = Tensor::random_normal(m.encoder.input_shape, input_seed);
            let run = simulate_local(&m, &w, &x, PayloadDtype::F32, 0.0, 1).unwrap();
            let joined = run_graph(&m.monolithic(), &w, &x).unwrap();
            let err = max_abs_diff(&run.reception.output, joined.data());
            let same = ops::argmax(joined.data()) == Some(run.label());
            (sp, err, same)
        })
        .collect()
}

/// Random valid frame.
pub fn random_frame(r: &mut ChaCha8Rng) -> splitwire::wire::Frame {
    use splitwire::channel::PayloadDtype;
    use splitwire::graph::SplitPoint;
    use splitwire::wire::{feature_payload_len, Frame, MsgType};
    let split = SplitPoint::from_index(r.gen_range(0..7)).unwrap();
    let dtype = if r.gen_bool(0.5) { PayloadDtype::F32 } else { PayloadDtype::U8 };
    let n_c = r.gen_range(1..=64u32);
    let msg_type = [MsgType::Features, MsgType::Label, MsgType::Error, MsgType::Hello][r.gen_range(0..4)];
    let len = match msg_type {
        MsgType::Features => feature_payload_len(split, n_c as usize, dtype),
        MsgType::Label => splitwire::wire::LABEL_PAYLOAD_LEN,
        MsgType::Error => r.gen_range(2..40),
        MsgType::Hello => 0,
    };
    let mut fingerprint = [0u8; 8];
    r.fill(&mut fingerprint);
    Frame {
        msg_type,
        fingerprint,
        split,
        n_c,
        dtype,
        seed: r.gen(),
        payload: (0..len).map(|_| r.gen()).collect(),
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub cases: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub panics: usize,
}

/// Mutate encoded frames (bit flips, truncation, extension, header edits
/// with a repaired checksum) and decode them, counting panics.
pub fn fuzz_frames(cases: usize, seed: u64) -> FuzzStats {
    use splitwire::wire::{decode_frame, encode_frame, read_frame, HEADER_LEN};
    let mut r = rng(seed);
    let mut stats = FuzzStats::default();
    for _ in 0..cases {
        let mut bytes = encode_frame(&random_frame(&mut r));
        match r.gen_range(0..4) {
            0 => {
                for _ in 0..r.gen_range(1..4) {
                    let i = r.gen_range(0..bytes.len());
                    bytes[i] ^= 1 << r.gen_range(0..8);
                }
            }
            1 => {
                let keep = r.gen_range(0..bytes.len());
                bytes.truncate(keep);
            }
            2 => {
                for _ in 0..r.gen_range(1..16) {
                    bytes.push(r.gen());
                }
            }
            _ => {
                // edit a header byte and fix the checksum so the edit is seen
                let i = r.gen_range(4..HEADER_LEN);
                bytes[i] = r.gen();
                let body = bytes.len() - 4;
                let crc = crc32fast::hash(&bytes[..body]);
                bytes[body..].copy_from_slice(&crc.to_le_bytes());
            }
        }
        stats.cases += 1;
        let outcome = std::panic::catch_unwind(|| {
            let a = decode_frame(&bytes).is_ok();
            let b = read_frame(&mut &bytes[..], 1 << 20).is_ok();
            a || b
        });
        match outcome {
            Ok(true) => stats.accepted += 1,
            Ok(false) => stats.rejected += 1,
            Err(_) => stats.panics += 1,
        }
    }
    stats
}

pub struct Loopback {
    pub inputs: usize,
    pub labels_equal: usize,
    pub digests_equal: usize,
    pub distinct_labels: usize,
}

/// Serve `model` on an ephemeral port and compare networked inference
/// against the local pipeline on `inputs` seeded inputs.
pub fn loopback(
    model: splitwire::graph::SplitModel,
    weights: splitwire::engine::WeightStore,
    snr_db: Option<f64>,
    inputs: usize,
) -> Loopback {
    use splitwire::channel::{sigma_from_snr, PayloadDtype};
    use splitwire::wire::{digest_values, simulate_local, EdgeClient, Server, ServerConfig, SessionConfig};
    use std::sync::Arc;
    use std::time::Duration;
    let model = Arc::new(model);
    let weights = Arc::new(weights);
    let config = ServerConfig {
        snr_db,
        ..Default::default()
    };
    let server = Server::bind("127.0.0.1:0", Arc::clone(&model), Arc::clone(&weights), config)
        .unwrap()
        .spawn()
        .unwrap();
    let session = SessionConfig::new(PayloadDtype::F32, Duration::from_secs(10)).unwrap();
    let mut client = EdgeClient::connect(server.addr(), Arc::clone(&model), Arc::clone(&weights), session).unwrap();
    let sigma = snr_db.map_or(0.0, sigma_from_snr);
    let mut out = Loopback {
        inputs,
        labels_equal: 0,
        digests_equal: 0,
        distinct_labels: 0,
    };
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..inputs {
        let x = Tensor::random_normal(model.encoder.input_shape, 10_000 + i as u64);
        let seed = 500 + i as u64;
        let local = simulate_local(&model, &weights, &x, PayloadDtype::F32, sigma, seed).unwrap();
        let remote = client.infer(&x, seed).unwrap();
        assert_eq!(remote.seed, seed);
        seen.insert(local.label());
        out.labels_equal += usize::from(remote.label == local.label());
        out.digests_equal += usize::from(remote.z_hat_digest == digest_values(&local.reception.z_hat));
    }
    out.distinct_labels = seen.len();
    server.shutdown();
    out
}
