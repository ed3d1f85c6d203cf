//! Independent oracles shared by the integration and acceptance tests. None of
//! these reuse the library's kernels: convolution, relevance and gradients are
//! recomputed here with plain loops.
#![allow(dead_code)]

use flexrel_core::{backprop_layer, ConvGeometry, Layer, LayerKind, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Layer with uniformly random weights and biases.
pub fn random_layer(rng: &mut impl Rng, kind: LayerKind) -> Layer {
    match kind.weight_shape() {
        Some(ws) => {
            let units = kind.units().unwrap();
            let w = random_tensor(rng, &ws);
            let b = random_tensor(rng, &[units]);
            Layer::with_params(kind, w, b).unwrap()
        }
        None => Layer::new(kind),
    }
}

pub fn conv(in_channels: usize, out_channels: usize, k: (usize, usize), stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d(ConvGeometry {
        in_channels,
        out_channels,
        kernel_h: k.0,
        kernel_w: k.1,
        stride,
        padding,
    })
}

/// Direct six-deep loop convolution of an `N×C×H×W` batch.
pub fn direct_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0; n * f * oh * ow];
    for i in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.data()[o];
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - padding as isize;
                                let ix = (xo * stride + dx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((i * c + ch) * h + iy as usize) * w + ix as usize;
                                let ki = ((o * c + ch) * kh + dy) * kw + dx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((i * f + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// `L = Σ upstream ⊙ layer(input)` with respect to the input and, if
/// present, the weight and bias.
pub fn layer_gradient_error(layer: &Layer, input: &Tensor, upstream: &Tensor, h: f64) -> f64 {
    let loss = |l: &Layer, x: &Tensor| -> f64 {
        let y = l.forward(x).unwrap();
        y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let (gin, gparams) = backprop_layer(layer, input, upstream).unwrap();

    let mut numeric = vec![0.0; input.len()];
    for (k, v) in numeric.iter_mut().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[k] += h;
        let mut minus = input.clone();
        minus.data_mut()[k] -= h;
        *v = (loss(layer, &plus) - loss(layer, &minus)) / (2.0 * h);
    }
    let mut worst = rel_err(gin.data(), &numeric);

    if let Some(g) = gparams {
        for which in 0..2 {
            let analytic = if which == 0 { g.weight.data() } else { g.bias.data() };
            let len = analytic.len();
            let mut numeric = vec![0.0; len];
            for (k, v) in numeric.iter_mut().enumerate() {
                let bump = |delta: f64| {
                    let mut l = layer.clone();
                    let p = l.params_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[k] += delta;
                    loss(&l, input)
                };
                *v = (bump(h) - bump(-h)) / (2.0 * h);
            }
            worst = worst.max(rel_err(analytic, &numeric));
        }
    }
    worst
}

/// Moves every entry at least `gap` away from zero so ReLU kinks are not
/// straddled by finite differences.
pub fn away_from_zero(t: &mut Tensor, gap: f64) {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } + *v;
        }
    }
}

/// Fills `t` with a random permutation of well separated values so max-pool
/// winners are unique and stable under small perturbations.
pub fn distinct_values(rng: &mut impl Rng, t: &mut Tensor) {
    use rand::seq::SliceRandom;
    let n = t.len();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    vals.shuffle(rng);
    t.data_mut().copy_from_slice(&vals);
}

/// Textbook LRP-ε for one fully-connected step of one sample:
/// `rel(a_k) = Σ_j a_k·w[j][k] / (z_j + ε·sign z_j) · rel_out[j]`.
pub fn lrp_dense_step(a: &[f64], w: &[Vec<f64>], bias: &[f64], rel_out: &[f64], eps: f64) -> Vec<f64> {
    let z: Vec<f64> = w
        .iter()
        .zip(bias)
        .map(|(row, b)| row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + b)
        .collect();
    (0..a.len())
        .map(|k| {
            (0..w.len())
                .map(|j| {
                    let sign = if z[j] >= 0.0 { 1.0 } else { -1.0 };
                    a[k] * w[j][k] / (z[j] + eps * sign) * rel_out[j]
                })
                .sum()
        })
        .collect()
}

/// Random small network of conv / ReLU / pool / dense blocks ending in a
/// softmax head, with every bias zero.
pub fn random_zero_bias_net(rng: &mut impl Rng) -> Network {
    let c0 = rng.gen_range(1..=2);
    let side = [4, 6, 8][rng.gen_range(0..3)];
    let mut kinds = Vec::new();
    let mut c = c0;
    let mut s = side;
    for _ in 0..rng.gen_range(0..=2) {
        let f = rng.gen_range(1..=4);
        kinds.push(conv(c, f, (3, 3), 1, 1));
        kinds.push(LayerKind::Relu);
        if s % 2 == 0 && rng.gen_bool(0.5) {
            kinds.push(LayerKind::MaxPool2d { size: 2, stride: 2 });
            s /= 2;
        }
        c = f;
    }
    kinds.push(LayerKind::Flatten);
    let mut width = c * s * s;
    for _ in 0..rng.gen_range(0..=1) {
        let o = rng.gen_range(2..=8);
        kinds.push(LayerKind::Dense { inputs: width, outputs: o });
        kinds.push(LayerKind::Relu);
        width = o;
    }
    let classes = rng.gen_range(2..=5);
    kinds.push(LayerKind::Dense { inputs: width, outputs: classes });
    kinds.push(LayerKind::SoftmaxCrossEntropy { classes });
    let seed = rng.gen();
    let net = Network::from_kinds(vec![c0, side, side], &kinds, 1, seed).unwrap();
    for l in net.layers() {
        if let Some(p) = l.params() {
            assert!(p.bias.data().iter().all(|&b| b == 0.0));
        }
    }
    net
}

/// Input extent for which `(extent + 2·padding − kernel)` is a positive
/// multiple of `stride` (or zero), as the conv geometry requires.
pub fn fitting_extent(rng: &mut impl Rng, kernel: usize, stride: usize, padding: usize) -> usize {
    loop {
        let out = rng.gen_range(1..=4);
        let extent = (out - 1) * stride + kernel;
        if extent > 2 * padding {
            return extent - 2 * padding;
        }
    }
}

/// One random gradient-check configuration; returns a label and the worst
/// relative error.
pub fn gradient_case(rng: &mut impl Rng) -> (String, f64) {
    use flexrel_core::softmax_cross_entropy;
    const H: f64 = 1e-5;
    let n = rng.gen_range(1..=3);
    match rng.gen_range(0..6) {
        0 => {
            let (i, o) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            let layer = random_layer(rng, LayerKind::Dense { inputs: i, outputs: o });
            let x = random_tensor(rng, &[n, i]);
            let up = random_tensor(rng, &[n, o]);
            (format!("dense {i}->{o}"), layer_gradient_error(&layer, &x, &up, H))
        }
        1 => {
            let (c, f) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..k.0.min(k.1).min(2));
            let (h, w) = (fitting_extent(rng, k.0, stride, padding), fitting_extent(rng, k.1, stride, padding));
            let kind = conv(c, f, k, stride, padding);
            let layer = random_layer(rng, kind);
            let x = random_tensor(rng, &[n, c, h, w]);
            let out = kind.output_shape(&[c, h, w]).unwrap();
            let mut shape = vec![n];
            shape.extend(out);
            let up = random_tensor(rng, &shape);
            (
                format!("conv {c}->{f} k{k:?} s{stride} p{padding} on {h}x{w}"),
                layer_gradient_error(&layer, &x, &up, H),
            )
        }
        2 => {
            let len = rng.gen_range(1..=12);
            let mut x = random_tensor(rng, &[n, len]);
            away_from_zero(&mut x, 1e-3);
            let up = random_tensor(rng, &[n, len]);
            ("relu".into(), layer_gradient_error(&Layer::new(LayerKind::Relu), &x, &up, H))
        }
        3 => {
            let (size, stride) = [(2, 2), (2, 1), (3, 2)][rng.gen_range(0..3)];
            let c = rng.gen_range(1..=2);
            let side = fitting_extent(rng, size, stride, 0);
            let kind = LayerKind::MaxPool2d { size, stride };
            let mut x = Tensor::zeros(&[n, c, side, side]);
            distinct_values(rng, &mut x);
            let mut shape = vec![n];
            shape.extend(kind.output_shape(&[c, side, side]).unwrap());
            let up = random_tensor(rng, &shape);
            (
                format!("maxpool {size}/{stride} on {c}x{side}x{side}"),
                layer_gradient_error(&Layer::new(kind), &x, &up, H),
            )
        }
        4 => {
            let x = random_tensor(rng, &[n, 2, 2, 3]);
            let up = random_tensor(rng, &[n, 12]);
            ("flatten".into(), layer_gradient_error(&Layer::new(LayerKind::Flatten), &x, &up, H))
        }
        _ => {
            let classes = rng.gen_range(2..=6);
            let logits = random_tensor(rng, &[n, classes]).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
            let mut numeric = vec![0.0; logits.len()];
            for (k, v) in numeric.iter_mut().enumerate() {
                let mut p = logits.clone();
                p.data_mut()[k] += H;
                let mut m = logits.clone();
                m.data_mut()[k] -= H;
                *v = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0)
                    / (2.0 * H);
            }
            (format!("softmax_ce {classes}"), rel_err(g.data(), &numeric))
        }
    }
}

/// One random shape; returns the largest absolute difference between the
/// library convolution and [`direct_conv`].
pub fn conv_case(rng: &mut impl Rng) -> (String, f64) {
    let n = rng.gen_range(1..=3);
    let (c, f) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let k = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let stride = rng.gen_range(1..=3);
    let padding = rng.gen_range(0..k.0.min(k.1).min(3));
    let h = fitting_extent(rng, k.0, stride, padding);
    let w = fitting_extent(rng, k.1, stride, padding);
    let kind = conv(c, f, k, stride, padding);
    let layer = random_layer(rng, kind);
    let x = random_tensor(rng, &[n, c, h, w]);
    let got = layer.forward(&x).unwrap();
    let p = layer.params().unwrap();
    let want = direct_conv(&x, &p.weight, &p.bias, stride, padding);
    assert_eq!(got.shape(), want.shape());
    let diff = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (format!("{n}x{c}x{h}x{w} * {f}x{c}x{}x{} s{stride} p{padding}", k.0, k.1), diff)
}

/// Relative conservation error `Σ_i |Σ rel_in − seed| / Σ_i |seed|` of one
/// random zero-bias network.
pub fn conservation_case(rng: &mut impl Rng, eps: f64) -> f64 {
    use flexrel_core::{propagate_relevance, seed_output_relevance};
    let net = random_zero_bias_net(rng);
    let n = rng.gen_range(1..=4);
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    let x = random_tensor(rng, &shape).map(|v| v.abs());
    let (logits, trace) = net.forward(&x).unwrap();
    let seed = seed_output_relevance(&logits, None).unwrap();
    let rec = propagate_relevance(&net, &trace, &seed, eps).unwrap();
    let input = rec.totals(0);
    let output = rec.totals(net.len());
    let num: f64 = input.iter().zip(&output).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = output.iter().map(|v| v.abs()).sum();
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

/// Relevance of a single dense layer under a softmax head, recomputed edge by
/// edge: returns `(library, oracle)` as `outputs × inputs` row-major vectors.
pub fn dense_parameter_relevance_pair(rng: &mut impl Rng, inputs: usize, outputs: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    use flexrel_core::relevance::parameter_relevance;
    use flexrel_core::{propagate_relevance, seed_output_relevance};
    let kind = LayerKind::Dense { inputs, outputs };
    let layer = random_layer(rng, kind);
    let p = layer.params().unwrap().clone();
    let net = Network::new(
        vec![inputs],
        vec![layer, Layer::new(LayerKind::SoftmaxCrossEntropy { classes: outputs })],
        1,
    )
    .unwrap();
    let n = 3;
    let x = random_tensor(rng, &[n, inputs]);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..outputs)).collect();
    let (logits, trace) = net.forward(&x).unwrap();
    let seed = seed_output_relevance(&logits, Some(&labels)).unwrap();
    let rec = propagate_relevance(&net, &trace, &seed, eps).unwrap();
    let got = parameter_relevance(&rec, 0).unwrap().into_data();

    let w: Vec<Vec<f64>> = (0..outputs).map(|j| p.weight.row(j).to_vec()).collect();
    let mut oracle = vec![0.0; outputs * inputs];
    for i in 0..n {
        let a = x.row(i);
        let z: Vec<f64> = (0..outputs)
            .map(|j| (0..inputs).map(|k| a[k] * w[j][k]).sum::<f64>() + p.bias.data()[j])
            .collect();
        let rel_b: Vec<f64> = (0..outputs).map(|j| if j == labels[i] { z[j] } else { 0.0 }).collect();
        let rel_a = lrp_dense_step(a, &w, p.bias.data(), &rel_b, eps);
        for j in 0..outputs {
            for k in 0..inputs {
                oracle[j * inputs + k] += rel_a[k] + rel_b[j];
            }
        }
    }
    (got, oracle)
}

/// Conv(1→1, 2×2) on 3×3 inputs against its unrolled 9→4 fully-connected
/// form: every FC edge `pixel → position` carries one kernel element, and the
/// kernel element's relevance is the sum over its edges and samples.
pub fn conv_parameter_relevance_pair(rng: &mut impl Rng, eps: f64) -> (Vec<f64>, Vec<f64>) {
    use flexrel_core::relevance::conv_parameter_relevance;
    use flexrel_core::{propagate_relevance, seed_output_relevance};
    let kind = conv(1, 1, (2, 2), 1, 0);
    let layer = random_layer(rng, kind);
    let p = layer.params().unwrap().clone();
    let net = Network::new(
        vec![1, 3, 3],
        vec![
            layer,
            Layer::new(LayerKind::Flatten),
            Layer::new(LayerKind::SoftmaxCrossEntropy { classes: 4 }),
        ],
        1,
    )
    .unwrap();
    let n = 3;
    let x = random_tensor(rng, &[n, 1, 3, 3]);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let (logits, trace) = net.forward(&x).unwrap();
    let seed = seed_output_relevance(&logits, Some(&labels)).unwrap();
    let rec = propagate_relevance(&net, &trace, &seed, eps).unwrap();
    let got = conv_parameter_relevance(&rec, 0).unwrap().into_data();

    // Unrolled weights: w_fc[j][k] for output position j = (oy, ox), pixel k = (iy, ix).
    let kernel_index = |j: usize, k: usize| -> Option<usize> {
        let (oy, ox, iy, ix) = (j / 2, j % 2, k / 3, k % 3);
        let (dy, dx) = (iy as isize - oy as isize, ix as isize - ox as isize);
        ((0..2).contains(&dy) && (0..2).contains(&dx)).then(|| dy as usize * 2 + dx as usize)
    };
    let w_fc: Vec<Vec<f64>> = (0..4)
        .map(|j| (0..9).map(|k| kernel_index(j, k).map_or(0.0, |e| p.weight.data()[e])).collect())
        .collect();
    let bias = vec![p.bias.data()[0]; 4];
    let mut oracle = vec![0.0; 4];
    for i in 0..n {
        let a = x.row(i);
        let z: Vec<f64> = (0..4)
            .map(|j| (0..9).map(|k| a[k] * w_fc[j][k]).sum::<f64>() + bias[j])
            .collect();
        let rel_b: Vec<f64> = (0..4).map(|j| if j == labels[i] { z[j] } else { 0.0 }).collect();
        let rel_a = lrp_dense_step(a, &w_fc, &bias, &rel_b, eps);
        for j in 0..4 {
            for k in 0..9 {
                if let Some(e) = kernel_index(j, k) {
                    oracle[e] += rel_a[k] + rel_b[j];
                }
            }
        }
    }
    (got, oracle)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
