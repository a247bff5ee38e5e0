//! Central finite-difference verification of every differentiable op and
//! of the assembled network. Numeric gradients are recomputed from
//! scratch on perturbed copies, fully independent of the backward rules
//! they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::kernels::{ConvSpec, PoolSpec};
use crate::net::{JlDcfNet, NetworkConfig};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-op tolerance on the max relative error.
pub const OP_TOL: f64 = 1e-4;
/// End-to-end tolerance through the full toy network.
pub const NET_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Relative error with an absolute fallback for near-zero gradients.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if denom < 1e-6 {
        diff
    } else {
        diff / denom
    }
}

type Build<'a> = &'a dyn Fn(&mut Graph, &[Tensor]) -> (NodeId, Vec<NodeId>);

fn eval(build: Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, inputs);
    g.value(loss).item()
}

/// Compare analytic gradients of `inputs[i]` (for every i with `check[i]`)
/// against central differences of the scalar built by `build`.
pub fn finite_diff_report(
    name: &str,
    build: Build,
    inputs: &[Tensor],
    check: &[bool],
    tol: f64,
) -> CheckReport {
    let mut g = Graph::new();
    let (loss, ids) = build(&mut g, inputs);
    g.backward(loss).expect("loss must be scalar");
    let mut max_err = 0.0f64;
    for (idx, t) in inputs.iter().enumerate() {
        if !check[idx] {
            continue;
        }
        let analytic: Vec<f64> = match g.grad(ids[idx]) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; t.numel()],
        };
        for elem in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data[elem] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[idx].data[elem] -= FD_STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[elem], numeric));
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tol,
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

/// Random values in [-1, 1] kept away from zero, so ReLU kinks cannot sit
/// inside the finite-difference stencil.
fn rand_tensor_margin<R: Rng>(rng: &mut R, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Scalarize an op output as a weighted sum so no gradient component can
/// cancel out of the check.
fn weighted_sum(g: &mut Graph, out: NodeId, weights: &Tensor) -> NodeId {
    let w = g.leaf(weights.clone());
    let prod = g.mul(out, w).expect("weight shape matches op output");
    g.sum(prod)
}

/// Finite-difference checks for every differentiable op, at `OP_TOL`.
pub fn check_all_ops(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // conv2d, stride 1, padding 1: gradients w.r.t. input, weight and bias
    {
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[2, 4, 8, 8], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let w = g.leaf(inp[1].clone());
            let b = g.leaf(inp[2].clone());
            let y = g.conv2d(x, w, b, ConvSpec::size_preserving(3, 1)).unwrap();
            (weighted_sum(g, y, &inp[3]), vec![x, w, b])
        };
        reports.push(finite_diff_report(
            "conv2d",
            &build,
            &[x, w, b, lw],
            &[true, true, true, false],
            OP_TOL,
        ));
    }

    // conv2d with stride 2 and dilation 2
    {
        let x = rand_tensor(&mut rng, &[1, 2, 9, 9], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let spec = ConvSpec {
            stride: 2,
            dilation: 2,
            padding: 2,
        };
        let out_h = 5; // (9 + 4 - 5) / 2 + 1
        let lw = rand_tensor(&mut rng, &[1, 3, out_h, out_h], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let w = g.leaf(inp[1].clone());
            let b = g.leaf(inp[2].clone());
            let y = g.conv2d(x, w, b, spec).unwrap();
            (weighted_sum(g, y, &inp[3]), vec![x, w, b])
        };
        reports.push(finite_diff_report(
            "conv2d_strided_dilated",
            &build,
            &[x, w, b, lw],
            &[true, true, true, false],
            OP_TOL,
        ));
    }

    // relu (inputs kept away from the kink)
    {
        let x = rand_tensor_margin(&mut rng, &[1, 2, 5, 5], 1e-2);
        let lw = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let y = g.relu(x);
            (weighted_sum(g, y, &inp[1]), vec![x])
        };
        reports.push(finite_diff_report("relu", &build, &[x, lw], &[true, false], OP_TOL));
    }

    // sigmoid
    {
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let y = g.sigmoid(x);
            (weighted_sum(g, y, &inp[1]), vec![x])
        };
        reports.push(finite_diff_report(
            "sigmoid",
            &build,
            &[x, lw],
            &[true, false],
            OP_TOL,
        ));
    }

    // add and mul
    {
        let a = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let build_add = move |g: &mut Graph, inp: &[Tensor]| {
            let a = g.leaf(inp[0].clone());
            let b = g.leaf(inp[1].clone());
            let y = g.add(a, b).unwrap();
            (weighted_sum(g, y, &inp[2]), vec![a, b])
        };
        reports.push(finite_diff_report(
            "add",
            &build_add,
            &[a.clone(), b.clone(), lw.clone()],
            &[true, true, false],
            OP_TOL,
        ));
        let build_mul = move |g: &mut Graph, inp: &[Tensor]| {
            let a = g.leaf(inp[0].clone());
            let b = g.leaf(inp[1].clone());
            let y = g.mul(a, b).unwrap();
            (weighted_sum(g, y, &inp[2]), vec![a, b])
        };
        reports.push(finite_diff_report(
            "mul",
            &build_mul,
            &[a, b, lw],
            &[true, true, false],
            OP_TOL,
        ));
    }

    // maxpool2d: strided window and the size-preserving 3x3/stride-1 form
    {
        let x = rand_tensor(&mut rng, &[1, 1, 6, 6], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let spec = PoolSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let y = g.maxpool2d(x, spec).unwrap();
            (weighted_sum(g, y, &inp[1]), vec![x])
        };
        reports.push(finite_diff_report(
            "maxpool2d",
            &build,
            &[x, lw],
            &[true, false],
            OP_TOL,
        ));

        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let spec = PoolSpec {
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let y = g.maxpool2d(x, spec).unwrap();
            (weighted_sum(g, y, &inp[1]), vec![x])
        };
        reports.push(finite_diff_report(
            "maxpool2d_stride1",
            &build,
            &[x, lw],
            &[true, false],
            OP_TOL,
        ));
    }

    // bilinear upsampling
    for factor in [2usize, 4] {
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 2, 3 * factor, 3 * factor], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let y = g.bilinear_upsample(x, factor).unwrap();
            (weighted_sum(g, y, &inp[1]), vec![x])
        };
        reports.push(finite_diff_report(
            &format!("bilinear_upsample_x{factor}"),
            &build,
            &[x, lw],
            &[true, false],
            OP_TOL,
        ));
    }

    // batch concat followed by split
    {
        let a = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let a = g.leaf(inp[0].clone());
            let b = g.leaf(inp[1].clone());
            let cat = g.concat_batch(a, b).unwrap();
            let (ra, rb) = g.split_batch(cat).unwrap();
            let prod = g.mul(ra, rb).unwrap();
            (weighted_sum(g, prod, &inp[2]), vec![a, b])
        };
        reports.push(finite_diff_report(
            "concat_split_batch",
            &build,
            &[a, b, lw],
            &[true, true, false],
            OP_TOL,
        ));
    }

    // channel concat
    {
        let a = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 5, 3, 3], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let a = g.leaf(inp[0].clone());
            let b = g.leaf(inp[1].clone());
            let cat = g.concat_channels(a, b).unwrap();
            (weighted_sum(g, cat, &inp[2]), vec![a, b])
        };
        reports.push(finite_diff_report(
            "concat_channels",
            &build,
            &[a, b, lw],
            &[true, true, false],
            OP_TOL,
        ));
    }

    // cross-entropy on a raw probability leaf
    {
        let s = rand_tensor(&mut rng, &[1, 1, 4, 4], 0.1, 0.9);
        let t = rand_tensor(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let s = g.leaf(inp[0].clone());
            let loss = g.bce_sum(s, &inp[1], 1e-7).unwrap();
            (loss, vec![s])
        };
        reports.push(finite_diff_report(
            "cross_entropy",
            &build,
            &[s, t],
            &[true, false],
            OP_TOL,
        ));
    }

    // sigmoid feeding cross-entropy, the composition used by both heads
    {
        let x = rand_tensor(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        let t = rand_tensor(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let s = g.sigmoid(x);
            let loss = g.bce_sum(s, &inp[1], 1e-7).unwrap();
            (loss, vec![x])
        };
        reports.push(finite_diff_report(
            "sigmoid_cross_entropy",
            &build,
            &[x, t],
            &[true, false],
            OP_TOL,
        ));
    }

    // per-pixel softmax feeding multi-class cross-entropy (head-swap mode)
    {
        let x = rand_tensor(&mut rng, &[1, 5, 3, 3], -1.0, 1.0);
        let mut t = rand_tensor(&mut rng, &[1, 5, 3, 3], 0.05, 1.0);
        for pix in 0..9 {
            let z: f64 = (0..5).map(|c| t.data[c * 9 + pix]).sum();
            for c in 0..5 {
                t.data[c * 9 + pix] /= z;
            }
        }
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let p = g.softmax_channels(x).unwrap();
            let loss = g.mce_sum(p, &inp[1], 1e-7).unwrap();
            (loss, vec![x])
        };
        reports.push(finite_diff_report(
            "softmax_multiclass_cross_entropy",
            &build,
            &[x, t],
            &[true, false],
            OP_TOL,
        ));
    }

    // scale
    {
        let x = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let build = move |g: &mut Graph, inp: &[Tensor]| {
            let x = g.leaf(inp[0].clone());
            let y = g.scale(x, 256.0);
            (weighted_sum(g, y, &inp[1]), vec![x])
        };
        reports.push(finite_diff_report(
            "scale",
            &build,
            &[x, lw],
            &[true, false],
            OP_TOL,
        ));
    }

    reports
}

/// Scalar training loss of the toy network on fixed inputs/targets.
fn toy_net_loss(net: &JlDcfNet, rgb: &Tensor, depth: &Tensor, g_full: &Tensor, g_coarse: &Tensor) -> f64 {
    let mut g = Graph::new();
    let out = net.forward(&mut g, rgb, depth, None).expect("toy forward");
    let lf = g.bce_sum(out.final_map, g_full, 1e-7).unwrap();
    let lr = g.bce_sum(out.coarse_rgb, g_coarse, 1e-7).unwrap();
    let ld = g.bce_sum(out.coarse_depth, g_coarse, 1e-7).unwrap();
    let guidance = g.add(lr, ld).unwrap();
    let guidance = g.scale(guidance, 2.0);
    let total = g.add(lf, guidance).unwrap();
    g.value(total).item()
}

/// Finite-difference check of every parameter of the full toy network
/// (H0 = 16, uniform width 4) through the complete training loss.
pub fn check_toy_network(seed: u64) -> CheckReport {
    let cfg = NetworkConfig::toy(16, 4);
    let mut net = JlDcfNet::init(&cfg, seed).expect("toy config");
    // Zero-initialized biases behind dead branches put ReLU pre-activations
    // exactly on the kink, where central differences are one-sided; jitter
    // the biases so the check point is differentiable.
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x51e5);
    net.visit_params_mut(&mut |name, t| {
        if name.ends_with(".bias") {
            for v in &mut t.data {
                *v += jitter.gen_range(-0.2..0.2);
            }
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a3d);
    let rgb = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let depth = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let g_full = rand_tensor(&mut rng, &[1, 1, 16, 16], 0.2, 0.8);
    let g_coarse = rand_tensor(&mut rng, &[1, 1, 1, 1], 0.2, 0.8);

    // analytic gradients for every parameter
    let mut g = Graph::new();
    let out = net.forward(&mut g, &rgb, &depth, None).unwrap();
    let lf = g.bce_sum(out.final_map, &g_full, 1e-7).unwrap();
    let lr = g.bce_sum(out.coarse_rgb, &g_coarse, 1e-7).unwrap();
    let ld = g.bce_sum(out.coarse_depth, &g_coarse, 1e-7).unwrap();
    let guidance = g.add(lr, ld).unwrap();
    let guidance = g.scale(guidance, 2.0);
    let total = g.add(lf, guidance).unwrap();
    g.backward(total).unwrap();
    let grads = out.binding.harvest(&g);

    let mut max_err = 0.0f64;
    let mut params: Vec<(String, usize)> = Vec::new();
    net.visit_params(&mut |name, t| params.push((name, t.numel())));
    for (name, numel) in &params {
        let analytic = grads.get(name).expect("every parameter was bound");
        for elem in 0..*numel {
            let mut probe = |delta: f64| -> f64 {
                let mut perturbed = net.clone();
                perturbed.visit_params_mut(&mut |n, t| {
                    if n == *name {
                        t.data[elem] += delta;
                    }
                });
                toy_net_loss(&perturbed, &rgb, &depth, &g_full, &g_coarse)
            };
            let numeric = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[elem], numeric));
        }
    }
    CheckReport {
        name: "toy_network_end_to_end".to_string(),
        max_rel_err: max_err,
        tol: NET_TOL,
    }
}
