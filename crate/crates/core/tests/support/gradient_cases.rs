//! Reverse-mode gradients against central finite differences, in f64. Every
//! case returns its worst relative error over `SEEDS` random draws.

use hsfuse::losses::{total_loss, LossWeights, PixelMasks};
use hsfuse::network::{cross_attention, FusionNet, ModuleFlags, NetworkConfig, NetworkWeights, ParamKind};
use hsfuse::tensor::gradcheck::check_gradients;
use hsfuse::tensor::{Axis, Tape, Tensor, Var};
use hsfuse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from `kinks` by at least `gap`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes to the scalar.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = uniform(&mut rng, tape.value(out).shape(), -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(out, w)?;
    tape.reduce_sum(p, Axis::All)
}

fn check(make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = check_gradients(&inputs, H, 64, |t, v| {
            let out = f(t, v)?;
            if t.value(out).len() == 1 {
                Ok(out)
            } else {
                contract(t, out, seed)
            }
        })
        .unwrap();
        worst = worst.max(report.max_relative_error());
    }
    worst
}

pub fn conv2d_same_padding_with_bias() -> f64 {
    check(
        |r| vec![uniform(r, &[3, 6, 5], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )
}

pub fn conv2d_strided_without_bias() -> f64 {
    check(
        |r| vec![uniform(r, &[2, 7, 7], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
        |t, v| t.conv2d(v[0], v[1], None, 2, 0),
    )
}

pub fn channel_matmul() -> f64 {
    check(
        |r| vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3, 4, 5], -1.0, 1.0)],
        |t, v| t.channel_matmul(v[0], v[1]),
    )
}

pub fn leaky_relu() -> f64 {
    check(
        |r| vec![away_from(r, &[2, 4, 4], -1.0, 1.0, &[0.0], 1e-3)],
        |t, v| t.leaky_relu(v[0], 0.2),
    )
}

pub fn clamp01() -> f64 {
    check(
        |r| vec![away_from(r, &[2, 4, 4], -0.5, 1.5, &[0.0, 1.0], 1e-3)],
        |t, v| t.clamp01(v[0]),
    )
}

pub fn softmax_every_axis() -> f64 {
    [Axis::Channel, Axis::Spatial, Axis::All]
        .into_iter()
        .map(|axis| check(|r| vec![uniform(r, &[3, 4, 3], -2.0, 2.0)], |t, v| t.softmax(v[0], axis)))
        .fold(0.0, f64::max)
}

pub fn concat_add_scale() -> f64 {
    let pair = |r: &mut ChaCha8Rng, c: usize| vec![uniform(r, &[2, 3, 3], -1.0, 1.0), uniform(r, &[c, 3, 3], -1.0, 1.0)];
    [
        check(|r| pair(r, 3), |t, v| t.concat_channels(v[0], v[1])),
        check(|r| pair(r, 2), |t, v| t.add(v[0], v[1])),
        check(|r| vec![uniform(r, &[2, 3, 3], -1.0, 1.0)], |t, v| t.scale(v[0], -1.7)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn mul_with_broadcasting() -> f64 {
    [[2, 4, 3], [2, 1, 1], [1, 4, 3]]
        .into_iter()
        .map(|b_shape| {
            check(
                |r| vec![uniform(r, &[2, 4, 3], -1.0, 1.0), uniform(r, &b_shape, -1.0, 1.0)],
                |t, v| t.mul(v[0], v[1]),
            )
        })
        .fold(0.0, f64::max)
}

pub fn reduce_sum_every_axis() -> f64 {
    [Axis::Channel, Axis::Spatial, Axis::All]
        .into_iter()
        .map(|axis| check(|r| vec![uniform(r, &[3, 2, 4], -1.0, 1.0)], |t, v| t.reduce_sum(v[0], axis)))
        .fold(0.0, f64::max)
}

pub fn avg_pool_and_block_filter() -> f64 {
    check(|r| vec![uniform(r, &[2, 6, 4], -1.0, 1.0)], |t, v| t.avg_pool(v[0], 2)).max(check(
        |r| vec![uniform(r, &[2, 6, 9], -1.0, 1.0), uniform(r, &[3, 3], -1.0, 1.0)],
        |t, v| t.block_filter(v[0], v[1]),
    ))
}

pub fn normalizations() -> f64 {
    check(|r| vec![uniform(r, &[3, 5], 0.1, 1.0)], |t, v| t.normalize_rows(v[0]))
        .max(check(|r| vec![uniform(r, &[4, 4], 0.1, 1.0)], |t, v| t.normalize_all(v[0])))
}

/// Targets offset from the predictions away from the kink of `|.|`.
fn l1_pair(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let a = uniform(r, &[2, 3, 4], 0.0, 1.0);
    let d = away_from(r, &[2, 3, 4], -0.5, 0.5, &[0.0], 1e-3);
    let b = Tensor::from_fn(vec![2, 3, 4], |i| a.data()[i] + d.data()[i]);
    vec![a, b]
}

pub fn l1_losses() -> f64 {
    check(l1_pair, |t, v| t.l1_loss(v[0], v[1])).max(check(l1_pair, |t, v| {
        let mask = Tensor::from_fn(vec![1, 3, 4], |i| (i % 3 != 0) as u8 as f64);
        let m = t.constant(mask)?;
        t.l1_loss_masked(v[0], v[1], m)
    }))
}

pub fn kl_divergences() -> f64 {
    check(|r| vec![uniform(r, &[3, 3, 3], 0.02, 0.98)], |t, v| t.kl_div(0.01, v[0])).max(check(
        |r| vec![uniform(r, &[3, 3, 3], 0.02, 0.98)],
        |t, v| {
            let m = t.constant(Tensor::from_fn(vec![1, 3, 3], |i| (i % 2) as f64))?;
            t.kl_div_mean(0.05, v[0], Some(m))
        },
    ))
}

pub fn cross_attention_block() -> f64 {
    check(
        |r| {
            vec![
                uniform(r, &[3, 2, 2], -1.0, 1.0),
                uniform(r, &[3, 4, 4], -1.0, 1.0),
                uniform(r, &[3, 2, 2], -1.0, 1.0),
                uniform(r, &[1, 3, 3, 3], -1.0, 1.0),
            ]
        },
        |t, v| {
            let (f, g) = cross_attention(t, v[0], v[1], v[2], v[3], 2)?;
            let a = contract(t, f, 1)?;
            let b = contract(t, g, 2)?;
            t.add(a, b)
        },
    )
}

/// L=8, l=2, K=3, 8x8 MSI, ratio 2.
fn toy_network(flags: ModuleFlags) -> FusionNet {
    let mut cfg = NetworkConfig::new(3, 8, 2, 2, 4, 4);
    cfg.widths = vec![5, 4, 3];
    cfg.ms_kernels = vec![5, 3, 3];
    FusionNet::new(cfg, flags).unwrap()
}

fn toy_weights(net: &FusionNet, rng: &mut ChaCha8Rng) -> NetworkWeights<f64> {
    let layout = net.layout();
    let tensors = layout
        .specs
        .iter()
        .map(|s| match s.kind {
            ParamKind::Kernel => uniform(rng, &s.shape, -0.6, 0.6),
            ParamKind::Bias | ParamKind::Projection => uniform(rng, &s.shape, 0.1, 0.4),
            ParamKind::Nonnegative => uniform(rng, &s.shape, 0.1, 1.0),
        })
        .collect();
    NetworkWeights { tensors }
}

/// Whole-network check over the concatenated parameter gradient. The local
/// attention kernel alone has a gradient near the rounding floor at `H`; it is
/// checked in isolation by `cross_attention_block`.
pub fn full_loss(flags: ModuleFlags) -> f64 {
    let net = toy_network(flags);
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = toy_weights(&net, &mut rng);
        let x = uniform(&mut rng, &[8, 4, 4], 0.0, 1.0);
        let y = uniform(&mut rng, &[2, 8, 8], 0.0, 1.0);
        let lr_mask = Tensor::from_fn(vec![1, 4, 4], |_| rng.random_bool(0.8) as u8 as f64);
        let hr_mask = Tensor::from_fn(vec![1, 8, 8], |_| rng.random_bool(0.8) as u8 as f64);
        let weights = LossWeights {
            alpha: 0.7,
            beta: 0.3,
            gamma: 1.3,
            epsilon: 0.05,
        };
        let run = |h: f64| {
            check_gradients(&w.tensors, h, 8, |tape, params| {
                let xv = tape.constant(x.clone())?;
                let yv = tape.constant(y.clone())?;
                let masks = PixelMasks {
                    lr: tape.constant(lr_mask.clone())?,
                    hr: tape.constant(hr_mask.clone())?,
                };
                let fwd = net.forward(tape, params, xv, yv)?;
                Ok(total_loss(tape, &fwd, &weights, Some(masks))?.total)
            })
            .unwrap()
            .overall_relative_error
        };
        let err = run(H);
        // A probe can straddle a kink of |.|, clamp or leaky ReLU; that error
        // falls with the step while a wrong gradient does not.
        let err = if err < TOL { err } else { err.min(run(H / 10.0)) };
        worst = worst.max(err);
    }
    worst
}

/// Every module combination of the ablation study.
pub fn all_arms() -> Vec<ModuleFlags> {
    let mut arms = Vec::new();
    for use_clamp in [true, false] {
        for use_ssc in [true, false] {
            for use_ca in [true, false] {
                arms.push(ModuleFlags {
                    use_clamp,
                    use_ssc,
                    use_ca,
                });
            }
        }
    }
    arms
}

/// Named op-level cases.
pub fn op_cases() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("conv2d", conv2d_same_padding_with_bias),
        ("conv2d strided", conv2d_strided_without_bias),
        ("channel_matmul", channel_matmul),
        ("leaky_relu", leaky_relu),
        ("clamp01", clamp01),
        ("softmax", softmax_every_axis),
        ("concat/add/scale", concat_add_scale),
        ("mul", mul_with_broadcasting),
        ("reduce_sum", reduce_sum_every_axis),
        ("avg_pool/block_filter", avg_pool_and_block_filter),
        ("normalize", normalizations),
        ("l1", l1_losses),
        ("kl", kl_divergences),
        ("cross_attention", cross_attention_block),
    ]
}
