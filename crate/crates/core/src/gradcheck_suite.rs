//! Finite-difference checks of every differentiable operation, every block
//! and the end-to-end training loss, in `f64`.

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck_at, ParamId, ParamStore, Tape, Tensor, Var};
use crate::blocks::{
    fuse, lce_forward, ChannelAttention, CorrelationBlock, FusionBlock, GammaVars, Mpe, ResDilBlock,
    SpatialAttention,
};
use crate::error::Result;
use crate::network::{NetworkConfig, SegNetwork};
use crate::synthetic::{generate_sample, PhantomSpec};
use crate::training::total_loss;

pub const SUITE_TOLERANCE: f64 = 2e-3;
pub const SUITE_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Analytic gradients at most this large count as identically zero.
const ZERO_GRAD_ANALYTIC: f64 = 1e-12;
/// Bound on a central difference of an identically zero gradient.
const ZERO_GRAD_NOISE: f64 = 1e-6;

/// Elements probed per checked tensor.
const PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub name: &'static str,
    /// Largest relative error over all seeds and probed elements.
    pub max_error: f64,
}

impl OpResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error <= tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<OpResult>,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn worst(&self) -> Option<&OpResult> {
        self.results.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpResult> {
        self.results.iter().filter(|r| !r.passed(self.tolerance))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let status = if r.passed(self.tolerance) { "ok" } else { "FAIL" };
            writeln!(f, "{:<28} {:.3e}  {status}", r.name, r.max_error)?;
        }
        write!(
            f,
            "{} checks, {} seeds, tolerance {:.0e}: {}",
            self.results.len(),
            self.seeds.len(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

type Check = fn(u64) -> Result<f64>;

/// Every registered check, in report order.
pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("conv3d/input", conv_input),
        ("conv3d/weight", conv_weight),
        ("conv3d/bias", conv_bias),
        ("upsample", upsample),
        ("dense/input", dense_input),
        ("dense/weight", dense_weight),
        ("relu", relu),
        ("leaky_relu", leaky_relu),
        ("sigmoid", sigmoid),
        ("add", add),
        ("mul", mul),
        ("scale", scale),
        ("average", average),
        ("concat", concat),
        ("slice", slice),
        ("global_avg_pool", global_avg_pool),
        ("instance_norm", instance_norm),
        ("channel_mean", channel_mean),
        ("channel_max", channel_max),
        ("sum", sum),
        ("mean", mean),
        ("soft_dice", soft_dice),
        ("mean_abs_diff", mean_abs_diff),
        ("block/res_dil", res_dil),
        ("block/mpe", mpe),
        ("block/lce", lce),
        ("block/correlation", correlation),
        ("block/channel_attention", channel_attention),
        ("block/spatial_attention", spatial_attention),
        ("block/fusion", fusion),
        ("network/total_loss", network_total_loss),
    ]
}

/// Runs every check on every seed.
pub fn run_suite(seeds: &[u64]) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for (name, check) in checks() {
        let mut max_error = 0.0f64;
        for &seed in seeds {
            max_error = max_error.max(check(seed)?);
        }
        results.push(OpResult { name, max_error });
    }
    Ok(SuiteReport {
        results,
        tolerance: SUITE_TOLERANCE,
        seeds: seeds.to_vec(),
    })
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn uniform(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let mut r = rng(seed, salt);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Magnitudes in `[0.1, 1]`, so finite differences never straddle a kink at zero.
fn away_from_zero(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let mut r = rng(seed, salt);
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(w * v)` with fixed random weights `w`.
fn probe(t: &mut Tape<f64>, v: Var) -> Result<Var> {
    let w = t.constant(uniform(t.shape(v), 7, 0x51));
    let m = t.mul(v, w)?;
    Ok(t.sum(m))
}

fn indices(numel: usize, seed: u64) -> Vec<usize> {
    if numel <= PROBES {
        return (0..numel).collect();
    }
    sample_indices(&mut rng(seed, 0x1d), numel, PROBES).into_vec()
}

fn check<F>(input: &Tensor<f64>, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradcheck_at(f, input, SUITE_STEP, &indices(input.numel(), seed))
}

/// Checks the gradient of `f` with respect to parameter `id` of `store`.
///
/// A bias feeding straight into instance normalization has an identically
/// zero gradient, where relative error only measures rounding noise. Such a
/// parameter passes when every central difference is below [`ZERO_GRAD_NOISE`].
fn check_param<F>(store: &ParamStore, id: ParamId, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let value = store.get(id).tensor.cast::<f64>();
    let at = |t: &mut Tape<f64>, w: Var| {
        t.override_param(id, w);
        f(t)
    };
    let mut tape = Tape::new();
    let w = tape.leaf(value.clone().with_grad());
    let loss = at(&mut tape, w)?;
    tape.backward(loss)?;
    let analytic_zero = tape.grad(w).is_some_and(|g| g.iter().all(|v| v.abs() <= ZERO_GRAD_ANALYTIC));
    if !analytic_zero {
        return check(&value, seed, at);
    }
    for i in indices(value.numel(), seed) {
        let mut diff = 0.0;
        for sign in [1.0, -1.0] {
            let mut t = Tape::new();
            let mut data = value.data().to_vec();
            data[i] += sign * SUITE_STEP;
            let w = t.leaf(Tensor::new(value.shape(), data)?.with_grad());
            let out = at(&mut t, w)?;
            diff += sign * t.value(out).item();
        }
        if (diff / (2.0 * SUITE_STEP)).abs() > ZERO_GRAD_NOISE {
            return Ok(f64::INFINITY);
        }
    }
    Ok(0.0)
}

const CONV_CASES: [(usize, usize, usize); 5] = [(1, 1, 3), (2, 1, 3), (4, 1, 3), (1, 2, 3), (1, 1, 1)];

fn conv_case(seed: u64, k: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (
        uniform(&[2, 6, 5, 6], seed, 1),
        uniform(&[3, 2, k, k, k], seed, 2),
        uniform(&[3], seed, 3),
    )
}

fn conv_input(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (dil, stride, k) in CONV_CASES {
        let (x, w, b) = conv_case(seed, k);
        worst = worst.max(check(&x, seed, |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv3d_strided(x, w, b, dil, stride)?;
            probe(t, y)
        })?);
    }
    Ok(worst)
}

fn conv_weight(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (dil, stride, k) in CONV_CASES {
        let (x, w, b) = conv_case(seed, k);
        worst = worst.max(check(&w, seed, |t, w| {
            let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.conv3d_strided(x, w, b, dil, stride)?;
            probe(t, y)
        })?);
    }
    Ok(worst)
}

fn conv_bias(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (dil, stride, k) in CONV_CASES {
        let (x, w, b) = conv_case(seed, k);
        worst = worst.max(check(&b, seed, |t, b| {
            let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv3d_strided(x, w, b, dil, stride)?;
            probe(t, y)
        })?);
    }
    Ok(worst)
}

fn upsample(seed: u64) -> Result<f64> {
    check(&uniform(&[2, 2, 3, 2], seed, 4), seed, |t, x| {
        let y = t.upsample(x, 2)?;
        probe(t, y)
    })
}

fn dense_input(seed: u64) -> Result<f64> {
    let (w, b) = (uniform(&[5, 6], seed, 5), uniform(&[5], seed, 6));
    check(&uniform(&[6], seed, 7), seed, |t, x| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.dense(x, w, b)?;
        probe(t, y)
    })
}

fn dense_weight(seed: u64) -> Result<f64> {
    let (x, b) = (uniform(&[6], seed, 7), uniform(&[5], seed, 6));
    let w_err = check(&uniform(&[5, 6], seed, 5), seed, |t, w| {
        let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.dense(x, w, b)?;
        probe(t, y)
    })?;
    let w = uniform(&[5, 6], seed, 5);
    let b_err = check(&uniform(&[5], seed, 6), seed, |t, b| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.dense(x, w, b)?;
        probe(t, y)
    })?;
    Ok(w_err.max(b_err))
}

fn relu(seed: u64) -> Result<f64> {
    check(&away_from_zero(&[2, 3, 3, 3], seed, 8), seed, |t, x| {
        let y = t.relu(x)?;
        probe(t, y)
    })
}

fn leaky_relu(seed: u64) -> Result<f64> {
    check(&away_from_zero(&[2, 3, 3, 3], seed, 9), seed, |t, x| {
        let y = t.leaky_relu(x, 0.01)?;
        probe(t, y)
    })
}

fn sigmoid(seed: u64) -> Result<f64> {
    check(&uniform(&[2, 3, 3, 3], seed, 10), seed, |t, x| {
        let y = t.sigmoid(x)?;
        probe(t, y)
    })
}

/// Same-shape, per-channel and per-voxel broadcasts, both operands.
fn broadcast_shapes() -> [[&'static [usize]; 2]; 3] {
    [[&[3, 2, 3, 2], &[3, 2, 3, 2]], [&[3, 2, 3, 2], &[3]], [&[3, 2, 3, 2], &[1, 2, 3, 2]]]
}

fn binary(seed: u64, salt: u64, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut worst = 0.0f64;
    for [sa, sb] in broadcast_shapes() {
        let (a, b) = (uniform(sa, seed, salt), uniform(sb, seed, salt + 1));
        worst = worst.max(check(&a, seed, |t, a| {
            let b = t.constant(b.clone());
            let y = op(t, a, b)?;
            probe(t, y)
        })?);
        worst = worst.max(check(&b, seed, |t, b| {
            let a = t.constant(a.clone());
            let y = op(t, a, b)?;
            probe(t, y)
        })?);
    }
    Ok(worst)
}

fn add(seed: u64) -> Result<f64> {
    binary(seed, 11, |t, a, b| t.add(a, b))
}

fn mul(seed: u64) -> Result<f64> {
    binary(seed, 13, |t, a, b| t.mul(a, b))
}

fn scale(seed: u64) -> Result<f64> {
    check(&uniform(&[2, 2, 2, 2], seed, 15), seed, |t, x| {
        let y = t.scale(x, -1.7);
        probe(t, y)
    })
}

fn average(seed: u64) -> Result<f64> {
    let others = [uniform(&[2, 2, 2, 2], seed, 16), uniform(&[2, 2, 2, 2], seed, 17)];
    check(&uniform(&[2, 2, 2, 2], seed, 18), seed, |t, x| {
        let a = t.constant(others[0].clone());
        let b = t.constant(others[1].clone());
        let y = t.average(&[a, x, b, x])?;
        probe(t, y)
    })
}

fn concat(seed: u64) -> Result<f64> {
    let other = uniform(&[3, 2, 2, 2], seed, 19);
    check(&uniform(&[2, 2, 2, 2], seed, 20), seed, |t, x| {
        let o = t.constant(other.clone());
        let y = t.concat(&[o, x, o])?;
        probe(t, y)
    })
}

fn slice(seed: u64) -> Result<f64> {
    check(&uniform(&[12], seed, 21), seed, |t, x| {
        let y = t.slice(x, 3, 6)?;
        probe(t, y)
    })
}

fn global_avg_pool(seed: u64) -> Result<f64> {
    check(&uniform(&[3, 3, 2, 3], seed, 22), seed, |t, x| {
        let y = t.global_avg_pool(x)?;
        probe(t, y)
    })
}

fn instance_norm(seed: u64) -> Result<f64> {
    check(&uniform(&[2, 3, 3, 3], seed, 23), seed, |t, x| {
        let y = t.instance_norm(x, 1e-5)?;
        probe(t, y)
    })
}

fn channel_mean(seed: u64) -> Result<f64> {
    check(&uniform(&[4, 2, 3, 2], seed, 24), seed, |t, x| {
        let y = t.channel_mean(x)?;
        probe(t, y)
    })
}

fn channel_max(seed: u64) -> Result<f64> {
    check(&uniform(&[4, 2, 3, 2], seed, 25), seed, |t, x| {
        let y = t.channel_max(x)?;
        probe(t, y)
    })
}

fn sum(seed: u64) -> Result<f64> {
    check(&uniform(&[2, 2, 3, 2], seed, 26), seed, |t, x| {
        let s = t.sum(x);
        let sq = t.mul(s, s)?;
        Ok(t.sum(sq))
    })
}

fn mean(seed: u64) -> Result<f64> {
    check(&uniform(&[2, 2, 3, 2], seed, 27), seed, |t, x| {
        let m = t.mean(x);
        let sq = t.mul(m, m)?;
        Ok(t.sum(sq))
    })
}

fn soft_dice(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 28);
    let labels = Tensor::from_fn(&[3, 2, 3, 2], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
    let mut r = rng(seed, 29);
    let probs = Tensor::from_fn(&[3, 2, 3, 2], |_| r.gen_range(0.05..0.95));
    check(&probs, seed, |t, p| t.soft_dice(p, &labels, 1e-5))
}

fn mean_abs_diff(seed: u64) -> Result<f64> {
    let a = uniform(&[2, 2, 3, 2], seed, 30);
    // Keep every difference at least 0.1 away from zero.
    let offset = away_from_zero(&[2, 2, 3, 2], seed, 31);
    let b = Tensor::from_fn(&[2, 2, 3, 2], |i| a.data()[i] + offset.data()[i]);
    let ea = check(&a, seed, |t, a| {
        let b = t.constant(b.clone());
        t.mean_abs_diff(a, b)
    })?;
    let eb = check(&b, seed, |t, b| {
        let a = t.constant(a.clone());
        t.mean_abs_diff(a, b)
    })?;
    Ok(ea.max(eb))
}

const BLOCK_SHAPE: [usize; 4] = [4, 5, 4, 5];
const SLOPE: f64 = 0.01;

fn param_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

/// Input gradient plus the gradient of every parameter in `store`.
fn block_check<F>(store: &ParamStore, input: &Tensor<f64>, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut worst = check(input, seed, &f)?;
    for id in param_ids(store) {
        worst = worst.max(check_param(store, id, seed, |t| {
            let x = t.constant(input.clone());
            f(t, x)
        })?);
    }
    Ok(worst)
}

fn res_dil(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = ResDilBlock::new(&mut store, &mut rng(seed, 40), "res", 4, SLOPE)?;
    block_check(&store, &uniform(&BLOCK_SHAPE, seed, 41), seed, |t, x| {
        let y = block.forward(&store, t, x)?;
        probe(t, y)
    })
}

fn gamma_probe(t: &mut Tape<f64>, g: &GammaVars) -> Result<Var> {
    let cat = t.concat(&[g.alpha, g.beta, g.gamma, g.delta])?;
    probe(t, cat)
}

fn mpe(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = Mpe::new(&mut store, &mut rng(seed, 42), "mpe", 4, SLOPE)?;
    block_check(&store, &uniform(&BLOCK_SHAPE, seed, 43), seed, |t, x| {
        let g = block.forward(&store, t, x)?;
        gamma_probe(t, &g)
    })
}

fn lce(seed: u64) -> Result<f64> {
    let coeffs: Vec<Tensor<f64>> = (0..4).map(|i| uniform(&[4], seed, 44 + i)).collect();
    let features: Vec<Tensor<f64>> = (0..3).map(|i| uniform(&BLOCK_SHAPE, seed, 48 + i)).collect();
    let run = |t: &mut Tape<f64>, c: [Var; 4], f: [Var; 3]| -> Result<Var> {
        let g = GammaVars {
            alpha: c[0],
            beta: c[1],
            gamma: c[2],
            delta: c[3],
        };
        let y = lce_forward(t, &g, f[0], f[1], f[2])?;
        probe(t, y)
    };
    let mut worst = 0.0f64;
    for slot in 0..7 {
        let input = if slot < 4 { &coeffs[slot] } else { &features[slot - 4] };
        worst = worst.max(check(input, seed, |t, x| {
            let mut vars: Vec<Var> = coeffs.iter().chain(&features).map(|v| t.constant(v.clone())).collect();
            vars[slot] = x;
            run(t, [vars[0], vars[1], vars[2], vars[3]], [vars[4], vars[5], vars[6]])
        })?);
    }
    Ok(worst)
}

fn correlation(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = CorrelationBlock::new(&mut store, &mut rng(seed, 52), 4, SLOPE)?;
    let inputs: Vec<Tensor<f64>> = (0..4).map(|i| uniform(&BLOCK_SHAPE, seed, 53 + i)).collect();
    let run = |t: &mut Tape<f64>, f: [Var; 4]| -> Result<Var> {
        let out = block.forward(&store, t, &f)?;
        let cat = t.concat(&out.features)?;
        probe(t, cat)
    };
    let mut worst = 0.0f64;
    for slot in 0..4 {
        worst = worst.max(check(&inputs[slot], seed, |t, x| {
            let mut f: Vec<Var> = inputs.iter().map(|v| t.constant(v.clone())).collect();
            f[slot] = x;
            run(t, [f[0], f[1], f[2], f[3]])
        })?);
    }
    for id in param_ids(&store) {
        worst = worst.max(check_param(&store, id, seed, |t| {
            let f: Vec<Var> = inputs.iter().map(|v| t.constant(v.clone())).collect();
            run(t, [f[0], f[1], f[2], f[3]])
        })?);
    }
    Ok(worst)
}

fn channel_attention(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = ChannelAttention::new(&mut store, &mut rng(seed, 57), "ca", 8, SLOPE)?;
    block_check(&store, &uniform(&[8, 3, 4, 3], seed, 58), seed, |t, x| {
        let y = block.forward(&store, t, x)?;
        probe(t, y)
    })
}

fn spatial_attention(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = SpatialAttention::new(&mut store, &mut rng(seed, 59), "sa")?;
    block_check(&store, &uniform(&[8, 3, 4, 3], seed, 60), seed, |t, x| {
        let y = block.forward(&store, t, x)?;
        probe(t, y)
    })
}

fn fusion(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = FusionBlock::new(&mut store, &mut rng(seed, 61), 8, SLOPE)?;
    let input = uniform(&[8, 3, 4, 3], seed, 62);
    let mut worst = block_check(&store, &input, seed, |t, x| {
        let out = block.forward(&store, t, x)?;
        probe(t, out.fused)
    })?;
    // The fusion product alone, with respect to each attention weight.
    let cw = uniform(&[8], seed, 63);
    let sw = uniform(&[1, 3, 4, 3], seed, 64);
    worst = worst.max(check(&cw, seed, |t, c| {
        let (f, s) = (t.constant(input.clone()), t.constant(sw.clone()));
        let y = fuse(t, f, c, s)?;
        probe(t, y)
    })?);
    worst = worst.max(check(&sw, seed, |t, s| {
        let (f, c) = (t.constant(input.clone()), t.constant(cw.clone()));
        let y = fuse(t, f, c, s)?;
        probe(t, y)
    })?);
    Ok(worst)
}

/// Total loss (dice plus correlation L1) of a small network on a phantom,
/// checked on a few parameter tensors chosen by the seed.
fn network_total_loss(seed: u64) -> Result<f64> {
    let config = NetworkConfig {
        input_size: 8,
        base_channels: 2,
        ..NetworkConfig::default()
    };
    let net = SegNetwork::new(config, seed)?;
    let spec = PhantomSpec {
        size: 8,
        ..PhantomSpec::default()
    };
    let sample = generate_sample(&spec, seed as usize)?;
    let labels = sample.labels.cast::<f64>();
    let ids = param_ids(net.params());
    let mut r = rng(seed, 65);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let id = ids[r.gen_range(0..ids.len())];
        worst = worst.max(check_param(net.params(), id, seed, |t| {
            let out = net.forward(t, &sample.volumes)?;
            Ok(total_loss(t, &out, &labels, 1e-5)?.0)
        })?);
    }
    Ok(worst)
}
