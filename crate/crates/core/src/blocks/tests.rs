use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn probe(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = t.constant(random(t.shape(v), seed ^ 0x51));
    let m = t.mul(v, w)?;
    Ok(t.sum(m))
}

fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).tensor.data_mut().fill(0.0);
    }
}

#[test]
fn res_dil_zero_branch_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = ResDilBlock::new(&mut store, &mut rng, "rd", 3, 0.01).unwrap();
    zero_params(&mut store, &[block.conv_a.weight, block.conv_b.weight]);
    let mut t = Tape::<f32>::new();
    let x = t.constant(random(&[3, 8, 8, 8], 1).cast());
    let y = block.forward(&store, &mut t, x).unwrap();
    assert_eq!(t.data(y), t.data(x));
}

#[test]
fn res_dil_preserves_shape() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = ResDilBlock::new(&mut store, &mut rng, "rd", 2, 0.01).unwrap();
    for dims in [[8, 8, 8], [8, 10, 12], [9, 8, 11]] {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(&[2, dims[0], dims[1], dims[2]]));
        let y = block.forward(&store, &mut t, x).unwrap();
        assert_eq!(t.shape(y), t.shape(x));
    }
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[3, 8, 8, 8]));
    assert!(block.forward(&store, &mut t, x).is_err());
}

#[test]
fn res_dil_gradcheck() {
    for seed in [1, 2, 3] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ResDilBlock::new(&mut store, &mut rng, "rd", 2, 0.01).unwrap();
        let x = random(&[2, 4, 4, 4], seed);
        let err = gradcheck(
            |t, x| {
                let y = block.forward(&store, t, x)?;
                probe(t, y, seed)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "input: {err}");

        let w = store.get(block.conv_a.weight).tensor.cast::<f64>();
        let err = gradcheck(
            |t, w| {
                t.override_param(block.conv_a.weight, w);
                let xv = t.constant(x.clone());
                let y = block.forward(&store, t, xv)?;
                probe(t, y, seed)
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "weight: {err}");
    }
}

#[test]
fn mpe_constant_network_returns_bias_slices() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = 3;
    let mpe = Mpe::new(&mut store, &mut rng, "mpe", c, 0.01).unwrap();
    zero_params(&mut store, &[mpe.hidden.weight, mpe.hidden.bias, mpe.out.weight]);
    let b: Vec<f32> = (0..4 * c).map(|i| i as f32 * 0.5 - 2.0).collect();
    store.get_mut(mpe.out.bias).tensor.data_mut().copy_from_slice(&b);
    for seed in [1, 2] {
        let mut t = Tape::<f32>::new();
        let f = t.constant(random(&[c, 4, 4, 4], seed).cast());
        let g = mpe.forward(&store, &mut t, f).unwrap().to_gamma(&t).unwrap();
        assert_eq!(g.channels(), c);
        assert_eq!(g.alpha, b[0..3]);
        assert_eq!(g.beta, b[3..6]);
        assert_eq!(g.gamma, b[6..9]);
        assert_eq!(g.delta, b[9..12]);
    }
    let mut t = Tape::<f32>::new();
    let f = t.constant(Tensor::zeros(&[c + 1, 2, 2, 2]));
    assert!(mpe.forward(&store, &mut t, f).is_err());
}

#[test]
fn mpe_gradcheck() {
    for seed in [1, 2, 3] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mpe = Mpe::new(&mut store, &mut rng, "mpe", 4, 0.01).unwrap();
        let f = random(&[4, 3, 3, 3], seed);
        let err = gradcheck(
            |t, f| {
                let g = mpe.forward(&store, t, f)?;
                Ok(t.sum(g.alpha))
            },
            &f,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}

fn lce_eval(gamma: &Gamma, fs: [&Tensor<f32>; 3]) -> Vec<f32> {
    let mut t = Tape::<f32>::new();
    let g = gamma.to_vars(&mut t);
    let [j, k, m] = fs.map(|f| t.constant(f.clone()));
    let out = lce_forward(&mut t, &g, j, k, m).unwrap();
    t.data(out).to_vec()
}

#[test]
fn lce_selector_and_zero() {
    let c = 2;
    let f = [0, 1, 2].map(|s| random(&[c, 2, 2, 2], s).cast::<f32>());
    let one = Gamma::new(vec![1.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]).unwrap();
    assert_eq!(lce_eval(&one, [&f[0], &f[1], &f[2]]), f[0].data());
    let zero = Gamma::new(vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]).unwrap();
    assert!(lce_eval(&zero, [&f[0], &f[1], &f[2]]).iter().all(|&v| v == 0.0));
}

#[test]
fn lce_worked_example_is_exact() {
    let gamma = Gamma::new(vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, 0.0], vec![1.0, 1.0]).unwrap();
    let fj = Tensor::new(&[2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
    let fk = Tensor::new(&[2, 1, 1, 1], vec![2.0, 2.0]).unwrap();
    let fm = Tensor::new(&[2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
    let out = lce_eval(&gamma, [&fj, &fk, &fm]);
    assert_eq!(out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), [5.0f32.to_bits(); 2]);
}

#[test]
fn lce_rejects_mismatch() {
    let gamma = Gamma::new(vec![1.0; 2], vec![1.0; 2], vec![1.0; 2], vec![1.0; 2]).unwrap();
    let a = Tensor::zeros(&[2, 2, 2, 2]);
    let b = Tensor::zeros(&[2, 2, 2, 3]);
    let mut t = Tape::<f32>::new();
    let g = gamma.to_vars(&mut t);
    let (va, vb) = (t.constant(a.clone()), t.constant(b));
    assert!(lce_forward(&mut t, &g, va, va, vb).is_err());
    let wide = t.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(lce_forward(&mut t, &g, wide, wide, wide).is_err());
    assert!(Gamma::new(vec![1.0], vec![1.0, 2.0], vec![1.0], vec![1.0]).is_err());
    assert!(Gamma::new(vec![f32::NAN], vec![1.0], vec![1.0], vec![1.0]).is_err());
}

#[test]
fn others_are_ascending() {
    assert_eq!(others(0), [1, 2, 3]);
    assert_eq!(others(1), [0, 2, 3]);
    assert_eq!(others(2), [0, 1, 3]);
    assert_eq!(others(3), [0, 1, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Homogeneous (delta = 0) expression is linear in the features.
    #[test]
    fn lce_is_linear_without_offset(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..c).map(|_| rng.gen_range(-2.0f64..2.0)).collect::<Vec<_>>();
        let (al, be, ga) = (v(), v(), v());
        let x: Vec<Tensor<f64>> = (0..3).map(|i| random(&[c, 2, 2, 1], seed * 7 + i)).collect();
        let y: Vec<Tensor<f64>> = (0..3).map(|i| random(&[c, 2, 2, 1], seed * 7 + 100 + i)).collect();
        let eval = |fs: &[Tensor<f64>]| {
            let mut t = Tape::<f64>::new();
            let mk = |t: &mut Tape<f64>, d: &Vec<f64>| t.constant(Tensor::new(&[c], d.clone()).unwrap());
            let g = GammaVars {
                alpha: mk(&mut t, &al),
                beta: mk(&mut t, &be),
                gamma: mk(&mut t, &ga),
                delta: t.constant(Tensor::zeros(&[c])),
            };
            let [j, k, m] = [0, 1, 2].map(|i| t.constant(fs[i].clone()));
            let o = lce_forward(&mut t, &g, j, k, m).unwrap();
            t.data(o).to_vec()
        };
        let mix: Vec<Tensor<f64>> = x.iter().zip(&y).map(|(p, q)| {
            Tensor::new(p.shape(), p.data().iter().zip(q.data()).map(|(&u, &w)| a * u + b * w).collect()).unwrap()
        }).collect();
        let (fx, fy, fmix) = (eval(&x), eval(&y), eval(&mix));
        for i in 0..fmix.len() {
            prop_assert!((fmix[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    /// With delta = 0, scaling every input by a power of two scales the output exactly.
    #[test]
    fn lce_scales_exactly(seed in 0u64..1000, e in -4i32..4) {
        let s = 2f32.powi(e);
        let c = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..c).map(|_| rng.gen_range(-2.0f32..2.0)).collect::<Vec<_>>();
        let gamma = Gamma::new(v(), v(), v(), vec![0.0; c]).unwrap();
        let f: Vec<Tensor<f32>> = (0..3).map(|i| random(&[c, 2, 1, 2], seed + i).cast()).collect();
        let scaled: Vec<Tensor<f32>> = f.iter().map(|t| Tensor::new(t.shape(), t.data().iter().map(|x| x * s).collect()).unwrap()).collect();
        let base = lce_eval(&gamma, [&f[0], &f[1], &f[2]]);
        let out = lce_eval(&gamma, [&scaled[0], &scaled[1], &scaled[2]]);
        for (o, b) in out.iter().zip(&base) {
            prop_assert_eq!(*o, b * s);
        }
    }

    /// Both attention maps lie in (0,1), so the fused map is bounded by 2|F|.
    #[test]
    fn fuse_is_bounded(seed in 0u64..500) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = FusionBlock::new(&mut store, &mut rng, 8, 0.01).unwrap();
        let mut t = Tape::<f32>::new();
        let f = t.constant(random(&[8, 3, 3, 3], seed).cast());
        let out = block.forward(&store, &mut t, f).unwrap();
        let w = out.weights(&t);
        prop_assert!(w.channel_w.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(w.spatial_w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for (y, x) in t.data(out.fused).iter().zip(t.data(f)) {
            prop_assert!(y.abs() <= 2.0 * x.abs());
        }
        prop_assert_eq!(t.shape(out.fused), t.shape(f));
    }
}

#[test]
fn channel_attention_examples() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 8, 0.01).unwrap();
    let mut t = Tape::<f32>::new();
    let f = t.constant(random(&[8, 2, 2, 2], 4).cast());
    let w = ca.forward(&store, &mut t, f).unwrap();
    assert_eq!(t.shape(w), [8]);
    assert!(t.data(w).iter().all(|&v| v > 0.0 && v < 1.0));

    zero_params(
        &mut store,
        &[ca.squeeze.weight, ca.squeeze.bias, ca.excite.weight, ca.excite.bias],
    );
    let mut t = Tape::<f32>::new();
    let f = t.constant(random(&[8, 2, 2, 2], 4).cast());
    let w = ca.forward(&store, &mut t, f).unwrap();
    assert!(t.data(w).iter().all(|&v| v == 0.5));

    assert!(ChannelAttention::new(&mut store, &mut rng, "bad", 6, 0.01).is_err());
}

#[test]
fn channel_attention_gradcheck() {
    for seed in [1, 2, 3] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 8, 0.01).unwrap();
        let f = random(&[8, 2, 2, 2], seed);
        let err = gradcheck(
            |t, f| {
                let w = ca.forward(&store, t, f)?;
                probe(t, w, seed)
            },
            &f,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}

#[test]
fn spatial_attention_examples() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sa = SpatialAttention::new(&mut store, &mut rng, "sa").unwrap();
    let fmap = random(&[8, 3, 4, 5], 6).cast::<f32>();
    let mut t = Tape::<f32>::new();
    let f = t.constant(fmap.clone());
    let w = sa.forward(&store, &mut t, f).unwrap();
    assert_eq!(t.shape(w), [1, 3, 4, 5]);
    let base = t.data(w).to_vec();

    // Reverse the channel order: mean and max are permutation invariant.
    let plane = fmap.plane();
    let mut permuted = Vec::with_capacity(fmap.numel());
    for c in (0..8).rev() {
        permuted.extend_from_slice(&fmap.data()[c * plane..(c + 1) * plane]);
    }
    let mut t = Tape::<f32>::new();
    let f = t.constant(Tensor::new(fmap.shape(), permuted).unwrap());
    let w = sa.forward(&store, &mut t, f).unwrap();
    for (a, b) in t.data(w).iter().zip(&base) {
        assert!((a - b).abs() < 1e-6);
    }

    zero_params(&mut store, &[sa.conv.weight, sa.conv.bias]);
    let mut t = Tape::<f32>::new();
    let f = t.constant(fmap);
    let w = sa.forward(&store, &mut t, f).unwrap();
    assert!(t.data(w).iter().all(|&v| v == 0.5));
}

#[test]
fn fuse_examples() {
    let mut t = Tape::<f32>::new();
    let f = t.constant(random(&[4, 2, 2, 2], 1).cast());
    let ones_c = t.constant(Tensor::full(&[4], 1.0));
    let ones_s = t.constant(Tensor::full(&[1, 2, 2, 2], 1.0));
    let y = fuse(&mut t, f, ones_c, ones_s).unwrap();
    let twice: Vec<f32> = t.data(f).iter().map(|v| 2.0 * v).collect();
    assert_eq!(t.data(y), twice.as_slice());

    let zc = t.constant(Tensor::zeros(&[4]));
    let zs = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let y = fuse(&mut t, f, zc, zs).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));

    let f = t.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
    let c = t.constant(Tensor::full(&[1], 0.5));
    let s = t.constant(Tensor::full(&[1, 1, 1, 1], 0.25));
    let y = fuse(&mut t, f, c, s).unwrap();
    assert_eq!(t.data(y), [1.5]);
}

#[test]
fn correlation_then_fusion_gradcheck() {
    for seed in [1, 2, 3] {
        let c = 4;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cr = CorrelationBlock::new(&mut store, &mut rng, c, 0.01).unwrap();
        let fusion = FusionBlock::new(&mut store, &mut rng, 4 * c, 0.01).unwrap();
        let feats = random(&[4 * c, 2, 2, 2], seed);
        let err = gradcheck(
            |t, x| {
                let f: Vec<Var> = (0..4).map(|i| t.slice(x, i * c, c)).collect::<Result<_>>()?;
                let out = cr.forward(&store, t, &f.try_into().unwrap())?;
                let cat = t.concat(&out.features)?;
                let fused = fusion.forward(&store, t, cat)?;
                probe(t, fused.fused, seed)
            },
            &feats,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}
