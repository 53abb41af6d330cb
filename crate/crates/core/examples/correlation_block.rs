//! The linear correlation expression on a two-channel example, then a
//! randomly initialised correlation block and fusion block on random features.

use corrseg::autodiff::{ParamStore, Tape, Tensor};
use corrseg::blocks::{lce_forward, CorrelationBlock, FusionBlock, GammaVars};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> corrseg::Result<()> {
    let mut t = Tape::<f32>::new();
    let mut v = |x: [f32; 2]| t.constant(Tensor::new(&[2], x.to_vec()).unwrap());
    let g = GammaVars {
        alpha: v([1.0, 2.0]),
        beta: v([0.0, 1.0]),
        gamma: v([3.0, 0.0]),
        delta: v([1.0, 1.0]),
    };
    let mut f = |x: [f32; 2]| t.constant(Tensor::new(&[2, 1, 1, 1], x.to_vec()).unwrap());
    let (fj, fk, fm) = (f([1.0, 1.0]), f([2.0, 2.0]), f([1.0, 0.0]));
    let out = lce_forward(&mut t, &g, fj, fk, fm)?;
    println!("alpha*f_j + beta*f_k + gamma*f_m + delta = {:?}", t.data(out));

    let channels = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cr = CorrelationBlock::new(&mut store, &mut rng, channels, 0.01)?;
    let fusion = FusionBlock::new(&mut store, &mut rng, 4 * channels, 0.01)?;
    let mut t = Tape::<f32>::new();
    let feats = [(); 4].map(|_| t.constant(Tensor::from_fn(&[channels, 4, 4, 4], |_| rng.gen_range(-1.0..1.0))));
    let out = cr.forward(&store, &mut t, &feats)?;
    for (i, g) in out.gammas.iter().enumerate() {
        let g = g.to_gamma(&t)?;
        println!("modality {i}: alpha {:?}", g.alpha);
    }
    let cat = t.concat(&out.features)?;
    let fused = fusion.forward(&store, &mut t, cat)?;
    let w = fused.weights(&t);
    println!("channel weights {:?}", w.channel_w);
    println!("fused shape {:?}", t.shape(fused.fused));
    Ok(())
}
