//! Prints calibration statistics of the default phantom generator.

use corrseg::synthetic::{brain_mask, generate_sample, masked_correlation, min_singular_value, PhantomSpec};
use corrseg::Modality;

fn main() -> corrseg::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("sample count"));
    let spec = PhantomSpec::default();
    println!("smallest singular value of mixing: {:.4}", min_singular_value(&spec.mixing));

    for (label, sigma) in [("tumour voxels, noise 0", 0.0), ("head voxels, noise 0.1", 0.1)] {
        let spec = PhantomSpec { noise_sigma: sigma, ..spec.clone() };
        let mut worst = [[f64::INFINITY; 4]; 4];
        let mut fraction = 0.0;
        for i in 0..n {
            let s = generate_sample(&spec, i)?;
            let mask: Vec<bool> = if sigma == 0.0 {
                s.labels.channel(0).iter().map(|&v| v == 1.0).collect()
            } else {
                brain_mask(&spec, i)?
            };
            fraction += s.labels.channel(0).iter().sum::<f32>() as f64 / mask.len() as f64 / n as f64;
            for a in 0..4 {
                for b in a + 1..4 {
                    let r = masked_correlation(s.volumes[a].data(), s.volumes[b].data(), &mask).abs();
                    worst[a][b] = worst[a][b].min(r);
                }
            }
        }
        println!("{label}: mean complete fraction {fraction:.4}");
        for a in 0..4 {
            for b in a + 1..4 {
                println!("  min |r| {:>5}-{:<5} {:.3}", Modality::ALL[a], Modality::ALL[b], worst[a][b]);
            }
        }
    }
    Ok(())
}
