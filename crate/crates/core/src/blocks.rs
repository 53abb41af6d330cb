//! Architectural building blocks: parameterised layers, the residual dilated
//! block, the correlation representation (parameter estimation followed by the
//! linear correlation expression) and the channel/spatial attention fusion.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// He-style normal initialisation: `N(0, 2 / fan_in)`.
fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = he_normal(rng, &[c_out, c_in, kernel, kernel, kernel], c_in * kernel.pow(3));
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            dilation,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv3d_strided(x, w, b, self.dilation, self.stride)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, n_in: usize, n_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), he_normal(rng, &[n_out, n_in], n_in))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, b)
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.shape()[1]
    }
}

/// `conv -> instance norm -> leaky relu`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub slope: f64,
}

impl ConvBlock {
    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(store, tape, x)?;
        let y = tape.instance_norm(y, NORM_EPS)?;
        tape.leaky_relu(y, self.slope)
    }
}

/// Pre-activation residual block with dilation rates 2 then 4:
/// `x + conv_b(act(norm(conv_a(act(norm(x))))))`.
#[derive(Clone, Debug)]
pub struct ResDilBlock {
    pub conv_a: ConvLayer,
    pub conv_b: ConvLayer,
    pub channels: usize,
    pub slope: f64,
}

impl ResDilBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            conv_a: ConvLayer::new(store, rng, &format!("{name}.conv_a"), channels, channels, 3, 2, 1)?,
            conv_b: ConvLayer::new(store, rng, &format!("{name}.conv_b"), channels, channels, 3, 4, 1)?,
            channels,
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x)[0];
        if c != self.channels {
            return Err(Error::shape("res_dil_forward", tape.shape(x), &[self.channels]));
        }
        let h = tape.instance_norm(x, NORM_EPS)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let h = self.conv_a.forward(store, tape, h)?;
        let h = tape.instance_norm(h, NORM_EPS)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let h = self.conv_b.forward(store, tape, h)?;
        tape.add(x, h)
    }
}

/// Per-modality correlation coefficients, each a per-channel vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Gamma {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub gamma: Vec<f32>,
    pub delta: Vec<f32>,
}

impl Gamma {
    pub fn new(alpha: Vec<f32>, beta: Vec<f32>, gamma: Vec<f32>, delta: Vec<f32>) -> Result<Self> {
        let c = alpha.len();
        if c == 0 || beta.len() != c || gamma.len() != c || delta.len() != c {
            return Err(Error::arg(
                "gamma",
                format!(
                    "component lengths differ: {} {} {} {}",
                    c,
                    beta.len(),
                    gamma.len(),
                    delta.len()
                ),
            ));
        }
        let g = Self { alpha, beta, gamma, delta };
        if !g.components().iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::arg("gamma", "non-finite coefficient"));
        }
        Ok(g)
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn components(&self) -> [&[f32]; 4] {
        [&self.alpha, &self.beta, &self.gamma, &self.delta]
    }

    pub fn to_vars<T: Scalar>(&self, tape: &mut Tape<T>) -> GammaVars {
        let mut leaf = |v: &[f32]| tape.constant(Tensor::new(&[v.len()], v.to_vec()).expect("nonempty").cast());
        GammaVars {
            alpha: leaf(&self.alpha),
            beta: leaf(&self.beta),
            gamma: leaf(&self.gamma),
            delta: leaf(&self.delta),
        }
    }
}

/// [`Gamma`] as nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GammaVars {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub delta: Var,
}

impl GammaVars {
    pub fn to_gamma<T: Scalar>(&self, tape: &Tape<T>) -> Result<Gamma> {
        let read = |v: Var| tape.data(v).iter().map(|x| x.f64() as f32).collect::<Vec<_>>();
        Gamma::new(read(self.alpha), read(self.beta), read(self.gamma), read(self.delta))
    }
}

/// Model parameter estimation: pooled features through two fully connected
/// layers, producing the four coefficient vectors of one modality.
#[derive(Clone, Debug)]
pub struct Mpe {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
    pub channels: usize,
    pub slope: f64,
}

impl Mpe {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            hidden: DenseLayer::new(store, rng, &format!("{name}.fc1"), channels, channels)?,
            out: DenseLayer::new(store, rng, &format!("{name}.fc2"), channels, 4 * channels)?,
            channels,
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, features: Var) -> Result<GammaVars> {
        let c = tape.shape(features)[0];
        if c != self.channels {
            return Err(Error::shape("mpe_forward", tape.shape(features), &[self.channels]));
        }
        let pooled = tape.global_avg_pool(features)?;
        let h = self.hidden.forward(store, tape, pooled)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let out = self.out.forward(store, tape, h)?;
        Ok(GammaVars {
            alpha: tape.slice(out, 0, c)?,
            beta: tape.slice(out, c, c)?,
            gamma: tape.slice(out, 2 * c, c)?,
            delta: tape.slice(out, 3 * c, c)?,
        })
    }
}

/// Linear correlation expression:
/// `alpha * f_j + beta * f_k + gamma * f_m + delta`, coefficients broadcast per channel.
pub fn lce_forward<T: Scalar>(tape: &mut Tape<T>, g: &GammaVars, f_j: Var, f_k: Var, f_m: Var) -> Result<Var> {
    let shape = tape.shape(f_j).to_vec();
    for f in [f_k, f_m] {
        if tape.shape(f) != shape.as_slice() {
            return Err(Error::shape("lce_forward", &shape, tape.shape(f)));
        }
    }
    for v in [g.alpha, g.beta, g.gamma, g.delta] {
        if tape.shape(v) != [shape[0]] {
            return Err(Error::shape("lce_forward gamma", tape.shape(v), &shape));
        }
    }
    let a = tape.mul(f_j, g.alpha)?;
    let b = tape.mul(f_k, g.beta)?;
    let c = tape.mul(f_m, g.gamma)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, c)?;
    tape.add(s, g.delta)
}

/// The three modality indices other than `i`, ascending.
pub fn others(i: usize) -> [usize; 3] {
    let mut out = [0; 3];
    let mut n = 0;
    for j in 0..4 {
        if j != i {
            out[n] = j;
            n += 1;
        }
    }
    out
}

/// Correlation representation block: one parameter estimator per modality.
#[derive(Clone, Debug)]
pub struct CorrelationBlock {
    pub mpe: Vec<Mpe>,
}

/// Outputs of the correlation block for all four modalities.
#[derive(Clone, Debug)]
pub struct CorrelationOutput {
    pub features: [Var; 4],
    pub gammas: [GammaVars; 4],
}

impl CorrelationBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: usize, slope: f64) -> Result<Self> {
        let mpe = (0..4)
            .map(|i| Mpe::new(store, rng, &format!("cr.mpe{}", i + 1), channels, slope))
            .collect::<Result<_>>()?;
        Ok(Self { mpe })
    }

    /// `F_i` from the other three modalities' features, coefficients from `f_i`.
    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, f: &[Var; 4]) -> Result<CorrelationOutput> {
        let mut gammas = Vec::with_capacity(4);
        let mut features = Vec::with_capacity(4);
        for (i, mpe) in self.mpe.iter().enumerate() {
            let g = mpe.forward(store, tape, f[i])?;
            let [j, k, m] = others(i);
            features.push(lce_forward(tape, &g, f[j], f[k], f[m])?);
            gammas.push(g);
        }
        Ok(CorrelationOutput {
            features: features.try_into().expect("four modalities"),
            gammas: gammas.try_into().expect("four modalities"),
        })
    }
}

/// Squeeze-and-excitation over the `4C` concatenated channels, ratio 4.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: DenseLayer,
    pub excite: DenseLayer,
    pub slope: f64,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, slope: f64) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::arg("channel_attention", format!("{channels} channels not divisible by 4")));
        }
        Ok(Self {
            squeeze: DenseLayer::new(store, rng, &format!("{name}.squeeze"), channels, channels / 4)?,
            excite: DenseLayer::new(store, rng, &format!("{name}.excite"), channels / 4, channels)?,
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let c = tape.shape(f)[0];
        if c % 4 != 0 || c != self.squeeze.in_features(store) {
            return Err(Error::arg(
                "channel_attention",
                format!("expected {} channels, got {c}", self.squeeze.in_features(store)),
            ));
        }
        let pooled = tape.global_avg_pool(f)?;
        let h = self.squeeze.forward(store, tape, pooled)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let h = self.excite.forward(store, tape, h)?;
        tape.sigmoid(h)
    }
}

/// `sigmoid(conv3x3x3([mean_c F, max_c F]))`, one weight per voxel.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: ConvLayer,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        Ok(Self {
            conv: ConvLayer::new(store, rng, &format!("{name}.conv"), 2, 1, 3, 1, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let mean = tape.channel_mean(f)?;
        let max = tape.channel_max(f)?;
        let squeezed = tape.concat(&[mean, max])?;
        let y = self.conv.forward(store, tape, squeezed)?;
        tape.sigmoid(y)
    }
}

/// `F * channel_w + F * spatial_w`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, f: Var, channel_w: Var, spatial_w: Var) -> Result<Var> {
    let fc = tape.mul(f, channel_w)?;
    let fs = tape.mul(f, spatial_w)?;
    tape.add(fc, fs)
}

/// Attention weights extracted from a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub channel_w: Vec<f32>,
    pub spatial_w: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub channel_w: Var,
    pub spatial_w: Var,
}

impl FusionOutput {
    pub fn weights<T: Scalar>(&self, tape: &Tape<T>) -> FusionWeights {
        FusionWeights {
            channel_w: tape.data(self.channel_w).iter().map(|v| v.f64() as f32).collect(),
            spatial_w: tape.value(self.spatial_w).cast(),
        }
    }
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(store, rng, "fusion.channel", channels, slope)?,
            spatial: SpatialAttention::new(store, rng, "fusion.spatial")?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore, tape: &mut Tape<T>, f: Var) -> Result<FusionOutput> {
        let channel_w = self.channel.forward(store, tape, f)?;
        let spatial_w = self.spatial.forward(store, tape, f)?;
        let fused = fuse(tape, f, channel_w, spatial_w)?;
        Ok(FusionOutput {
            fused,
            channel_w,
            spatial_w,
        })
    }
}

#[cfg(test)]
mod tests;
