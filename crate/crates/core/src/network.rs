//! Multi-encoder segmentation network.
//!
//! Four independent encoders (one per modality) feed a correlation block at
//! the bottleneck, the attention fusion block merges the four representations,
//! and a single decoder with averaged skip connections and deep supervision
//! produces three sigmoid region channels.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::io::{read_tensor, write_tensor};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::blocks::{
    ConvBlock, ConvLayer, CorrelationBlock, FusionBlock, FusionOutput, GammaVars, ResDilBlock,
};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub n_modalities: usize,
    pub n_regions: usize,
    pub leaky_slope: f64,
    /// `false` drops the correlation block (the "Org" ablation).
    pub cr_enabled: bool,
    pub deep_supervision: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            levels: 3,
            base_channels: 8,
            n_modalities: 4,
            n_regions: 3,
            leaky_slope: 0.01,
            cr_enabled: true,
            deep_supervision: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.input_size == 0 || self.input_size % div != 0 {
            return fail(format!(
                "input_size {} must be divisible by 2^(levels-1) = {div}",
                self.input_size
            ));
        }
        if self.n_modalities != 4 {
            return fail(format!("n_modalities must be 4, got {}", self.n_modalities));
        }
        if self.n_regions != 3 {
            return fail(format!("n_regions must be 3, got {}", self.n_regions));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope must lie in (0,1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Encoder channels per level, doubling from `base_channels`.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_channels << l).collect()
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    entry: ConvBlock,
    res: ResDilBlock,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    /// Upsampled features concatenated with the skip, down to `C_l` channels.
    /// At the bottleneck the input is the fused `4C_L` map and there is no skip.
    conv: ConvBlock,
    res: ResDilBlock,
    head: ConvLayer,
}

/// Vars produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    /// Per-level head logits at native resolution, finest level first.
    pub aux: Vec<Var>,
    pub encoder_features: [Var; 4],
    pub cr_features: Option<[Var; 4]>,
    pub gammas: Option<[GammaVars; 4]>,
    pub fusion: FusionOutput,
}

#[derive(Clone, Debug)]
pub struct SegNetwork {
    config: NetworkConfig,
    seed: u64,
    store: ParamStore,
    encoders: Vec<Vec<EncoderLevel>>,
    cr: Option<CorrelationBlock>,
    fusion: FusionBlock,
    /// Bottleneck first, finest level last.
    decoder: Vec<DecoderLevel>,
}

/// Fills each missing slot with its partner modality when available, else
/// with the first available modality in fixed order.
pub fn substitute_missing<V: Clone>(volumes: &[Option<V>; 4]) -> Result<[V; 4]> {
    let first = volumes
        .iter()
        .flatten()
        .next()
        .ok_or(Error::AllModalitiesMissing)?;
    Ok(std::array::from_fn(|i| {
        let partner = Modality::ALL[i].partner().index();
        volumes[i]
            .as_ref()
            .or(volumes[partner].as_ref())
            .unwrap_or(first)
            .clone()
    }))
}

/// Applies a presence mask to complete volumes, then substitutes.
pub fn mask_and_substitute<V: Clone>(volumes: &[V; 4], present: [bool; 4]) -> Result<[V; 4]> {
    let masked: [Option<V>; 4] = std::array::from_fn(|i| present[i].then(|| volumes[i].clone()));
    substitute_missing(&masked)
}

impl SegNetwork {
    /// Builds and initialises a network deterministically from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.channels();
        let slope = config.leaky_slope;
        let levels = config.levels;

        let mut encoders = Vec::with_capacity(4);
        for e in 1..=4 {
            let mut enc = Vec::with_capacity(levels);
            for l in 0..levels {
                let prefix = format!("encoder{e}.level{}", l + 1);
                let (c_in, stride) = if l == 0 { (1, 1) } else { (ch[l - 1], 2) };
                let conv = ConvLayer::new(&mut store, &mut rng, &format!("{prefix}.conv"), c_in, ch[l], 3, 1, stride)?;
                let res = ResDilBlock::new(&mut store, &mut rng, &format!("{prefix}.res_dil"), ch[l], slope)?;
                enc.push(EncoderLevel {
                    entry: ConvBlock { conv, slope },
                    res,
                });
            }
            encoders.push(enc);
        }

        let bottleneck = ch[levels - 1];
        let cr = if config.cr_enabled {
            Some(CorrelationBlock::new(&mut store, &mut rng, bottleneck, slope)?)
        } else {
            None
        };
        let fusion = FusionBlock::new(&mut store, &mut rng, 4 * bottleneck, slope)?;

        let mut decoder = Vec::with_capacity(levels);
        let mut width = 4 * bottleneck;
        for l in (0..levels).rev() {
            let prefix = format!("decoder.level{}", l + 1);
            let c_in = if l == levels - 1 { width } else { width + ch[l] };
            let conv = ConvLayer::new(&mut store, &mut rng, &format!("{prefix}.conv"), c_in, ch[l], 3, 1, 1)?;
            let res = ResDilBlock::new(&mut store, &mut rng, &format!("{prefix}.res_dil"), ch[l], slope)?;
            let head = ConvLayer::new(&mut store, &mut rng, &format!("{prefix}.head"), ch[l], config.n_regions, 1, 1, 1)?;
            decoder.push(DecoderLevel {
                conv: ConvBlock { conv, slope },
                res,
                head,
            });
            width = ch[l];
        }

        Ok(Self {
            config,
            seed,
            store,
            encoders,
            cr,
            fusion,
            decoder,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Scalar weights belonging to the correlation block.
    pub fn cr_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("cr."))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Names of the per-level supervision head parameters, bottleneck first.
    pub fn head_params(&self) -> Vec<(String, String)> {
        self.decoder
            .iter()
            .map(|d| {
                (
                    self.store.get(d.head.weight).name.clone(),
                    self.store.get(d.head.bias).name.clone(),
                )
            })
            .collect()
    }

    fn check_volume(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape != [1, s, s, s] {
            return Err(Error::shape("forward", shape, &[1, s, s, s]));
        }
        Ok(())
    }

    /// Runs the four encoders; returns per-encoder, per-level features.
    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var; 4]) -> Result<Vec<Vec<Var>>> {
        let mut all = Vec::with_capacity(4);
        for (enc, &x) in self.encoders.iter().zip(inputs) {
            self.check_volume(tape.shape(x))?;
            let mut h = x;
            let mut feats = Vec::with_capacity(enc.len());
            for level in enc {
                h = level.entry.forward(&self.store, tape, h)?;
                h = level.res.forward(&self.store, tape, h)?;
                feats.push(h);
            }
            all.push(feats);
        }
        Ok(all)
    }

    fn bottleneck_features(feats: &[Vec<Var>]) -> [Var; 4] {
        std::array::from_fn(|i| *feats[i].last().expect("at least one level"))
    }

    /// Forward pass over four input nodes of shape `[1, S, S, S]`.
    pub fn forward_vars<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var; 4]) -> Result<ForwardOutput> {
        let feats = self.encode(tape, inputs)?;
        let encoder_features = Self::bottleneck_features(&feats);

        let (cr_features, gammas, fused_in) = match &self.cr {
            Some(cr) => {
                let out = cr.forward(&self.store, tape, &encoder_features)?;
                let cat = tape.concat(&out.features)?;
                (Some(out.features), Some(out.gammas), cat)
            }
            None => (None, None, tape.concat(&encoder_features)?),
        };
        let fusion = self.fusion.forward(&self.store, tape, fused_in)?;

        let levels = self.config.levels;
        let mut h = fusion.fused;
        let mut aux_coarse_first = Vec::with_capacity(levels);
        for (step, dec) in self.decoder.iter().enumerate() {
            let l = levels - 1 - step;
            if step > 0 {
                let up = tape.upsample(h, 2)?;
                let skips: Vec<Var> = feats.iter().map(|f| f[l]).collect();
                let skip = tape.average(&skips)?;
                h = tape.concat(&[up, skip])?;
            }
            h = dec.conv.forward(&self.store, tape, h)?;
            h = dec.res.forward(&self.store, tape, h)?;
            if self.config.deep_supervision || l == 0 {
                aux_coarse_first.push((l, dec.head.forward(&self.store, tape, h)?));
            }
        }

        let mut logits: Option<Var> = None;
        for &(l, head) in &aux_coarse_first {
            let up = tape.upsample(head, 1 << l)?;
            logits = Some(match logits {
                Some(acc) => tape.add(acc, up)?,
                None => up,
            });
        }
        let logits = logits.expect("finest head always present");
        let probs = tape.sigmoid(logits)?;
        let aux = aux_coarse_first.iter().rev().map(|&(_, v)| v).collect();

        Ok(ForwardOutput {
            logits,
            probs,
            aux,
            encoder_features,
            cr_features,
            gammas,
            fusion,
        })
    }

    /// Forward pass over four complete modality volumes.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, volumes: &[Tensor<f32>; 4]) -> Result<ForwardOutput> {
        let inputs = volumes.each_ref().map(|v| tape.constant(v.cast()));
        self.forward_vars(tape, &inputs)
    }

    /// Forward pass with missing modalities substituted first.
    pub fn forward_missing<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        volumes: &[Tensor<f32>; 4],
        present: [bool; 4],
    ) -> Result<ForwardOutput> {
        let filled = mask_and_substitute(volumes, present)?;
        self.forward(tape, &filled)
    }

    /// Region probabilities `[3, S, S, S]` for the given presence mask.
    pub fn predict(&self, volumes: &[Tensor<f32>; 4], present: [bool; 4]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let out = self.forward_missing(&mut tape, volumes, present)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Correlation representations `F_i` for inspection, computed from the
    /// substituted inputs exactly as in [`SegNetwork::forward`].
    pub fn recover_latent(&self, volumes: &[Tensor<f32>; 4], present: [bool; 4]) -> Result<[Tensor<f32>; 4]> {
        let cr = self
            .cr
            .as_ref()
            .ok_or_else(|| Error::arg("recover_latent", "correlation block is disabled"))?;
        let filled = mask_and_substitute(volumes, present)?;
        let mut tape = Tape::<f32>::new();
        let inputs = filled.each_ref().map(|v| tape.constant(v.clone()));
        let feats = self.encode(&mut tape, &inputs)?;
        let out = cr.forward(&self.store, &mut tape, &Self::bottleneck_features(&feats))?;
        Ok(out.features.map(|v| tape.value(v).clone()))
    }

    /// Bottleneck encoder features `f_i` for the given inputs.
    pub fn encoder_features(&self, volumes: &[Tensor<f32>; 4], present: [bool; 4]) -> Result<[Tensor<f32>; 4]> {
        let filled = mask_and_substitute(volumes, present)?;
        let mut tape = Tape::<f32>::new();
        let inputs = filled.each_ref().map(|v| tape.constant(v.clone()));
        let feats = self.encode(&mut tape, &inputs)?;
        Ok(Self::bottleneck_features(&feats).map(|v| tape.value(v).clone()))
    }

    /// Writes one tensor file pair per parameter plus `manifest.json`.
    pub fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            write_tensor(&dir.join(&p.name), &p.tensor)?;
            names.push(p.name.clone());
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            parameters: names,
            seed: self.seed,
            epoch,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint written by [`SegNetwork::save`]; returns the network and its epoch.
    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::CheckpointNotFound(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        let mut net = Self::new(manifest.config, manifest.seed)?;
        let expected: Vec<&str> = net.store.iter().map(|(_, p)| p.name.as_str()).collect();
        if expected != manifest.parameters.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format {
                path,
                reason: "parameter list does not match the configured architecture".into(),
            });
        }
        for p in net.store.iter_mut() {
            let stem = dir.join(&p.name);
            let t = read_tensor(&stem)?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Format {
                    path: stem,
                    reason: format!("shape {:?}, expected {:?}", t.shape(), p.tensor.shape()),
                });
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok((net, manifest.epoch))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: NetworkConfig,
    pub parameters: Vec<String>,
    pub seed: u64,
    pub epoch: usize,
}
