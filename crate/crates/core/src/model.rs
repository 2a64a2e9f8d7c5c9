//! The stacked decomposition model.
//!
//! Layer `i` patches the running residual with patch size `p_i`, encodes it to
//! a representation, decodes that back into a component `S_i` of the same
//! length, and subtracts: `Z_i = Z_{i-1} - S_i`. A linear head reads every
//! representation and the task output is the sum of the heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::mixer::{decode, encode, Linear, MixerDims, Mode, PatchDecoder, PatchEncoder};
use crate::params::{Bindings, ParamFile, ParamStore};
use crate::patching::{interpolation_matrix, num_patches, patch_var, unpatch_var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "msd-mixer-checkpoint/1";

/// Added to the variance before the square root in instance normalization.
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub index: usize,
    pub patch_size: usize,
    pub num_patches: usize,
    /// Length of the innermost axis the mixer sees: `patch_size`, or 1 without patching.
    pub patch_len: usize,
    pub encoder: PatchEncoder,
    pub decoder: PatchDecoder,
    pub head: Linear,
}

impl LayerSpec {
    fn linears(&self) -> Vec<&Linear> {
        let mut v = self.encoder.linears();
        v.extend(self.decoder.linears());
        v.push(&self.head);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f64> {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    params: ParamStore<T>,
    /// Per layer, the `[L', L]` interpolation matrix of the no-patching variant.
    interp: Vec<Option<Tensor<T>>>,
}

/// Per-sample, per-channel statistics used by instance normalization, shaped `[B, C, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T = f64> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T = f64> {
    /// The series that gets decomposed (after instance normalization, if enabled).
    pub input: Var,
    pub components: Vec<Var>,
    pub representations: Vec<Var>,
    /// `Z_k`
    pub residual: Var,
    pub heads: Vec<Var>,
    /// Sum of the heads, mapped back to the data scale for series outputs.
    pub prediction: Var,
    pub norm: Option<NormStats<T>>,
}

/// Concrete values of a forward pass in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T = f64> {
    pub input: Tensor<T>,
    pub components: Vec<Tensor<T>>,
    pub representations: Vec<Tensor<T>>,
    pub residual: Tensor<T>,
    pub prediction: Tensor<T>,
    pub norm: Option<NormStats<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    params: ParamFile,
}

fn layer_specs(config: &ModelConfig) -> Vec<LayerSpec> {
    let (c, l, d) = (config.channels, config.input_len, config.embed_dim);
    let no_patch = config.variant == Variant::NoPatching;
    let out = config.task.output_len(l);
    config
        .patch_sizes
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            let n = num_patches(l, p);
            let patch_len = if no_patch { 1 } else { p };
            let dims = MixerDims {
                channels: c,
                patches: n,
                patch_len,
                embed: d,
            };
            let prefix = format!("layers.{index}");
            let hidden = |w| config.hidden_width(w);
            let head_in = if config.task.is_classification() {
                c * n * d
            } else {
                n * d
            };
            LayerSpec {
                index,
                patch_size: p,
                num_patches: n,
                patch_len,
                encoder: PatchEncoder::new(&prefix, dims, hidden),
                decoder: PatchDecoder::new(&prefix, dims, hidden),
                head: Linear::new(&format!("{prefix}.head"), head_in, out),
            }
        })
        .collect()
}

fn interp_matrices<T: Real>(config: &ModelConfig, layers: &[LayerSpec]) -> Result<Vec<Option<Tensor<T>>>> {
    layers
        .iter()
        .map(|spec| {
            if config.variant == Variant::NoPatching {
                interpolation_matrix(spec.num_patches, config.input_len).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Builds a model with freshly initialized parameters (seeded by `config.seed`).
pub fn build_model<T: Real>(config: &ModelConfig) -> Result<Model<T>> {
    let config = config.resolved()?;
    let layers = layer_specs(&config);
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for spec in &layers {
        for lin in spec.linears() {
            lin.init(&mut params, &mut rng);
        }
    }
    let interp = interp_matrices(&config, &layers)?;
    Ok(Model {
        config,
        layers,
        params,
        interp,
    })
}

/// Mean and standard deviation over the last axis of `[B, C, L]`, counting
/// only positions where `observed` is nonzero when a mask is given.
pub fn norm_stats<T: Real>(x: &Tensor<T>, observed: Option<&Tensor<T>>) -> Result<NormStats<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::arg(format!("expected [batch, channels, time], got {s:?}")));
    }
    if let Some(m) = observed {
        if m.shape() != s {
            return Err(Error::shape("norm_stats", s, m.shape()));
        }
    }
    let l = s[2];
    let rows = s[0] * s[1];
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x.data()[r * l..(r + 1) * l];
        let w: Vec<f64> = match observed {
            Some(m) => m.data()[r * l..(r + 1) * l]
                .iter()
                .map(|v| if v.to_f64_lossy() != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            None => vec![1.0; l],
        };
        let count: f64 = w.iter().sum::<f64>().max(1.0);
        let mu = xs.iter().zip(&w).map(|(v, w)| v.to_f64_lossy() * w).sum::<f64>() / count;
        let var = xs
            .iter()
            .zip(&w)
            .map(|(v, w)| w * (v.to_f64_lossy() - mu).powi(2))
            .sum::<f64>()
            / count;
        mean.push(T::lit(mu));
        std.push(T::lit((var + NORM_EPS).sqrt()));
    }
    let shape = vec![s[0], s[1], 1];
    Ok(NormStats {
        mean: Tensor::new(shape.clone(), mean)?,
        std: Tensor::new(shape, std)?,
    })
}

impl<T: Real> Model<T> {
    /// The resolved configuration the model was built from.
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match the architecture.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        check_params(&self.layers, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
            interp: self.interp.iter().map(|m| m.as_ref().map(Tensor::cast)).collect(),
        }
    }

    /// Zeroes every decoder input projection, which makes every component zero.
    pub fn zero_decoder_outputs(&mut self) -> Result<()> {
        for spec in &self.layers {
            spec.decoder.proj.zero(&mut self.params)?;
        }
        Ok(())
    }

    /// Runs the layers in a different order (a diagnostic; the config's patch
    /// sizes are permuted to match).
    pub fn reorder_layers(&mut self, order: &[usize]) -> Result<()> {
        crate::tensor::check_permutation(order, self.layers.len())?;
        self.layers = order.iter().map(|&i| self.layers[i].clone()).collect();
        self.interp = order.iter().map(|&i| self.interp[i].clone()).collect();
        self.config.patch_sizes = self.layers.iter().map(|s| s.patch_size).collect();
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.config.channels, self.config.input_len];
        if shape.len() != 3 || shape[1..] != want {
            return Err(Error::shape(
                "model input",
                shape,
                &[0, self.config.channels, self.config.input_len],
            ));
        }
        Ok(())
    }

    /// Builds the forward pass for `x: [B, C, L]`.
    ///
    /// `observed` (same shape, nonzero = observed) restricts the normalization
    /// statistics to observed points and zeroes the rest after normalizing.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bind: &Bindings,
        x: Var,
        observed: Option<&Tensor<T>>,
        mode: &mut Mode<'_>,
    ) -> Result<Forward<T>> {
        self.check_input(g.shape(x))?;
        let cfg = &self.config;
        let batch = g.shape(x)[0];
        let l = cfg.input_len;

        let (input, norm) = if cfg.instance_norm {
            let stats = norm_stats(g.value(x), observed)?;
            let mu = g.constant(stats.mean.clone());
            let sd = g.constant(stats.std.clone());
            let centered = g.sub(x, mu)?;
            let mut z = g.div(centered, sd)?;
            if let Some(m) = observed {
                let keep = g.constant(m.map(|v| if v != T::zero() { T::one() } else { T::zero() }));
                z = g.mul(z, keep)?;
            }
            (z, Some(stats))
        } else {
            (x, None)
        };

        let mut z = input;
        let mut components = Vec::with_capacity(self.layers.len());
        let mut representations = Vec::with_capacity(self.layers.len());
        let mut heads = Vec::with_capacity(self.layers.len());
        for (spec, interp) in self.layers.iter().zip(&self.interp) {
            let n = spec.num_patches;
            let patches = match interp {
                Some(_) => {
                    let pooled = g.max_pool(z, spec.patch_size)?;
                    g.reshape(pooled, &[batch, cfg.channels, n, 1])?
                }
                None => patch_var(g, z, spec.patch_size)?,
            };
            let e = encode(g, bind, patches, &spec.encoder, cfg.droppath, mode)?;
            let d = decode(g, bind, e, &spec.decoder, cfg.droppath, mode)?;
            let s = match interp {
                Some(m) => {
                    let flat = g.reshape(d, &[batch, cfg.channels, n])?;
                    let m = g.constant(m.clone());
                    g.matmul(flat, m)?
                }
                None => unpatch_var(g, d, l)?,
            };
            z = g.sub(z, s)?;
            heads.push(head_forward(
                g,
                bind,
                e,
                &spec.head,
                cfg.task.is_classification(),
            )?);
            components.push(s);
            representations.push(e);
        }

        let mut sum = heads[0];
        for &h in &heads[1..] {
            sum = g.add(sum, h)?;
        }
        let prediction = match &norm {
            Some(stats) if !cfg.task.is_classification() => {
                let sd = g.constant(stats.std.clone());
                let mu = g.constant(stats.mean.clone());
                let scaled = g.mul(sum, sd)?;
                g.add(scaled, mu)?
            }
            _ => sum,
        };
        Ok(Forward {
            input,
            components,
            representations,
            residual: z,
            heads,
            prediction,
            norm,
        })
    }

    fn batched(&self, x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        match x.rank() {
            2 => {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                Ok((x.reshape(&s)?, true))
            }
            _ => Ok((x.clone(), false)),
        }
    }

    /// Eval-mode forward pass on `[C, L]` or `[B, C, L]`; outputs keep the input's rank.
    pub fn decompose(&self, x: &Tensor<T>, observed: Option<&Tensor<T>>) -> Result<Decomposition<T>> {
        let (xb, single) = self.batched(x)?;
        let ob = observed.map(|m| self.batched(m).map(|p| p.0)).transpose()?;
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        let xv = g.constant(xb);
        let f = self.forward(&mut g, &bind, xv, ob.as_ref(), &mut Mode::Eval)?;
        let take = |v: Var| -> Result<Tensor<T>> {
            let t = g.value(v).clone();
            if single {
                let s = t.shape()[1..].to_vec();
                t.into_reshaped(&s)
            } else {
                Ok(t)
            }
        };
        Ok(Decomposition {
            input: take(f.input)?,
            components: f.components.iter().map(|&v| take(v)).collect::<Result<_>>()?,
            representations: f
                .representations
                .iter()
                .map(|&v| take(v))
                .collect::<Result<_>>()?,
            residual: take(f.residual)?,
            prediction: take(f.prediction)?,
            norm: f.norm,
        })
    }

    /// Eval-mode task output for `[C, L]` or `[B, C, L]`.
    pub fn predict(&self, x: &Tensor<T>, observed: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        Ok(self.decompose(x, observed)?.prediction)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            params: self.params.to_file(),
        })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::arg(format!(
                "unsupported checkpoint format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                ck.format
            )));
        }
        let config = ck.config.resolved()?;
        let layers = layer_specs(&config);
        let params = ParamStore::from_file(ck.params)?;
        check_params(&layers, &params)?;
        let interp = interp_matrices(&config, &layers)?;
        Ok(Model {
            config,
            layers,
            params,
            interp,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_checkpoint_json()?.as_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

fn check_params<T: Real>(layers: &[LayerSpec], params: &ParamStore<T>) -> Result<()> {
    let mut expected = 0;
    for spec in layers {
        for lin in spec.linears() {
            lin.check(params)?;
            expected += 2;
        }
    }
    if params.len() != expected {
        return Err(Error::arg(format!(
            "expected {expected} parameter tensors, found {}",
            params.len()
        )));
    }
    Ok(())
}

/// Linear head over one layer's representation `[B, C, N, d_e]`.
///
/// Series heads are shared across channels and map `N·d_e` to the output
/// length, giving `[B, C, out]`; the classification head flattens channels
/// too and gives `[B, classes]`.
pub fn head_forward<T: Real>(
    g: &mut Graph<T>,
    bind: &Bindings,
    e: Var,
    head: &Linear,
    classification: bool,
) -> Result<Var> {
    let s = g.shape(e).to_vec();
    if s.len() != 4 {
        return Err(Error::arg(format!("representation must be rank 4, got {s:?}")));
    }
    let flat = if classification {
        g.reshape(e, &[s[0], s[1] * s[2] * s[3]])?
    } else {
        g.reshape(e, &[s[0], s[1], s[2] * s[3]])?
    };
    head.forward(g, bind, flat)
}
