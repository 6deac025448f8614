//! Encoder-decoder segmentation network with skip connections.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, NormCache};
use super::params::ParamVector;
use crate::error::{Error, Result};
use crate::float::Real;
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Group,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 5,
            base_channels: 8,
            depth: 2,
            norm: NormKind::Group,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base_channels < 2 {
            return Err(Error::config("base_channels must be at least 2"));
        }
        if self.in_channels < 1 || self.num_classes < 2 {
            return Err(Error::config("need in_channels >= 1 and num_classes >= 2"));
        }
        if self.depth > 8 {
            return Err(Error::config("depth above 8 is not supported"));
        }
        Ok(())
    }

    /// Checks that an input of `h` x `w` survives `depth` halvings.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by 2^depth = {f}"
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Number of normalization groups: the largest divisor of `c` not above 4.
pub fn norm_groups(c: usize) -> usize {
    (1..=4.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
struct ConvLayout {
    cin: usize,
    cout: usize,
    k: usize,
    w: usize,
    b: usize,
}

impl ConvLayout {
    fn weight<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w..self.w + self.cout * self.cin * self.k * self.k]
    }
    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.b..self.b + self.cout]
    }
}

#[derive(Debug, Clone, Copy)]
struct NormLayout {
    c: usize,
    gamma: usize,
    beta: usize,
    /// Offsets into the buffer vector (batch norm only).
    running: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    conv1: ConvLayout,
    norm1: NormLayout,
    conv2: ConvLayout,
    norm2: NormLayout,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<BlockLayout>,
    bottleneck: BlockLayout,
    /// Indexed by level, deepest last (applied in reverse).
    decoder: Vec<BlockLayout>,
    head: ConvLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamVector<T>,
    /// Non-trainable state: batch-norm running statistics.
    buffers: ParamVector<T>,
    layout: Layout,
}

struct Builder<'a, T> {
    params: ParamVector<T>,
    buffers: ParamVector<T>,
    rng: &'a mut rng::Rng,
    norm: NormKind,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvLayout {
        let fan_in = (cin * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let rng = &mut *self.rng;
        let w = self.params.push(format!("{name}.weight"), &[cout, cin, k, k], || {
            T::from_f64(dist.sample(rng)).unwrap()
        });
        let b = self.params.push(format!("{name}.bias"), &[cout], T::zero);
        ConvLayout { cin, cout, k, w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayout {
        let gamma = self.params.push(format!("{name}.gamma"), &[c], T::one);
        let beta = self.params.push(format!("{name}.beta"), &[c], T::zero);
        let running = match self.norm {
            NormKind::Group => None,
            NormKind::Batch => Some((
                self.buffers.push(format!("{name}.running_mean"), &[c], T::zero),
                self.buffers.push(format!("{name}.running_var"), &[c], T::one),
            )),
        };
        NormLayout { c, gamma, beta, running }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> BlockLayout {
        BlockLayout {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            norm2: self.norm(&format!("{name}.norm2"), cout),
        }
    }
}

#[derive(Debug, Clone)]
struct UnitTrace<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    out: Tensor<T>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    first: UnitTrace<T>,
    second: UnitTrace<T>,
}

/// Activations recorded by a forward pass for use by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    encoder: Vec<BlockTrace<T>>,
    pool_idx: Vec<Vec<u32>>,
    bottleneck: BlockTrace<T>,
    decoder: Vec<BlockTrace<T>>,
    head_input: Tensor<T>,
}

/// Momentum of the running-statistics update in batch norm.
const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> Network<T> {
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, streams::INIT);
        let mut b = Builder {
            params: ParamVector::default(),
            buffers: ParamVector::default(),
            rng: &mut rng,
            norm: config.norm,
        };
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels_at(level);
            encoder.push(b.block(&format!("enc{level}"), cin, c));
            cin = c;
        }
        let bottleneck = b.block("bottleneck", cin, config.channels_at(config.depth));
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c = config.channels_at(level);
            decoder.push(b.block(&format!("dec{level}"), c + config.channels_at(level + 1), c));
        }
        decoder.reverse();
        let head = b.conv("head", config.base_channels, config.num_classes, 1);
        let (params, buffers) = (b.params, b.buffers);
        Ok(Network {
            config: config.clone(),
            params,
            buffers,
            layout: Layout {
                encoder,
                bottleneck,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamVector<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamVector<T> {
        &mut self.buffers
    }

    pub fn set_params(&mut self, params: &ParamVector<T>) -> Result<()> {
        self.params.check_compatible(params)?;
        self.params.values.copy_from_slice(&params.values);
        Ok(())
    }

    pub fn set_buffers(&mut self, buffers: &ParamVector<T>) -> Result<()> {
        self.buffers.check_compatible(buffers)?;
        self.buffers.values.copy_from_slice(&buffers.values);
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        if x.n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        self.config.check_input_size(x.h, x.w)?;
        if !x.is_finite() {
            return Err(Error::Input("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn unit(&self, x: Tensor<T>, conv: &ConvLayout, norm: &NormLayout, mode: Mode) -> UnitTrace<T> {
        let p = &self.params.values;
        let z = ops::conv2d_forward(&x, conv.weight(p), conv.bias(p), conv.cout, conv.k);
        let gamma = &p[norm.gamma..norm.gamma + norm.c];
        let beta = &p[norm.beta..norm.beta + norm.c];
        let (y, cache) = match (self.config.norm, mode, norm.running) {
            (NormKind::Group, _, _) => ops::group_norm_forward(&z, gamma, beta, norm_groups(norm.c)),
            (NormKind::Batch, Mode::Eval, Some((rm, rv))) => {
                let b = &self.buffers.values;
                ops::batch_norm_forward(&z, gamma, beta, Some((&b[rm..rm + norm.c], &b[rv..rv + norm.c])))
            }
            (NormKind::Batch, _, _) => ops::batch_norm_forward(&z, gamma, beta, None),
        };
        UnitTrace {
            input: x,
            norm: cache,
            out: ops::relu_forward(&y),
        }
    }

    fn block(&self, x: Tensor<T>, b: &BlockLayout, mode: Mode) -> BlockTrace<T> {
        let first = self.unit(x, &b.conv1, &b.norm1, mode);
        let second = self.unit(first.out.clone(), &b.conv2, &b.norm2, mode);
        BlockTrace { first, second }
    }

    /// Forward pass that records everything the backward pass needs.
    ///
    /// Batch-norm running statistics are not touched; see [`Network::forward_train`].
    pub fn forward_trace(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut encoder = Vec::with_capacity(self.config.depth);
        let mut pool_idx = Vec::with_capacity(self.config.depth);
        for layout in &self.layout.encoder {
            let t = self.block(h, layout, mode);
            let (pooled, idx) = ops::max_pool2_forward(&t.second.out);
            encoder.push(t);
            pool_idx.push(idx);
            h = pooled;
        }
        let bottleneck = self.block(h, &self.layout.bottleneck, mode);
        h = bottleneck.second.out.clone();
        let mut decoder: Vec<Option<BlockTrace<T>>> = vec![None; self.config.depth];
        for level in (0..self.config.depth).rev() {
            let up = ops::upsample2_forward(&h);
            let cat = ops::concat_channels(&encoder[level].second.out, &up);
            let t = self.block(cat, &self.layout.decoder[level], mode);
            h = t.second.out.clone();
            decoder[level] = Some(t);
        }
        let head = &self.layout.head;
        let p = &self.params.values;
        let logits = ops::conv2d_forward(&h, head.weight(p), head.bias(p), head.cout, 1);
        Ok((
            logits,
            Trace {
                encoder,
                pool_idx,
                bottleneck,
                decoder: decoder.into_iter().map(Option::unwrap).collect(),
                head_input: h,
            },
        ))
    }

    /// Inference: logits with all normalization in eval mode.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x, Mode::Eval)?.0)
    }

    /// Training-mode forward; folds the batch statistics into the running
    /// statistics when batch norm is in use.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let (logits, trace) = self.forward_trace(x, Mode::Train)?;
        if self.config.norm == NormKind::Batch {
            let m = T::lit(BN_MOMENTUM);
            let mut units: Vec<(&NormLayout, &NormCache<T>, usize)> = Vec::new();
            let blocks = self
                .layout
                .encoder
                .iter()
                .zip(&trace.encoder)
                .chain(std::iter::once((&self.layout.bottleneck, &trace.bottleneck)))
                .chain(self.layout.decoder.iter().zip(&trace.decoder));
            for (layout, t) in blocks {
                let count = t.first.input.n * t.first.input.h * t.first.input.w;
                units.push((&layout.norm1, &t.first.norm, count));
                units.push((&layout.norm2, &t.second.norm, count));
            }
            let buf = &mut self.buffers.values;
            for (norm, cache, count) in units {
                let (rm, rv) = norm.running.expect("batch norm has running stats");
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for c in 0..norm.c {
                    buf[rm + c] = (T::one() - m) * buf[rm + c] + m * cache.mean[c];
                    buf[rv + c] = (T::one() - m) * buf[rv + c] + m * cache.var[c] * unbias;
                }
            }
        }
        Ok((logits, trace))
    }

    fn unit_backward(&self, t: &UnitTrace<T>, conv: &ConvLayout, norm: &NormLayout, gy: Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let g = ops::relu_backward(&t.out, &gy);
        let gamma: Vec<T> = self.params.values[norm.gamma..norm.gamma + norm.c].to_vec();
        let (gg, gb) = split_pair(grads, norm.gamma, norm.beta, norm.c);
        let gz = match self.config.norm {
            NormKind::Group => ops::group_norm_backward(&t.norm, &gamma, &g, norm_groups(norm.c), gg, gb),
            NormKind::Batch => ops::batch_norm_backward(&t.norm, &gamma, &g, gg, gb),
        };
        let p = &self.params.values;
        let (gw, gbias) = split_conv(grads, conv);
        ops::conv2d_backward(&t.input, conv.weight(p), &gz, conv.k, gw, gbias)
    }

    fn block_backward(&self, t: &BlockTrace<T>, b: &BlockLayout, gy: Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let g = self.unit_backward(&t.second, &b.conv2, &b.norm2, gy, grads);
        self.unit_backward(&t.first, &b.conv1, &b.norm1, g, grads)
    }

    /// Accumulates parameter gradients into `grads` (laid out like the
    /// parameter vector) and returns the gradient with respect to the input.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &Tensor<T>, grads: &mut [T]) -> Result<Tensor<T>> {
        if grads.len() != self.params.total_count() {
            return Err(Error::dim(format!(
                "gradient buffer has {} slots for {} parameters",
                grads.len(),
                self.params.total_count()
            )));
        }
        if grad_logits.c != self.config.num_classes || grad_logits.n != trace.head_input.n {
            return Err(Error::dim("logit gradient does not match the traced forward pass"));
        }
        let head = &self.layout.head;
        let p = &self.params.values;
        let (gw, gb) = split_conv(grads, head);
        let mut g = ops::conv2d_backward(&trace.head_input, head.weight(p), grad_logits, 1, gw, gb);
        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for level in 0..depth {
            let gcat = self.block_backward(&trace.decoder[level], &self.layout.decoder[level], g, grads);
            let skip_c = self.config.channels_at(level);
            let (gskip, gup) = ops::split_channels(&gcat, skip_c);
            skip_grads[level] = Some(gskip);
            g = ops::upsample2_backward(&gup);
        }
        g = self.block_backward(&trace.bottleneck, &self.layout.bottleneck, g, grads);
        for level in (0..depth).rev() {
            let t = &trace.encoder[level];
            let mut gout = ops::max_pool2_backward(&g, &trace.pool_idx[level], t.second.out.h, t.second.out.w);
            if let Some(s) = skip_grads[level].take() {
                for (a, b) in gout.data.iter_mut().zip(s.data) {
                    *a += b;
                }
            }
            g = self.block_backward(t, &self.layout.encoder[level], gout, grads);
        }
        Ok(g)
    }

}

fn split_pair<T>(grads: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

fn split_conv<'a, T>(grads: &'a mut [T], conv: &ConvLayout) -> (&'a mut [T], &'a mut [T]) {
    split_pair_sized(grads, conv.w, conv.cout * conv.cin * conv.k * conv.k, conv.b, conv.cout)
}

fn split_pair_sized<T>(grads: &mut [T], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + alen <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}
