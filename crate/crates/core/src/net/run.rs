//! Forward execution (train / eval / frozen-noise), the activation cache,
//! and reverse-mode backward with the two losses the pipeline trains on.

use super::layers::{self, ConvGeom};
use super::{LayerSpec, Mode, Network, NodeParams, PortRef, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax output against a one-hot (or simplex) target; the loss is
    /// evaluated from the pre-softmax logits for numerical stability.
    CrossEntropySoftmax,
    /// Mean over every element of the squared difference.
    MeanSquaredError,
}

/// Noise captured from one train-mode forward so gradient checks can replay
/// the exact same stochastic function: dropout multipliers and, optionally,
/// batch-norm batch statistics to hold constant.
#[derive(Debug, Clone)]
pub struct FrozenNoise<T: Scalar> {
    pub(crate) dropout: Vec<Option<Vec<T>>>,
    pub(crate) bn_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

pub(crate) enum Aux<T: Scalar> {
    None,
    Pool {
        argmax: Vec<u32>,
    },
    Drop {
        mult: Vec<T>,
    },
    Bn {
        xhat: Vec<T>,
        invstd: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        /// Stats treated as constants in backward (frozen-stat gradient check).
        frozen: bool,
    },
    /// Concatenated flat input of a multi-input fully-connected node, [batch, d_total].
    Concat {
        buf: Vec<T>,
    },
}

pub(crate) struct Cache<T: Scalar> {
    pub(crate) batch: usize,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) acts: Vec<Tensor<T>>,
    pub(crate) aux: Vec<Aux<T>>,
}

enum BnRun<'a, T: Scalar> {
    /// Batch statistics; update running stats (ordinary training).
    Batch { update_running: bool },
    /// Externally supplied statistics treated as constants.
    Frozen(&'a FrozenNoise<T>),
}

enum DropRun<'a, T: Scalar> {
    Fresh(&'a mut ChaCha8Rng),
    Frozen(&'a FrozenNoise<T>),
}

impl<T: Scalar> Network<T> {
    /// Train-mode forward: batch statistics, fresh dropout, activations cached.
    pub fn forward_train(
        &mut self,
        inputs: &[Tensor<T>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>> {
        let (out, cache) = run_graph(
            &self.spec,
            &self.shapes,
            &mut self.params,
            inputs,
            BnRun::Batch {
                update_running: true,
            },
            DropRun::Fresh(rng),
            true,
        )?;
        self.cache = cache;
        Ok(out)
    }

    /// Eval-mode forward: running statistics, dropout off, no cache, no
    /// mutation — safe to call concurrently on a shared model.
    pub fn forward_eval(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        run_graph_ref(&self.spec, &self.shapes, &self.params, inputs)
    }

    /// Train-mode forward with pinned noise. Dropout multipliers are replayed
    /// from `noise`; when `freeze_bn` is set, batch-norm statistics are also
    /// replayed and treated as constants in backward.
    pub fn forward_frozen(
        &mut self,
        inputs: &[Tensor<T>],
        noise: &FrozenNoise<T>,
        freeze_bn: bool,
    ) -> Result<Tensor<T>> {
        let bn = if freeze_bn {
            BnRun::Frozen(noise)
        } else {
            BnRun::Batch {
                update_running: false,
            }
        };
        let (out, cache) = run_graph(
            &self.spec,
            &self.shapes,
            &mut self.params,
            inputs,
            bn,
            DropRun::Frozen(noise),
            true,
        )?;
        self.cache = cache;
        Ok(out)
    }

    /// Extract the noise realized by the most recent cached forward.
    pub fn capture_noise(&self) -> Result<FrozenNoise<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("capture_noise requires a cached forward".into()))?;
        let mut dropout = Vec::with_capacity(cache.aux.len());
        let mut bn_stats = Vec::with_capacity(cache.aux.len());
        for aux in &cache.aux {
            match aux {
                Aux::Drop { mult } => {
                    dropout.push(Some(mult.clone()));
                    bn_stats.push(None);
                }
                Aux::Bn { mean, var, .. } => {
                    dropout.push(None);
                    bn_stats.push(Some((mean.clone(), var.clone())));
                }
                _ => {
                    dropout.push(None);
                    bn_stats.push(None);
                }
            }
        }
        Ok(FrozenNoise { dropout, bn_stats })
    }

    /// Loss of the most recent cached forward, without running backward.
    pub fn loss_value(&self, loss: LossKind, target: &Tensor<T>) -> Result<f64> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("loss_value requires a cached forward".into()))?;
        let (value, _, _) = loss_and_seed(&self.spec, cache, loss, target)?;
        Ok(value)
    }

    /// Reverse pass over the cached forward. Populates `grad` on every
    /// trainable parameter and returns the batch-mean loss. Consumes the
    /// cache: calling backward without a fresh forward is a state error.
    pub fn backward(&mut self, loss: LossKind, target: &Tensor<T>) -> Result<T> {
        if self.spec.mode != Mode::Train {
            return Err(Error::State("backward requires train mode".into()));
        }
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let (loss_value, seed_node, seed) = loss_and_seed(&self.spec, &cache, loss, target)?;

        // allocate every trainable grad so a zero gradient is still present
        self.for_each_param_mut(|_, t| {
            t.grad_mut();
        });

        let mut dacts: Vec<Option<Vec<T>>> = (0..self.spec.nodes.len()).map(|_| None).collect();
        dacts[seed_node] = Some(seed);

        for i in (0..=seed_node).rev() {
            let Some(dy) = dacts[i].take() else { continue };
            let node = &self.spec.nodes[i];
            let in_act = |port: &PortRef| -> &Tensor<T> {
                match *port {
                    PortRef::Input(s) => &cache.inputs[s],
                    PortRef::Node(j) => &cache.acts[j],
                }
            };
            // gradient buffers for this node's inputs, merged below
            let mut dins: Vec<Vec<T>> = node
                .inputs
                .iter()
                .map(|p| vec![T::zero(); in_act(p).len()])
                .collect();
            let batch = cache.batch;
            let out_shape = self.shapes[i];
            match (&node.layer, &mut self.params[i], &cache.aux[i]) {
                (
                    LayerSpec::Conv2d {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    NodeParams::Conv { weight, bias },
                    _,
                ) => {
                    let x = in_act(&node.inputs[0]);
                    let [c, h, w] = shape_of(&self.spec, &self.shapes, &node.inputs[0]);
                    let g = ConvGeom {
                        c,
                        h,
                        w,
                        f: out_shape[0],
                        kh: kernel.0,
                        kw: kernel.1,
                        sh: stride.0,
                        sw: stride.1,
                        ph: padding.0,
                        pw: padding.1,
                        oh: out_shape[1],
                        ow: out_shape[2],
                    };
                    let k = g.k();
                    let ohow = g.oh * g.ow;
                    let mut col = vec![T::zero(); k * ohow];
                    let mut dcol = vec![T::zero(); k * ohow];
                    let weight_data: Vec<T> = weight.data().to_vec();
                    for b in 0..batch {
                        let x_b = &x.data()[b * g.in_len()..(b + 1) * g.in_len()];
                        let dy_b = &dy[b * g.out_len()..(b + 1) * g.out_len()];
                        layers::im2col(x_b, &g, &mut col);
                        layers::conv_sample_backward(
                            &weight_data,
                            dy_b,
                            &col,
                            &g,
                            weight.grad_mut(),
                            bias.grad_mut(),
                            &mut dcol,
                        );
                        layers::col2im_add(
                            &dcol,
                            &g,
                            &mut dins[0][b * g.in_len()..(b + 1) * g.in_len()],
                        );
                    }
                }
                (LayerSpec::FullyConnected { units }, NodeParams::Fc { weight, bias }, aux) => {
                    let d_total: usize = node
                        .inputs
                        .iter()
                        .map(|p| {
                            let [c, h, w] = shape_of(&self.spec, &self.shapes, p);
                            c * h * w
                        })
                        .sum();
                    let concat_storage;
                    let x: &[T] = if let Aux::Concat { buf } = aux {
                        buf
                    } else {
                        concat_storage = in_act(&node.inputs[0]).data();
                        concat_storage
                    };
                    let mut dx = vec![T::zero(); batch * d_total];
                    let weight_data: Vec<T> = weight.data().to_vec();
                    layers::fc_backward(
                        x,
                        &weight_data,
                        &dy,
                        batch,
                        d_total,
                        *units,
                        weight.grad_mut(),
                        bias.grad_mut(),
                        &mut dx,
                    );
                    // split the concat gradient back onto each input
                    let mut off = 0;
                    for (p_idx, port) in node.inputs.iter().enumerate() {
                        let [c, h, w] = shape_of(&self.spec, &self.shapes, port);
                        let d_i = c * h * w;
                        for b in 0..batch {
                            let src = &dx[b * d_total + off..b * d_total + off + d_i];
                            let dst = &mut dins[p_idx][b * d_i..(b + 1) * d_i];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                        off += d_i;
                    }
                }
                (LayerSpec::MaxPool2d { .. }, _, Aux::Pool { argmax }) => {
                    let [c, h, w] = shape_of(&self.spec, &self.shapes, &node.inputs[0]);
                    let hw = h * w;
                    let ohow = out_shape[1] * out_shape[2];
                    for b in 0..batch {
                        layers::pool_backward(
                            &dy[b * c * ohow..(b + 1) * c * ohow],
                            &argmax[b * c * ohow..(b + 1) * c * ohow],
                            c,
                            hw,
                            ohow,
                            &mut dins[0][b * c * hw..(b + 1) * c * hw],
                        );
                    }
                }
                (LayerSpec::Upsample2d { factor }, _, _) => {
                    let [c, h, w] = shape_of(&self.spec, &self.shapes, &node.inputs[0]);
                    let in_len = c * h * w;
                    let out_len = c * h * factor.0 * w * factor.1;
                    for b in 0..batch {
                        layers::upsample_backward(
                            &dy[b * out_len..(b + 1) * out_len],
                            c,
                            h,
                            w,
                            factor.0,
                            factor.1,
                            &mut dins[0][b * in_len..(b + 1) * in_len],
                        );
                    }
                }
                (
                    LayerSpec::BatchNorm,
                    NodeParams::BatchNorm { gamma, beta, .. },
                    Aux::Bn {
                        xhat,
                        invstd,
                        frozen,
                        ..
                    },
                ) => {
                    let c = out_shape[0];
                    let plane = out_shape[1] * out_shape[2];
                    let m = batch * plane;
                    let gamma_data: Vec<T> = gamma.data().to_vec();
                    let dgamma = gamma.grad_mut();
                    // per channel: s1 = sum dy, s2 = sum dy*xhat
                    let mut s1 = vec![T::zero(); c];
                    let mut s2 = vec![T::zero(); c];
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for o in 0..plane {
                                let g = dy[base + o];
                                s1[ch] = s1[ch] + g;
                                s2[ch] = s2[ch] + g * xhat[base + o];
                            }
                        }
                    }
                    for ch in 0..c {
                        dgamma[ch] = dgamma[ch] + s2[ch];
                    }
                    let dbeta = beta.grad_mut();
                    for ch in 0..c {
                        dbeta[ch] = dbeta[ch] + s1[ch];
                    }
                    let m_t = T::from_f64(m as f64);
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let scale = gamma_data[ch] * invstd[ch];
                            for o in 0..plane {
                                let g = dy[base + o];
                                dins[0][base + o] = if *frozen {
                                    // stats held constant
                                    g * scale
                                } else {
                                    scale * (g - s1[ch] / m_t - xhat[base + o] * s2[ch] / m_t)
                                };
                            }
                        }
                    }
                }
                (LayerSpec::Elu { alpha }, _, _) => {
                    layers::elu_backward(
                        cache.acts[i].data(),
                        &dy,
                        T::from_f64(*alpha),
                        &mut dins[0],
                    );
                }
                (LayerSpec::Dropout { .. }, _, Aux::Drop { mult }) => {
                    for ((d, &m), &g) in dins[0].iter_mut().zip(mult).zip(&dy) {
                        *d = g * m;
                    }
                }
                (LayerSpec::Softmax, _, _) => {
                    let c = out_shape[0];
                    layers::softmax_backward(cache.acts[i].data(), &dy, batch, c, &mut dins[0]);
                }
                (LayerSpec::Identity, _, _) | (LayerSpec::Reshape { .. }, _, _) => {
                    dins[0].copy_from_slice(&dy);
                }
                _ => {
                    return Err(Error::State(format!(
                        "node `{}`: inconsistent cache for backward",
                        node.name
                    )))
                }
            }
            // merge input gradients
            for (port, din) in node.inputs.iter().zip(dins) {
                if let PortRef::Node(j) = *port {
                    match &mut dacts[j] {
                        Some(acc) => {
                            for (a, d) in acc.iter_mut().zip(&din) {
                                *a = *a + *d;
                            }
                        }
                        slot @ None => *slot = Some(din),
                    }
                }
            }
        }
        Ok(T::from_f64(loss_value))
    }
}

pub(crate) fn shape_of(
    spec: &super::NetworkSpec,
    shapes: &[[usize; 3]],
    port: &PortRef,
) -> [usize; 3] {
    match *port {
        PortRef::Input(s) => spec.inputs[s].1,
        PortRef::Node(j) => shapes[j],
    }
}

fn loss_and_seed<T: Scalar>(
    spec: &super::NetworkSpec,
    cache: &Cache<T>,
    loss: LossKind,
    target: &Tensor<T>,
) -> Result<(f64, usize, Vec<T>)> {
    let out_idx = spec.output;
    let out = &cache.acts[out_idx];
    if target.shape() != out.shape() {
        return Err(Error::Dimension(format!(
            "target shape {:?} != output shape {:?}",
            target.shape(),
            out.shape()
        )));
    }
    let batch = cache.batch;
    match loss {
        LossKind::CrossEntropySoftmax => {
            if !matches!(spec.nodes[out_idx].layer, LayerSpec::Softmax) {
                return Err(Error::State(
                    "cross_entropy_softmax requires the output node to be softmax".into(),
                ));
            }
            let pre = match spec.nodes[out_idx].inputs[0] {
                PortRef::Node(j) => j,
                PortRef::Input(_) => {
                    return Err(Error::State("softmax fed directly by an input".into()))
                }
            };
            let logits = cache.acts[pre].data();
            let probs = out.data();
            let classes = out.len() / batch;
            let mut loss_acc = 0.0f64;
            for b in 0..batch {
                let z = &logits[b * classes..(b + 1) * classes];
                let t = &target.data()[b * classes..(b + 1) * classes];
                let zmax = z.iter().cloned().fold(T::neg_infinity(), T::max).into_f64();
                let lse = z
                    .iter()
                    .map(|v| (v.into_f64() - zmax).exp())
                    .sum::<f64>()
                    .ln()
                    + zmax;
                let dot: f64 = z
                    .iter()
                    .zip(t)
                    .map(|(&zv, &tv)| zv.into_f64() * tv.into_f64())
                    .sum();
                let tsum: f64 = t.iter().map(|v| v.into_f64()).sum();
                loss_acc += tsum * lse - dot;
            }
            let inv_b = T::from_f64(1.0 / batch as f64);
            let seed: Vec<T> = probs
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| (p - t) * inv_b)
                .collect();
            Ok((loss_acc / batch as f64, pre, seed))
        }
        LossKind::MeanSquaredError => {
            let n = out.len();
            let mut loss_acc = 0.0f64;
            for (&y, &t) in out.data().iter().zip(target.data()) {
                let d = y.into_f64() - t.into_f64();
                loss_acc += d * d;
            }
            let scale = T::from_f64(2.0 / n as f64);
            let seed: Vec<T> = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(&y, &t)| (y - t) * scale)
                .collect();
            Ok((loss_acc / n as f64, out_idx, seed))
        }
    }
}

/// Immutable eval path (running stats, dropout off).
fn run_graph_ref<T: Scalar>(
    spec: &super::NetworkSpec,
    shapes: &[[usize; 3]],
    params: &[NodeParams<T>],
    inputs: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let batch = check_inputs(spec, inputs)?;
    let mut acts: Vec<Tensor<T>> = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        let act = eval_node(spec, shapes, params, inputs, &acts, i, node, batch)?;
        acts.push(act);
    }
    Ok(acts.swap_remove(spec.output))
}

#[cfg(feature = "layer-timing")]
pub mod timing {
    use std::cell::RefCell;
    use std::collections::HashMap;
    thread_local! {
        pub static ACC: RefCell<HashMap<&'static str, f64>> = RefCell::new(HashMap::new());
    }
    pub fn add(kind: &'static str, secs: f64) {
        ACC.with(|a| *a.borrow_mut().entry(kind).or_insert(0.0) += secs);
    }
    pub fn dump() {
        ACC.with(|a| {
            let mut rows: Vec<_> = a.borrow().iter().map(|(k, v)| (*k, *v)).collect();
            rows.sort_by(|x, y| y.1.total_cmp(&x.1));
            for (k, v) in rows {
                println!("  {k}: {v:.3}s");
            }
        });
    }
}

/// One node of the eval path.
fn eval_node<T: Scalar>(
    spec: &super::NetworkSpec,
    shapes: &[[usize; 3]],
    params: &[NodeParams<T>],
    inputs: &[Tensor<T>],
    acts: &[Tensor<T>],
    i: usize,
    node: &super::NodeSpec,
    batch: usize,
) -> Result<Tensor<T>> {
    let in_act = |port: &PortRef| -> &Tensor<T> {
        match *port {
            PortRef::Input(s) => &inputs[s],
            PortRef::Node(j) => &acts[j],
        }
    };
    let out_shape = shapes[i];
    let out_len = out_shape.iter().product::<usize>() * batch;
    let mut out = vec![T::zero(); out_len];
    #[cfg(feature = "layer-timing")]
    let t_start = std::time::Instant::now();
    match (&node.layer, &params[i]) {
        (
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            },
            NodeParams::Conv { weight, bias },
        ) => {
            let x = in_act(&node.inputs[0]);
            let [c, h, w] = shape_of(spec, shapes, &node.inputs[0]);
            let g = ConvGeom {
                c,
                h,
                w,
                f: out_shape[0],
                kh: kernel.0,
                kw: kernel.1,
                sh: stride.0,
                sw: stride.1,
                ph: padding.0,
                pw: padding.1,
                oh: out_shape[1],
                ow: out_shape[2],
            };
            let ohow = g.oh * g.ow;
            // small output planes make skinny GEMMs; group samples into one
            // call so packing amortizes
            let group = if ohow <= 512 {
                (2048 / ohow.max(1)).clamp(1, batch)
            } else {
                1
            };
            if group > 1 {
                let row_stride = group * ohow;
                let mut col = vec![T::zero(); g.k() * row_stride];
                let mut start = 0;
                while start < batch {
                    let gs = group.min(batch - start);
                    for j in 0..gs {
                        layers::im2col_strided(
                            &x.data()[(start + j) * g.in_len()..(start + j + 1) * g.in_len()],
                            &g,
                            &mut col,
                            row_stride,
                            j * ohow,
                        );
                    }
                    layers::conv_group_forward(
                        weight.data(),
                        bias.data(),
                        &col,
                        &g,
                        gs,
                        row_stride,
                        &mut out[start * g.out_len()..(start + gs) * g.out_len()],
                    );
                    start += gs;
                }
            } else {
                let mut col = vec![T::zero(); g.k() * ohow];
                for b in 0..batch {
                    layers::im2col(
                        &x.data()[b * g.in_len()..(b + 1) * g.in_len()],
                        &g,
                        &mut col,
                    );
                    layers::conv_sample_forward(
                        weight.data(),
                        bias.data(),
                        &col,
                        &g,
                        &mut out[b * g.out_len()..(b + 1) * g.out_len()],
                    );
                }
            }
        }
        (LayerSpec::FullyConnected { units }, NodeParams::Fc { weight, bias }) => {
            let (x, d_total) = concat_inputs(spec, shapes, node, inputs, acts, batch);
            layers::fc_forward(&x, weight.data(), bias.data(), batch, d_total, *units, &mut out);
        }
        (LayerSpec::MaxPool2d { kernel, stride }, _) => {
            let x = in_act(&node.inputs[0]);
            let [c, h, w] = shape_of(spec, shapes, &node.inputs[0]);
            let mut argmax = vec![0u32; out_len];
            for b in 0..batch {
                let in_len = c * h * w;
                let o_len: usize = out_shape.iter().product();
                layers::pool_forward(
                    &x.data()[b * in_len..(b + 1) * in_len],
                    c,
                    h,
                    w,
                    kernel.0,
                    kernel.1,
                    stride.0,
                    stride.1,
                    out_shape[1],
                    out_shape[2],
                    &mut out[b * o_len..(b + 1) * o_len],
                    &mut argmax[b * o_len..(b + 1) * o_len],
                );
            }
        }
        (LayerSpec::Upsample2d { factor }, _) => {
            let x = in_act(&node.inputs[0]);
            let [c, h, w] = shape_of(spec, shapes, &node.inputs[0]);
            let in_len = c * h * w;
            let o_len: usize = out_shape.iter().product();
            for b in 0..batch {
                layers::upsample_forward(
                    &x.data()[b * in_len..(b + 1) * in_len],
                    c,
                    h,
                    w,
                    factor.0,
                    factor.1,
                    &mut out[b * o_len..(b + 1) * o_len],
                );
            }
        }
        (
            LayerSpec::BatchNorm,
            NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) => {
            let x = in_act(&node.inputs[0]);
            let c = out_shape[0];
            let plane = out_shape[1] * out_shape[2];
            let eps = T::from_f64(BN_EPS);
            let scale_shift: Vec<(T, T)> = (0..c)
                .map(|ch| {
                    let invstd = T::one() / (running_var[ch] + eps).sqrt();
                    let scale = gamma.data()[ch] * invstd;
                    (scale, beta.data()[ch] - running_mean[ch] * scale)
                })
                .collect();
            for b in 0..batch {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let (scale, shift) = scale_shift[ch];
                    let src = &x.data()[base..base + plane];
                    for (o, &v) in out[base..base + plane].iter_mut().zip(src) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        (LayerSpec::Elu { alpha }, _) => {
            layers::elu_forward(in_act(&node.inputs[0]).data(), T::from_f64(*alpha), &mut out);
        }
        (LayerSpec::Dropout { .. }, _)
        | (LayerSpec::Identity, _)
        | (LayerSpec::Reshape { .. }, _) => {
            out.copy_from_slice(in_act(&node.inputs[0]).data());
        }
        (LayerSpec::Softmax, _) => {
            layers::softmax_forward(in_act(&node.inputs[0]).data(), batch, out_shape[0], &mut out);
        }
        _ => {
            return Err(Error::State(format!(
                "node `{}`: missing parameters",
                node.name
            )))
        }
    }
    #[cfg(feature = "layer-timing")]
    timing::add(node.layer.kind_name(), t_start.elapsed().as_secs_f64());
    let mut full_shape = vec![batch];
    full_shape.extend_from_slice(&out_shape);
    Tensor::from_vec(&full_shape, out)
}

fn concat_inputs<T: Scalar>(
    spec: &super::NetworkSpec,
    shapes: &[[usize; 3]],
    node: &super::NodeSpec,
    inputs: &[Tensor<T>],
    acts: &[Tensor<T>],
    batch: usize,
) -> (Vec<T>, usize) {
    let sizes: Vec<usize> = node
        .inputs
        .iter()
        .map(|p| {
            let [c, h, w] = shape_of(spec, shapes, p);
            c * h * w
        })
        .collect();
    let d_total: usize = sizes.iter().sum();
    let mut buf = vec![T::zero(); batch * d_total];
    let mut off = 0;
    for (port, &d_i) in node.inputs.iter().zip(&sizes) {
        let src = match *port {
            PortRef::Input(s) => inputs[s].data(),
            PortRef::Node(j) => acts[j].data(),
        };
        for b in 0..batch {
            buf[b * d_total + off..b * d_total + off + d_i]
                .copy_from_slice(&src[b * d_i..(b + 1) * d_i]);
        }
        off += d_i;
    }
    (buf, d_total)
}

fn check_inputs<T: Scalar>(spec: &super::NetworkSpec, inputs: &[Tensor<T>]) -> Result<usize> {
    if inputs.len() != spec.inputs.len() {
        return Err(Error::Dimension(format!(
            "network takes {} inputs, got {}",
            spec.inputs.len(),
            inputs.len()
        )));
    }
    let mut batch = None;
    for (tensor, (name, shape)) in inputs.iter().zip(&spec.inputs) {
        let s = tensor.shape();
        if s.len() != 4 || s[1] != shape[0] || s[2] != shape[1] || s[3] != shape[2] {
            return Err(Error::Dimension(format!(
                "input `{name}` expects [batch, {}, {}, {}], got {:?}",
                shape[0], shape[1], shape[2], s
            )));
        }
        match batch {
            None => batch = Some(s[0]),
            Some(b) if b != s[0] => {
                return Err(Error::Dimension(format!(
                    "input `{name}` batch {} != {}",
                    s[0], b
                )))
            }
            _ => {}
        }
    }
    let batch = batch.unwrap();
    if batch == 0 {
        return Err(Error::Dimension("batch must be nonzero".into()));
    }
    Ok(batch)
}

/// Train/frozen path: mutable (running-stat updates) and cache-building.
fn run_graph<T: Scalar>(
    spec: &super::NetworkSpec,
    shapes: &[[usize; 3]],
    params: &mut [NodeParams<T>],
    inputs: &[Tensor<T>],
    bn_mode: BnRun<'_, T>,
    mut drop_mode: DropRun<'_, T>,
    want_cache: bool,
) -> Result<(Tensor<T>, Option<Cache<T>>)> {
    let batch = check_inputs(spec, inputs)?;
    let mut acts: Vec<Tensor<T>> = Vec::with_capacity(spec.nodes.len());
    let mut auxes: Vec<Aux<T>> = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        let out_shape = shapes[i];
        let mut aux = Aux::None;
        let act: Tensor<T> = match &node.layer {
            LayerSpec::BatchNorm => {
                let x = match node.inputs[0] {
                    PortRef::Input(s) => &inputs[s],
                    PortRef::Node(j) => &acts[j],
                };
                let NodeParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } = &mut params[i]
                else {
                    return Err(Error::State(format!("node `{}`: missing bn params", node.name)));
                };
                let c = out_shape[0];
                let plane = out_shape[1] * out_shape[2];
                let m = batch * plane;
                // channel statistics: batch-derived or replayed
                let (mean, var): (Vec<T>, Vec<T>) = match &bn_mode {
                    BnRun::Frozen(noise) => {
                        let (mean, var) = noise.bn_stats[i].as_ref().ok_or_else(|| {
                            Error::State(format!("node `{}`: no frozen bn stats", node.name))
                        })?;
                        (mean.clone(), var.clone())
                    }
                    _ => {
                        let mut mean = vec![T::zero(); c];
                        let mut var = vec![T::zero(); c];
                        for b in 0..batch {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                for o in 0..plane {
                                    mean[ch] = mean[ch] + x.data()[base + o];
                                }
                            }
                        }
                        let m_t = T::from_f64(m as f64);
                        for ch in 0..c {
                            mean[ch] = mean[ch] / m_t;
                        }
                        for b in 0..batch {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                for o in 0..plane {
                                    let d = x.data()[base + o] - mean[ch];
                                    var[ch] = var[ch] + d * d;
                                }
                            }
                        }
                        for ch in 0..c {
                            var[ch] = var[ch] / m_t;
                        }
                        (mean, var)
                    }
                };
                if matches!(
                    &bn_mode,
                    BnRun::Batch {
                        update_running: true
                    }
                ) {
                    let mom = T::from_f64(BN_MOMENTUM);
                    let inv = T::one() - mom;
                    for ch in 0..c {
                        running_mean[ch] = running_mean[ch] * mom + mean[ch] * inv;
                        running_var[ch] = running_var[ch] * mom + var[ch] * inv;
                    }
                }
                let eps = T::from_f64(BN_EPS);
                let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); batch * c * plane];
                let mut out = vec![T::zero(); batch * c * plane];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let g = gamma.data()[ch];
                        let bv = beta.data()[ch];
                        for o in 0..plane {
                            let xh = (x.data()[base + o] - mean[ch]) * invstd[ch];
                            xhat[base + o] = xh;
                            out[base + o] = g * xh + bv;
                        }
                    }
                }
                aux = Aux::Bn {
                    xhat,
                    invstd,
                    mean,
                    var,
                    frozen: matches!(bn_mode, BnRun::Frozen(_)),
                };
                let mut full_shape = vec![batch];
                full_shape.extend_from_slice(&out_shape);
                Tensor::from_vec(&full_shape, out)?
            }
            LayerSpec::Dropout { rate } => {
                let x = match node.inputs[0] {
                    PortRef::Input(s) => &inputs[s],
                    PortRef::Node(j) => &acts[j],
                };
                let n = x.len();
                let mult: Vec<T> = match &mut drop_mode {
                    DropRun::Fresh(rng) => {
                        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
                        (0..n)
                            .map(|_| {
                                if rng.gen::<f64>() >= *rate {
                                    keep_scale
                                } else {
                                    T::zero()
                                }
                            })
                            .collect()
                    }
                    DropRun::Frozen(noise) => noise.dropout[i]
                        .as_ref()
                        .ok_or_else(|| {
                            Error::State(format!("node `{}`: no frozen dropout mask", node.name))
                        })?
                        .clone(),
                };
                let out: Vec<T> = x.data().iter().zip(&mult).map(|(&v, &m)| v * m).collect();
                aux = Aux::Drop { mult };
                let mut full_shape = vec![batch];
                full_shape.extend_from_slice(&out_shape);
                Tensor::from_vec(&full_shape, out)?
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let x = match node.inputs[0] {
                    PortRef::Input(s) => &inputs[s],
                    PortRef::Node(j) => &acts[j],
                };
                let [c, h, w] = shape_of(spec, shapes, &node.inputs[0]);
                let o_len: usize = out_shape.iter().product();
                let mut out = vec![T::zero(); batch * o_len];
                let mut argmax = vec![0u32; batch * o_len];
                let in_len = c * h * w;
                for b in 0..batch {
                    layers::pool_forward(
                        &x.data()[b * in_len..(b + 1) * in_len],
                        c,
                        h,
                        w,
                        kernel.0,
                        kernel.1,
                        stride.0,
                        stride.1,
                        out_shape[1],
                        out_shape[2],
                        &mut out[b * o_len..(b + 1) * o_len],
                        &mut argmax[b * o_len..(b + 1) * o_len],
                    );
                }
                aux = Aux::Pool { argmax };
                let mut full_shape = vec![batch];
                full_shape.extend_from_slice(&out_shape);
                Tensor::from_vec(&full_shape, out)?
            }
            LayerSpec::FullyConnected { units } => {
                let NodeParams::Fc { weight, bias } = &params[i] else {
                    return Err(Error::State(format!("node `{}`: missing fc params", node.name)));
                };
                let (x, d_total) = concat_inputs(spec, shapes, node, inputs, &acts, batch);
                let mut out = vec![T::zero(); batch * units];
                layers::fc_forward(&x, weight.data(), bias.data(), batch, d_total, *units, &mut out);
                if node.inputs.len() > 1 {
                    aux = Aux::Concat { buf: x };
                }
                let mut full_shape = vec![batch];
                full_shape.extend_from_slice(&out_shape);
                Tensor::from_vec(&full_shape, out)?
            }
            // layers with no train-specific state reuse the eval kernel
            _ => eval_node(spec, shapes, params, inputs, &acts, i, node, batch)?,
        };
        acts.push(act);
        auxes.push(aux);
    }
    let out = acts[spec.output].clone();
    let cache = want_cache.then(|| Cache {
        batch,
        inputs: inputs.to_vec(),
        acts,
        aux: auxes,
    });
    Ok((out, cache))
}
