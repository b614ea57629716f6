use super::kernels::{self, ConvGeom};
use super::{check_same_shape, Tensor};
use crate::error::{arg_err, dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    ChannelNorm {
        input: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    LogSoftmax(Var),
    Exp(Var),
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// `Σ_i weight_i · (−logp[b, target_i, pixel_i])` over `[B, H, W]` pixels.
    PickNll {
        logp: Var,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
    /// `scale · Σ (a − b)²`
    SqDist {
        a: Var,
        b: Var,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a valid topological order for the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`; all zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.sizes[var.0]],
        }
    }

    pub fn take(&mut self, var: Var) -> Vec<f64> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.sizes[var.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf: a parameter, an input or a constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies a recorded value into a fresh leaf that carries no gradient
    /// back to its source.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.leaf(value)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(dim_err!(
                "conv2d: input channels {cin} but weight expects {wcin} (axis 1)"
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(dim_err!(
                "conv2d: kernel must be square and odd, got {kh}x{kw} (axes 2, 3)"
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(dim_err!(
                "conv2d: bias shape {:?} does not match output channels {cout}",
                self.value(bias).shape()
            ));
        }
        if stride == 0 {
            return Err(arg_err!("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err!(
                "conv2d: padded input {}x{} smaller than kernel {kh} (axes 2, 3)",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&[batch, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, Op::Relu(input))
    }

    pub fn channel_norm(&mut self, input: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(arg_err!("channel_norm: eps must be positive, got {eps}"));
        }
        let dims = self.value(input).dims4()?;
        let c = dims[1];
        if self.value(gain).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(dim_err!("channel_norm: gain/shift must have shape [{c}]"));
        }
        let (out, xhat, inv_std) = kernels::channel_norm_forward(
            dims,
            self.value(input).data(),
            self.value(gain).data(),
            self.value(shift).data(),
            eps,
        );
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(
            value,
            Op::ChannelNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(arg_err!(
                "bilinear_upsample: factor must be >= 1, got {factor}"
            ));
        }
        let dims = self.value(input).dims4()?;
        let [b, c, h, w] = dims;
        let out = kernels::upsample_forward(dims, self.value(input).data(), factor);
        let value = Tensor::new(&[b, c, h * factor, w * factor], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }))
    }

    pub fn log_softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let dims = self.value(logits).dims4()?;
        if dims[1] < 2 {
            return Err(dim_err!(
                "log_softmax_channels: need at least 2 classes on axis 1"
            ));
        }
        let out = kernels::log_softmax_forward(dims, self.value(logits).data());
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(value, Op::LogSoftmax(logits)))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v.exp()).collect(),
        };
        self.push(value, Op::Exp(input))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let src = self.value(input);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v * factor).collect(),
        };
        self.push(value, Op::Scale(input, factor))
    }

    /// Weighted negative log-likelihood of per-pixel targets. `targets` and
    /// `weights` index the `[B, H, W]` pixels of the `[B, K, H, W]` log-probs;
    /// zero-weight pixels are skipped and their targets are not inspected.
    pub fn pick_nll(&mut self, logp: Var, targets: Vec<u32>, weights: Vec<f64>) -> Result<Var> {
        let [b, k, h, w] = self.value(logp).dims4()?;
        let pixels = b * h * w;
        if targets.len() != pixels || weights.len() != pixels {
            return Err(dim_err!(
                "pick_nll: expected {pixels} targets and weights, got {} and {}",
                targets.len(),
                weights.len()
            ));
        }
        let n = h * w;
        let lp = self.value(logp).data();
        let mut total = 0.0;
        for (i, (&t, &wt)) in targets.iter().zip(&weights).enumerate() {
            if wt == 0.0 {
                continue;
            }
            if t as usize >= k {
                return Err(crate::error::Error::Data(format!(
                    "pick_nll: target {t} out of range for {k} classes"
                )));
            }
            let (bi, pix) = (i / n, i % n);
            total -= wt * lp[(bi * k + t as usize) * n + pix];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::PickNll {
                logp,
                targets,
                weights,
            },
        ))
    }

    pub fn sq_dist(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        check_same_shape("sq_dist", self.value(a).shape(), self.value(b).shape())?;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(scale * total), Op::SqDist { a, b, scale }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(arg_err!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
            match &mut grads[var.0] {
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &gout,
                    );
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let dx = gout
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::ChannelNorm {
                    input,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let dims = self.value(*input).dims4()?;
                    let (dx, dg, ds) = kernels::channel_norm_backward(
                        dims,
                        xhat,
                        inv_std,
                        self.value(*gain).data(),
                        &gout,
                    );
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *shift, ds);
                }
                Op::Upsample { input, factor } => {
                    let dims = self.value(*input).dims4()?;
                    accumulate(
                        &mut grads,
                        *input,
                        kernels::upsample_backward(dims, &gout, *factor),
                    );
                }
                Op::LogSoftmax(input) => {
                    let dims = node.value.dims4()?;
                    let dx = kernels::log_softmax_backward(dims, node.value.data(), &gout);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Exp(input) => {
                    let dx = gout
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::Sum(input) => {
                    accumulate(&mut grads, *input, vec![gout[0]; sizes[input.0]]);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::Scale(input, factor) => {
                    accumulate(
                        &mut grads,
                        *input,
                        gout.iter().map(|g| g * factor).collect(),
                    );
                }
                Op::PickNll {
                    logp,
                    targets,
                    weights,
                } => {
                    let [_, k, h, w] = self.value(*logp).dims4()?;
                    let n = h * w;
                    let mut d = vec![0.0; sizes[logp.0]];
                    for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                        if wt != 0.0 {
                            let (bi, pix) = (i / n, i % n);
                            d[(bi * k + t as usize) * n + pix] -= gout[0] * wt;
                        }
                    }
                    accumulate(&mut grads, *logp, d);
                }
                Op::SqDist { a, b, scale } => {
                    let c = 2.0 * scale * gout[0];
                    let da: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| c * (x - y))
                        .collect();
                    let db = da.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Ok(Gradients { grads, sizes })
    }
}
