//! Layer kernels. Activations travel as `batch x width` matrices; image
//! layers read each row as a `(channels, height, width)` block in row-major
//! order, so flattening between conv and dense layers is free.

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid-padding convolution.
    Conv2d {
        input: ImageShape,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
    },
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    MaxPool2d {
        input: ImageShape,
        window: (usize, usize),
    },
    Relu {
        width: usize,
    },
}

impl LayerSpec {
    pub fn input_width(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv2d { input, .. } | LayerSpec::MaxPool2d { input, .. } => input.len(),
            LayerSpec::Relu { width } => *width,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Relu { width } => *width,
            _ => self.output_image().map_or(0, |s| s.len()),
        }
    }

    pub fn output_image(&self) -> Option<ImageShape> {
        match self {
            LayerSpec::Conv2d {
                input,
                out_channels,
                kernel,
                stride,
            } => Some(ImageShape::new(
                *out_channels,
                (input.height - kernel.0) / stride + 1,
                (input.width - kernel.1) / stride + 1,
            )),
            LayerSpec::MaxPool2d { input, window } => Some(ImageShape::new(
                input.channels,
                input.height / window.0,
                input.width / window.1,
            )),
            _ => None,
        }
    }

    /// Shapes of (weight, bias), empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![*outputs, *inputs], vec![*outputs]],
            LayerSpec::Conv2d {
                input,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![*out_channels, input.channels, kernel.0, kernel.1],
                vec![*out_channels],
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// (fan_in, fan_out) for Glorot initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Dense { inputs, outputs } => Some((*inputs, *outputs)),
            LayerSpec::Conv2d {
                input,
                out_channels,
                kernel,
                ..
            } => {
                let area = kernel.0 * kernel.1;
                Some((input.channels * area, out_channels * area))
            }
            _ => None,
        }
    }
}

/// What a layer needs to keep from its forward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    Input(Tensor),
    /// Flat input index chosen by each pooled output element.
    Argmax(Vec<usize>),
}

pub(crate) fn forward(spec: &LayerSpec, params: &[Tensor], input: &Tensor) -> (Tensor, LayerCache) {
    let batch = input.rows();
    match spec {
        LayerSpec::Dense { inputs, outputs } => {
            let (w, b) = (params[0].data(), params[1].data());
            let mut out = Tensor::zeros(vec![batch, *outputs]);
            for n in 0..batch {
                let x = input.row(n);
                let y = out.row_mut(n);
                for o in 0..*outputs {
                    let wrow = &w[o * inputs..(o + 1) * inputs];
                    y[o] = b[o] + dot(wrow, x);
                }
            }
            (out, LayerCache::Input(input.clone()))
        }
        LayerSpec::Conv2d {
            input: shape,
            out_channels,
            kernel: (kh, kw),
            stride,
        } => {
            let out_shape = spec.output_image().expect("conv has image output");
            let (w, b) = (params[0].data(), params[1].data());
            let mut out = Tensor::zeros(vec![batch, out_shape.len()]);
            let plane = shape.height * shape.width;
            let filter = shape.channels * kh * kw;
            for n in 0..batch {
                let x = input.row(n);
                let y = out.row_mut(n);
                for oc in 0..*out_channels {
                    let wf = &w[oc * filter..(oc + 1) * filter];
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let mut acc = b[oc];
                            for ic in 0..shape.channels {
                                let xbase = ic * plane;
                                let wbase = ic * kh * kw;
                                for ky in 0..*kh {
                                    let iy = oy * stride + ky;
                                    let xrow = xbase + iy * shape.width + ox * stride;
                                    let wrow = wbase + ky * kw;
                                    acc += dot(&wf[wrow..wrow + kw], &x[xrow..xrow + kw]);
                                }
                            }
                            y[(oc * out_shape.height + oy) * out_shape.width + ox] = acc;
                        }
                    }
                }
            }
            (out, LayerCache::Input(input.clone()))
        }
        LayerSpec::MaxPool2d {
            input: shape,
            window: (ph, pw),
        } => {
            let out_shape = spec.output_image().expect("pool has image output");
            let out_len = out_shape.len();
            let mut out = Tensor::zeros(vec![batch, out_len]);
            let mut argmax = Vec::with_capacity(batch * out_len);
            for n in 0..batch {
                let x = input.row(n);
                let y = out.row_mut(n);
                for c in 0..shape.channels {
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let mut best = usize::MAX;
                            let mut best_val = f64::NEG_INFINITY;
                            for dy in 0..*ph {
                                for dx in 0..*pw {
                                    let idx = (c * shape.height + oy * ph + dy) * shape.width
                                        + ox * pw
                                        + dx;
                                    if best == usize::MAX || x[idx] > best_val {
                                        best = idx;
                                        best_val = x[idx];
                                    }
                                }
                            }
                            y[(c * out_shape.height + oy) * out_shape.width + ox] = best_val;
                            argmax.push(best);
                        }
                    }
                }
            }
            (out, LayerCache::Argmax(argmax))
        }
        LayerSpec::Relu { .. } => {
            let mut out = input.clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            (out, LayerCache::Input(input.clone()))
        }
    }
}

/// Returns (parameter gradients, gradient w.r.t. the layer input).
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    grad_out: &Tensor,
) -> (Vec<Tensor>, Tensor) {
    let batch = grad_out.rows();
    match (spec, cache) {
        (LayerSpec::Dense { inputs, outputs }, LayerCache::Input(input)) => {
            let w = params[0].data();
            let mut gw = Tensor::zeros(vec![*outputs, *inputs]);
            let mut gb = Tensor::zeros(vec![*outputs]);
            let mut gx = Tensor::zeros(vec![batch, *inputs]);
            for n in 0..batch {
                let x = input.row(n);
                let g = grad_out.row(n);
                let gxr = gx.row_mut(n);
                for o in 0..*outputs {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb.data_mut()[o] += go;
                    axpy(go, x, &mut gw.data_mut()[o * inputs..(o + 1) * inputs]);
                    axpy(go, &w[o * inputs..(o + 1) * inputs], gxr);
                }
            }
            (vec![gw, gb], gx)
        }
        (
            LayerSpec::Conv2d {
                input: shape,
                out_channels,
                kernel: (kh, kw),
                stride,
            },
            LayerCache::Input(input),
        ) => {
            let out_shape = spec.output_image().expect("conv has image output");
            let w = params[0].data();
            let plane = shape.height * shape.width;
            let filter = shape.channels * kh * kw;
            let mut gw = Tensor::zeros(params[0].shape().to_vec());
            let mut gb = Tensor::zeros(vec![*out_channels]);
            let mut gx = Tensor::zeros(vec![batch, shape.len()]);
            for n in 0..batch {
                let x = input.row(n);
                let g = grad_out.row(n);
                let gxr = gx.row_mut(n);
                for oc in 0..*out_channels {
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let go = g[(oc * out_shape.height + oy) * out_shape.width + ox];
                            if go == 0.0 {
                                continue;
                            }
                            gb.data_mut()[oc] += go;
                            for ic in 0..shape.channels {
                                for ky in 0..*kh {
                                    let iy = oy * stride + ky;
                                    let xrow = ic * plane + iy * shape.width + ox * stride;
                                    let wrow = oc * filter + (ic * kh + ky) * kw;
                                    axpy(
                                        go,
                                        &x[xrow..xrow + kw],
                                        &mut gw.data_mut()[wrow..wrow + kw],
                                    );
                                    axpy(go, &w[wrow..wrow + kw], &mut gxr[xrow..xrow + kw]);
                                }
                            }
                        }
                    }
                }
            }
            (vec![gw, gb], gx)
        }
        (LayerSpec::MaxPool2d { input: shape, .. }, LayerCache::Argmax(argmax)) => {
            let out_len = grad_out.row_width();
            let mut gx = Tensor::zeros(vec![batch, shape.len()]);
            for n in 0..batch {
                let g = grad_out.row(n);
                let picks = &argmax[n * out_len..(n + 1) * out_len];
                let gxr = gx.row_mut(n);
                for (go, &idx) in g.iter().zip(picks) {
                    gxr[idx] += go;
                }
            }
            (Vec::new(), gx)
        }
        (LayerSpec::Relu { .. }, LayerCache::Input(input)) => {
            let mut gx = grad_out.clone();
            for (g, x) in gx.data_mut().iter_mut().zip(input.data()) {
                if *x <= 0.0 {
                    *g = 0.0;
                }
            }
            (Vec::new(), gx)
        }
        _ => unreachable!("layer cache does not match layer kind"),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
