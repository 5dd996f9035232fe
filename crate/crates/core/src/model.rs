//! Network descriptions, the internal feature-fusion (FA) first layer, and
//! the default MiniCNN backbone.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry, LayerGrad};
use crate::tensor::{Real, Tensor};

/// A crop of the input image feeding one FA branch, with its fusion weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub lambda: f64,
}

impl Region {
    pub fn new(top: usize, left: usize, height: usize, width: usize, lambda: f64) -> Self {
        Self {
            top,
            left,
            height,
            width,
            lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Main convolution plus one branch convolution per region, fused by
    /// weighted addition. Regions live in [`NetworkSpec::regions`].
    FeatureFusion {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    GlobalAvgPool,
    Dense {
        out: usize,
    },
    /// Identity slot where attention blocks would sit in the full backbone.
    Attention,
}

impl Layer {
    fn token(&self) -> String {
        match self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => format!("conv({out_channels},{kernel},{stride},{padding})"),
            Layer::FeatureFusion {
                out_channels,
                kernel,
                stride,
                padding,
            } => format!("fa({out_channels},{kernel},{stride},{padding})"),
            Layer::Relu => "relu".into(),
            Layer::MaxPool2 => "maxpool2".into(),
            Layer::Flatten => "flatten".into(),
            Layer::GlobalAvgPool => "gap".into(),
            Layer::Dense { out } => format!("dense({out})"),
            Layer::Attention => "attention".into(),
        }
    }

    fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        let (name, args) = match token.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("unclosed layer token `{token}`")))?;
                let args = inner
                    .split(',')
                    .map(|a| {
                        a.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::config(format!("bad layer argument in `{token}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (name, args)
            }
            None => (token, Vec::new()),
        };
        let layer = match (name, args.as_slice()) {
            ("conv", &[o, k, s, p]) => Layer::Conv {
                out_channels: o,
                kernel: k,
                stride: s,
                padding: p,
            },
            ("fa", &[o, k, s, p]) => Layer::FeatureFusion {
                out_channels: o,
                kernel: k,
                stride: s,
                padding: p,
            },
            ("relu", []) => Layer::Relu,
            ("maxpool2", []) => Layer::MaxPool2,
            ("flatten", []) => Layer::Flatten,
            ("gap", []) => Layer::GlobalAvgPool,
            ("dense", &[o]) => Layer::Dense { out: o },
            ("attention", []) => Layer::Attention,
            _ => return Err(Error::config(format!("unknown layer `{token}`"))),
        };
        Ok(layer)
    }
}

/// Architecture of a classifier operating on `[channels, height, width]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub regions: Vec<Region>,
}

/// Options for [`NetworkSpec::mini_cnn`].
#[derive(Clone, Debug, PartialEq)]
pub struct MiniCnnOptions {
    pub conv_channels: [usize; 3],
    pub kernel: usize,
    pub hidden: usize,
    /// FA regions as `(top, left, height, width)` fractions of the image
    /// plus λ. Empty disables the FA block.
    pub fa_regions: Vec<([f64; 4], f64)>,
}

impl Default for MiniCnnOptions {
    fn default() -> Self {
        Self {
            conv_channels: [6, 12, 24],
            kernel: 3,
            hidden: 128,
            fa_regions: default_fa_regions(),
        }
    }
}

/// Upper-left quarter, upper-right quarter, lower-central half; λ = 0.3 each.
pub fn default_fa_regions() -> Vec<([f64; 4], f64)> {
    vec![
        ([0.0, 0.0, 0.5, 0.5], 0.3),
        ([0.0, 0.5, 0.5, 0.5], 0.3),
        ([0.5, 0.25, 0.5, 0.5], 0.3),
    ]
}

/// Parameter name, shape and fan-in, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn param_name(layer: usize, part: &str) -> String {
    format!("{layer:02}.{part}")
}

fn branch_name(layer: usize, branch: usize, part: &str) -> String {
    format!("{layer:02}.branch{branch}.{part}")
}

impl NetworkSpec {
    /// Three conv stages (the first optionally an FA block) and a two-layer
    /// dense head.
    pub fn mini_cnn(input: [usize; 3], classes: usize, opts: &MiniCnnOptions) -> Result<Self> {
        let [c1, c2, c3] = opts.conv_channels;
        let k = opts.kernel;
        if k % 2 == 0 {
            return Err(Error::config("MiniCNN kernel size must be odd"));
        }
        let pad = k / 2;
        let [_, h, w] = input;
        let regions = opts
            .fa_regions
            .iter()
            .map(|&([t, l, rh, rw], lambda)| {
                let px = |f: f64, extent: usize| (f * extent as f64).round() as usize;
                Region::new(px(t, h), px(l, w), px(rh, h), px(rw, w), lambda)
            })
            .collect::<Vec<_>>();
        let first = if regions.is_empty() {
            Layer::Conv {
                out_channels: c1,
                kernel: k,
                stride: 1,
                padding: pad,
            }
        } else {
            Layer::FeatureFusion {
                out_channels: c1,
                kernel: k,
                stride: 1,
                padding: pad,
            }
        };
        let conv = |out_channels| Layer::Conv {
            out_channels,
            kernel: k,
            stride: 1,
            padding: pad,
        };
        let spec = Self {
            input,
            classes,
            layers: vec![
                first,
                Layer::Relu,
                Layer::MaxPool2,
                conv(c2),
                Layer::Relu,
                Layer::MaxPool2,
                conv(c3),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { out: opts.hidden },
                Layer::Relu,
                Layer::Dense { out: classes },
            ],
            regions,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Output shape of every layer (index `i` is the output of layer `i`).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.contains(&0) {
            return Err(Error::config("input shape has a zero extent"));
        }
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut fa_seen = false;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }
                    | Layer::FeatureFusion {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    &[_, h, w],
                ) => {
                    let g = ConvGeometry::new(*stride, *padding);
                    let (Some(oh), Some(ow)) = (g.output_extent(h, *kernel), g.output_extent(w, *kernel)) else {
                        return Err(Error::config(format!(
                            "layer {i}: kernel {kernel} does not fit {h}x{w}"
                        )));
                    };
                    if *out_channels == 0 {
                        return Err(Error::config(format!("layer {i}: zero output channels")));
                    }
                    if let Layer::FeatureFusion { .. } = layer {
                        if i != 0 || fa_seen {
                            return Err(Error::config("the FA block must be the single first layer"));
                        }
                        fa_seen = true;
                        self.check_regions(*kernel, g, oh, ow)?;
                    }
                    vec![*out_channels, oh, ow]
                }
                (Layer::Relu | Layer::Attention, s) => s.to_vec(),
                (Layer::MaxPool2, &[c, h, w]) if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                (Layer::Flatten, s) => vec![s.iter().product()],
                (Layer::GlobalAvgPool, &[c, _, _]) => vec![c],
                (Layer::Dense { out }, &[_]) if *out > 0 => vec![*out],
                (layer, s) => {
                    return Err(Error::config(format!(
                        "layer {i} ({}) cannot take input shape {s:?}",
                        layer.token()
                    )))
                }
            };
            out.push(shape.clone());
        }
        if shape != [self.classes] {
            return Err(Error::config(format!(
                "network ends in shape {shape:?} but has {} classes",
                self.classes
            )));
        }
        if !fa_seen && !self.regions.is_empty() {
            return Err(Error::config("FA regions given but no FA layer"));
        }
        Ok(out)
    }

    fn check_regions(&self, kernel: usize, g: ConvGeometry, oh: usize, ow: usize) -> Result<()> {
        let [_, h, w] = self.input;
        if self.regions.is_empty() {
            return Err(Error::config("FA layer without regions"));
        }
        for (k, r) in self.regions.iter().enumerate() {
            if !r.lambda.is_finite() {
                return Err(Error::config(format!("region {k}: non-finite lambda")));
            }
            if r.height == 0 || r.width == 0 || r.top + r.height > h || r.left + r.width > w {
                return Err(Error::config(format!(
                    "region {k} ({r:?}) lies outside the {h}x{w} image"
                )));
            }
            let window = region_window(r, kernel, g).ok_or_else(|| {
                Error::config(format!("region {k}: branch output does not tile the main map"))
            })?;
            if window.0 + window.2 > oh || window.1 + window.3 > ow {
                return Err(Error::config(format!("region {k}: branch window exceeds main output")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        self.layer_shapes().map(|_| ())
    }

    /// Every parameter tensor the spec requires, in canonical (sorted) order.
    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        let shapes = self.layer_shapes()?;
        let mut infos = Vec::new();
        let mut in_shape = self.input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_shape[0] * kernel * kernel;
                    infos.push(ParamInfo {
                        name: param_name(i, "weight"),
                        shape: vec![*out_channels, in_shape[0], *kernel, *kernel],
                        fan_in,
                    });
                    infos.push(ParamInfo {
                        name: param_name(i, "bias"),
                        shape: vec![*out_channels],
                        fan_in,
                    });
                }
                Layer::FeatureFusion {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_shape[0] * kernel * kernel;
                    let wshape = vec![*out_channels, in_shape[0], *kernel, *kernel];
                    infos.push(ParamInfo {
                        name: param_name(i, "weight"),
                        shape: wshape.clone(),
                        fan_in,
                    });
                    infos.push(ParamInfo {
                        name: param_name(i, "bias"),
                        shape: vec![*out_channels],
                        fan_in,
                    });
                    for b in 0..self.regions.len() {
                        infos.push(ParamInfo {
                            name: branch_name(i, b, "weight"),
                            shape: wshape.clone(),
                            fan_in,
                        });
                        infos.push(ParamInfo {
                            name: branch_name(i, b, "bias"),
                            shape: vec![*out_channels],
                            fan_in,
                        });
                    }
                }
                Layer::Dense { out } => {
                    let fan_in = in_shape[0];
                    infos.push(ParamInfo {
                        name: param_name(i, "weight"),
                        shape: vec![*out, fan_in],
                        fan_in,
                    });
                    infos.push(ParamInfo {
                        name: param_name(i, "bias"),
                        shape: vec![*out],
                        fan_in,
                    });
                }
                _ => {}
            }
            in_shape = shapes[i].clone();
        }
        infos.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(infos)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .params()?
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    /// `key = value` lines under the `spec.` prefix.
    pub fn render(&self) -> String {
        let [c, h, w] = self.input;
        let mut s = String::new();
        let _ = writeln!(s, "spec.input = {c}x{h}x{w}");
        let _ = writeln!(s, "spec.classes = {}", self.classes);
        let layers: Vec<String> = self.layers.iter().map(Layer::token).collect();
        let _ = writeln!(s, "spec.layers = {}", layers.join(";"));
        let regions: Vec<String> = self
            .regions
            .iter()
            .map(|r| format!("{},{},{},{},{}", r.top, r.left, r.height, r.width, r.lambda))
            .collect();
        let _ = writeln!(s, "spec.regions = {}", regions.join(";"));
        s
    }

    /// Inverse of [`NetworkSpec::render`]; ignores keys outside `spec.`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut classes = None;
        let mut layers = None;
        let mut regions = Vec::new();
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let value = value.trim();
            match key.trim() {
                "spec.input" => {
                    let dims = value
                        .split('x')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::config(format!("bad spec.input `{value}`")))?;
                    let dims: [usize; 3] = dims
                        .try_into()
                        .map_err(|_| Error::config("spec.input needs CxHxW"))?;
                    input = Some(dims);
                }
                "spec.classes" => {
                    classes = Some(
                        value
                            .parse()
                            .map_err(|_| Error::config(format!("bad spec.classes `{value}`")))?,
                    )
                }
                "spec.layers" => {
                    layers = Some(
                        value
                            .split(';')
                            .filter(|t| !t.trim().is_empty())
                            .map(Layer::parse)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "spec.regions" => {
                    regions = value
                        .split(';')
                        .filter(|t| !t.trim().is_empty())
                        .map(parse_region)
                        .collect::<Result<Vec<_>>>()?;
                }
                _ => {}
            }
        }
        let spec = Self {
            input: input.ok_or_else(|| Error::config("missing spec.input"))?,
            classes: classes.ok_or_else(|| Error::config("missing spec.classes"))?,
            layers: layers.ok_or_else(|| Error::config("missing spec.layers"))?,
            regions,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_region(text: &str) -> Result<Region> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::config(format!("bad region `{text}`"));
    let [t, l, h, w, lambda] = parts.as_slice() else {
        return Err(bad());
    };
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok(Region::new(
        int(t)?,
        int(l)?,
        int(h)?,
        int(w)?,
        lambda.parse().map_err(|_| bad())?,
    ))
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Output window `(row, col, rows, cols)` of a region's branch map inside
/// the main feature map, or `None` if the branch output does not align.
fn region_window(r: &Region, kernel: usize, g: ConvGeometry) -> Option<(usize, usize, usize, usize)> {
    if r.top % g.stride != 0 || r.left % g.stride != 0 {
        return None;
    }
    let bh = g.output_extent(r.height, kernel)?;
    let bw = g.output_extent(r.width, kernel)?;
    if r.height % g.stride != 0 || r.width % g.stride != 0 {
        return None;
    }
    if bh != r.height / g.stride || bw != r.width / g.stride {
        return None;
    }
    Some((r.top / g.stride, r.left / g.stride, bh, bw))
}

fn crop<T: Real>(image: &Tensor<T>, r: &Region) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::config("crop expects [c,H,W]"));
    };
    if r.top + r.height > h || r.left + r.width > w || r.height == 0 || r.width == 0 {
        return Err(Error::config(format!("region {r:?} lies outside the {h}x{w} image")));
    }
    let mut data = Vec::with_capacity(c * r.height * r.width);
    for ch in 0..c {
        for y in r.top..r.top + r.height {
            let start = (ch * h + y) * w + r.left;
            data.extend_from_slice(&image.data()[start..start + r.width]);
        }
    }
    Tensor::new(vec![c, r.height, r.width], data)
}

/// Parameters of one FA branch.
pub struct Branch<'a, T: Real> {
    pub kernels: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub region: &'a Region,
}

/// `conv(image, main) + sum_k λ_k · Embed(conv(crop_k(image), branch_k))`,
/// where each branch map is placed at the output window aligned with its
/// crop and is zero elsewhere.
pub fn fa_forward<T: Real>(
    image: &Tensor<T>,
    main_kernels: &Tensor<T>,
    main_bias: &Tensor<T>,
    branches: &[Branch<'_, T>],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let mut out = nn::conv2d_forward(image, main_kernels, main_bias, geom)?;
    let &[m, oh, ow] = out.shape() else { unreachable!() };
    for (k, b) in branches.iter().enumerate() {
        if b.kernels.shape()[0] != m {
            return Err(Error::config(format!(
                "branch {k} has {} output channels, main has {m}",
                b.kernels.shape()[0]
            )));
        }
        let kernel = b.kernels.shape()[2];
        let (wy, wx, bh, bw) = region_window(b.region, kernel, geom)
            .filter(|&(y, x, bh, bw)| y + bh <= oh && x + bw <= ow)
            .ok_or_else(|| Error::config(format!("branch {k} does not tile the main output")))?;
        let part = nn::conv2d_forward(&crop(image, b.region)?, b.kernels, b.bias, geom)?;
        let lambda = T::from_f64_lossy(b.region.lambda);
        let dst = out.data_mut();
        for ch in 0..m {
            for y in 0..bh {
                for x in 0..bw {
                    let o = (ch * oh + wy + y) * ow + wx + x;
                    dst[o] = dst[o] + lambda * part.data()[(ch * bh + y) * bw + x];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`fa_forward`]. Parameter keys are `weight`, `bias`,
/// `branch{k}.weight`, `branch{k}.bias`.
pub fn fa_backward<T: Real>(
    image: &Tensor<T>,
    main_kernels: &Tensor<T>,
    branches: &[Branch<'_, T>],
    geom: ConvGeometry,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<LayerGrad<T>> {
    let mut grad = nn::conv2d_backward_impl(image, main_kernels, geom, upstream, want_input)?;
    let &[m, oh, ow] = upstream.shape() else {
        return Err(Error::config("FA upstream gradient must be [m,H,W]"));
    };
    let &[c, h, w] = image.shape() else {
        return Err(Error::config("FA input must be [c,H,W]"));
    };
    for (k, b) in branches.iter().enumerate() {
        let kernel = b.kernels.shape()[2];
        let (wy, wx, bh, bw) = region_window(b.region, kernel, geom)
            .ok_or_else(|| Error::config(format!("branch {k} does not tile the main output")))?;
        let lambda = T::from_f64_lossy(b.region.lambda);
        let window = Tensor::from_fn(&[m, bh, bw], |i| {
            let (ch, rest) = (i / (bh * bw), i % (bh * bw));
            let (y, x) = (rest / bw, rest % bw);
            lambda * upstream.data()[(ch * oh + wy + y) * ow + wx + x]
        });
        let cropped = crop(image, b.region)?;
        let bg = nn::conv2d_backward_impl(&cropped, b.kernels, geom, &window, want_input)?;
        if want_input {
            let r = b.region;
            let dst = grad.input.data_mut();
            for ch in 0..c {
                for y in 0..r.height {
                    for x in 0..r.width {
                        let o = (ch * h + r.top + y) * w + r.left + x;
                        dst[o] = dst[o] + bg.input.data()[(ch * r.height + y) * r.width + x];
                    }
                }
            }
        }
        for (name, t) in bg.params {
            grad.params.insert(format!("branch{k}.{name}"), t);
        }
    }
    Ok(grad)
}

/// Named parameters of a network plus training bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<T: Real = f32> {
    pub spec: NetworkSpec,
    pub params: BTreeMap<String, Tensor<T>>,
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
pub struct ForwardCache<T: Real> {
    /// `inputs[i]` is the input to layer `i`.
    inputs: Vec<Tensor<T>>,
}

/// Parameter gradients keyed like [`NetworkState::params`].
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Seeded He-style uniform initialization: weights `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`, biases zero. Identical `(spec, seed)` pairs give
/// bit-identical states.
pub fn build<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<NetworkState<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for info in spec.params()? {
        let t = if info.name.ends_with("bias") {
            Tensor::zeros(&info.shape)
        } else {
            let bound = (6.0 / info.fan_in as f64).sqrt();
            Tensor::from_fn(&info.shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        };
        params.insert(info.name, t);
    }
    Ok(NetworkState {
        spec: spec.clone(),
        params,
        epoch: 0,
        seed,
        loss_history: Vec::new(),
    })
}

impl<T: Real> NetworkState<T> {
    /// Checks that parameter names and shapes match the spec exactly.
    pub fn check_params(&self) -> Result<()> {
        let expected = self.spec.params()?;
        if expected.len() != self.params.len() {
            return Err(Error::config(format!(
                "spec expects {} parameter tensors, state has {}",
                expected.len(),
                self.params.len()
            )));
        }
        for info in expected {
            let t = self
                .params
                .get(&info.name)
                .ok_or_else(|| Error::config(format!("missing parameter `{}`", info.name)))?;
            if t.shape() != info.shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter `{}` has shape {:?}, spec expects {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
        }
        Ok(())
    }

    fn param(&self, layer: usize, part: &str) -> &Tensor<T> {
        &self.params[&param_name(layer, part)]
    }

    fn branches(&self, layer: usize) -> Vec<Branch<'_, T>> {
        self.spec
            .regions
            .iter()
            .enumerate()
            .map(|(k, region)| Branch {
                kernels: &self.params[&branch_name(layer, k, "weight")],
                bias: &self.params[&branch_name(layer, k, "bias")],
                region,
            })
            .collect()
    }

    fn layer_forward(&self, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.spec.layers[i] {
            Layer::Conv { stride, padding, .. } => nn::conv2d_forward(
                x,
                self.param(i, "weight"),
                self.param(i, "bias"),
                ConvGeometry::new(*stride, *padding),
            ),
            Layer::FeatureFusion { stride, padding, .. } => fa_forward(
                x,
                self.param(i, "weight"),
                self.param(i, "bias"),
                &self.branches(i),
                ConvGeometry::new(*stride, *padding),
            ),
            Layer::Relu => Ok(nn::relu_forward(x)),
            Layer::MaxPool2 => nn::maxpool2x2_forward(x),
            Layer::Flatten => Ok(nn::flatten(x)),
            Layer::GlobalAvgPool => nn::global_avg_pool(x),
            Layer::Dense { .. } => nn::dense_forward(x, self.param(i, "weight"), self.param(i, "bias")),
            Layer::Attention => Ok(x.clone()),
        }
    }

    fn check_sample(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.spec.input {
            return Err(Error::config(format!(
                "sample shape {:?} does not match network input {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Logits of one `[c,H,W]` sample.
    pub fn forward_sample(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_sample(x)?;
        let mut h = x.clone();
        for i in 0..self.spec.layers.len() {
            h = self.layer_forward(i, &h)?;
        }
        Ok(h)
    }

    /// Logits plus the activations needed by [`NetworkState::backward_sample`].
    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_sample(x)?;
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut h = x.clone();
        for i in 0..self.spec.layers.len() {
            let next = self.layer_forward(i, &h)?;
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Which linear piece of the network `x` falls in: the sign of every
    /// ReLU input and the winner of every pooling window. Two inputs with
    /// equal patterns see the same affine map up to the logits.
    pub fn activation_pattern(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let (_, cache) = self.forward_cached(x)?;
        let mut pattern = Vec::new();
        for (layer, input) in self.spec.layers.iter().zip(&cache.inputs) {
            match layer {
                Layer::Relu => pattern.extend(input.data().iter().map(|&v| usize::from(v > T::zero()))),
                Layer::MaxPool2 => {
                    let &[c, h, w] = input.shape() else {
                        return Err(Error::config("maxpool input must be [c,H,W]"));
                    };
                    pattern.extend(nn::pool_argmax(input, c, h, w));
                }
                _ => {}
            }
        }
        Ok(pattern)
    }

    /// Parameter gradients for one sample given `dL/dlogits`.
    pub fn backward_sample(&self, cache: &ForwardCache<T>, d_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = BTreeMap::new();
        let mut g = d_logits.clone();
        for i in (0..self.spec.layers.len()).rev() {
            let x = &cache.inputs[i];
            let want_input = i > 0;
            let lg = match &self.spec.layers[i] {
                Layer::Conv { stride, padding, .. } => nn::conv2d_backward_impl(
                    x,
                    self.param(i, "weight"),
                    ConvGeometry::new(*stride, *padding),
                    &g,
                    want_input,
                )?,
                Layer::FeatureFusion { stride, padding, .. } => fa_backward(
                    x,
                    self.param(i, "weight"),
                    &self.branches(i),
                    ConvGeometry::new(*stride, *padding),
                    &g,
                    want_input,
                )?,
                Layer::Relu => nn::relu_backward(x, &g)?,
                Layer::MaxPool2 => nn::maxpool2x2_backward(x, &g)?,
                Layer::Flatten => LayerGrad {
                    params: BTreeMap::new(),
                    input: g.clone().reshape(x.shape())?,
                },
                Layer::GlobalAvgPool => nn::global_avg_pool_backward(x, &g)?,
                Layer::Dense { .. } => nn::dense_backward(x, self.param(i, "weight"), &g)?,
                Layer::Attention => LayerGrad {
                    params: BTreeMap::new(),
                    input: g.clone(),
                },
            };
            for (name, t) in lg.params {
                grads.insert(format!("{i:02}.{name}"), t);
            }
            g = lg.input;
        }
        Ok(grads)
    }

    /// Logits `[B, C]` for a batch `[B, c, H, W]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let samples = split_batch(batch, self.spec.input)?;
        let mut out = Vec::with_capacity(samples.len() * self.spec.classes);
        for x in &samples {
            out.extend_from_slice(self.forward_sample(x)?.data());
        }
        Tensor::new(vec![samples.len(), self.spec.classes], out)
    }

    /// Gradients of `sum_b <upstream[b], logits[b]>` summed over the batch.
    pub fn backward(&self, batch: &Tensor<T>, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let samples = split_batch(batch, self.spec.input)?;
        upstream.expect_shape(&[samples.len(), self.spec.classes], "network upstream gradient")?;
        let mut total: Option<Gradients<T>> = None;
        for (b, x) in samples.iter().enumerate() {
            let (_, cache) = self.forward_cached(x)?;
            let c = self.spec.classes;
            let d = Tensor::new(vec![c], upstream.data()[b * c..(b + 1) * c].to_vec())?;
            let g = self.backward_sample(&cache, &d)?;
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => accumulate(acc, &g)?,
            }
        }
        total.ok_or_else(|| Error::input("empty batch"))
    }

    pub fn cast<U: Real>(&self) -> NetworkState<U> {
        NetworkState {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            epoch: self.epoch,
            seed: self.seed,
            loss_history: self.loss_history.clone(),
        }
    }
}

/// `acc += g`, key by key.
pub fn accumulate<T: Real>(acc: &mut Gradients<T>, g: &Gradients<T>) -> Result<()> {
    for (name, t) in g {
        acc.get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient `{name}` has no accumulator")))?
            .add_scaled(t, T::one())?;
    }
    Ok(())
}

/// Splits `[B, c, H, W]` into `B` samples of shape `input`.
pub fn split_batch<T: Real>(batch: &Tensor<T>, input: [usize; 3]) -> Result<Vec<Tensor<T>>> {
    if batch.ndim() != 4 || batch.shape()[1..] != input {
        return Err(Error::config(format!(
            "batch shape {:?} does not match network input {input:?}",
            batch.shape()
        )));
    }
    let per: usize = input.iter().product();
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::new(input.to_vec(), c.to_vec()))
        .collect()
}
