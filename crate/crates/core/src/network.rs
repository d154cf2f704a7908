//! The two Tiny-YOLOv3 layer tables and the forward pass.
//!
//! The three-scale network extends the standard two-scale trunk with a second
//! upsampling branch that taps the 52x52 (stride 8) trunk feature:
//!
//! ```text
//!  0 conv 16 3x3        8 conv 256 3x3       16 yolo @ stride 32     24 route 21
//!  1 maxpool 2/2        9 maxpool 2/2        17 route 13             25 conv 64 1x1
//!  2 conv 32 3x3       10 conv 512 3x3       18 conv 128 1x1         26 upsample x2
//!  3 maxpool 2/2       11 maxpool 2/1        19 upsample x2          27 route 26, 6
//!  4 conv 64 3x3       12 conv 1024 3x3      20 route 19, 8          28 conv 128 3x3
//!  5 maxpool 2/2       13 conv 256 1x1       21 conv 256 3x3         29 conv B(5+C) 1x1
//!  6 conv 128 3x3      14 conv 512 3x3       22 conv B(5+C) 1x1      30 yolo @ stride 8
//!  7 maxpool 2/2       15 conv B(5+C) 1x1    23 yolo @ stride 16
//! ```
//!
//! The two-scale baseline is layers 0..=23.

use std::collections::HashMap;

use crate::config::cfg::{
    infer_shapes, route_referenced, ConvLayer, LayerDef, LayerKind, MaxpoolLayer, NetOptions, NetworkDef,
    RouteLayer, UpsampleLayer, YoloLayer,
};
use crate::config::weights::{check_params, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{concat_all, conv2d, maxpool, upsample_nearest, Activation, ConvParams, Tensor};

/// Default anchors in input pixels, ascending by area.
pub const DEFAULT_ANCHORS: [(f32, f32); 6] =
    [(10.0, 14.0), (23.0, 27.0), (37.0, 58.0), (81.0, 82.0), (135.0, 169.0), (344.0, 319.0)];

/// Training options of the drone detector; only the input geometry matters
/// for inference.
pub fn drone_net_options() -> NetOptions {
    NetOptions {
        batch: 64,
        subdivisions: 8,
        width: 416,
        height: 416,
        channels: 3,
        momentum: 0.9,
        decay: 0.0005,
        learning_rate: 0.001,
        max_batches: 50_000,
        extra: Vec::new(),
    }
}

/// One detection scale of a built network.
#[derive(Debug, Clone, PartialEq)]
pub struct YoloOutput {
    pub layer_index: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub stride: usize,
    /// This scale's anchors in input pixels.
    pub anchors: Vec<(f32, f32)>,
    /// Positions of those anchors in the network-wide anchor list.
    pub anchor_ids: Vec<usize>,
    pub classes: usize,
    pub input_w: usize,
    pub input_h: usize,
}

/// Raw (pre-activation) tensor entering one yolo layer.
#[derive(Debug, Clone)]
pub struct RawMap {
    pub scale: YoloOutput,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Most layer outputs held at once, counting the one being consumed.
    pub peak_live_tensors: usize,
    pub peak_live_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct BuiltNetwork {
    pub def: NetworkDef,
    pub params: ParamSet,
    folded: Vec<ConvParams>,
    conv_slot: HashMap<usize, usize>,
    yolo_outputs: Vec<YoloOutput>,
    /// For every cached layer output, the last route that reads it.
    last_use: HashMap<usize, usize>,
}

fn conv(filters: usize, size: usize, stride: usize, bn: bool, activation: Activation) -> LayerDef {
    LayerDef::new(LayerKind::Convolutional(ConvLayer {
        filters,
        size,
        stride,
        padding: size / 2,
        batch_normalize: bn,
        activation,
    }))
}

fn leaky(filters: usize, size: usize) -> LayerDef {
    conv(filters, size, 1, true, Activation::Leaky)
}

fn detector(filters: usize) -> LayerDef {
    conv(filters, 1, 1, false, Activation::Linear)
}

fn pool(stride: usize) -> LayerDef {
    LayerDef::new(LayerKind::Maxpool(MaxpoolLayer { size: 2, stride, padding: 1 }))
}

fn route(layers: &[isize]) -> LayerDef {
    LayerDef::new(LayerKind::Route(RouteLayer { layers: layers.to_vec() }))
}

fn upsample() -> LayerDef {
    LayerDef::new(LayerKind::Upsample(UpsampleLayer { factor: 2 }))
}

fn yolo(mask: &[usize], anchors: &[(f32, f32)], classes: usize) -> LayerDef {
    LayerDef::new(LayerKind::Yolo(YoloLayer { mask: mask.to_vec(), anchors: anchors.to_vec(), classes }))
}

fn check_anchors(anchors: &[(f32, f32)]) -> Result<()> {
    if anchors.len() != 6 {
        return Err(Error::Config(format!("expected 6 anchors, got {}", anchors.len())));
    }
    if anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(Error::Config("anchor sides must be positive".into()));
    }
    if anchors.windows(2).any(|p| p[0].0 * p[0].1 > p[1].0 * p[1].1) {
        return Err(Error::Config("anchors must be sorted ascending by area".into()));
    }
    Ok(())
}

fn trunk(head_filters: usize) -> Vec<LayerDef> {
    vec![
        leaky(16, 3),
        pool(2),
        leaky(32, 3),
        pool(2),
        leaky(64, 3),
        pool(2),
        leaky(128, 3),
        pool(2),
        leaky(256, 3),
        pool(2),
        leaky(512, 3),
        pool(1),
        leaky(1024, 3),
        leaky(256, 1),
        leaky(512, 3),
        detector(head_filters),
    ]
}

/// Layer table of the two-scale baseline (24 layers, 3 anchors per scale).
pub fn baseline_tiny_def(classes: usize, anchors: &[(f32, f32)]) -> Result<NetworkDef> {
    check_anchors(anchors)?;
    if classes == 0 {
        return Err(Error::Config("classes must be >= 1".into()));
    }
    let filters = 3 * (5 + classes);
    let mut layers = trunk(filters);
    layers.extend([
        yolo(&[3, 4, 5], anchors, classes),
        route(&[-4]),
        leaky(128, 1),
        upsample(),
        route(&[-1, 8]),
        leaky(256, 3),
        detector(filters),
        yolo(&[0, 1, 2], anchors, classes),
    ]);
    infer_shapes(NetworkDef { net: drone_net_options(), layers })
}

/// Layer table of the three-scale network (31 layers, 2 anchors per scale).
pub fn custom_tiny_def(classes: usize, anchors: &[(f32, f32)]) -> Result<NetworkDef> {
    check_anchors(anchors)?;
    if classes == 0 {
        return Err(Error::Config("classes must be >= 1".into()));
    }
    let filters = 2 * (5 + classes);
    let mut layers = trunk(filters);
    layers.extend([
        yolo(&[4, 5], anchors, classes),
        route(&[-4]),
        leaky(128, 1),
        upsample(),
        route(&[-1, 8]),
        leaky(256, 3),
        detector(filters),
        yolo(&[2, 3], anchors, classes),
        route(&[-3]),
        leaky(64, 1),
        upsample(),
        route(&[-1, 6]),
        leaky(128, 3),
        detector(filters),
        yolo(&[0, 1], anchors, classes),
    ]);
    infer_shapes(NetworkDef { net: drone_net_options(), layers })
}

/// Three-scale network with zero parameters.
pub fn build_custom_tiny(classes: usize, anchors: &[(f32, f32)]) -> Result<BuiltNetwork> {
    let def = custom_tiny_def(classes, anchors)?;
    let params = ParamSet::zeros(&def)?;
    BuiltNetwork::new(def, params)
}

/// Two-scale baseline with zero parameters.
pub fn build_baseline_tiny(classes: usize, anchors: &[(f32, f32)]) -> Result<BuiltNetwork> {
    let def = baseline_tiny_def(classes, anchors)?;
    let params = ParamSet::zeros(&def)?;
    BuiltNetwork::new(def, params)
}

impl BuiltNetwork {
    /// Pairs a definition (shapes are inferred if missing) with parameters.
    /// Batch-norm is folded into the conv weights here, once.
    pub fn new(def: NetworkDef, params: ParamSet) -> Result<Self> {
        let def = if def.layers.iter().all(|l| l.out_shape.is_some()) { def } else { infer_shapes(def)? };
        check_params(&def, &params.convs)?;
        let folded = params.convs.iter().map(ConvParams::fold_batch_norm).collect();
        let conv_slot = def.conv_layers().enumerate().map(|(slot, (i, _))| (i, slot)).collect();

        let input_w = def.net.width;
        let input_h = def.net.height;
        let yolo_outputs = def
            .yolo_layers()
            .map(|(i, y)| {
                let shape = def.layers[i].out_shape.expect("inferred");
                if input_w % shape.width != 0 || input_h / shape.height != input_w / shape.width {
                    return Err(Error::Shape(format!(
                        "yolo layer {i}: grid {}x{} does not evenly divide input {input_w}x{input_h}",
                        shape.width, shape.height
                    )));
                }
                Ok(YoloOutput {
                    layer_index: i,
                    grid_w: shape.width,
                    grid_h: shape.height,
                    stride: input_w / shape.width,
                    anchors: y.masked_anchors(),
                    anchor_ids: y.mask.clone(),
                    classes: y.classes,
                    input_w,
                    input_h,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let referenced = route_referenced(&def)?;
        let mut last_use = HashMap::new();
        for (i, l) in def.layers.iter().enumerate() {
            if matches!(l.kind, LayerKind::Route(_)) {
                for s in def.route_sources(i)? {
                    let e = last_use.entry(s).or_insert(i);
                    *e = (*e).max(i);
                }
            }
        }
        debug_assert_eq!(referenced.len(), last_use.len());

        Ok(BuiltNetwork { def, params, folded, conv_slot, yolo_outputs, last_use })
    }

    /// Replaces the parameters, keeping the definition.
    pub fn with_params(self, params: ParamSet) -> Result<Self> {
        BuiltNetwork::new(self.def, params)
    }

    pub fn yolo_outputs(&self) -> &[YoloOutput] {
        &self.yolo_outputs
    }

    /// Every anchor of the network, indexed by the yolo `mask` values.
    pub fn all_anchors(&self) -> Vec<(f32, f32)> {
        self.def.yolo_layers().next().map(|(_, y)| y.anchors.clone()).unwrap_or_default()
    }

    pub fn classes(&self) -> usize {
        self.yolo_outputs.first().map_or(0, |y| y.classes)
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [1, self.def.net.channels, self.def.net.height, self.def.net.width]
    }

    /// Folded parameters of the conv at layer `index`.
    pub fn conv_params(&self, index: usize) -> Option<&ConvParams> {
        self.conv_slot.get(&index).map(|&s| &self.folded[s])
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.dims() != self.input_dims() {
            return Err(Error::Shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_dims(),
                image.dims()
            )));
        }
        Ok(())
    }

    fn run_layer(&self, index: usize, input: &Tensor, cache: &HashMap<usize, Tensor>) -> Result<Tensor> {
        match &self.def.layers[index].kind {
            LayerKind::Convolutional(_) => conv2d(input, &self.folded[self.conv_slot[&index]]),
            LayerKind::Maxpool(m) => maxpool(input, m.size, m.stride, m.padding),
            LayerKind::Upsample(u) => upsample_nearest(input, u.factor),
            LayerKind::Yolo(_) => Ok(input.clone()),
            LayerKind::Route(_) => {
                let sources = self.def.route_sources(index)?;
                let parts: Vec<&Tensor> = sources
                    .iter()
                    .map(|s| {
                        if *s + 1 == index {
                            input
                        } else {
                            cache.get(s).expect("route source retained")
                        }
                    })
                    .collect();
                if parts.len() == 1 {
                    Ok(parts[0].clone())
                } else {
                    concat_all(&parts)
                }
            }
        }
    }

    /// Runs the network on one image and returns the raw map entering each
    /// yolo layer, in layer order.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<RawMap>> {
        self.forward_with_stats(image).map(|(maps, _)| maps)
    }

    /// [`forward`](Self::forward), also reporting how many layer outputs were
    /// alive at the peak. Outputs are cached only while a later route still
    /// needs them.
    pub fn forward_with_stats(&self, image: &Tensor) -> Result<(Vec<RawMap>, ForwardStats)> {
        self.check_input(image)?;
        let mut cache: HashMap<usize, Tensor> = HashMap::new();
        let mut stats = ForwardStats::default();
        let mut maps = Vec::with_capacity(self.yolo_outputs.len());
        let mut yolo_iter = self.yolo_outputs.iter();
        let mut current = image.clone();

        for index in 0..self.def.layers.len() {
            let out = self.run_layer(index, &current, &cache)?;
            if let LayerKind::Yolo(_) = self.def.layers[index].kind {
                let scale = yolo_iter.next().expect("one output per yolo layer").clone();
                maps.push(RawMap { scale, tensor: current.clone() });
            }
            cache.retain(|src, _| self.last_use[src] > index);
            if self.last_use.get(&index).is_some_and(|&last| last > index + 1) {
                cache.insert(index, out.clone());
            }
            let live = cache.len() + 2;
            let bytes = cache.values().map(Tensor::nbytes).sum::<usize>() + current.nbytes() + out.nbytes();
            stats.peak_live_tensors = stats.peak_live_tensors.max(live);
            stats.peak_live_bytes = stats.peak_live_bytes.max(bytes);
            current = out;
        }
        Ok((maps, stats))
    }

    /// Output of every layer, nothing evicted. Meant for inspection and tests.
    pub fn forward_all(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.def.layers.len());
        let mut cache = HashMap::new();
        for index in 0..self.def.layers.len() {
            let input = if index == 0 { image } else { &outputs[index - 1] };
            if let LayerKind::Route(_) = self.def.layers[index].kind {
                for s in self.def.route_sources(index)? {
                    cache.insert(s, outputs[s].clone());
                }
            }
            let out = self.run_layer(index, input, &cache)?;
            outputs.push(out);
        }
        Ok(outputs)
    }
}
