//! Darknet `.cfg` network descriptions.
//!
//! A file is a sequence of `[section]` headers, each followed by `key=value`
//! lines. `#` and `;` start comments. The first section must be `[net]`; every
//! later section is one layer. Keys this crate does not interpret are kept in
//! order as opaque pairs so a parse/render cycle loses nothing.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{maxpool_output_len, Activation};

/// Opaque `key=value` pairs preserved from the source text.
pub type Extras = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct NetOptions {
    pub batch: usize,
    pub subdivisions: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub momentum: f32,
    pub decay: f32,
    pub learning_rate: f32,
    pub max_batches: usize,
    pub extra: Extras,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            batch: 1,
            subdivisions: 1,
            width: 416,
            height: 416,
            channels: 3,
            momentum: 0.9,
            decay: 0.0005,
            learning_rate: 0.001,
            max_batches: 0,
            extra: Vec::new(),
        }
    }
}

impl NetOptions {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) {
            return Err(Error::Validation(format!(
                "network input {}x{} must be a positive multiple of 32 on both axes",
                self.width, self.height
            )));
        }
        if self.channels == 0 {
            return Err(Error::Validation("network channels must be >= 1".into()));
        }
        if self.subdivisions == 0 || self.batch < self.subdivisions {
            return Err(Error::Validation(format!(
                "need batch >= subdivisions >= 1, got batch={} subdivisions={}",
                self.batch, self.subdivisions
            )));
        }
        Ok(())
    }
}

/// Output shape of a layer, (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    /// Zero padding per side, in pixels.
    pub padding: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxpoolLayer {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteLayer {
    /// As written: negative values are offsets from the route layer itself.
    pub layers: Vec<isize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleLayer {
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YoloLayer {
    pub mask: Vec<usize>,
    /// Every anchor of the network in input pixels; `mask` picks this layer's.
    pub anchors: Vec<(f32, f32)>,
    pub classes: usize,
}

impl YoloLayer {
    pub fn masked_anchors(&self) -> Vec<(f32, f32)> {
        self.mask.iter().map(|&m| self.anchors[m]).collect()
    }

    /// Channels the preceding conv must produce: anchors x (5 + classes).
    pub fn expected_channels(&self) -> usize {
        self.mask.len() * (5 + self.classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolutional(ConvLayer),
    Maxpool(MaxpoolLayer),
    Route(RouteLayer),
    Upsample(UpsampleLayer),
    Yolo(YoloLayer),
}

impl LayerKind {
    pub fn section_name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional(_) => "convolutional",
            LayerKind::Maxpool(_) => "maxpool",
            LayerKind::Route(_) => "route",
            LayerKind::Upsample(_) => "upsample",
            LayerKind::Yolo(_) => "yolo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub kind: LayerKind,
    /// Filled in by [`infer_shapes`].
    pub out_shape: Option<Shape>,
    pub extra: Extras,
}

impl LayerDef {
    pub fn new(kind: LayerKind) -> Self {
        LayerDef { kind, out_shape: None, extra: Vec::new() }
    }
}

/// Layer counts by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Census {
    pub conv: usize,
    pub yolo: usize,
    pub maxpool: usize,
    pub route: usize,
    pub upsample: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.conv + self.yolo + self.maxpool + self.route + self.upsample
    }
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conv={} yolo={} maxpool={} route={} upsample={} total={}",
            self.conv,
            self.yolo,
            self.maxpool,
            self.route,
            self.upsample,
            self.total()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub net: NetOptions,
    pub layers: Vec<LayerDef>,
}

impl NetworkDef {
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.net.channels, self.net.height, self.net.width)
    }

    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Convolutional(_) => c.conv += 1,
                LayerKind::Maxpool(_) => c.maxpool += 1,
                LayerKind::Route(_) => c.route += 1,
                LayerKind::Upsample(_) => c.upsample += 1,
                LayerKind::Yolo(_) => c.yolo += 1,
            }
        }
        c
    }

    /// Absolute indices of the layers a route at `index` reads from.
    pub fn route_sources(&self, index: usize) -> Result<Vec<usize>> {
        let LayerKind::Route(route) = &self.layers[index].kind else {
            return Err(Error::Config(format!("layer {index} is not a route")));
        };
        if route.layers.is_empty() {
            return Err(Error::Shape(format!("route layer {index} has no sources")));
        }
        route
            .layers
            .iter()
            .map(|&l| {
                let abs = if l < 0 { index as isize + l } else { l };
                if abs < 0 || abs as usize >= index {
                    Err(Error::Shape(format!(
                        "route layer {index} references layer {l}, which is not an earlier layer"
                    )))
                } else {
                    Ok(abs as usize)
                }
            })
            .collect()
    }

    /// Shape flowing into layer `index`: the previous layer's output, or the
    /// network input for layer 0. Requires inferred shapes.
    pub fn layer_input_shape(&self, index: usize) -> Result<Shape> {
        if index == 0 {
            return Ok(self.input_shape());
        }
        self.layers[index - 1]
            .out_shape
            .ok_or_else(|| Error::Shape(format!("layer {} has no inferred shape", index - 1)))
    }

    pub fn yolo_layers(&self) -> impl Iterator<Item = (usize, &YoloLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.kind {
            LayerKind::Yolo(y) => Some((i, y)),
            _ => None,
        })
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.kind {
            LayerKind::Convolutional(c) => Some((i, c)),
            _ => None,
        })
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<Entry> {
        let pos = self.entries.iter().position(|e| e.key == key)?;
        Some(self.entries.remove(pos))
    }

    fn num<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| Error::parse(e.line, format!("`{key}` expects a number, got `{}`", e.value))),
        }
    }

    fn opt_num<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| Error::parse(e.line, format!("`{key}` expects a number, got `{}`", e.value))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<(Vec<T>, usize)>> {
        let Some(e) = self.take(key) else {
            return Ok(None);
        };
        let values = e
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::parse(e.line, format!("`{key}` expects numbers, got `{s}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(Some((values, e.line)))
    }

    fn positive(&mut self, key: &str, default: usize) -> Result<usize> {
        let line = self.entries.iter().find(|e| e.key == key).map_or(self.line, |e| e.line);
        let v = self.num(key, default)?;
        if v == 0 {
            return Err(Error::parse(line, format!("`{key}` must be >= 1")));
        }
        Ok(v)
    }

    fn into_extras(self) -> Extras {
        self.entries.into_iter().map(|e| (e.key, e.value)).collect()
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split(['#', ';']).next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(line, format!("malformed section header `{content}`")))?
                .trim();
            sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected `key=value`, got `{content}`")))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::parse(line, "key/value pair before any section header"))?;
        let key = key.trim().to_string();
        if section.entries.iter().any(|e| e.key == key) {
            return Err(Error::parse(line, format!("duplicate key `{key}` in [{}]", section.name)));
        }
        section.entries.push(Entry { key, value: value.trim().to_string(), line });
    }
    Ok(sections)
}

fn parse_net(mut s: Section) -> Result<NetOptions> {
    let d = NetOptions::default();
    let net = NetOptions {
        batch: s.num("batch", d.batch)?,
        subdivisions: s.num("subdivisions", d.subdivisions)?,
        width: s.num("width", d.width)?,
        height: s.num("height", d.height)?,
        channels: s.num("channels", d.channels)?,
        momentum: s.num("momentum", d.momentum)?,
        decay: s.num("decay", d.decay)?,
        learning_rate: s.num("learning_rate", d.learning_rate)?,
        max_batches: s.num("max_batches", d.max_batches)?,
        extra: Vec::new(),
    };
    Ok(NetOptions { extra: s.into_extras(), ..net })
}

fn parse_layer(mut s: Section) -> Result<LayerDef> {
    let kind = match s.name.as_str() {
        "convolutional" => {
            let filters = s.positive("filters", 1)?;
            let size = s.positive("size", 1)?;
            let stride = s.positive("stride", 1)?;
            let pad_flag: usize = s.num("pad", 0)?;
            let explicit: Option<usize> = s.opt_num("padding")?;
            let padding = explicit.unwrap_or(if pad_flag != 0 { size / 2 } else { 0 });
            let batch_normalize = s.num::<usize>("batch_normalize", 0)? != 0;
            let activation = match s.take("activation") {
                None => Activation::Linear,
                Some(e) => e.value.parse().map_err(|msg| Error::parse(e.line, msg))?,
            };
            LayerKind::Convolutional(ConvLayer { filters, size, stride, padding, batch_normalize, activation })
        }
        "maxpool" => {
            let stride = s.positive("stride", 1)?;
            let size = s.positive("size", stride)?;
            let padding = s.num("padding", size - 1)?;
            LayerKind::Maxpool(MaxpoolLayer { size, stride, padding })
        }
        "route" => {
            let (layers, _) = s
                .list::<isize>("layers")?
                .ok_or_else(|| Error::parse(s.line, "[route] needs `layers`"))?;
            if layers.is_empty() {
                return Err(Error::parse(s.line, "[route] `layers` is empty"));
            }
            LayerKind::Route(RouteLayer { layers })
        }
        "upsample" => LayerKind::Upsample(UpsampleLayer { factor: s.positive("stride", 2)? }),
        "yolo" => {
            let classes = s.positive("classes", 1)?;
            let (flat, line) = s
                .list::<f32>("anchors")?
                .ok_or_else(|| Error::parse(s.line, "[yolo] needs `anchors`"))?;
            if flat.is_empty() || flat.len() % 2 != 0 {
                return Err(Error::parse(line, "`anchors` must hold (width, height) pairs"));
            }
            let anchors: Vec<(f32, f32)> = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            let num: usize = s.num("num", anchors.len())?;
            if num != anchors.len() {
                return Err(Error::parse(line, format!("`num={num}` but {} anchors listed", anchors.len())));
            }
            let mask = match s.list::<usize>("mask")? {
                Some((mask, mline)) => {
                    if let Some(&bad) = mask.iter().find(|&&m| m >= anchors.len()) {
                        return Err(Error::parse(
                            mline,
                            format!("mask index {bad} out of range for {} anchors", anchors.len()),
                        ));
                    }
                    mask
                }
                None => (0..anchors.len()).collect(),
            };
            if mask.is_empty() {
                return Err(Error::parse(s.line, "[yolo] `mask` is empty"));
            }
            LayerKind::Yolo(YoloLayer { mask, anchors, classes })
        }
        other => return Err(Error::parse(s.line, format!("unknown section [{other}]"))),
    };
    Ok(LayerDef { kind, out_shape: None, extra: s.into_extras() })
}

pub fn parse_cfg(text: &str) -> Result<NetworkDef> {
    let mut sections = split_sections(text)?.into_iter();
    let first = sections.next().ok_or_else(|| Error::parse(1, "missing [net] section"))?;
    if first.name != "net" && first.name != "network" {
        return Err(Error::parse(first.line, format!("first section must be [net], found [{}]", first.name)));
    }
    let net = parse_net(first)?;
    let layers = sections.map(parse_layer).collect::<Result<Vec<_>>>()?;
    Ok(NetworkDef { net, layers })
}

fn join<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders a definition back to `.cfg` text that [`parse_cfg`] reads back to
/// the same structure.
pub fn render_cfg(def: &NetworkDef) -> String {
    let mut out = String::new();
    let n = &def.net;
    let _ = writeln!(out, "[net]");
    let _ = writeln!(out, "batch={}", n.batch);
    let _ = writeln!(out, "subdivisions={}", n.subdivisions);
    let _ = writeln!(out, "width={}", n.width);
    let _ = writeln!(out, "height={}", n.height);
    let _ = writeln!(out, "channels={}", n.channels);
    let _ = writeln!(out, "momentum={}", n.momentum);
    let _ = writeln!(out, "decay={}", n.decay);
    let _ = writeln!(out, "learning_rate={}", n.learning_rate);
    let _ = writeln!(out, "max_batches={}", n.max_batches);
    for (k, v) in &n.extra {
        let _ = writeln!(out, "{k}={v}");
    }
    for layer in &def.layers {
        let _ = writeln!(out, "\n[{}]", layer.kind.section_name());
        match &layer.kind {
            LayerKind::Convolutional(c) => {
                if c.batch_normalize {
                    let _ = writeln!(out, "batch_normalize=1");
                }
                let _ = writeln!(out, "filters={}\nsize={}\nstride={}", c.filters, c.size, c.stride);
                if c.padding == c.size / 2 {
                    let _ = writeln!(out, "pad=1");
                } else {
                    let _ = writeln!(out, "padding={}", c.padding);
                }
                let _ = writeln!(out, "activation={}", c.activation);
            }
            LayerKind::Maxpool(m) => {
                let _ = writeln!(out, "size={}\nstride={}", m.size, m.stride);
                if m.padding != m.size - 1 {
                    let _ = writeln!(out, "padding={}", m.padding);
                }
            }
            LayerKind::Route(r) => {
                let _ = writeln!(out, "layers={}", join(&r.layers));
            }
            LayerKind::Upsample(u) => {
                let _ = writeln!(out, "stride={}", u.factor);
            }
            LayerKind::Yolo(y) => {
                let _ = writeln!(out, "mask={}", join(&y.mask));
                let anchors = y.anchors.iter().map(|(w, h)| format!("{w},{h}")).collect::<Vec<_>>().join(", ");
                let _ = writeln!(out, "anchors={anchors}");
                let _ = writeln!(out, "classes={}\nnum={}", y.classes, y.anchors.len());
            }
        }
        for (k, v) in &layer.extra {
            let _ = writeln!(out, "{k}={v}");
        }
    }
    out
}

/// Fills every layer's `out_shape` from the network input forward.
pub fn infer_shapes(mut def: NetworkDef) -> Result<NetworkDef> {
    def.net.validate()?;
    for i in 0..def.layers.len() {
        let input = def.layer_input_shape(i)?;
        let shape = match &def.layers[i].kind {
            LayerKind::Convolutional(c) => {
                let ph = input.height + 2 * c.padding;
                let pw = input.width + 2 * c.padding;
                if c.size > ph || c.size > pw {
                    return Err(Error::Shape(format!(
                        "layer {i}: {0}x{0} kernel larger than padded input {pw}x{ph}",
                        c.size
                    )));
                }
                Shape::new(c.filters, (ph - c.size) / c.stride + 1, (pw - c.size) / c.stride + 1)
            }
            LayerKind::Maxpool(m) => {
                let h = maxpool_output_len(input.height, m.size, m.stride, m.padding)
                    .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                let w = maxpool_output_len(input.width, m.size, m.stride, m.padding)
                    .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                Shape::new(input.channels, h, w)
            }
            LayerKind::Route(_) => {
                let sources = def.route_sources(i)?;
                let first = def.layers[sources[0]].out_shape.expect("earlier layer inferred");
                let mut channels = 0;
                for &s in &sources {
                    let shape = def.layers[s].out_shape.expect("earlier layer inferred");
                    if (shape.height, shape.width) != (first.height, first.width) {
                        return Err(Error::Shape(format!(
                            "route layer {i}: layer {} is {}x{} but layer {s} is {}x{}",
                            sources[0], first.width, first.height, shape.width, shape.height
                        )));
                    }
                    channels += shape.channels;
                }
                Shape::new(channels, first.height, first.width)
            }
            LayerKind::Upsample(u) => Shape::new(input.channels, input.height * u.factor, input.width * u.factor),
            LayerKind::Yolo(y) => {
                let prev_is_conv = i > 0 && matches!(def.layers[i - 1].kind, LayerKind::Convolutional(_));
                if !prev_is_conv {
                    return Err(Error::Shape(format!("yolo layer {i} must follow a convolutional layer")));
                }
                if input.channels != y.expected_channels() {
                    return Err(Error::Shape(format!(
                        "yolo layer {i}: preceding conv has {} filters, expected {} x (5 + {}) = {}",
                        input.channels,
                        y.mask.len(),
                        y.classes,
                        y.expected_channels()
                    )));
                }
                input
            }
        };
        def.layers[i].out_shape = Some(shape);
    }
    Ok(def)
}

/// Route sources that are read by some later layer, used to decide which
/// forward-pass outputs must be cached.
pub(crate) fn route_referenced(def: &NetworkDef) -> Result<HashSet<usize>> {
    let mut set = HashSet::new();
    for (i, l) in def.layers.iter().enumerate() {
        if matches!(l.kind, LayerKind::Route(_)) {
            set.extend(def.route_sources(i)?);
        }
    }
    Ok(set)
}
