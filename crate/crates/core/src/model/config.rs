//! Declarative network descriptions and the builtin architectures.
//!
//! Text format, one layer per line, `#` starts a comment:
//!
//! ```text
//! network name=hope_input classes=10 input=3x32x32
//! hope_projection kernel=3 maps=20 stride=1 pad=1
//! conv kernel=3 maps=64 stride=1 pad=1
//! batchnorm
//! relu
//! dropout rate=0.3
//! maxpool size=2 stride=2
//! dense units=512
//! softmax_ce
//! ```
//!
//! Conv and projection lines accept an optional `in=` key; when present it
//! is checked against the inferred input channel count.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        maps: usize,
        stride: usize,
        pad: usize,
        in_channels: Option<usize>,
    },
    /// Bias-free linear projection; `constrained` selects HOPE (penalized) vs LIN.
    Projection {
        kernel: usize,
        maps: usize,
        stride: usize,
        pad: usize,
        in_channels: Option<usize>,
        constrained: bool,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    BatchNorm,
    Relu,
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    SoftmaxCe,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Projection {
                constrained: true, ..
            } => "hope_projection",
            LayerSpec::Projection {
                constrained: false, ..
            } => "lin_projection",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxCe => "softmax_ce",
        }
    }

    pub fn constrained(&self) -> bool {
        matches!(
            self,
            LayerSpec::Projection {
                constrained: true,
                ..
            }
        )
    }

    fn conv(maps: usize) -> Self {
        LayerSpec::Conv {
            kernel: 3,
            maps,
            stride: 1,
            pad: 1,
            in_channels: None,
        }
    }

    fn pool() -> Self {
        LayerSpec::MaxPool { size: 2, stride: 2 }
    }

    fn input_projection(constrained: bool) -> Self {
        LayerSpec::Projection {
            kernel: 3,
            maps: 20,
            stride: 1,
            pad: 1,
            in_channels: None,
            constrained,
        }
    }

    fn pooling_projection(maps: usize, constrained: bool) -> Self {
        LayerSpec::Projection {
            kernel: 2,
            maps,
            stride: 2,
            pad: 0,
            in_channels: None,
            constrained,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub name: String,
    pub num_classes: usize,
    /// Input (channels, height, width).
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// The seven builtin architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Baseline,
    HopeInput,
    LinInput,
    HopePooling,
    LinPooling,
    HopeBoth,
    LinBoth,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Baseline,
        Architecture::HopeInput,
        Architecture::LinInput,
        Architecture::HopePooling,
        Architecture::LinPooling,
        Architecture::HopeBoth,
        Architecture::LinBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::HopeInput => "hope_input",
            Architecture::LinInput => "lin_input",
            Architecture::HopePooling => "hope_pooling",
            Architecture::LinPooling => "lin_pooling",
            Architecture::HopeBoth => "hope_both",
            Architecture::LinBoth => "lin_both",
        }
    }

    fn input_projection(self) -> Option<bool> {
        match self {
            Architecture::HopeInput | Architecture::HopeBoth => Some(true),
            Architecture::LinInput | Architecture::LinBoth => Some(false),
            _ => None,
        }
    }

    fn pooling_projection(self) -> Option<bool> {
        match self {
            Architecture::HopePooling | Architecture::HopeBoth => Some(true),
            Architecture::LinPooling | Architecture::LinBoth => Some(false),
            _ => None,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel widths of the five VGG-style blocks.
const BLOCK_MAPS: [usize; 5] = [64, 128, 256, 512, 512];

/// Full 13-conv stack for CIFAR-sized input.
pub fn builtin_config(arch: Architecture, num_classes: usize) -> NetworkConfig {
    stacked_config(arch, num_classes, BLOCK_MAPS.len())
}

/// Builtin stack truncated to the first `blocks` conv blocks (1..=5),
/// keeping the dense 512 head. Used for desk-scale experiments.
pub fn stacked_config(arch: Architecture, num_classes: usize, blocks: usize) -> NetworkConfig {
    let blocks = blocks.clamp(1, BLOCK_MAPS.len());
    let mut layers = Vec::new();
    if let Some(constrained) = arch.input_projection() {
        layers.push(LayerSpec::input_projection(constrained));
    }
    for (b, &maps) in BLOCK_MAPS.iter().take(blocks).enumerate() {
        // blocks 1-2 are conv pairs, blocks 3-5 conv triples; every conv
        // except the last of its block carries dropout
        let convs = if b < 2 { 2 } else { 3 };
        let rate = if b == 0 { 0.3 } else { 0.4 };
        for c in 0..convs {
            layers.push(LayerSpec::conv(maps));
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Relu);
            if c + 1 < convs {
                layers.push(LayerSpec::Dropout { rate });
            }
        }
        match (b, arch.pooling_projection()) {
            (0, Some(constrained)) => layers.push(LayerSpec::pooling_projection(maps, constrained)),
            _ => layers.push(LayerSpec::pool()),
        }
    }
    layers.extend([
        LayerSpec::Dense { units: 512 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense { units: num_classes },
        LayerSpec::SoftmaxCe,
    ]);
    let name = if blocks == BLOCK_MAPS.len() {
        arch.name().to_string()
    } else {
        format!("{}_b{blocks}", arch.name())
    };
    NetworkConfig {
        name,
        num_classes,
        input: [3, 32, 32],
        layers,
    }
}

/// Output shape (C, H, W) after one layer, or a description of why the
/// layer cannot accept `input`.
fn layer_output(spec: &LayerSpec, input: [usize; 3]) -> std::result::Result<[usize; 3], String> {
    let [c, h, w] = input;
    let window = |k: usize, s: usize, p: usize| -> std::result::Result<(usize, usize), String> {
        if k == 0 || s == 0 {
            return Err("kernel and stride must be >= 1".into());
        }
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        if ph < k || pw < k || !(ph - k).is_multiple_of(s) || !(pw - k).is_multiple_of(s) {
            return Err(format!(
                "{h}x{w} input (pad {p}) does not tile with kernel {k} stride {s}"
            ));
        }
        Ok(((ph - k) / s + 1, (pw - k) / s + 1))
    };
    let check_in = |declared: Option<usize>| match declared {
        Some(d) if d != c => Err(format!("declares {d} input channels but receives {c}")),
        _ => Ok(()),
    };
    match *spec {
        LayerSpec::Conv {
            kernel,
            maps,
            stride,
            pad,
            in_channels,
        } => {
            check_in(in_channels)?;
            if maps == 0 {
                return Err("maps must be >= 1".into());
            }
            let (ho, wo) = window(kernel, stride, pad)?;
            Ok([maps, ho, wo])
        }
        LayerSpec::Projection {
            kernel,
            maps,
            stride,
            pad,
            in_channels,
            ..
        } => {
            check_in(in_channels)?;
            if maps == 0 || maps >= kernel * kernel * c {
                return Err(format!(
                    "projection needs 1 <= maps < kernel·kernel·channels = {}, got {maps}",
                    kernel * kernel * c
                ));
            }
            let (ho, wo) = window(kernel, stride, pad)?;
            Ok([maps, ho, wo])
        }
        LayerSpec::MaxPool { size, stride } => {
            let (ho, wo) = window(size, stride, 0)?;
            Ok([c, ho, wo])
        }
        LayerSpec::BatchNorm | LayerSpec::Relu => Ok(input),
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(format!("dropout rate {rate} outside [0, 1)"));
            }
            Ok(input)
        }
        LayerSpec::Dense { units } => {
            if units == 0 {
                return Err("units must be >= 1".into());
            }
            Ok([units, 1, 1])
        }
        LayerSpec::SoftmaxCe => Ok(input),
    }
}

impl NetworkConfig {
    /// Symbolic shape pass: the (C, H, W) produced by every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input dims must be >= 1, got {:?}",
                self.input
            )));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len().checked_sub(1);
        for (index, spec) in self.layers.iter().enumerate() {
            let err = |message: String| Error::Config {
                index,
                kind: spec.kind().to_string(),
                message,
            };
            if *spec == LayerSpec::SoftmaxCe {
                if Some(index) != last {
                    return Err(err("softmax_ce must be the final layer".into()));
                }
                if shape != [self.num_classes, 1, 1] {
                    return Err(err(format!(
                        "input shape {}x{}x{} vs expected {}x1x1 class scores",
                        shape[0], shape[1], shape[2], self.num_classes
                    )));
                }
            }
            shape = layer_output(spec, shape).map_err(|m| {
                err(format!(
                    "input shape {}x{}x{}: {m}",
                    shape[0], shape[1], shape[2]
                ))
            })?;
            out.push(shape);
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxCe) {
            return Err(Error::Config {
                index: self.layers.len().saturating_sub(1),
                kind: self.layers.last().map_or("none", |l| l.kind()).to_string(),
                message: "network must end with softmax_ce".into(),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Validated copy with every conv and projection `in_channels` filled in.
    pub fn canonical(&self) -> Result<Self> {
        let shapes = self.shapes()?;
        let mut out = self.clone();
        let mut channels = self.input[0];
        for (spec, shape) in out.layers.iter_mut().zip(shapes) {
            if let LayerSpec::Conv { in_channels, .. } | LayerSpec::Projection { in_channels, .. } =
                spec
            {
                *in_channels = Some(channels);
            }
            channels = shape[0];
        }
        Ok(out)
    }

    /// Number of orthogonality-penalized layers.
    pub fn constrained_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.constrained()).count()
    }

    /// Serializes to the line-oriented text format, with explicit input
    /// channels and a shape comment on every line.
    pub fn to_text(&self) -> String {
        let shapes = self.shapes().ok();
        let mut s = String::new();
        let _ = writeln!(s, "# {} ({} classes)", self.name, self.num_classes);
        let _ = writeln!(
            s,
            "network name={} classes={} input={}x{}x{}",
            self.name, self.num_classes, self.input[0], self.input[1], self.input[2]
        );
        let mut channels = self.input[0];
        for (i, spec) in self.layers.iter().enumerate() {
            let line = match *spec {
                LayerSpec::Conv {
                    kernel,
                    maps,
                    stride,
                    pad,
                    ..
                } => format!(
                    "conv in={channels} kernel={kernel} maps={maps} stride={stride} pad={pad}"
                ),
                LayerSpec::Projection {
                    kernel,
                    maps,
                    stride,
                    pad,
                    ..
                } => format!(
                    "{} in={channels} kernel={kernel} maps={maps} stride={stride} pad={pad}",
                    spec.kind()
                ),
                LayerSpec::MaxPool { size, stride } => {
                    format!("maxpool size={size} stride={stride}")
                }
                LayerSpec::Dropout { rate } => format!("dropout rate={rate}"),
                LayerSpec::Dense { units } => format!("dense units={units}"),
                _ => spec.kind().to_string(),
            };
            match shapes.as_ref().map(|v| v[i]) {
                Some([c, h, w]) => {
                    let _ = writeln!(s, "{line:<56} # -> {c}x{h}x{w}");
                    channels = c;
                }
                None => {
                    let _ = writeln!(s, "{line}");
                }
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header: Option<(String, usize, [usize; 3])> = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                line: lineno + 1,
                message,
            };
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap_or_default();
            let mut kv = Vec::new();
            for w in words {
                let (k, v) = w
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, got `{w}`")))?;
                kv.push((k, v));
            }
            let get = |key: &str| kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
            let num = |key: &str, default: Option<usize>| -> Result<usize> {
                match get(key) {
                    Some(v) => v
                        .parse()
                        .map_err(|_| err(format!("`{key}` must be an integer, got `{v}`"))),
                    None => default.ok_or_else(|| err(format!("{kind}: missing `{key}`"))),
                }
            };
            let allowed: &[&str] = match kind {
                "network" => &["name", "classes", "input"],
                "conv" | "hope_projection" | "lin_projection" => {
                    &["in", "kernel", "maps", "stride", "pad"]
                }
                "maxpool" => &["size", "stride"],
                "dropout" => &["rate"],
                "dense" => &["units"],
                _ => &[],
            };
            if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(k)) {
                return Err(err(format!("{kind}: unknown key `{k}`")));
            }
            let spec = match kind {
                "network" => {
                    if header.is_some() || !layers.is_empty() {
                        return Err(err("`network` line must come first and only once".into()));
                    }
                    let name = get("name").unwrap_or("custom").to_string();
                    let classes = num("classes", None)?;
                    let input = match get("input") {
                        None => [3, 32, 32],
                        Some(v) => {
                            let dims: Vec<usize> = v
                                .split('x')
                                .map(|d| {
                                    d.parse().map_err(|_| err(format!("bad input dims `{v}`")))
                                })
                                .collect::<Result<_>>()?;
                            <[usize; 3]>::try_from(dims)
                                .map_err(|_| err(format!("input must be CxHxW, got `{v}`")))?
                        }
                    };
                    header = Some((name, classes, input));
                    continue;
                }
                "conv" => LayerSpec::Conv {
                    kernel: num("kernel", None)?,
                    maps: num("maps", None)?,
                    stride: num("stride", Some(1))?,
                    pad: num("pad", Some(0))?,
                    in_channels: get("in").map(|_| num("in", None)).transpose()?,
                },
                "hope_projection" | "lin_projection" => LayerSpec::Projection {
                    kernel: num("kernel", None)?,
                    maps: num("maps", None)?,
                    stride: num("stride", Some(1))?,
                    pad: num("pad", Some(0))?,
                    in_channels: get("in").map(|_| num("in", None)).transpose()?,
                    constrained: kind == "hope_projection",
                },
                "maxpool" => LayerSpec::MaxPool {
                    size: num("size", None)?,
                    stride: num("stride", None)?,
                },
                "batchnorm" => LayerSpec::BatchNorm,
                "relu" => LayerSpec::Relu,
                "dropout" => {
                    let v = get("rate").ok_or_else(|| err("dropout: missing `rate`".into()))?;
                    LayerSpec::Dropout {
                        rate: v
                            .parse()
                            .map_err(|_| err(format!("bad dropout rate `{v}`")))?,
                    }
                }
                "dense" => LayerSpec::Dense {
                    units: num("units", None)?,
                },
                "softmax_ce" => LayerSpec::SoftmaxCe,
                other => return Err(err(format!("unknown layer kind `{other}`"))),
            };
            layers.push(spec);
        }
        let (name, num_classes, input) = header.ok_or_else(|| Error::ConfigParse {
            line: 0,
            message: "missing `network` header line".into(),
        })?;
        let cfg = NetworkConfig {
            name,
            num_classes,
            input,
            layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
