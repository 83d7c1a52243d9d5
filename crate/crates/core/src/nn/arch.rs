//! Architecture descriptors and their canonical text form.
//!
//! The text form is what checkpoints store; `parse(to_text(a)) == a` and
//! the text of a parsed descriptor is byte-identical to its source.
//!
//! ```text
//! aird-arch 1
//! input 1 32 32
//! conv b0.conv 8 3 1 1
//! bn b0.bn
//! relu
//! maxpool 2
//! flatten
//! linear embed 64
//! classifier 16 0.35 16
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        name: String,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    Linear {
        name: String,
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub classes: usize,
    pub margin: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub classifier: ClassifierSpec,
}

/// A named parameter with its shape and initialization fan-in.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    ClassWeights,
}

pub const FORMAT_LINE: &str = "aird-arch 1";

/// Default additive angular margin and logit scale.
pub const DEFAULT_MARGIN: f64 = 0.35;
pub const DEFAULT_SCALE: f64 = 16.0;

impl Architecture {
    /// `blocks` conv→BN→relu→2×2-pool stages of 3×3 convolutions, then a
    /// linear embedding and a margin-softmax classifier.
    pub fn conv_stack(
        input: [usize; 3],
        channels: &[usize],
        embed_dim: usize,
        classes: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            layers.push(LayerSpec::Conv {
                name: format!("b{i}.conv"),
                out_channels: c,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::BatchNorm {
                name: format!("b{i}.bn"),
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { size: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            name: "embed".into(),
            out_features: embed_dim,
        });
        Self {
            input,
            layers,
            classifier: ClassifierSpec {
                classes,
                margin: DEFAULT_MARGIN,
                scale: DEFAULT_SCALE,
            },
        }
    }

    /// Four conv blocks on `size×size` inputs (32 by default).
    pub fn teacher(size: usize, classes: usize) -> Self {
        Self::conv_stack([1, size, size], &[8, 16, 32, 32], 64, classes)
    }

    /// Three conv blocks on `size×size` inputs (8 or 16).
    pub fn student(size: usize, classes: usize) -> Self {
        Self::conv_stack([1, size, size], &[16, 32, 64], 64, classes)
    }

    pub fn embed_dim(&self) -> Result<usize> {
        match self.output_shape()?.as_slice() {
            [d] => Ok(*d),
            s => Err(Error::Format(format!(
                "architecture ends in shape {s:?}, expected a flat embedding"
            ))),
        }
    }

    /// Per-sample activation shape after every layer, validating geometry.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match (layer, shape.as_slice()) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        name,
                    },
                    [_, h, w],
                ) => {
                    if *kernel == 0
                        || *stride == 0
                        || h + 2 * pad < *kernel
                        || w + 2 * pad < *kernel
                    {
                        return Err(Error::Format(format!("conv {name} does not fit {h}×{w}")));
                    }
                    vec![
                        *out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ]
                }
                (LayerSpec::BatchNorm { .. } | LayerSpec::Relu, s) => s.to_vec(),
                (LayerSpec::MaxPool { size }, [c, h, w]) => {
                    if *size == 0 || h % size != 0 || w % size != 0 {
                        return Err(Error::Format(format!(
                            "pool {size} does not divide {h}×{w}"
                        )));
                    }
                    vec![*c, h / size, w / size]
                }
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Linear { out_features, .. }, [_]) => vec![*out_features],
                (l, s) => {
                    return Err(Error::Format(format!(
                        "layer {l:?} cannot consume activation shape {s:?}"
                    )))
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .activation_shapes()?
            .pop()
            .unwrap_or_else(|| self.input.to_vec()))
    }

    /// Parameters in canonical (manifest) order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let shapes = self.activation_shapes()?;
        let mut specs = Vec::new();
        let mut prev = self.input.to_vec();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel,
                    ..
                } => specs.push(ParamSpec {
                    name: format!("{name}.weight"),
                    shape: vec![*out_channels, prev[0], *kernel, *kernel],
                    fan_in: prev[0] * kernel * kernel,
                    kind: ParamKind::Weight,
                }),
                LayerSpec::BatchNorm { name } => {
                    specs.push(ParamSpec {
                        name: format!("{name}.weight"),
                        shape: vec![prev[0]],
                        fan_in: 1,
                        kind: ParamKind::BnScale,
                    });
                    specs.push(ParamSpec {
                        name: format!("{name}.bias"),
                        shape: vec![prev[0]],
                        fan_in: 1,
                        kind: ParamKind::BnShift,
                    });
                }
                LayerSpec::Linear { name, out_features } => {
                    specs.push(ParamSpec {
                        name: format!("{name}.weight"),
                        shape: vec![prev[0], *out_features],
                        fan_in: prev[0],
                        kind: ParamKind::Weight,
                    });
                    specs.push(ParamSpec {
                        name: format!("{name}.bias"),
                        shape: vec![*out_features],
                        fan_in: prev[0],
                        kind: ParamKind::Bias,
                    });
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => {}
            }
            prev = shape.clone();
        }
        let d = self.embed_dim()?;
        specs.push(ParamSpec {
            name: "classifier.weight".into(),
            shape: vec![self.classifier.classes, d],
            fan_in: d,
            kind: ParamKind::ClassWeights,
        });
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Format("duplicate parameter names".into()));
        }
        Ok(specs)
    }

    /// BN layer names with their channel counts, in layer order.
    pub fn bn_layers(&self) -> Result<Vec<(String, usize)>> {
        let shapes = self.activation_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .filter_map(|(l, s)| match l {
                LayerSpec::BatchNorm { name } => Some((name.clone(), s[0])),
                _ => None,
            })
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c, h, w] = self.input;
        let _ = writeln!(s, "{FORMAT_LINE}");
        let _ = writeln!(s, "input {c} {h} {w}");
        for l in &self.layers {
            let _ = match l {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => writeln!(s, "conv {name} {out_channels} {kernel} {stride} {pad}"),
                LayerSpec::BatchNorm { name } => writeln!(s, "bn {name}"),
                LayerSpec::Relu => writeln!(s, "relu"),
                LayerSpec::MaxPool { size } => writeln!(s, "maxpool {size}"),
                LayerSpec::Flatten => writeln!(s, "flatten"),
                LayerSpec::Linear { name, out_features } => {
                    writeln!(s, "linear {name} {out_features}")
                }
            };
        }
        let ClassifierSpec {
            classes,
            margin,
            scale,
        } = &self.classifier;
        let _ = writeln!(s, "classifier {classes} {margin:?} {scale:?}");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad architecture line: {line:?}"));
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_LINE) {
            return Err(Error::Format(format!(
                "architecture text must start with {FORMAT_LINE:?}"
            )));
        }
        let mut input = None;
        let mut layers = Vec::new();
        let mut classifier = None;
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(line))
            };
            let real = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(line))
            };
            let name = |i: usize| -> Result<String> {
                f.get(i).map(|s| s.to_string()).ok_or_else(|| bad(line))
            };
            let expect_len = |n: usize| if f.len() == n { Ok(()) } else { Err(bad(line)) };
            match f.first().copied() {
                Some("input") => {
                    expect_len(4)?;
                    input = Some([num(1)?, num(2)?, num(3)?]);
                }
                Some("conv") => {
                    expect_len(6)?;
                    layers.push(LayerSpec::Conv {
                        name: name(1)?,
                        out_channels: num(2)?,
                        kernel: num(3)?,
                        stride: num(4)?,
                        pad: num(5)?,
                    })
                }
                Some("bn") => {
                    expect_len(2)?;
                    layers.push(LayerSpec::BatchNorm { name: name(1)? })
                }
                Some("relu") => {
                    expect_len(1)?;
                    layers.push(LayerSpec::Relu)
                }
                Some("maxpool") => {
                    expect_len(2)?;
                    layers.push(LayerSpec::MaxPool { size: num(1)? })
                }
                Some("flatten") => {
                    expect_len(1)?;
                    layers.push(LayerSpec::Flatten)
                }
                Some("linear") => {
                    expect_len(3)?;
                    layers.push(LayerSpec::Linear {
                        name: name(1)?,
                        out_features: num(2)?,
                    })
                }
                Some("classifier") => {
                    expect_len(4)?;
                    classifier = Some(ClassifierSpec {
                        classes: num(1)?,
                        margin: real(2)?,
                        scale: real(3)?,
                    })
                }
                _ => return Err(bad(line)),
            }
        }
        let arch = Self {
            input: input.ok_or_else(|| Error::Format("missing input line".into()))?,
            layers,
            classifier: classifier
                .ok_or_else(|| Error::Format("missing classifier line".into()))?,
        };
        if arch.input.iter().any(|&d| d == 0) || arch.classifier.classes < 2 {
            return Err(Error::Format("degenerate input or class count".into()));
        }
        arch.param_specs()?;
        Ok(arch)
    }
}
