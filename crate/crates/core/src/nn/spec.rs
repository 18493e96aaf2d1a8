use serde::{Deserialize, Serialize};

use super::{NnError, Result};

/// Spatial shape of one batch item: (frames, bins, channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.frames, self.bins, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Bias-free convolution with `kernel / 2` zero padding on each side.
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Batchnorm,
    LeakyRelu { negative_slope: f64 },
    /// Pre-activation block: BN, act, conv(stride), BN, act, conv, plus a
    /// skip path (1x1 projection conv when stride or channels change).
    ResidualBlock {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        negative_slope: f64,
    },
    /// Global max over frames and bins. Consecutive global pools read the
    /// same input and their outputs are concatenated along channels.
    MaxpoolGlobal,
    AvgpoolGlobal,
    Dense { units: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::MaxpoolGlobal => "maxpool_global",
            LayerSpec::AvgpoolGlobal => "avgpool_global",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn is_global_pool(&self) -> bool {
        matches!(self, LayerSpec::MaxpoolGlobal | LayerSpec::AvgpoolGlobal)
    }
}

pub(crate) fn conv_out(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * (kernel / 2);
    (kernel > 0 && stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_bins: usize,
    pub input_channels: usize,
    /// Frame count used to validate shape composition; inputs of any
    /// length that survive the strides are accepted at run time.
    pub nominal_frames: usize,
    pub layers: Vec<LayerSpec>,
    /// Layer whose output is the embedding compared during pre-training.
    pub embedding_layer: usize,
}

pub(crate) const N_CLASSES: usize = 2;

impl NetSpec {
    pub fn layer_name(&self, index: usize) -> String {
        format!("l{index:02}_{}", self.layers[index].kind_name())
    }

    /// Output shape after every layer for an input of `frames` frames.
    /// A run of global pools reports the concatenated shape on its last
    /// layer and the per-pool shape on the others.
    pub fn shapes_for(&self, frames: usize) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(NnError::Spec("no layers".into()));
        }
        let mut shape = Shape {
            frames,
            bins: self.input_bins,
            channels: self.input_channels,
        };
        if shape.frames == 0 || shape.bins == 0 || shape.channels == 0 {
            return Err(NnError::Spec(format!("empty input shape {shape}")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut i = 0;
        while i < self.layers.len() {
            let prev = if i == 0 { "input".to_string() } else { self.layer_name(i - 1) };
            let err = |reason: String| NnError::Shape {
                prev: prev.clone(),
                next: self.layer_name(i),
                reason,
            };
            let layer = &self.layers[i];
            if layer.is_global_pool() {
                let mut j = i;
                while j < self.layers.len() && self.layers[j].is_global_pool() {
                    j += 1;
                }
                let pooled = Shape { frames: 1, bins: 1, channels: shape.channels };
                for _ in i..j - 1 {
                    out.push(pooled);
                }
                shape = Shape { frames: 1, bins: 1, channels: shape.channels * (j - i) };
                out.push(shape);
                i = j;
                continue;
            }
            shape = match *layer {
                LayerSpec::Conv2d { out_channels, kernel, stride }
                | LayerSpec::ResidualBlock { out_channels, kernel, stride, .. } => {
                    if out_channels == 0 {
                        return Err(err("zero output channels".into()));
                    }
                    if kernel[0] % 2 == 0 || kernel[1] % 2 == 0 {
                        return Err(err(format!("kernel {kernel:?} must be odd")));
                    }
                    let frames = conv_out(shape.frames, kernel[0], stride[0])
                        .ok_or_else(|| err(format!("kernel/stride {kernel:?}/{stride:?} invalid for {shape}")))?;
                    let bins = conv_out(shape.bins, kernel[1], stride[1])
                        .ok_or_else(|| err(format!("kernel/stride {kernel:?}/{stride:?} invalid for {shape}")))?;
                    Shape { frames, bins, channels: out_channels }
                }
                LayerSpec::Batchnorm => shape,
                LayerSpec::LeakyRelu { negative_slope } => {
                    if !negative_slope.is_finite() {
                        return Err(err("non-finite slope".into()));
                    }
                    shape
                }
                LayerSpec::Dense { units } => {
                    if shape.frames != 1 || shape.bins != 1 {
                        return Err(err(format!(
                            "dense layer needs a pooled (1, 1, C) input, got {shape}"
                        )));
                    }
                    if units == 0 {
                        return Err(err("zero units".into()));
                    }
                    Shape { frames: 1, bins: 1, channels: units }
                }
                LayerSpec::MaxpoolGlobal | LayerSpec::AvgpoolGlobal => unreachable!(),
            };
            out.push(shape);
            i += 1;
        }
        Ok(out)
    }

    /// Full validation: shapes compose, the embedding is a dense layer, and
    /// the network either ends at the embedding or at a 2-logit dense head.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let shapes = self.shapes_for(self.nominal_frames)?;
        let emb = self.embedding_layer;
        if emb >= self.layers.len() {
            return Err(NnError::Spec(format!(
                "embedding layer {emb} out of range ({} layers)",
                self.layers.len()
            )));
        }
        if !matches!(self.layers[emb], LayerSpec::Dense { .. }) {
            return Err(NnError::Spec(format!(
                "embedding layer {} must be dense",
                self.layer_name(emb)
            )));
        }
        if emb + 1 < self.layers.len() {
            match self.layers.last() {
                Some(LayerSpec::Dense { units }) if *units == N_CLASSES => {}
                _ => {
                    return Err(NnError::Spec(format!(
                        "classifier must end with a dense layer of {N_CLASSES} units"
                    )))
                }
            }
        }
        Ok(shapes)
    }

    pub fn is_classifier(&self) -> bool {
        self.embedding_layer + 1 < self.layers.len()
    }

    /// The classifier built on this spec's layers up through the embedding.
    pub fn with_classifier_head(&self, negative_slope: f64) -> NetSpec {
        let mut layers: Vec<LayerSpec> = self.layers[..=self.embedding_layer].to_vec();
        layers.push(LayerSpec::LeakyRelu { negative_slope });
        layers.push(LayerSpec::Dense { units: N_CLASSES });
        NetSpec { layers, ..self.clone() }
    }

    /// The pre-training embedder: layers through the embedding only.
    pub fn embedder(&self) -> NetSpec {
        NetSpec {
            layers: self.layers[..=self.embedding_layer].to_vec(),
            ..self.clone()
        }
    }
}

/// Knobs of the residual CNN family: conv1 + BN + act, residual blocks,
/// parallel global max/avg pooling, 64-unit embedding, optional 2-way head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskNetConfig {
    pub input_bins: usize,
    pub nominal_frames: usize,
    pub conv1_channels: usize,
    pub block_channels: Vec<usize>,
    pub kernel: [usize; 2],
    pub time_stride: usize,
    pub freq_stride: usize,
    pub negative_slope: f64,
    pub embedding_dim: usize,
}

impl Default for DeskNetConfig {
    fn default() -> Self {
        Self {
            input_bins: 257,
            nominal_frames: 120,
            conv1_channels: 8,
            block_channels: vec![8, 16, 32],
            kernel: [3, 3],
            time_stride: 2,
            freq_stride: 2,
            negative_slope: 0.3,
            embedding_dim: 64,
        }
    }
}

impl DeskNetConfig {
    /// The full-size geometry: 1025 bins, 16 conv1 filters, five blocks
    /// ending at 128 filters.
    pub fn full_scale() -> Self {
        Self {
            input_bins: 1025,
            nominal_frames: 120,
            conv1_channels: 16,
            block_channels: vec![16, 32, 64, 128, 128],
            ..Self::default()
        }
    }

    pub fn embedder_spec(&self) -> NetSpec {
        let mut layers = vec![
            LayerSpec::Conv2d {
                out_channels: self.conv1_channels,
                kernel: self.kernel,
                stride: [1, 1],
            },
            LayerSpec::Batchnorm,
            LayerSpec::LeakyRelu { negative_slope: self.negative_slope },
        ];
        for &ch in &self.block_channels {
            layers.push(LayerSpec::ResidualBlock {
                out_channels: ch,
                kernel: self.kernel,
                stride: [self.time_stride, self.freq_stride],
                negative_slope: self.negative_slope,
            });
        }
        layers.push(LayerSpec::MaxpoolGlobal);
        layers.push(LayerSpec::AvgpoolGlobal);
        layers.push(LayerSpec::Dense { units: self.embedding_dim });
        let embedding_layer = layers.len() - 1;
        NetSpec {
            input_bins: self.input_bins,
            input_channels: 1,
            nominal_frames: self.nominal_frames,
            layers,
            embedding_layer,
        }
    }

    pub fn classifier_spec(&self) -> NetSpec {
        self.embedder_spec().with_classifier_head(self.negative_slope)
    }

    /// Index of the last residual block.
    pub fn last_block_layer(&self) -> usize {
        3 + self.block_channels.len() - 1
    }
}
