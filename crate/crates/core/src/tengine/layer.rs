use std::fmt;

use crate::{Error, Result};

/// One entry of a model's layer manifest.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv3d {
        name: String,
        in_channels: usize,
        num_filters: usize,
        filter: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    GlobalMaxPool,
    GlobalAvgPool,
    FullyConnected {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    Sigmoid,
    Softmax,
    Concat,
    Multiply,
    Flatten,
}

fn triple(v: &[usize; 3]) -> String {
    format!("{}x{}x{}", v[0], v[1], v[2])
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalMaxPool => "global_max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Concat => "concat",
            LayerSpec::Multiply => "multiply",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv3d {
                name,
                in_channels,
                num_filters,
                filter,
                stride,
                ..
            } => {
                if *in_channels == 0 || *num_filters == 0 {
                    return Err(Error::InvalidConfig(format!("{name}: channel counts must be >= 1")));
                }
                if filter.contains(&0) || stride.contains(&0) {
                    return Err(Error::InvalidConfig(format!("{name}: filter and stride must be >= 1")));
                }
            }
            LayerSpec::FullyConnected { name, in_dim, out_dim } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::InvalidConfig(format!("{name}: dimensions must be >= 1")));
                }
            }
            LayerSpec::LeakyRelu { slope } if !slope.is_finite() => {
                return Err(Error::InvalidConfig("leaky_relu slope must be finite".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// `(name, shape)` of each learnable tensor, weights before bias.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Conv3d {
                name,
                in_channels,
                num_filters,
                filter,
                ..
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*num_filters, *in_channels, filter[0], filter[1], filter[2]],
                ),
                (format!("{name}.bias"), vec![*num_filters]),
            ],
            LayerSpec::FullyConnected { name, in_dim, out_dim } => vec![
                (format!("{name}.weight"), vec![*out_dim, *in_dim]),
                (format!("{name}.bias"), vec![*out_dim]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3d {
                name,
                in_channels,
                num_filters,
                filter,
                stride,
                padding,
            } => write!(
                f,
                "conv3d name={name} in={in_channels} filters={num_filters} filter={} stride={} padding={}",
                triple(filter),
                triple(stride),
                triple(padding)
            ),
            LayerSpec::LeakyRelu { slope } => write!(f, "leaky_relu slope={slope}"),
            LayerSpec::FullyConnected { name, in_dim, out_dim } => {
                write!(f, "fully_connected name={name} in={in_dim} out={out_dim}")
            }
            other => f.write_str(other.kind()),
        }
    }
}
