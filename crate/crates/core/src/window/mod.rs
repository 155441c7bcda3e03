//! Window geometry, neighbor/distant partition strategies and windowed
//! multi-head self-attention over an expanded value stream.

mod attention;
mod partition;

pub use attention::{ew_mhsa, sew_mhsa, WindowAttention};
pub use partition::{
    partition_distant, partition_neighbor, partitions, reverse_distant, reverse_neighbor, Distant, Neighbor,
    PartitionRegistry, PartitionStrategy,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side used by [`WindowSize::Auto`] when it divides the map.
pub const AUTO_WINDOW: usize = 7;

/// Requested window extent for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WindowSize {
    /// 7×7 when the map divides by 7, else the whole map.
    Auto,
    /// One window covering the whole map.
    Full,
    Fixed { h: usize, w: usize },
}

impl fmt::Display for WindowSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSize::Auto => f.write_str("auto"),
            WindowSize::Full => f.write_str("full"),
            WindowSize::Fixed { h, w } => write!(f, "{h}x{w}"),
        }
    }
}

impl FromStr for WindowSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(WindowSize::Auto),
            "full" => Ok(WindowSize::Full),
            other => {
                let bad = || Error::config(format!("window `{other}`: expected auto, full or HxW"));
                let (h, w) = other.split_once('x').ok_or_else(bad)?;
                let h: usize = h.trim().parse().map_err(|_| bad())?;
                let w: usize = w.trim().parse().map_err(|_| bad())?;
                if h == 0 || w == 0 {
                    return Err(bad());
                }
                Ok(WindowSize::Fixed { h, w })
            }
        }
    }
}

impl TryFrom<String> for WindowSize {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WindowSize> for String {
    fn from(w: WindowSize) -> String {
        w.to_string()
    }
}

/// How maps that the window does not divide are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    #[default]
    Strict,
    /// Zero-pad bottom/right to a multiple of the window, crop after reverse.
    Pad,
}

/// Resolved window layout on one (possibly padded) feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// window height h
    pub h: usize,
    /// window width w
    pub w: usize,
}

impl WindowGeometry {
    pub fn resolve(size: WindowSize, mode: WindowMode, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::geometry("empty feature map"));
        }
        let (h, w) = match size {
            WindowSize::Auto if height % AUTO_WINDOW == 0 && width % AUTO_WINDOW == 0 => (AUTO_WINDOW, AUTO_WINDOW),
            WindowSize::Auto | WindowSize::Full => (height, width),
            WindowSize::Fixed { h, w } => (h, w),
        };
        if h == 0 || w == 0 {
            return Err(Error::geometry("zero-sized window"));
        }
        let divisible = height % h == 0 && width % w == 0;
        match mode {
            WindowMode::Strict if !divisible => Err(Error::geometry(format!(
                "{height}x{width} map is not divisible by {h}x{w} windows (strict mode)"
            ))),
            _ => Ok(WindowGeometry {
                height,
                width,
                padded_height: height.div_ceil(h) * h,
                padded_width: width.div_ceil(w) * w,
                h,
                w,
            }),
        }
    }

    pub fn strict(height: usize, width: usize, h: usize, w: usize) -> Result<Self> {
        Self::resolve(WindowSize::Fixed { h, w }, WindowMode::Strict, height, width)
    }

    /// Tokens per window, P = h·w.
    pub fn patch_len(&self) -> usize {
        self.h * self.w
    }

    /// Windows per image, N = H·W/P on the padded map.
    pub fn windows(&self) -> usize {
        self.padded_height * self.padded_width / self.patch_len()
    }

    /// Window counts along each axis; also the distant partition's grid stride.
    pub fn grid(&self) -> (usize, usize) {
        (self.padded_height / self.h, self.padded_width / self.w)
    }

    pub fn needs_padding(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Neighbor,
    Distant,
    /// Neighbor and distant branches sharing projections, fused by mean.
    Spanning,
}

impl AttentionMode {
    /// Partition strategies whose outputs are fused.
    pub fn strategies(self) -> &'static [&'static str] {
        match self {
            AttentionMode::Neighbor => &["neighbor"],
            AttentionMode::Distant => &["distant"],
            AttentionMode::Spanning => &["neighbor", "distant"],
        }
    }
}

/// Where the attention map meets the expansion projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// M applied to the unexpanded stream, then the projection.
    Pre,
    /// Projection and V-activation first, then M.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub mode: AttentionMode,
    pub ordering: Ordering,
    pub window: WindowSize,
    pub window_mode: WindowMode,
}

impl AttentionConfig {
    pub fn new(head_dim: usize, mode: AttentionMode, ordering: Ordering) -> Self {
        AttentionConfig {
            head_dim,
            mode,
            ordering,
            window: WindowSize::Auto,
            window_mode: WindowMode::Strict,
        }
    }

    pub fn with_window(mut self, window: WindowSize, window_mode: WindowMode) -> Self {
        self.window = window;
        self.window_mode = window_mode;
        self
    }

    pub fn heads(&self, channels: usize) -> Result<usize> {
        if self.head_dim == 0 || channels % self.head_dim != 0 {
            return Err(Error::geometry(format!(
                "{channels} channels not divisible by head_dim {}",
                self.head_dim
            )));
        }
        Ok(channels / self.head_dim)
    }
}
