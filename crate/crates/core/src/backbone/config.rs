use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::block::{expanded_width, ExpansionRatio, MetaMobileBlockSpec, CASCADE, PARALLEL};
use crate::error::{Error, Result};
use crate::window::{AttentionMode, WindowMode, WindowSize};

pub const PRESETS: [&str; 5] = ["emov2-1m", "emov2-2m", "emov2-5m", "emov2-20m", "emov2-50m"];

/// Uniform stochastic-depth rate.
pub const DEFAULT_DROP_PATH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// DW-Conv after attention.
    #[default]
    Cascade,
    /// Expanded channels split between DW-Conv and attention.
    Parallel,
}

impl Layout {
    pub fn operator(self) -> &'static str {
        match self {
            Layout::Cascade => CASCADE,
            Layout::Parallel => PARALLEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub exp_ratio: ExpansionRatio,
    pub attention: bool,
    pub spanning: bool,
    pub window: WindowSize,
    pub drop_path: f64,
    pub head_dim: usize,
    pub kernel: usize,
    pub layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemConfig {
    /// Channels after the first 3×3 conv.
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem: StemConfig,
    pub stages: [StageConfig; 4],
    pub head: HeadConfig,
    pub resolution: usize,
    pub window_mode: WindowMode,
}

/// One block of the built network.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    /// Hierarchical path, e.g. `stage3.block0`.
    pub path: String,
    pub stage: usize,
    pub spec: MetaMobileBlockSpec,
    /// Input map side (height, width) at the configured resolution.
    pub input_hw: (usize, usize),
}

fn ratios(r: [(u32, u32); 4]) -> [ExpansionRatio; 4] {
    r.map(|(n, d)| Ratio::new(n, d))
}

fn build(depths: [usize; 4], dims: [usize; 4], exp: [ExpansionRatio; 4], head_dim: usize) -> BackboneConfig {
    let stage = |i: usize| StageConfig {
        depth: depths[i],
        dim: dims[i],
        exp_ratio: exp[i],
        attention: i >= 2,
        spanning: i >= 2,
        window: WindowSize::Auto,
        drop_path: DEFAULT_DROP_PATH,
        head_dim,
        kernel: 5,
        layout: Layout::Cascade,
    };
    BackboneConfig {
        stem: StemConfig { width: dims[0] / 2 },
        stages: [stage(0), stage(1), stage(2), stage(3)],
        head: HeadConfig { classes: 1000 },
        resolution: 224,
        window_mode: WindowMode::Strict,
    }
}

impl BackboneConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let small = ratios([(2, 1), (5, 2), (3, 1), (7, 2)]);
        let large = ratios([(2, 1), (3, 1), (4, 1), (4, 1)]);
        Ok(match name {
            "emov2-1m" => build([2, 2, 8, 3], [32, 48, 80, 180], small, 20),
            "emov2-2m" => build([3, 3, 9, 3], [32, 48, 120, 200], small, 20),
            "emov2-5m" => build([3, 3, 9, 3], [48, 72, 160, 288], large, 32),
            "emov2-20m" => build([3, 3, 13, 3], [64, 128, 320, 448], large, 32),
            "emov2-50m" => build([5, 8, 20, 7], [64, 128, 384, 512], large, 32),
            "toy" => Self::toy(),
            _ => {
                return Err(Error::Unknown {
                    kind: "preset",
                    name: name.to_string(),
                })
            }
        })
    }

    /// Width-reduced network for the synthetic trainer: 32² inputs, 4 classes.
    pub fn toy() -> Self {
        let mut c = build([1, 1, 2, 1], [8, 12, 16, 24], ratios([(2, 1), (5, 2), (3, 1), (7, 2)]), 8);
        c.head.classes = 4;
        c.resolution = 32;
        for s in &mut c.stages {
            s.drop_path = 0.0;
        }
        c
    }

    pub fn dims(&self) -> [usize; 4] {
        self.stages.each_ref().map(|s| s.dim)
    }

    pub fn depths(&self) -> [usize; 4] {
        self.stages.each_ref().map(|s| s.depth)
    }

    /// Same network with spanning switched on or off wherever attention runs.
    pub fn with_spanning(&self, on: bool) -> Self {
        let mut c = self.clone();
        for s in &mut c.stages {
            s.spanning = on && s.attention;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.stem.width == 0 {
            return fail("[stem] width must be positive".into());
        }
        if self.head.classes == 0 {
            return fail("[head] classes must be positive".into());
        }
        if self.resolution == 0 {
            return fail("resolution must be positive".into());
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            if s.depth == 0 {
                return fail(format!("[{name}] depth must be at least 1"));
            }
            if s.dim < prev || s.dim == 0 {
                return fail(format!("[{name}] dim {} breaks the non-decreasing stage widths", s.dim));
            }
            prev = s.dim;
            if s.spanning && !s.attention {
                return fail(format!("[{name}] spanning requires attention"));
            }
            if s.attention && (s.head_dim == 0 || s.dim % s.head_dim != 0) {
                return fail(format!("[{name}] dim {} not divisible by head_dim {}", s.dim, s.head_dim));
            }
        }
        for plan in self.plan()? {
            plan.spec.validate().map_err(|e| Error::config(format!("{}: {e}", plan.path)))?;
        }
        Ok(())
    }

    /// Side of the stage-1 input map: two stride-2 stem steps.
    pub fn stem_output(&self, height: usize, width: usize) -> (usize, usize) {
        let down = |v: usize| (v - 1) / 2 + 1;
        (down(down(height)), down(down(width)))
    }

    /// Every block with its spec and input geometry, in execution order.
    pub fn plan(&self) -> Result<Vec<BlockPlan>> {
        self.plan_at(self.resolution, self.resolution)
    }

    pub fn plan_at(&self, height: usize, width: usize) -> Result<Vec<BlockPlan>> {
        let mut out = Vec::new();
        let mut hw = self.stem_output(height, width);
        let mut cin = self.stages[0].dim;
        for (si, s) in self.stages.iter().enumerate() {
            for j in 0..s.depth {
                let downsample = si > 0 && j == 0;
                let spec = if downsample {
                    let ratio = s.exp_ratio * Ratio::from_integer(2);
                    MetaMobileBlockSpec {
                        kernel: s.kernel,
                        drop_path: s.drop_path,
                        ..MetaMobileBlockSpec::i2rmb(cin, s.dim, ratio, 2, s.head_dim).without_attention()
                    }
                } else {
                    let mut spec = MetaMobileBlockSpec::i2rmb(cin, s.dim, s.exp_ratio, 1, s.head_dim);
                    spec.kernel = s.kernel;
                    spec.drop_path = s.drop_path;
                    if s.attention {
                        spec.operator = s.layout.operator().into();
                        spec.attention = spec.attention.map(|a| {
                            let mode = if s.spanning { AttentionMode::Spanning } else { AttentionMode::Neighbor };
                            crate::window::AttentionConfig { mode, ..a }.with_window(s.window, self.window_mode)
                        });
                        spec
                    } else {
                        spec.without_attention()
                    }
                };
                out.push(BlockPlan {
                    path: format!("stage{}.block{j}", si + 1),
                    stage: si + 1,
                    spec,
                    input_hw: hw,
                });
                if downsample {
                    hw = ((hw.0 - 1) / 2 + 1, (hw.1 - 1) / 2 + 1);
                }
                cin = s.dim;
            }
        }
        Ok(out)
    }

    /// Expanded width of the first block of each stage, for reports.
    pub fn expanded_widths(&self) -> [usize; 4] {
        std::array::from_fn(|i| expanded_width(self.stages[i].exp_ratio, self.stages[i].dim))
    }
}
