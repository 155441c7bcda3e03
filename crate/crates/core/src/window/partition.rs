use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use super::WindowGeometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijective rearrangement [B,C,H,W] ↔ [B·N, C, P] of a padded map.
pub trait PartitionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Row-major window index and slot holding pixel (row, col) of one image.
    fn locate(&self, g: &WindowGeometry, row: usize, col: usize) -> (usize, usize);

    fn partition(&self, x: &Tensor, g: &WindowGeometry) -> Result<Tensor>;

    /// Inverse of `partition`, returning [B,C,padded_height,padded_width].
    fn reverse(&self, xw: &Tensor, g: &WindowGeometry) -> Result<Tensor>;
}

fn check_map(x: &Tensor, g: &WindowGeometry) -> Result<(usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) != (g.padded_height, g.padded_width) {
        return Err(Error::geometry(format!(
            "map {h}x{w} does not match window geometry {}x{}",
            g.padded_height, g.padded_width
        )));
    }
    Ok((b, c))
}

fn check_windows(xw: &Tensor, g: &WindowGeometry) -> Result<(usize, usize)> {
    let &[bn, c, p] = xw.shape() else {
        return Err(Error::geometry(format!("expected [B*N, C, P] windows, got {:?}", xw.shape())));
    };
    let n = g.windows();
    if p != g.patch_len() || bn % n != 0 {
        return Err(Error::geometry(format!(
            "windows {:?} inconsistent with {n} windows of {} tokens",
            xw.shape(),
            g.patch_len()
        )));
    }
    Ok((bn / n, c))
}

/// Contiguous h×w tiles.
#[derive(Debug, Default, Clone, Copy)]
pub struct Neighbor;

impl PartitionStrategy for Neighbor {
    fn name(&self) -> &'static str {
        "neighbor"
    }

    fn locate(&self, g: &WindowGeometry, row: usize, col: usize) -> (usize, usize) {
        let (_, nw) = g.grid();
        ((row / g.h) * nw + col / g.w, (row % g.h) * g.w + col % g.w)
    }

    fn partition(&self, x: &Tensor, g: &WindowGeometry) -> Result<Tensor> {
        let (b, c) = check_map(x, g)?;
        let (nh, nw) = g.grid();
        x.reshape(&[b, c, nh, g.h, nw, g.w])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b * nh * nw, c, g.patch_len()])
    }

    fn reverse(&self, xw: &Tensor, g: &WindowGeometry) -> Result<Tensor> {
        let (b, c) = check_windows(xw, g)?;
        let (nh, nw) = g.grid();
        xw.reshape(&[b, nh, nw, c, g.h, g.w])?
            .permute(&[0, 3, 1, 4, 2, 5])?
            .reshape(&[b, c, g.padded_height, g.padded_width])
    }
}

/// Strided grids: window (u,v) holds pixels (u + p·H/h, v + q·W/w).
#[derive(Debug, Default, Clone, Copy)]
pub struct Distant;

impl PartitionStrategy for Distant {
    fn name(&self) -> &'static str {
        "distant"
    }

    fn locate(&self, g: &WindowGeometry, row: usize, col: usize) -> (usize, usize) {
        let (sh, sw) = g.grid();
        ((row % sh) * sw + col % sw, (row / sh) * g.w + col / sw)
    }

    fn partition(&self, x: &Tensor, g: &WindowGeometry) -> Result<Tensor> {
        let (b, c) = check_map(x, g)?;
        let (sh, sw) = g.grid();
        x.reshape(&[b, c, g.h, sh, g.w, sw])?
            .permute(&[0, 3, 5, 1, 2, 4])?
            .reshape(&[b * sh * sw, c, g.patch_len()])
    }

    fn reverse(&self, xw: &Tensor, g: &WindowGeometry) -> Result<Tensor> {
        let (b, c) = check_windows(xw, g)?;
        let (sh, sw) = g.grid();
        xw.reshape(&[b, sh, sw, c, g.h, g.w])?
            .permute(&[0, 3, 4, 1, 5, 2])?
            .reshape(&[b, c, g.padded_height, g.padded_width])
    }
}

/// Name-keyed set of partition strategies.
#[derive(Clone, Default)]
pub struct PartitionRegistry {
    strategies: BTreeMap<&'static str, Arc<dyn PartitionStrategy>>,
}

impl PartitionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Neighbor));
        r.register(Arc::new(Distant));
        r
    }

    pub fn register(&mut self, s: Arc<dyn PartitionStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PartitionStrategy>> {
        self.strategies.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: "partition",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

/// The built-in strategies.
pub fn partitions() -> &'static PartitionRegistry {
    static REGISTRY: OnceLock<PartitionRegistry> = OnceLock::new();
    REGISTRY.get_or_init(PartitionRegistry::with_defaults)
}

fn strict_geometry(x: &Tensor, h: usize, w: usize) -> Result<WindowGeometry> {
    let (_, _, height, width) = x.dims4()?;
    WindowGeometry::strict(height, width, h, w)
}

/// [B,C,H,W] → [B·H·W/P, C, P] over contiguous h×w tiles.
pub fn partition_neighbor(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Neighbor.partition(x, &strict_geometry(x, h, w)?)
}

pub fn reverse_neighbor(xw: &Tensor, h: usize, w: usize, height: usize, width: usize) -> Result<Tensor> {
    Neighbor.reverse(xw, &WindowGeometry::strict(height, width, h, w)?)
}

/// [B,C,H,W] → [B·H·W/P, C, P] over stride-(H/h, W/w) grids.
pub fn partition_distant(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Distant.partition(x, &strict_geometry(x, h, w)?)
}

pub fn reverse_distant(xw: &Tensor, h: usize, w: usize, height: usize, width: usize) -> Result<Tensor> {
    Distant.reverse(xw, &WindowGeometry::strict(height, width, h, w)?)
}
