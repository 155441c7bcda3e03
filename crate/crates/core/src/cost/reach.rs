use std::fmt;
use std::str::FromStr;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};
use crate::window::{partitions, WindowGeometry};

/// One token-mixing layer as seen by the reachability analyzer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReachLayer {
    /// k×k depthwise conv, zero padded.
    DwConv { k: usize },
    Neighbor { h: usize, w: usize },
    Distant { h: usize, w: usize },
    Spanning { h: usize, w: usize },
    /// Branches applied to the same input, outputs merged.
    Union(Vec<ReachLayer>),
}

impl fmt::Display for ReachLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReachLayer::DwConv { k } => write!(f, "dw:{k}"),
            ReachLayer::Neighbor { h, w } => write!(f, "nb:{h}x{w}"),
            ReachLayer::Distant { h, w } => write!(f, "ds:{h}x{w}"),
            ReachLayer::Spanning { h, w } => write!(f, "sp:{h}x{w}"),
            ReachLayer::Union(parts) => {
                let parts: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

impl FromStr for ReachLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('+') {
            return Ok(ReachLayer::Union(s.split('+').map(str::parse).collect::<Result<_>>()?));
        }
        let bad = || Error::config(format!("invalid layer `{s}` (expected dw:K, nb:HxW, ds:HxW or sp:HxW)"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let window = || -> Result<(usize, usize)> {
            let (h, w) = arg.split_once('x').ok_or_else(bad)?;
            let (h, w) = (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?);
            if h == 0 || w == 0 {
                return Err(bad());
            }
            Ok((h, w))
        };
        Ok(match kind {
            "dw" | "dwconv" => {
                let k: usize = arg.parse().map_err(|_| bad())?;
                if k % 2 == 0 {
                    return Err(Error::config(format!("kernel {k} in `{s}` must be odd")));
                }
                ReachLayer::DwConv { k }
            }
            "nb" | "neighbor" => {
                let (h, w) = window()?;
                ReachLayer::Neighbor { h, w }
            }
            "ds" | "distant" => {
                let (h, w) = window()?;
                ReachLayer::Distant { h, w }
            }
            "sp" | "spanning" => {
                let (h, w) = window()?;
                ReachLayer::Spanning { h, w }
            }
            _ => return Err(bad()),
        })
    }
}

/// Parses `dw:3,nb:4x4,sp:4x4*3,sp:7x7+dw:5`; `*n` repeats, `+` runs in parallel.
pub fn parse_stack(s: &str) -> Result<Vec<ReachLayer>> {
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (layer, times) = match tok.rsplit_once('*') {
            Some((l, n)) => (
                l,
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("invalid repeat in `{tok}`")))?,
            ),
            None => (tok, 1),
        };
        let layer: ReachLayer = layer.parse()?;
        out.extend(std::iter::repeat(layer).take(times));
    }
    if out.is_empty() {
        return Err(Error::config("empty layer stack"));
    }
    Ok(out)
}

/// Coverage after one layer of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachStep {
    pub layer: usize,
    /// Fraction of input pixels reaching the center output pixel.
    pub center_coverage: f64,
    pub min_coverage: f64,
    pub full: bool,
}

/// For every output pixel, the set of input pixels with a path to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Reachability {
    pub height: usize,
    pub width: usize,
    sets: Vec<FixedBitSet>,
}

impl Reachability {
    /// Zero layers: each pixel reaches only itself.
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        let sets = (0..n)
            .map(|i| {
                let mut s = FixedBitSet::with_capacity(n);
                s.insert(i);
                s
            })
            .collect();
        Reachability { height, width, sets }
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn center(&self) -> usize {
        (self.height / 2) * self.width + self.width / 2
    }

    pub fn reaches(&self, from: usize, to: usize) -> bool {
        self.sets[to].contains(from)
    }

    /// Number of input pixels reaching `pixel`.
    pub fn reach_count(&self, pixel: usize) -> usize {
        self.sets[pixel].count_ones(..)
    }

    pub fn coverage(&self, pixel: usize) -> f64 {
        self.reach_count(pixel) as f64 / self.pixels() as f64
    }

    pub fn min_coverage(&self) -> f64 {
        (0..self.pixels()).map(|p| self.coverage(p)).fold(1.0, f64::min)
    }

    pub fn is_full(&self) -> bool {
        let n = self.pixels();
        self.sets.iter().all(|s| s.count_ones(..) == n)
    }

    pub fn apply(&mut self, layer: &ReachLayer) -> Result<()> {
        self.sets = self.mixed(layer)?;
        Ok(())
    }

    fn mixed(&self, layer: &ReachLayer) -> Result<Vec<FixedBitSet>> {
        match layer {
            ReachLayer::DwConv { k } => Ok(self.conv(*k)),
            ReachLayer::Neighbor { h, w } => self.windows("neighbor", *h, *w),
            ReachLayer::Distant { h, w } => self.windows("distant", *h, *w),
            ReachLayer::Spanning { h, w } => self.mixed(&ReachLayer::Union(vec![
                ReachLayer::Neighbor { h: *h, w: *w },
                ReachLayer::Distant { h: *h, w: *w },
            ])),
            ReachLayer::Union(parts) => {
                let mut acc: Option<Vec<FixedBitSet>> = None;
                for p in parts {
                    let next = self.mixed(p)?;
                    acc = Some(match acc {
                        None => next,
                        Some(mut a) => {
                            for (x, y) in a.iter_mut().zip(&next) {
                                x.union_with(y);
                            }
                            a
                        }
                    });
                }
                acc.ok_or_else(|| Error::config("empty parallel layer"))
            }
        }
    }

    fn conv(&self, k: usize) -> Vec<FixedBitSet> {
        let r = (k / 2) as isize;
        let (hh, ww) = (self.height as isize, self.width as isize);
        let mut out = Vec::with_capacity(self.pixels());
        for y in 0..hh {
            for x in 0..ww {
                let mut s = FixedBitSet::with_capacity(self.pixels());
                for yy in (y - r).max(0)..(y + r + 1).min(hh) {
                    for xx in (x - r).max(0)..(x + r + 1).min(ww) {
                        s.union_with(&self.sets[(yy * ww + xx) as usize]);
                    }
                }
                out.push(s);
            }
        }
        out
    }

    fn windows(&self, strategy: &str, h: usize, w: usize) -> Result<Vec<FixedBitSet>> {
        let g = WindowGeometry::strict(self.height, self.width, h, w)?;
        let s = partitions().get(strategy)?;
        let mut window_of = Vec::with_capacity(self.pixels());
        let mut unions = vec![FixedBitSet::with_capacity(self.pixels()); g.windows()];
        for row in 0..self.height {
            for col in 0..self.width {
                let (win, _) = s.locate(&g, row, col);
                unions[win].union_with(&self.sets[row * self.width + col]);
                window_of.push(win);
            }
        }
        Ok(window_of.into_iter().map(|win| unions[win].clone()).collect())
    }

    pub fn step(&self, layer: usize) -> ReachStep {
        ReachStep {
            layer,
            center_coverage: self.coverage(self.center()),
            min_coverage: self.min_coverage(),
            full: self.is_full(),
        }
    }

    /// Runs `stack` from the identity; returns the final state and one step
    /// per layer.
    pub fn run(stack: &[ReachLayer], height: usize, width: usize) -> Result<(Self, Vec<ReachStep>)> {
        let mut r = Reachability::new(height, width);
        let mut steps = Vec::with_capacity(stack.len());
        for (i, layer) in stack.iter().enumerate() {
            r.apply(layer)?;
            steps.push(r.step(i + 1));
        }
        Ok((r, steps))
    }

    /// Binary P5 image of the input pixels reaching `pixel`.
    pub fn to_pgm(&self, pixel: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend((0..self.pixels()).map(|i| if self.reaches(i, pixel) { 255 } else { 0 }));
        out
    }
}

/// CSV of per-layer coverage.
pub fn steps_to_csv(steps: &[ReachStep]) -> String {
    let mut s = String::from("layer,center_coverage,min_coverage,full\n");
    for st in steps {
        s.push_str(&format!("{},{:.6},{:.6},{}\n", st.layer, st.center_coverage, st.min_coverage, st.full));
    }
    s
}

/// Repeats `unit` until every pixel reaches every pixel. `None` when a
/// repetition changes nothing first, or after `max_repeats`.
pub fn layers_to_full(unit: &[ReachLayer], height: usize, width: usize, max_repeats: usize) -> Result<Option<usize>> {
    let mut r = Reachability::new(height, width);
    if r.is_full() {
        return Ok(Some(0));
    }
    for n in 1..=max_repeats {
        let before = r.sets.clone();
        for layer in unit {
            r.apply(layer)?;
        }
        if r.is_full() {
            return Ok(Some(n));
        }
        if r.sets == before {
            return Ok(None);
        }
    }
    Ok(None)
}
