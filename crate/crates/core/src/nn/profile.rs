//! Static layer accounting for parameter and multiply-accumulate counts.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    Linear,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerStat {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// Layers visited by a shape-only walk through a model.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Profile {
    pub layers: Vec<LayerStat>,
}

impl Profile {
    pub fn push(&mut self, stat: LayerStat) {
        self.layers.push(stat);
    }

    /// Parameter count with shared layers (same name) counted once.
    pub fn params(&self) -> u64 {
        let mut seen = std::collections::HashSet::new();
        self.layers.iter().filter(|l| seen.insert(l.name.as_str())).map(|l| l.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}
