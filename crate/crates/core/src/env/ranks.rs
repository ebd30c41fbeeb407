use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LoRA-inserted projections of one transformer layer, in vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::Q,
        ModuleKind::K,
        ModuleKind::V,
        ModuleKind::O,
        ModuleKind::Fc1,
        ModuleKind::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Q => "q",
            ModuleKind::K => "k",
            ModuleKind::V => "v",
            ModuleKind::O => "o",
            ModuleKind::Fc1 => "fc1",
            ModuleKind::Fc2 => "fc2",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const MODULES_PER_LAYER: usize = 6;

/// Integer rank per adapter, layer-major with [`ModuleKind::ALL`] order
/// inside each layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankVector {
    ranks: Vec<u32>,
    r_max: u32,
    layers: usize,
}

impl RankVector {
    pub fn new(ranks: Vec<u32>, r_max: u32, layers: usize) -> Result<Self> {
        if ranks.len() != MODULES_PER_LAYER * layers {
            return Err(Error::invalid(format!(
                "rank vector length {} does not equal 6·{layers}",
                ranks.len()
            )));
        }
        if let Some((i, r)) = ranks.iter().enumerate().find(|(_, &r)| r > r_max) {
            return Err(Error::invalid(format!("rank[{i}] = {r} exceeds r_max = {r_max}")));
        }
        Ok(Self { ranks, r_max, layers })
    }

    pub fn uniform(r: u32, r_max: u32, layers: usize) -> Result<Self> {
        Self::new(vec![r; MODULES_PER_LAYER * layers], r_max, layers)
    }

    pub fn zeros(r_max: u32, layers: usize) -> Self {
        Self {
            ranks: vec![0; MODULES_PER_LAYER * layers],
            r_max,
            layers,
        }
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn r_max(&self) -> u32 {
        self.r_max
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, layer: usize, module: ModuleKind) -> u32 {
        self.ranks[index_of(layer, module)]
    }

    pub fn total_rank(&self) -> u64 {
        self.ranks.iter().map(|&r| r as u64).sum()
    }

    pub(crate) fn set_raw(&mut self, i: usize, r: u32) {
        debug_assert!(r <= self.r_max);
        self.ranks[i] = r;
    }

    pub fn iter_modules(&self) -> impl Iterator<Item = (usize, ModuleKind, u32)> + '_ {
        self.ranks.iter().enumerate().map(|(i, &r)| {
            (i / MODULES_PER_LAYER, ModuleKind::ALL[i % MODULES_PER_LAYER], r)
        })
    }
}

#[inline]
pub fn index_of(layer: usize, module: ModuleKind) -> usize {
    layer * MODULES_PER_LAYER + module as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_layer_major() {
        let ranks: Vec<u32> = (0..12).collect();
        let v = RankVector::new(ranks, 11, 2).unwrap();
        assert_eq!(v.get(0, ModuleKind::Q), 0);
        assert_eq!(v.get(0, ModuleKind::Fc2), 5);
        assert_eq!(v.get(1, ModuleKind::O), 9);
        let (l, m, r) = v.iter_modules().nth(10).unwrap();
        assert_eq!((l, m, r), (1, ModuleKind::Fc1, 10));
    }

    #[test]
    fn bounds_are_enforced() {
        assert!(RankVector::new(vec![9; 6], 8, 1).is_err());
        assert!(RankVector::new(vec![1; 7], 8, 1).is_err());
    }
}
