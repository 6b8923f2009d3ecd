//! Multiply-accumulate counters attached to a computation graph.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

/// Block family a multiply-accumulate is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Embed,
    Local,
    Global,
    Cross,
    Merge,
    Head,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::Embed,
        BlockKind::Local,
        BlockKind::Global,
        BlockKind::Cross,
        BlockKind::Merge,
        BlockKind::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Embed => "embed",
            BlockKind::Local => "local",
            BlockKind::Global => "global",
            BlockKind::Cross => "cross",
            BlockKind::Merge => "merge",
            BlockKind::Head => "head",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Counts multiply-accumulates of every matrix product executed in a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    by_kind: BTreeMap<BlockKind, u64>,
    unscoped: u64,
}

impl OpCounter {
    pub(crate) fn record(&mut self, scope: Option<BlockKind>, macs: u64) {
        match scope {
            Some(k) => *self.by_kind.entry(k).or_default() += macs,
            None => self.unscoped += macs,
        }
    }

    pub fn macs(&self, kind: BlockKind) -> u64 {
        self.by_kind.get(&kind).copied().unwrap_or(0)
    }

    pub fn unscoped_macs(&self) -> u64 {
        self.unscoped
    }

    pub fn total_macs(&self) -> u64 {
        self.by_kind.values().sum::<u64>() + self.unscoped
    }
}
