//! Address, frame and level primitives shared by every layer of the simulator.

use std::fmt;
use std::num::NonZeroU64;

use serde::{Deserialize, Serialize};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const HUGE_PAGE_SHIFT: u32 = 21;
pub const HUGE_PAGE_SIZE: u64 = 1 << HUGE_PAGE_SHIFT;
/// Entries in one page-table page.
pub const PT_ENTRIES: usize = 512;
pub const VA_BITS: u32 = 48;

const NODE_SHIFT: u32 = 40;
const INDEX_MASK: u64 = (1 << NODE_SHIFT) - 1;

/// NUMA node identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Process identifier inside one simulated machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Abstract page frame number. The owning node lives in the high bits so a
/// frame can be attributed to its node without a lookup; the value is never
/// zero, which keeps `Option<Pfn>` one word wide.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pfn(NonZeroU64);

impl Pfn {
    pub(crate) fn new(node: NodeId, index: u64) -> Self {
        debug_assert!(index <= INDEX_MASK);
        let raw = ((node.0 as u64 + 1) << NODE_SHIFT) | index;
        Pfn(NonZeroU64::new(raw).expect("node bits are never zero"))
    }

    /// Node encoded in the frame number. Callers that need to know whether
    /// the frame is live must go through the topology instead.
    pub fn home_node(self) -> NodeId {
        NodeId(((self.0.get() >> NODE_SHIFT) - 1) as u16)
    }

    pub(crate) fn index(self) -> u64 {
        self.0.get() & INDEX_MASK
    }

    pub fn raw(self) -> u64 {
        self.0.get()
    }
}

impl fmt::Debug for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pfn({}:{:#x})", self.home_node(), self.index())
    }
}

impl fmt::Display for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0.get())
    }
}

/// Page-table level, root first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
    L4,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L1, Level::L2, Level::L3, Level::L4];

    /// Bit position of the lowest index bit this level consumes.
    pub fn shift(self) -> u32 {
        match self {
            Level::L1 => 39,
            Level::L2 => 30,
            Level::L3 => 21,
            Level::L4 => 12,
        }
    }

    pub fn depth(self) -> usize {
        self as usize
    }

    pub fn child(self) -> Option<Level> {
        match self {
            Level::L1 => Some(Level::L2),
            Level::L2 => Some(Level::L3),
            Level::L3 => Some(Level::L4),
            Level::L4 => None,
        }
    }

    pub fn parent(self) -> Option<Level> {
        match self {
            Level::L1 => None,
            Level::L2 => Some(Level::L1),
            Level::L3 => Some(Level::L2),
            Level::L4 => Some(Level::L3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
            Level::L4 => "L4",
        }
    }

    /// True for the levels a high-level binding policy pins to DRAM.
    pub fn is_high(self) -> bool {
        self != Level::L4
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("virtual address {0:#x} is not canonical (>= 2^48)")]
pub struct NonCanonical(pub u64);

/// A 48-bit virtual address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtAddr(u64);

impl VirtAddr {
    pub fn new(va: u64) -> Result<Self, NonCanonical> {
        if va >> VA_BITS != 0 {
            return Err(NonCanonical(va));
        }
        Ok(VirtAddr(va))
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn index(self, level: Level) -> usize {
        ((self.0 >> level.shift()) & (PT_ENTRIES as u64 - 1)) as usize
    }

    pub fn offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    /// Address with the low `shift` bits cleared.
    pub fn align_down(self, shift: u32) -> VirtAddr {
        VirtAddr(self.0 & !((1u64 << shift) - 1))
    }

    /// Prefix identifying the entry at `level`: all index bits down to and
    /// including that level.
    pub fn prefix(self, level: Level) -> u64 {
        self.0 >> level.shift()
    }
}

impl fmt::Debug for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtAddr({:#x})", self.0)
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Split of a virtual address into its four table indices and page offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decomposed {
    pub i1: usize,
    pub i2: usize,
    pub i3: usize,
    pub i4: usize,
    pub offset: u64,
}

impl Decomposed {
    pub fn recompose(&self) -> u64 {
        ((((self.i1 as u64 * 512 + self.i2 as u64) * 512 + self.i3 as u64) * 512 + self.i4 as u64)
            << PAGE_SHIFT)
            + self.offset
    }
}

pub fn decompose(va: u64) -> Result<Decomposed, NonCanonical> {
    let va = VirtAddr::new(va)?;
    Ok(Decomposed {
        i1: va.index(Level::L1),
        i2: va.index(Level::L2),
        i3: va.index(Level::L3),
        i4: va.index(Level::L4),
        offset: va.offset(),
    })
}
