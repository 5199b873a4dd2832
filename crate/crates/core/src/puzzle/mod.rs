//! Symbolic grammar of Raven-style puzzles.
//!
//! A puzzle is a 3×3 matrix of panels with the last one missing. Each panel
//! holds one or two *components* (a layout of slots plus the entities placed
//! in them) and every component carries five attributes: Number, Position,
//! Type, Size and Color. Rows are governed by one rule per attribute group.

mod generate;
mod meta;
mod rules;

pub use generate::{
    generate_candidates, generate_puzzle, sample_rule, sample_rule_annotation, GenerateError,
    RETRY_CAP,
};
pub use meta::{decode_meta_target, encode_meta_target, MetaSummary, MetaTarget, META_LEN};
pub use rules::{rows_satisfy, rule_satisfied, sample_row_values, DomainExhausted, ValueDomain};

use alloc::vec::Vec;
use core::fmt;

/// Number of shape types (triangle, square, pentagon, hexagon, circle).
pub const TYPE_LEVELS: u16 = 5;
/// Number of size levels.
pub const SIZE_LEVELS: u16 = 6;
/// Number of color levels.
pub const COLOR_LEVELS: u16 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum AttributeKind {
    Number = 0,
    Position = 1,
    Type = 2,
    Size = 3,
    Color = 4,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] = [
        AttributeKind::Number,
        AttributeKind::Position,
        AttributeKind::Type,
        AttributeKind::Size,
        AttributeKind::Color,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Number => "number",
            AttributeKind::Position => "position",
            AttributeKind::Type => "type",
            AttributeKind::Size => "size",
            AttributeKind::Color => "color",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Number and Position describe the same entity set and share one rule.
    pub fn is_layout(self) -> bool {
        matches!(self, AttributeKind::Number | AttributeKind::Position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArithSign {
    Plus,
    Minus,
}

/// The four rule families, with stable codes 0..4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum RuleFamily {
    Constant = 0,
    Progression = 1,
    Arithmetic = 2,
    DistributeThree = 3,
}

impl RuleFamily {
    pub const ALL: [RuleFamily; 4] = [
        RuleFamily::Constant,
        RuleFamily::Progression,
        RuleFamily::Arithmetic,
        RuleFamily::DistributeThree,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::Constant => "constant",
            RuleFamily::Progression => "progression",
            RuleFamily::Arithmetic => "arithmetic",
            RuleFamily::DistributeThree => "distribute_three",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Allowed (attribute, family) combinations. Arithmetic has no meaning on shape type.
    pub fn allowed_for(self, attribute: AttributeKind) -> bool {
        !(self == RuleFamily::Arithmetic && attribute == AttributeKind::Type)
    }
}

/// A rule family together with its parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleKind {
    Constant,
    /// `delta` ∈ {−2, −1, 1, 2}.
    Progression { delta: i8 },
    Arithmetic { sign: ArithSign },
    /// `permutation` ∈ {0, 1}: 0 rotates each row one step left, 1 one step right.
    DistributeThree { permutation: u8 },
}

impl RuleKind {
    pub const PROGRESSION_DELTAS: [i8; 4] = [-2, -1, 1, 2];

    /// The full parameter grid: every instantiation of every family.
    pub const ALL: [RuleKind; 9] = [
        RuleKind::Constant,
        RuleKind::Progression { delta: -2 },
        RuleKind::Progression { delta: -1 },
        RuleKind::Progression { delta: 1 },
        RuleKind::Progression { delta: 2 },
        RuleKind::Arithmetic {
            sign: ArithSign::Plus,
        },
        RuleKind::Arithmetic {
            sign: ArithSign::Minus,
        },
        RuleKind::DistributeThree { permutation: 0 },
        RuleKind::DistributeThree { permutation: 1 },
    ];

    pub fn family(self) -> RuleFamily {
        match self {
            RuleKind::Constant => RuleFamily::Constant,
            RuleKind::Progression { .. } => RuleFamily::Progression,
            RuleKind::Arithmetic { .. } => RuleFamily::Arithmetic,
            RuleKind::DistributeThree { .. } => RuleFamily::DistributeThree,
        }
    }

    /// The integer parameter as written to the manifest (0 for Constant, +1/−1 for the
    /// arithmetic sign).
    pub fn param(self) -> i32 {
        match self {
            RuleKind::Constant => 0,
            RuleKind::Progression { delta } => delta as i32,
            RuleKind::Arithmetic { sign: ArithSign::Plus } => 1,
            RuleKind::Arithmetic {
                sign: ArithSign::Minus,
            } => -1,
            RuleKind::DistributeThree { permutation } => permutation as i32,
        }
    }

    pub fn from_parts(family: RuleFamily, param: i32) -> Option<Self> {
        match family {
            RuleFamily::Constant => (param == 0).then_some(RuleKind::Constant),
            RuleFamily::Progression => match param {
                -2 | -1 | 1 | 2 => Some(RuleKind::Progression { delta: param as i8 }),
                _ => None,
            },
            RuleFamily::Arithmetic => match param {
                1 => Some(RuleKind::Arithmetic {
                    sign: ArithSign::Plus,
                }),
                -1 => Some(RuleKind::Arithmetic {
                    sign: ArithSign::Minus,
                }),
                _ => None,
            },
            RuleFamily::DistributeThree => match param {
                0 | 1 => Some(RuleKind::DistributeThree {
                    permutation: param as u8,
                }),
                _ => None,
            },
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleKind::Constant => write!(f, "constant"),
            RuleKind::Progression { delta } => write!(f, "progression({delta:+})"),
            RuleKind::Arithmetic { sign } => match sign {
                ArithSign::Plus => write!(f, "arithmetic(+)"),
                ArithSign::Minus => write!(f, "arithmetic(-)"),
            },
            RuleKind::DistributeThree { permutation } => {
                write!(f, "distribute_three({permutation})")
            }
        }
    }
}

/// One (component, attribute, rule) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleSpec {
    pub component: u8,
    pub attribute: AttributeKind,
    pub rule: RuleKind,
}

impl RuleSpec {
    pub fn new(component: u8, attribute: AttributeKind, rule: RuleKind) -> Self {
        Self {
            component,
            attribute,
            rule,
        }
    }

    pub fn is_allowed(&self) -> bool {
        self.rule.family().allowed_for(self.attribute) && self.component < 2
    }
}

/// A square slot, in units of 1/120 of the panel edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub cx: u16,
    pub cy: u16,
    pub half: u16,
}

/// Resolution of [`Slot`] coordinates.
pub const SLOT_UNITS: u16 = 120;

impl Slot {
    const fn new(cx: u16, cy: u16, half: u16) -> Self {
        Self { cx, cy, half }
    }

    /// Normalized bounding box `(x0, y0, x1, y1)` in [0, 1]².
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let u = SLOT_UNITS as f64;
        (
            (self.cx - self.half) as f64 / u,
            (self.cy - self.half) as f64 / u,
            (self.cx + self.half) as f64 / u,
            (self.cy + self.half) as f64 / u,
        )
    }
}

const CENTER_SLOTS: [Slot; 1] = [Slot::new(60, 60, 60)];
const GRID2_SLOTS: [Slot; 4] = [
    Slot::new(30, 30, 30),
    Slot::new(90, 30, 30),
    Slot::new(30, 90, 30),
    Slot::new(90, 90, 30),
];
const GRID3_SLOTS: [Slot; 9] = [
    Slot::new(20, 20, 20),
    Slot::new(60, 20, 20),
    Slot::new(100, 20, 20),
    Slot::new(20, 60, 20),
    Slot::new(60, 60, 20),
    Slot::new(100, 60, 20),
    Slot::new(20, 100, 20),
    Slot::new(60, 100, 20),
    Slot::new(100, 100, 20),
];
const LEFT_SLOTS: [Slot; 1] = [Slot::new(30, 60, 30)];
const RIGHT_SLOTS: [Slot; 1] = [Slot::new(90, 60, 30)];
const UP_SLOTS: [Slot; 1] = [Slot::new(60, 30, 30)];
const DOWN_SLOTS: [Slot; 1] = [Slot::new(60, 90, 30)];
const INNER_CENTER_SLOTS: [Slot; 1] = [Slot::new(60, 60, 22)];
const INNER_GRID_SLOTS: [Slot; 4] = [
    Slot::new(45, 45, 15),
    Slot::new(75, 45, 15),
    Slot::new(45, 75, 15),
    Slot::new(75, 75, 15),
];

/// The seven structural layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Configuration {
    Center,
    Grid2x2,
    Grid3x3,
    LeftRight,
    UpDown,
    OutInCenter,
    OutInGrid,
}

impl Configuration {
    pub const ALL: [Configuration; 7] = [
        Configuration::Center,
        Configuration::Grid2x2,
        Configuration::Grid3x3,
        Configuration::LeftRight,
        Configuration::UpDown,
        Configuration::OutInCenter,
        Configuration::OutInGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Center => "center",
            Configuration::Grid2x2 => "grid2x2",
            Configuration::Grid3x3 => "grid3x3",
            Configuration::LeftRight => "left_right",
            Configuration::UpDown => "up_down",
            Configuration::OutInCenter => "out_in_center",
            Configuration::OutInGrid => "out_in_grid",
        }
    }

    /// Parses canonical names plus the short forms used in result tables
    /// (`L-R`, `U-D`, `O-IC`, `O-IG`, `2x2Grid`, ...). Case-insensitive.
    pub fn from_name(name: &str) -> Option<Self> {
        let mut buf = [0u8; 32];
        let bytes = name.as_bytes();
        if bytes.len() > buf.len() {
            return None;
        }
        let mut n = 0;
        for &b in bytes {
            if b == b'-' || b == b'_' || b == b' ' {
                continue;
            }
            buf[n] = if b == b'*' { b'x' } else { b.to_ascii_lowercase() };
            n += 1;
        }
        match &buf[..n] {
            b"center" => Some(Configuration::Center),
            b"grid2x2" | b"2x2grid" | b"2x2" => Some(Configuration::Grid2x2),
            b"grid3x3" | b"3x3grid" | b"3x3" => Some(Configuration::Grid3x3),
            b"leftright" | b"lr" => Some(Configuration::LeftRight),
            b"updown" | b"ud" => Some(Configuration::UpDown),
            b"outincenter" | b"oic" => Some(Configuration::OutInCenter),
            b"outingrid" | b"oig" => Some(Configuration::OutInGrid),
            _ => None,
        }
    }

    pub fn component_count(self) -> usize {
        self.components().len()
    }

    /// Slot geometry per component. Later components are drawn on top.
    pub fn components(self) -> &'static [&'static [Slot]] {
        match self {
            Configuration::Center => &[&CENTER_SLOTS],
            Configuration::Grid2x2 => &[&GRID2_SLOTS],
            Configuration::Grid3x3 => &[&GRID3_SLOTS],
            Configuration::LeftRight => &[&LEFT_SLOTS, &RIGHT_SLOTS],
            Configuration::UpDown => &[&UP_SLOTS, &DOWN_SLOTS],
            Configuration::OutInCenter => &[&CENTER_SLOTS, &INNER_CENTER_SLOTS],
            Configuration::OutInGrid => &[&CENTER_SLOTS, &INNER_GRID_SLOTS],
        }
    }

    /// Slot count of one component.
    pub fn capacity(self, component: usize) -> usize {
        self.components()[component].len()
    }

    /// Attributes that carry a rule group on this component. Single-slot
    /// components have no Number/Position group.
    pub fn governed_attributes(self, component: usize) -> &'static [AttributeKind] {
        if self.capacity(component) > 1 {
            &AttributeKind::ALL
        } else {
            &AttributeKind::ALL[2..]
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One drawn object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub slot: u8,
    /// 0 triangle, 1 square, 2 pentagon, 3 hexagon, 4 circle.
    pub shape: u8,
    pub size: u8,
    pub color: u8,
}

/// Entities of one component in one panel, sorted by slot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ComponentPanel {
    pub entities: Vec<Entity>,
}

impl ComponentPanel {
    /// Builds a component with one entity per set bit of `mask`, all sharing the
    /// same shape, size and color.
    pub fn uniform(mask: u16, shape: u8, size: u8, color: u8) -> Self {
        let entities = (0..16u8)
            .filter(|i| mask & (1 << i) != 0)
            .map(|slot| Entity {
                slot,
                shape,
                size,
                color,
            })
            .collect();
        Self { entities }
    }

    pub fn position_mask(&self) -> u16 {
        self.entities.iter().fold(0, |m, e| m | (1 << e.slot))
    }

    /// The common value of a per-entity attribute, `None` if entities disagree or
    /// the component is empty.
    fn common(&self, get: impl Fn(&Entity) -> u8) -> Option<u16> {
        let first = get(self.entities.first()?);
        self.entities
            .iter()
            .all(|e| get(e) == first)
            .then_some(first as u16)
    }

    /// Encoded attribute value: count for Number, slot bitmask for Position, the
    /// shared level otherwise.
    pub fn value(&self, attribute: AttributeKind) -> Option<u16> {
        match attribute {
            AttributeKind::Number => Some(self.entities.len() as u16),
            AttributeKind::Position => Some(self.position_mask()),
            AttributeKind::Type => self.common(|e| e.shape),
            AttributeKind::Size => self.common(|e| e.size),
            AttributeKind::Color => self.common(|e| e.color),
        }
    }
}

/// One panel in symbolic form.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PanelSymbolic {
    pub components: Vec<ComponentPanel>,
}

impl PanelSymbolic {
    pub fn value(&self, component: usize, attribute: AttributeKind) -> Option<u16> {
        self.components.get(component)?.value(attribute)
    }

    /// Checks the structural invariants against a configuration.
    pub fn is_valid(&self, config: Configuration) -> bool {
        if self.components.len() != config.component_count() {
            return false;
        }
        self.components.iter().enumerate().all(|(c, comp)| {
            let cap = config.capacity(c);
            !comp.entities.is_empty()
                && comp.entities.windows(2).all(|w| w[0].slot < w[1].slot)
                && comp.entities.iter().all(|e| {
                    (e.slot as usize) < cap
                        && (e.shape as u16) < TYPE_LEVELS
                        && (e.size as u16) < SIZE_LEVELS
                        && (e.color as u16) < COLOR_LEVELS
                })
        })
    }
}

/// The rule set of one puzzle.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct RuleAnnotation {
    pub rules: Vec<RuleSpec>,
}

impl RuleAnnotation {
    pub fn get(&self, component: u8, attribute: AttributeKind) -> Option<&RuleSpec> {
        self.rules
            .iter()
            .find(|r| r.component == component && r.attribute == attribute)
    }

    pub fn contains_family(&self, family: RuleFamily) -> bool {
        self.rules.iter().any(|r| r.rule.family() == family)
    }

    /// Checks the annotation invariants for a configuration: one rule each on
    /// Type/Size/Color, exactly one non-Constant rule on Number xor Position for
    /// multi-slot components, none for single-slot ones.
    pub fn is_valid(&self, config: Configuration) -> bool {
        if !self.rules.iter().all(|r| r.is_allowed()) {
            return false;
        }
        if self
            .rules
            .iter()
            .any(|r| r.component as usize >= config.component_count())
        {
            return false;
        }
        (0..config.component_count()).all(|c| {
            let count = |a| {
                self.rules
                    .iter()
                    .filter(|r| r.component as usize == c && r.attribute == a)
                    .count()
            };
            let tsc = [AttributeKind::Type, AttributeKind::Size, AttributeKind::Color]
                .into_iter()
                .all(|a| count(a) == 1);
            let layout = count(AttributeKind::Number) + count(AttributeKind::Position);
            let layout_ok = if config.capacity(c) > 1 {
                layout == 1
                    && self
                        .rules
                        .iter()
                        .filter(|r| r.component as usize == c && r.attribute.is_layout())
                        .all(|r| r.rule != RuleKind::Constant)
            } else {
                layout == 0
            };
            tsc && layout_ok
        })
    }
}

/// A complete puzzle: 8 context panels (row-major, row 3 missing its last
/// panel), 8 answer candidates, the index of the correct one and its rules.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PuzzleInstance {
    pub config: Configuration,
    pub context: [PanelSymbolic; 8],
    pub candidates: [PanelSymbolic; 8],
    pub label: u8,
    pub annotation: RuleAnnotation,
    pub meta: MetaTarget,
    pub seed: u64,
}

impl PuzzleInstance {
    /// Row `r` (0-based) of the matrix, completing row 2 with `candidate`.
    pub fn row(&self, r: usize, candidate: usize) -> [&PanelSymbolic; 3] {
        match r {
            0 | 1 => [
                &self.context[3 * r],
                &self.context[3 * r + 1],
                &self.context[3 * r + 2],
            ],
            _ => [
                &self.context[6],
                &self.context[7],
                &self.candidates[candidate],
            ],
        }
    }

    /// The 16 panels in storage order: context then candidates.
    pub fn panels(&self) -> impl Iterator<Item = &PanelSymbolic> {
        self.context.iter().chain(self.candidates.iter())
    }
}

/// Seed of the `index`-th instance of a corpus drawn from `master`
/// (SplitMix64 finalizer over the combined words).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configuration_shapes() {
        assert_eq!(Configuration::ALL.len(), 7);
        for c in Configuration::ALL {
            let n = c.component_count();
            match c {
                Configuration::Center | Configuration::Grid2x2 | Configuration::Grid3x3 => {
                    assert_eq!(n, 1)
                }
                _ => assert_eq!(n, 2),
            }
            assert_eq!(Configuration::from_name(c.name()), Some(c));
        }
    }

    #[test]
    fn slot_boxes_inside_unit_square_and_disjoint() {
        for c in Configuration::ALL {
            for slots in c.components() {
                for (i, a) in slots.iter().enumerate() {
                    let (x0, y0, x1, y1) = a.bbox();
                    assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0);
                    for b in &slots[i + 1..] {
                        let (u0, v0, u1, v1) = b.bbox();
                        let overlap = x0 < u1 && u0 < x1 && y0 < v1 && v0 < y1;
                        assert!(!overlap, "{c}: {a:?} overlaps {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn table_aliases() {
        assert_eq!(Configuration::from_name("L-R"), Some(Configuration::LeftRight));
        assert_eq!(Configuration::from_name("O-IG"), Some(Configuration::OutInGrid));
        assert_eq!(Configuration::from_name("2*2Grid"), Some(Configuration::Grid2x2));
        assert_eq!(Configuration::from_name("nope"), None);
    }

    #[test]
    fn arithmetic_not_allowed_on_type() {
        assert!(!RuleFamily::Arithmetic.allowed_for(AttributeKind::Type));
        for a in AttributeKind::ALL {
            for f in [RuleFamily::Constant, RuleFamily::Progression, RuleFamily::DistributeThree] {
                assert!(f.allowed_for(a));
            }
        }
    }

    #[test]
    fn rule_param_round_trip() {
        for r in RuleKind::ALL {
            assert_eq!(RuleKind::from_parts(r.family(), r.param()), Some(r));
        }
        assert_eq!(RuleKind::from_parts(RuleFamily::Progression, 3), None);
        assert_eq!(RuleKind::from_parts(RuleFamily::Progression, 0), None);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0));
    }
}
