//! Multi-hot meta-target encoding.
//!
//! Layout is component-major: component `c` occupies bits `9c..9c+9`, the first
//! five marking governed attributes (by attribute code) and the last four marking
//! rule families present on that component (by family code).

use super::{AttributeKind, RuleAnnotation, RuleFamily};
use alloc::vec::Vec;

pub const META_LEN: usize = 18;
const PER_COMPONENT: usize = 9;
const RULE_OFFSET: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MetaTarget {
    pub bits: [u8; META_LEN],
}

impl MetaTarget {
    pub fn attribute_bit(component: usize, attribute: AttributeKind) -> usize {
        component * PER_COMPONENT + attribute.code() as usize
    }

    pub fn family_bit(component: usize, family: RuleFamily) -> usize {
        component * PER_COMPONENT + RULE_OFFSET + family.code() as usize
    }

    pub fn has_attribute(&self, component: usize, attribute: AttributeKind) -> bool {
        self.bits[Self::attribute_bit(component, attribute)] != 0
    }

    pub fn has_family(&self, component: usize, family: RuleFamily) -> bool {
        self.bits[Self::family_bit(component, family)] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn from_bits(bits: &[u8]) -> Option<Self> {
        let bits: [u8; META_LEN] = bits.try_into().ok()?;
        bits.iter().all(|&b| b <= 1).then_some(Self { bits })
    }
}

pub fn encode_meta_target(annotation: &RuleAnnotation) -> MetaTarget {
    let mut meta = MetaTarget::default();
    for rule in &annotation.rules {
        let c = rule.component as usize;
        meta.bits[MetaTarget::attribute_bit(c, rule.attribute)] = 1;
        meta.bits[MetaTarget::family_bit(c, rule.rule.family())] = 1;
    }
    meta
}

/// What a meta-target records: per component, the governed attributes and the rule
/// families in use.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetaSummary {
    pub attributes: [Vec<AttributeKind>; 2],
    pub families: [Vec<RuleFamily>; 2],
}

impl MetaSummary {
    pub fn of_annotation(annotation: &RuleAnnotation) -> Self {
        let mut s = Self::default();
        for r in &annotation.rules {
            let c = r.component as usize;
            s.attributes[c].push(r.attribute);
            s.families[c].push(r.rule.family());
        }
        for c in 0..2 {
            s.attributes[c].sort();
            s.attributes[c].dedup();
            s.families[c].sort();
            s.families[c].dedup();
        }
        s
    }
}

pub fn decode_meta_target(meta: &MetaTarget) -> MetaSummary {
    let mut s = MetaSummary::default();
    for c in 0..2 {
        s.attributes[c] = AttributeKind::ALL
            .into_iter()
            .filter(|&a| meta.has_attribute(c, a))
            .collect();
        s.families[c] = RuleFamily::ALL
            .into_iter()
            .filter(|&f| meta.has_family(c, f))
            .collect();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puzzle::{RuleKind, RuleSpec};
    use alloc::vec;

    #[test]
    fn center_example() {
        let ann = RuleAnnotation {
            rules: vec![
                RuleSpec::new(0, AttributeKind::Type, RuleKind::Constant),
                RuleSpec::new(0, AttributeKind::Size, RuleKind::Progression { delta: 1 }),
                RuleSpec::new(0, AttributeKind::Color, RuleKind::Constant),
            ],
        };
        let m = encode_meta_target(&ann);
        let mut expected = [0u8; META_LEN];
        expected[2] = 1;
        expected[3] = 1;
        expected[4] = 1;
        expected[5] = 1; // constant
        expected[6] = 1; // progression
        assert_eq!(m.bits, expected);
        assert!(m.bits[9..].iter().all(|&b| b == 0));
        assert_eq!(decode_meta_target(&m), MetaSummary::of_annotation(&ann));
    }

    #[test]
    fn from_bits_rejects_non_binary() {
        assert!(MetaTarget::from_bits(&[0; META_LEN]).is_some());
        assert!(MetaTarget::from_bits(&[2; META_LEN]).is_none());
        assert!(MetaTarget::from_bits(&[0; 17]).is_none());
    }
}
