//! Rule semantics over encoded attribute values.
//!
//! Values are `u16`: the entity count for Number, a slot bitmask for Position,
//! and the level index for Type, Size and Color.

use super::{
    generate::RETRY_CAP, ArithSign, AttributeKind, RuleKind, COLOR_LEVELS, SIZE_LEVELS,
    TYPE_LEVELS,
};
use alloc::vec::Vec;
use rand::Rng;

/// No value triple satisfies the sampled rule parameters in this domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("no valid value triple for {rule} on {attribute:?}")]
pub struct DomainExhausted {
    pub attribute: AttributeKind,
    pub rule: RuleKind,
}

/// The value domain of one attribute on a component with `capacity` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueDomain {
    pub attribute: AttributeKind,
    pub capacity: u8,
}

impl ValueDomain {
    pub fn new(attribute: AttributeKind, capacity: usize) -> Self {
        Self {
            attribute,
            capacity: capacity as u8,
        }
    }

    pub fn contains(&self, v: u16) -> bool {
        match self.attribute {
            AttributeKind::Number => v >= 1 && v <= self.capacity as u16,
            AttributeKind::Position => v != 0 && (v as u32) < (1u32 << self.capacity),
            AttributeKind::Type => v < TYPE_LEVELS,
            AttributeKind::Size => v < SIZE_LEVELS,
            AttributeKind::Color => v < COLOR_LEVELS,
        }
    }

    /// Inclusive range of a scalar domain; `None` for Position.
    fn scalar_range(&self) -> Option<(u16, u16)> {
        match self.attribute {
            AttributeKind::Number => Some((1, self.capacity as u16)),
            AttributeKind::Position => None,
            AttributeKind::Type => Some((0, TYPE_LEVELS - 1)),
            AttributeKind::Size => Some((0, SIZE_LEVELS - 1)),
            AttributeKind::Color => Some((0, COLOR_LEVELS - 1)),
        }
    }

    fn full_mask(&self) -> u16 {
        ((1u32 << self.capacity) - 1) as u16
    }
}

/// Cyclic shift of slot indices: bit `i` moves to `(i + delta) mod capacity`.
fn rotate_mask(mask: u16, delta: i8, capacity: u8) -> u16 {
    let cap = capacity as i32;
    (0..cap)
        .filter(|i| mask & (1 << i) != 0)
        .fold(0u16, |acc, i| acc | 1 << (i + delta as i32).rem_euclid(cap))
}

/// One progression step, `None` when it leaves a scalar domain.
fn progress(domain: ValueDomain, v: u16, delta: i8) -> Option<u16> {
    match domain.attribute {
        AttributeKind::Position => Some(rotate_mask(v, delta, domain.capacity)),
        AttributeKind::Type => {
            Some((v as i32 + delta as i32).rem_euclid(TYPE_LEVELS as i32) as u16)
        }
        _ => {
            let next = v as i32 + delta as i32;
            u16::try_from(next).ok().filter(|&n| domain.contains(n))
        }
    }
}

fn arithmetic(domain: ValueDomain, sign: ArithSign, a: u16, b: u16) -> Option<u16> {
    match (domain.attribute, sign) {
        (AttributeKind::Position, ArithSign::Plus) => Some(a | b),
        (AttributeKind::Position, ArithSign::Minus) => Some(a & !b),
        (_, ArithSign::Plus) => Some(a + b),
        (_, ArithSign::Minus) => a.checked_sub(b),
    }
}

/// Whether one row triple matches the rule. For DistributeThree this is the
/// per-row part (three distinct values); the cross-row Latin-square structure is
/// checked by [`rows_satisfy`].
pub fn rule_satisfied(rule: RuleKind, domain: ValueDomain, triple: [u16; 3]) -> bool {
    if !triple.iter().all(|&v| domain.contains(v)) {
        return false;
    }
    let [a, b, c] = triple;
    match rule {
        RuleKind::Constant => a == b && b == c,
        RuleKind::Progression { delta } => {
            progress(domain, a, delta) == Some(b) && progress(domain, b, delta) == Some(c)
        }
        RuleKind::Arithmetic { sign } => arithmetic(domain, sign, a, b) == Some(c),
        RuleKind::DistributeThree { .. } => a != b && b != c && a != c,
    }
}

/// Offset between consecutive rows of a DistributeThree rule.
fn distribute_shift(permutation: u8) -> usize {
    if permutation == 0 {
        1
    } else {
        2
    }
}

/// Row `k` of a DistributeThree rule given its first row.
pub(crate) fn distribute_row(first: [u16; 3], permutation: u8, k: usize) -> [u16; 3] {
    let s = distribute_shift(permutation) * k;
    [first[s % 3], first[(1 + s) % 3], first[(2 + s) % 3]]
}

/// Whether a sequence of rows (top to bottom) is consistent with the rule.
pub fn rows_satisfy(rule: RuleKind, domain: ValueDomain, rows: &[[u16; 3]]) -> bool {
    if !rows.iter().all(|&r| rule_satisfied(rule, domain, r)) {
        return false;
    }
    match (rule, rows.first()) {
        (RuleKind::DistributeThree { permutation }, Some(&first)) => rows
            .iter()
            .enumerate()
            .all(|(k, &r)| r == distribute_row(first, permutation, k)),
        _ => true,
    }
}

fn below<R: Rng + ?Sized>(rng: &mut R, n: u32) -> u32 {
    rng.gen_range(0..n)
}

fn pick<T: Copy, R: Rng + ?Sized>(rng: &mut R, items: &[T]) -> Option<T> {
    if items.is_empty() {
        None
    } else {
        Some(items[below(rng, items.len() as u32) as usize])
    }
}

fn random_mask<R: Rng + ?Sized>(rng: &mut R, domain: ValueDomain) -> u16 {
    1 + below(rng, domain.full_mask() as u32) as u16
}

/// Draws one row triple consistent with `rule`. For DistributeThree this is the
/// first row; later rows are its rotations.
pub fn sample_row_values<R: Rng + ?Sized>(
    rule: RuleKind,
    domain: ValueDomain,
    rng: &mut R,
) -> Result<[u16; 3], DomainExhausted> {
    let exhausted = DomainExhausted {
        attribute: domain.attribute,
        rule,
    };
    match domain.scalar_range() {
        Some((lo, hi)) => {
            let values: Vec<u16> = (lo..=hi).collect();
            let triples: Vec<[u16; 3]> = match rule {
                RuleKind::Constant => values.iter().map(|&v| [v, v, v]).collect(),
                RuleKind::Progression { delta } => values
                    .iter()
                    .filter_map(|&v| {
                        let b = progress(domain, v, delta)?;
                        Some([v, b, progress(domain, b, delta)?])
                    })
                    .collect(),
                RuleKind::Arithmetic { sign } => {
                    let mut out = Vec::new();
                    for &a in &values {
                        for &b in &values {
                            if a == 0 || b == 0 {
                                continue;
                            }
                            if let Some(c) = arithmetic(domain, sign, a, b) {
                                if domain.contains(c) {
                                    out.push([a, b, c]);
                                }
                            }
                        }
                    }
                    out
                }
                RuleKind::DistributeThree { .. } => {
                    if values.len() < 3 {
                        return Err(exhausted);
                    }
                    let mut pool = values.clone();
                    let mut t = [0u16; 3];
                    for slot in t.iter_mut() {
                        let i = below(rng, pool.len() as u32) as usize;
                        *slot = pool.swap_remove(i);
                    }
                    return Ok(t);
                }
            };
            pick(rng, &triples).ok_or(exhausted)
        }
        None => {
            // Position: rejection sampling over slot masks.
            if domain.capacity < 2 {
                return match rule {
                    RuleKind::Constant => Ok([1, 1, 1]),
                    _ => Err(exhausted),
                };
            }
            for _ in 0..RETRY_CAP {
                let a = random_mask(rng, domain);
                let candidate = match rule {
                    RuleKind::Constant => Some([a, a, a]),
                    RuleKind::Progression { delta } => {
                        let b = rotate_mask(a, delta, domain.capacity);
                        (b != a).then(|| [a, b, rotate_mask(b, delta, domain.capacity)])
                    }
                    RuleKind::Arithmetic { sign } => {
                        let b = random_mask(rng, domain);
                        let c = arithmetic(domain, sign, a, b).unwrap_or(0);
                        let ok = match sign {
                            ArithSign::Plus => c != a && c != b,
                            ArithSign::Minus => c != 0 && c != a,
                        };
                        ok.then_some([a, b, c])
                    }
                    RuleKind::DistributeThree { .. } => {
                        let b = random_mask(rng, domain);
                        let c = random_mask(rng, domain);
                        (a != b && b != c && a != c).then_some([a, b, c])
                    }
                };
                if let Some(t) = candidate {
                    return Ok(t);
                }
            }
            Err(exhausted)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn size() -> ValueDomain {
        ValueDomain::new(AttributeKind::Size, 1)
    }

    #[test]
    fn constant_examples() {
        assert!(rule_satisfied(RuleKind::Constant, size(), [5, 5, 5]));
        assert!(!rule_satisfied(RuleKind::Constant, size(), [5, 5, 4]));
    }

    #[test]
    fn progression_examples() {
        let p1 = RuleKind::Progression { delta: 1 };
        assert!(rule_satisfied(p1, size(), [2, 3, 4]));
        assert!(!rule_satisfied(p1, size(), [2, 3, 5]));
        // Type progresses modulo the five shapes.
        let ty = ValueDomain::new(AttributeKind::Type, 1);
        assert!(rule_satisfied(p1, ty, [3, 4, 0]));
        assert!(rule_satisfied(RuleKind::Progression { delta: -2 }, ty, [1, 4, 2]));
    }

    #[test]
    fn arithmetic_examples() {
        let plus = RuleKind::Arithmetic {
            sign: ArithSign::Plus,
        };
        let minus = RuleKind::Arithmetic {
            sign: ArithSign::Minus,
        };
        assert!(rule_satisfied(plus, size(), [1, 2, 3]));
        assert!(!rule_satisfied(plus, size(), [3, 4, 7]), "7 is outside Size");
        assert!(rule_satisfied(minus, size(), [5, 2, 3]));
        let pos = ValueDomain::new(AttributeKind::Position, 4);
        assert!(rule_satisfied(plus, pos, [0b0011, 0b0110, 0b0111]));
        assert!(rule_satisfied(minus, pos, [0b0011, 0b0110, 0b0001]));
    }

    #[test]
    fn position_progression_is_cyclic_shift() {
        let pos = ValueDomain::new(AttributeKind::Position, 4);
        let p = RuleKind::Progression { delta: 1 };
        assert!(rule_satisfied(p, pos, [0b1001, 0b0011, 0b0110]));
        assert_eq!(rotate_mask(0b1000, 1, 4), 0b0001);
        assert_eq!(rotate_mask(0b0001, -1, 4), 0b1000);
    }

    #[test]
    fn distribute_three_latin_square() {
        let c = ValueDomain::new(AttributeKind::Color, 1);
        let rows = [[1, 2, 3], [2, 3, 1], [3, 1, 2]];
        assert!(rows_satisfy(RuleKind::DistributeThree { permutation: 0 }, c, &rows));
        assert!(!rows_satisfy(RuleKind::DistributeThree { permutation: 1 }, c, &rows));
        let right = [[1, 2, 3], [3, 1, 2], [2, 3, 1]];
        assert!(rows_satisfy(RuleKind::DistributeThree { permutation: 1 }, c, &right));
        assert!(!rule_satisfied(
            RuleKind::DistributeThree { permutation: 0 },
            c,
            [5, 5, 5]
        ));
    }

    #[test]
    fn out_of_domain_never_satisfies() {
        let n = ValueDomain::new(AttributeKind::Number, 4);
        assert!(!rule_satisfied(RuleKind::Constant, n, [0, 0, 0]));
        assert!(!rule_satisfied(RuleKind::Constant, n, [5, 5, 5]));
    }

    #[test]
    fn exhausted_parameters_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = ValueDomain::new(AttributeKind::Number, 4);
        // 1, 3, 5 already leaves a four-slot grid.
        let err = sample_row_values(RuleKind::Progression { delta: 2 }, n, &mut rng);
        assert!(err.is_err());
        let single = ValueDomain::new(AttributeKind::Position, 1);
        assert!(sample_row_values(RuleKind::Progression { delta: 1 }, single, &mut rng).is_err());
    }

    #[test]
    fn samples_satisfy_their_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for attr in AttributeKind::ALL {
            for cap in [1usize, 4, 9] {
                let domain = ValueDomain::new(attr, cap);
                for rule in RuleKind::ALL {
                    if !rule.family().allowed_for(attr) {
                        continue;
                    }
                    for _ in 0..20 {
                        if let Ok(t) = sample_row_values(rule, domain, &mut rng) {
                            assert!(rule_satisfied(rule, domain, t), "{rule} {attr:?} {t:?}");
                        }
                    }
                }
            }
        }
    }
}
