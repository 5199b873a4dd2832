//! Seeded puzzle generation and distractor synthesis.

use super::rules::distribute_row;
use super::{
    encode_meta_target, sample_row_values, AttributeKind, ComponentPanel, Configuration,
    PanelSymbolic, PuzzleInstance, RuleAnnotation, RuleFamily, RuleKind, RuleSpec, ValueDomain,
    COLOR_LEVELS, SIZE_LEVELS, TYPE_LEVELS,
};
use crate::oracle::{infer_rules, score_candidate};
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Attempt cap shared by every rejection-sampling loop.
pub const RETRY_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GenerateError {
    #[error("generation retry cap exceeded ({attempts} attempts)")]
    GenerationRetryExceeded { attempts: usize },
}

fn below<R: Rng + ?Sized>(rng: &mut R, n: u32) -> u32 {
    rng.gen_range(0..n)
}

/// Draws a rule for one attribute. Layout attributes of multi-slot components
/// never draw Constant.
pub fn sample_rule<R: Rng + ?Sized>(
    attribute: AttributeKind,
    capacity: usize,
    rng: &mut R,
) -> RuleKind {
    let families: Vec<RuleFamily> = RuleFamily::ALL
        .into_iter()
        .filter(|f| f.allowed_for(attribute))
        .filter(|&f| !(attribute.is_layout() && capacity > 1 && f == RuleFamily::Constant))
        .collect();
    let family = families[below(rng, families.len() as u32) as usize];
    let options: Vec<RuleKind> = RuleKind::ALL
        .into_iter()
        .filter(|r| r.family() == family)
        .collect();
    options[below(rng, options.len() as u32) as usize]
}

/// Draws a rule set: Type, Size and Color on every component, plus a
/// non-Constant rule on exactly one of Number/Position for multi-slot components.
pub fn sample_rule_annotation<R: Rng + ?Sized>(config: Configuration, rng: &mut R) -> RuleAnnotation {
    let mut rules = Vec::new();
    for c in 0..config.component_count() {
        let cap = config.capacity(c);
        if cap > 1 {
            let attribute = if below(rng, 2) == 0 {
                AttributeKind::Number
            } else {
                AttributeKind::Position
            };
            rules.push(RuleSpec::new(c as u8, attribute, sample_rule(attribute, cap, rng)));
        }
        for attribute in [AttributeKind::Type, AttributeKind::Size, AttributeKind::Color] {
            rules.push(RuleSpec::new(c as u8, attribute, sample_rule(attribute, cap, rng)));
        }
    }
    RuleAnnotation { rules }
}

/// Values of one rule over the three rows.
fn sample_rows<R: Rng + ?Sized>(
    rule: RuleKind,
    domain: ValueDomain,
    rng: &mut R,
) -> Option<[[u16; 3]; 3]> {
    match rule {
        RuleKind::DistributeThree { permutation } => {
            let first = sample_row_values(rule, domain, rng).ok()?;
            Some(core::array::from_fn(|k| distribute_row(first, permutation, k)))
        }
        _ => {
            let mut rows = [[0u16; 3]; 3];
            for row in rows.iter_mut() {
                *row = sample_row_values(rule, domain, rng).ok()?;
            }
            Some(rows)
        }
    }
}

/// Uniform random subset of `count` slots out of `capacity`.
fn random_subset<R: Rng + ?Sized>(rng: &mut R, capacity: usize, count: usize) -> u16 {
    let mut slots: Vec<u8> = (0..capacity as u8).collect();
    let mut mask = 0u16;
    for _ in 0..count {
        let i = below(rng, slots.len() as u32) as usize;
        mask |= 1 << slots.swap_remove(i);
    }
    mask
}

/// Values of an annotated attribute over the nine panels. Outer `None`: the rule's
/// parameters admit no values; inner `None`: the attribute carries no rule.
fn grid_values<R: Rng + ?Sized>(
    annotation: &RuleAnnotation,
    component: usize,
    capacity: usize,
    attribute: AttributeKind,
    rng: &mut R,
) -> Option<Option<[u16; 9]>> {
    let Some(spec) = annotation.get(component as u8, attribute) else {
        return Some(None);
    };
    let rows = sample_rows(spec.rule, ValueDomain::new(attribute, capacity), rng)?;
    Some(Some(core::array::from_fn(|i| rows[i / 3][i % 3])))
}

/// Realizes an annotation as nine panels (row-major), or `None` if some rule's
/// parameters admit no values.
fn realize<R: Rng + ?Sized>(
    config: Configuration,
    annotation: &RuleAnnotation,
    rng: &mut R,
) -> Option<Vec<PanelSymbolic>> {
    let mut panels: Vec<PanelSymbolic> = (0..9).map(|_| PanelSymbolic::default()).collect();
    for c in 0..config.component_count() {
        let cap = config.capacity(c);
        let shape = grid_values(annotation, c, cap, AttributeKind::Type, rng)??;
        let size = grid_values(annotation, c, cap, AttributeKind::Size, rng)??;
        let color = grid_values(annotation, c, cap, AttributeKind::Color, rng)??;
        let masks: [u16; 9] = if cap == 1 {
            [1; 9]
        } else if let Some(m) = grid_values(annotation, c, cap, AttributeKind::Position, rng)? {
            m
        } else {
            let counts = grid_values(annotation, c, cap, AttributeKind::Number, rng)??;
            let mut m = [0u16; 9];
            for (slot, n) in m.iter_mut().zip(counts) {
                *slot = random_subset(rng, cap, n as usize);
            }
            m
        };
        for (i, p) in panels.iter_mut().enumerate() {
            p.components.push(ComponentPanel::uniform(
                masks[i],
                shape[i] as u8,
                size[i] as u8,
                color[i] as u8,
            ));
        }
    }
    Some(panels)
}

/// Applies one random change to `(component, attribute)`.
fn mutate<R: Rng + ?Sized>(
    panel: &mut PanelSymbolic,
    config: Configuration,
    component: usize,
    attribute: AttributeKind,
    rng: &mut R,
) {
    let cap = config.capacity(component);
    let comp = &mut panel.components[component];
    let first = comp.entities[0];
    let differ = |rng: &mut R, current: u8, levels: u16| -> u8 {
        let v = below(rng, levels as u32 - 1) as u8;
        if v >= current {
            v + 1
        } else {
            v
        }
    };
    match attribute {
        AttributeKind::Type => {
            let v = differ(rng, first.shape, TYPE_LEVELS);
            comp.entities.iter_mut().for_each(|e| e.shape = v);
        }
        AttributeKind::Size => {
            let v = differ(rng, first.size, SIZE_LEVELS);
            comp.entities.iter_mut().for_each(|e| e.size = v);
        }
        AttributeKind::Color => {
            let v = differ(rng, first.color, COLOR_LEVELS);
            comp.entities.iter_mut().for_each(|e| e.color = v);
        }
        AttributeKind::Number => {
            let n = comp.entities.len();
            let new_n = differ(rng, (n - 1) as u8, cap as u16) as usize + 1;
            let mask = random_subset(rng, cap, new_n);
            *comp = ComponentPanel::uniform(mask, first.shape, first.size, first.color);
        }
        AttributeKind::Position => {
            let old = comp.position_mask();
            let n = comp.entities.len();
            let mut mask = old;
            for _ in 0..RETRY_CAP {
                mask = if n < cap {
                    random_subset(rng, cap, n)
                } else {
                    1 + below(rng, (1u32 << cap) - 1) as u16
                };
                if mask != old {
                    break;
                }
            }
            *comp = ComponentPanel::uniform(mask, first.shape, first.size, first.color);
        }
    }
}

/// Builds seven distractors around `answer` and inserts the answer at a random
/// index. Each distractor changes 1–3 attribute groups of the answer, differs from
/// every other candidate, and scores strictly below the answer under the oracle
/// (hence violates at least one annotated rule).
pub fn generate_candidates<R: Rng + ?Sized>(
    answer: &PanelSymbolic,
    annotation: &RuleAnnotation,
    context: &[PanelSymbolic; 8],
    config: Configuration,
    rng: &mut R,
) -> Result<([PanelSymbolic; 8], u8), GenerateError> {
    debug_assert!(annotation.is_valid(config));
    let inferred = infer_rules(
        [&context[0], &context[1], &context[2]],
        [&context[3], &context[4], &context[5]],
        config,
    );
    let best = score_candidate(&inferred, context, answer, config);

    let mut choices: Vec<(usize, AttributeKind)> = Vec::new();
    for c in 0..config.component_count() {
        for &a in config.governed_attributes(c) {
            choices.push((c, a));
        }
    }

    let mut distractors: Vec<PanelSymbolic> = Vec::with_capacity(7);
    let mut attempts = 0;
    while distractors.len() < 7 {
        attempts += 1;
        if attempts > RETRY_CAP {
            return Err(GenerateError::GenerationRetryExceeded { attempts: RETRY_CAP });
        }
        let k = (1 + below(rng, 3) as usize).min(choices.len());
        let mut pool = choices.clone();
        let mut candidate = answer.clone();
        for _ in 0..k {
            let (c, a) = pool.swap_remove(below(rng, pool.len() as u32) as usize);
            mutate(&mut candidate, config, c, a, rng);
        }
        if candidate == *answer || distractors.contains(&candidate) {
            continue;
        }
        if score_candidate(&inferred, context, &candidate, config) >= best {
            continue;
        }
        distractors.push(candidate);
    }

    let label = below(rng, 8) as u8;
    let mut rest = distractors.into_iter();
    let candidates = core::array::from_fn(|i| {
        if i == label as usize {
            answer.clone()
        } else {
            rest.next().expect("seven distractors")
        }
    });
    Ok((candidates, label))
}

/// Deterministic puzzle for `(config, seed)`.
pub fn generate_puzzle(config: Configuration, seed: u64) -> Result<PuzzleInstance, GenerateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RETRY_CAP {
        let annotation = sample_rule_annotation(config, &mut rng);
        let Some(mut panels) = realize(config, &annotation, &mut rng) else {
            continue;
        };
        let answer = panels.pop().expect("nine panels");
        let context: [PanelSymbolic; 8] = match panels.try_into() {
            Ok(c) => c,
            Err(_) => unreachable!("eight context panels"),
        };
        let (candidates, label) =
            match generate_candidates(&answer, &annotation, &context, config, &mut rng) {
                Ok(v) => v,
                Err(_) => continue,
            };
        let meta = encode_meta_target(&annotation);
        return Ok(PuzzleInstance {
            config,
            context,
            candidates,
            label,
            annotation,
            meta,
            seed,
        });
    }
    Err(GenerateError::GenerationRetryExceeded { attempts: RETRY_CAP })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puzzle::rule_satisfied;

    #[test]
    fn center_annotation_has_no_layout_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = sample_rule_annotation(Configuration::Center, &mut rng);
            assert_eq!(a.rules.len(), 3);
            assert!(a.rules.iter().all(|r| !r.attribute.is_layout() && r.component == 0));
            assert!(a.is_valid(Configuration::Center));
        }
    }

    #[test]
    fn grid_annotation_has_one_layout_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a = sample_rule_annotation(Configuration::Grid2x2, &mut rng);
            let layout: Vec<_> = a.rules.iter().filter(|r| r.attribute.is_layout()).collect();
            assert_eq!(layout.len(), 1);
            assert_ne!(layout[0].rule, RuleKind::Constant);
            assert!(a.is_valid(Configuration::Grid2x2));
        }
    }

    #[test]
    fn out_in_center_has_two_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = sample_rule_annotation(Configuration::OutInCenter, &mut rng);
        for c in 0..2u8 {
            for attr in [AttributeKind::Type, AttributeKind::Size, AttributeKind::Color] {
                assert!(a.get(c, attr).is_some());
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        for config in Configuration::ALL {
            let a = generate_puzzle(config, 0).unwrap();
            let b = generate_puzzle(config, 0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn progression_distractor_violates() {
        // Answer Size=4 after (2,3): a Size=5 mutant breaks 2,3,4 progression.
        let domain = ValueDomain::new(AttributeKind::Size, 1);
        let p = RuleKind::Progression { delta: 1 };
        assert!(rule_satisfied(p, domain, [2, 3, 4]));
        assert!(!rule_satisfied(p, domain, [2, 3, 5]));
    }

    #[test]
    fn distractors_are_distinct_and_inferior() {
        for seed in 0..30 {
            let inst = generate_puzzle(Configuration::Grid3x3, seed).unwrap();
            for i in 0..8 {
                for j in i + 1..8 {
                    assert_ne!(inst.candidates[i], inst.candidates[j]);
                }
            }
        }
    }
}
