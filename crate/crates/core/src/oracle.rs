//! Exhaustive symbolic solver.
//!
//! Rules are inferred from the two complete rows by enumerating the whole
//! parameter grid, then each candidate is scored by the number of attribute
//! groups it keeps consistent. Number and Position of a multi-slot component form
//! a single group, so a candidate is not rewarded twice for one layout.

use crate::puzzle::{
    rows_satisfy, AttributeKind, Configuration, PanelSymbolic, PuzzleInstance, RuleKind,
    RuleSpec, ValueDomain,
};
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("ambiguous tie at score {score} between candidates {first} and {second} (seed {seed})")]
    AmbiguousTie {
        seed: u64,
        score: u32,
        first: usize,
        second: usize,
    },
}

fn triple(row: &[&PanelSymbolic; 3], component: usize, attribute: AttributeKind) -> Option<[u16; 3]> {
    Some([
        row[0].value(component, attribute)?,
        row[1].value(component, attribute)?,
        row[2].value(component, attribute)?,
    ])
}

fn row_triples(
    rows: &[[&PanelSymbolic; 3]],
    component: usize,
    attribute: AttributeKind,
) -> Option<Vec<[u16; 3]>> {
    rows.iter().map(|r| triple(r, component, attribute)).collect()
}

/// All rule instantiations consistent with every given row, per governed
/// (component, attribute). Taking more rows can only shrink the result.
pub fn infer_rows(rows: &[[&PanelSymbolic; 3]], config: Configuration) -> Vec<RuleSpec> {
    let mut out = Vec::new();
    for c in 0..config.component_count() {
        let cap = config.capacity(c);
        for &attribute in config.governed_attributes(c) {
            let Some(values) = row_triples(rows, c, attribute) else {
                continue;
            };
            let domain = ValueDomain::new(attribute, cap);
            for rule in RuleKind::ALL {
                if rule.family().allowed_for(attribute) && rows_satisfy(rule, domain, &values) {
                    out.push(RuleSpec::new(c as u8, attribute, rule));
                }
            }
        }
    }
    out
}

/// Rules consistent with both complete rows.
pub fn infer_rules(
    row1: [&PanelSymbolic; 3],
    row2: [&PanelSymbolic; 3],
    config: Configuration,
) -> Vec<RuleSpec> {
    infer_rows(&[row1, row2], config)
}

/// Attribute group of a rule: Number and Position share one.
fn group_of(attribute: AttributeKind) -> u8 {
    if attribute.is_layout() {
        0
    } else {
        attribute.code()
    }
}

/// Number of attribute groups for which at least one inferred rule still holds
/// once `candidate` completes row 3.
pub fn score_candidate(
    inferred: &[RuleSpec],
    context: &[PanelSymbolic; 8],
    candidate: &PanelSymbolic,
    config: Configuration,
) -> u32 {
    let rows = [
        [&context[0], &context[1], &context[2]],
        [&context[3], &context[4], &context[5]],
        [&context[6], &context[7], candidate],
    ];
    let mut satisfied: Vec<(u8, u8)> = Vec::new();
    for spec in inferred {
        let key = (spec.component, group_of(spec.attribute));
        if satisfied.contains(&key) {
            continue;
        }
        let c = spec.component as usize;
        if c >= config.component_count() {
            continue;
        }
        let domain = ValueDomain::new(spec.attribute, config.capacity(c));
        if let Some(values) = row_triples(&rows, c, spec.attribute) {
            if rows_satisfy(spec.rule, domain, &values) {
                satisfied.push(key);
            }
        }
    }
    satisfied.len() as u32
}

/// Scores of all eight candidates.
pub fn score_all(instance: &PuzzleInstance) -> [u32; 8] {
    let inferred = infer_rules(instance.row(0, 0), instance.row(1, 0), instance.config);
    core::array::from_fn(|k| {
        score_candidate(
            &inferred,
            &instance.context,
            &instance.candidates[k],
            instance.config,
        )
    })
}

/// Index of the unique best-scoring candidate.
pub fn solve(instance: &PuzzleInstance) -> Result<usize, OracleError> {
    let scores = score_all(instance);
    let best = (0..8).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
    if let Some(other) = (0..8).find(|&k| k != best && scores[k] == scores[best]) {
        return Err(OracleError::AmbiguousTie {
            seed: instance.seed,
            score: scores[best],
            first: best.min(other),
            second: best.max(other),
        });
    }
    Ok(best)
}
