//! Finite-difference checks for every differentiable tape operation and for
//! the full model objective on a miniature network.

use crate::model::{Example, MmonModel, Mode, ModelDims, StepConfig};
use crate::puzzle::{Configuration, RuleAnnotation};
use crate::tensor::{gradient_check, Tape, Tensor, TensorError, Var};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Uniform draws in `[-1, 1]` pushed at least `10·h` away from zero, so relu
/// kinks never sit inside a central difference.
fn away_from_kinks(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            let margin = 10.0 * STEP;
            if v.abs() < margin {
                margin.copysign(v)
            } else {
                v
            }
        })
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, away_from_kinks(rng, n)).expect("numel from shape")
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// Weighted sum of an output so every element contributes a distinct slope.
fn weighted(t: &mut Tape, v: Var) -> Result<Var, TensorError> {
    let n = t.data(v).len();
    let shape = t.shape(v).to_vec();
    let w = (0..n).map(|i| 0.5 + (i % 7) as f64 * 0.25).collect();
    let w = t.constant(&shape, w)?;
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("mul_scalar", vec![vec![], vec![5]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("scale", vec![vec![6]], |t, v| {
            let y = t.scale(v[0], -1.5);
            weighted(t, y)
        }),
        ("relu", vec![vec![12]], |t, v| {
            let y = t.relu(v[0]);
            weighted(t, y)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("add_row_bias", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            weighted(t, y)
        }),
        ("conv2d", vec![vec![2, 5, 5], vec![3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            weighted(t, y)
        }),
        (
            "conv2d_strided_bias",
            vec![vec![2, 2, 7, 7], vec![3, 2, 3, 3], vec![3]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted(t, y)
            }
        ),
        ("sum_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.sum(v[0], 1)?;
            weighted(t, y)
        }),
        ("mean_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.mean(v[0], 2)?;
            weighted(t, y)
        }),
        ("reshape", vec![vec![2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted(t, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let y = t.concat(v[0], v[1], 1)?;
            weighted(t, y)
        }),
        ("index_select", vec![vec![4, 3]], |t, v| {
            let y = t.index_select(v[0], &[2, 0, 2, 3])?;
            weighted(t, y)
        }),
        ("cosine", vec![vec![6], vec![6]], |t, v| {
            let y = t.cosine(v[0], v[1])?;
            Ok(t.scale(y, 2.0))
        }),
        ("cosine_rows", vec![vec![3, 5], vec![3, 5]], |t, v| {
            let y = t.cosine(v[0], v[1])?;
            weighted(t, y)
        }),
        ("softmax_cross_entropy", vec![vec![8]], |t, v| {
            t.softmax_cross_entropy(v[0], 5)
        }),
        ("margin_loss", vec![vec![8]], |t, v| {
            crate::model::loss(t, v[0], 2, 0.3)
        }),
    ]
}

/// Runs every operation check `trials` times with fresh random inputs.
pub fn op_reports(trials: usize, seed: u64) -> Result<Vec<GradReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| tensor(&mut rng, s)).collect();
            worst = worst.max(gradient_check(f, &inputs, STEP)?);
        }
        out.push(GradReport {
            name: name.into(),
            trials,
            max_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        conv1: 3,
        conv2: 4,
        embed: 6,
        relation_hidden: 5,
        module_hidden: 5,
        transform: 4,
    }
}

/// A synthetic 16×16 example with random pixels and a fixed annotation.
pub fn tiny_example(rng: &mut ChaCha8Rng) -> Example {
    use crate::puzzle::{AttributeKind, RuleKind, RuleSpec};
    let size = 16;
    let pixels = (0..16 * size * size).map(|_| rng.gen_range(0..=255u8)).collect();
    let annotation = RuleAnnotation {
        rules: vec![
            RuleSpec::new(0, AttributeKind::Type, RuleKind::Constant),
            RuleSpec::new(0, AttributeKind::Size, RuleKind::Progression { delta: 1 }),
            RuleSpec::new(0, AttributeKind::Color, RuleKind::DistributeThree { permutation: 0 }),
        ],
    };
    let label = rng.gen_range(0..8u8);
    Example::new(Configuration::Center, size, pixels, label, annotation).expect("valid example")
}

/// Tape gradient of the full training objective against central differences,
/// for `trials` random parameter entries of a miniature model (both modes,
/// margin and alignment terms on). Returns the largest relative error.
pub fn model_report(trials: usize, seed: u64) -> Result<GradReport, crate::model::ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MmonModel::new(tiny_dims(), seed);
    let ex = tiny_example(&mut rng);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mode = if trial % 2 == 0 { Mode::Meta } else { Mode::Plain };
        let cfg = StepConfig {
            mode,
            lambda: 0.05,
            mu: 0.2,
            dropout: 0.0,
        };
        let analytic = model.instance_gradient(&ex, &cfg, 0)?;
        let candidates: Vec<(usize, usize)> = analytic
            .grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g.len())))
            .collect();
        let encoder_params = model.names.iter().take_while(|n| n.starts_with("enc")).count();
        let pool: Vec<&(usize, usize)> = if trial % 4 < 2 {
            candidates.iter().filter(|(i, _)| *i < encoder_params).collect()
        } else {
            candidates.iter().collect()
        };
        let &(p, len) = pool[rng.gen_range(0..pool.len() as u32) as usize];
        let k = rng.gen_range(0..len as u32) as usize;
        let g = analytic.grads[p].as_ref().expect("filtered")[k];
        let x = model.params[p].data[k];
        model.params[p].data[k] = x + STEP;
        let up = model.instance_gradient(&ex, &cfg, 0)?.loss;
        model.params[p].data[k] = x - STEP;
        let down = model.instance_gradient(&ex, &cfg, 0)?.loss;
        model.params[p].data[k] = x;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = g.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((g - numeric).abs() / denom);
    }
    Ok(GradReport {
        name: "model_objective".into(),
        trials,
        max_error: worst,
        tolerance: MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_quickly() {
        for r in op_reports(2, 11).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn model_passes() {
        let r = model_report(4, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
