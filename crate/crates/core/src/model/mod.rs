//! The multi-granularity modular network.
//!
//! Three convolutional encoders look at single panels (1 channel), whole rows
//! (3 channels) and pairs of rows (6 channels). Their row embeddings are summed
//! and passed through one small MLP per (component slot, attribute); candidates
//! are scored by cosine agreement between row 3 and rows 1–2, and between each
//! module output and a learned rule-embedding table.

mod forward;
mod train;

pub use forward::{infer_rule, loss, predict, Embeddings, ScoreVector};
pub use train::{frozen_modules, InstanceGrad, StepConfig, StepStats};

use crate::puzzle::{AttributeKind, Configuration, PuzzleInstance, RuleAnnotation};
use crate::render::{render_instance, RenderError};
use crate::tensor::{CheckpointError, Tensor, TensorError};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of attribute modules: two component slots × five attributes.
pub const MODULE_COUNT: usize = 10;
/// Rows of the rule-embedding table, one per rule family.
pub const RULE_ROWS: usize = 4;
pub const ENCODER_CHANNELS: [usize; 3] = [1, 3, 6];

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("meta mode needs a non-empty rule annotation")]
    MissingMeta,
    #[error("invalid input: {0}")]
    BadInput(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Plain,
    Meta,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Meta => "meta",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "plain" => Some(Mode::Plain),
            "meta" => Some(Mode::Meta),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub conv1: usize,
    pub conv2: usize,
    /// Row embedding width `d`.
    pub embed: usize,
    pub relation_hidden: usize,
    pub module_hidden: usize,
    /// Transformation embedding width `d_t`.
    pub transform: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            conv1: 16,
            conv2: 32,
            embed: 64,
            relation_hidden: 128,
            module_hidden: 64,
            transform: 32,
        }
    }
}

/// Module index of a (component slot, attribute) pair.
pub fn module_index(slot: usize, attribute: AttributeKind) -> usize {
    slot * 5 + attribute.code() as usize
}

/// One model input: the 16 rendered panels of an instance plus its label and
/// rule annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub config: Configuration,
    pub size: usize,
    /// `16 × size × size` grayscale pixels, context panels then candidates.
    pub pixels: Vec<u8>,
    pub label: u8,
    pub annotation: RuleAnnotation,
}

impl Example {
    pub fn new(
        config: Configuration,
        size: usize,
        pixels: Vec<u8>,
        label: u8,
        annotation: RuleAnnotation,
    ) -> Result<Self, ModelError> {
        if size < 8 || pixels.len() != 16 * size * size {
            return Err(ModelError::BadInput(format!(
                "expected 16 panels of {size}×{size}, got {} pixels",
                pixels.len()
            )));
        }
        if label >= 8 {
            return Err(ModelError::BadInput(format!("label {label} out of range")));
        }
        Ok(Self {
            config,
            size,
            pixels,
            label,
            annotation,
        })
    }

    pub fn from_instance(instance: &PuzzleInstance, size: u32) -> Result<Self, ModelError> {
        let rasters = render_instance(instance, size)?;
        let pixels = rasters.into_iter().flat_map(|r| r.data).collect();
        Self::new(
            instance.config,
            size as usize,
            pixels,
            instance.label,
            instance.annotation.clone(),
        )
    }

    /// Modules that take part in scoring: annotated (slot, attribute) pairs in
    /// meta mode, every governed attribute of the configuration in plain mode.
    pub fn active_modules(&self, mode: Mode) -> Result<Vec<usize>, ModelError> {
        let mut out: Vec<usize> = match mode {
            Mode::Meta => {
                if self.annotation.rules.is_empty() {
                    return Err(ModelError::MissingMeta);
                }
                self.annotation
                    .rules
                    .iter()
                    .map(|r| module_index(r.component as usize, r.attribute))
                    .collect()
            }
            Mode::Plain => (0..self.config.component_count())
                .flat_map(|c| {
                    self.config
                        .governed_attributes(c)
                        .iter()
                        .map(move |&a| module_index(c, a))
                })
                .collect(),
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Rule-family index annotated for a module.
    pub fn rule_target(&self, module: usize) -> Option<usize> {
        self.annotation
            .rules
            .iter()
            .find(|r| module_index(r.component as usize, r.attribute) == module)
            .map(|r| r.rule.family().code() as usize)
    }

    /// Modules named by the attribute part of the meta-target.
    pub fn meta_modules(&self) -> [bool; MODULE_COUNT] {
        let mut out = [false; MODULE_COUNT];
        for r in &self.annotation.rules {
            out[module_index(r.component as usize, r.attribute)] = true;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct EncoderIdx {
    pub conv1: LinearIdx,
    pub conv2: LinearIdx,
    pub fc: LinearIdx,
}

/// Parameter registry of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MmonModel {
    pub dims: ModelDims,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
    pub(crate) encoders: [EncoderIdx; 3],
    pub(crate) g: [LinearIdx; 2],
    pub(crate) f: [LinearIdx; 2],
    pub(crate) modules: [[LinearIdx; 2]; MODULE_COUNT],
    pub(crate) table: usize,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize]) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{name}.weight"), &[fan_in, fan_out]),
            b: self.push(format!("{name}.bias"), &[fan_out]),
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{name}.weight"), &[c_out, c_in, 3, 3]),
            b: self.push(format!("{name}.bias"), &[c_out]),
        }
    }
}

impl MmonModel {
    /// Fresh parameters: He-uniform weights, zero biases and an orthonormal
    /// rule table, all drawn from `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let encoders = ENCODER_CHANNELS.map(|c| {
            let prefix = format!("enc{c}");
            EncoderIdx {
                conv1: b.conv(&format!("{prefix}.conv1"), c, dims.conv1),
                conv2: b.conv(&format!("{prefix}.conv2"), dims.conv1, dims.conv2),
                fc: b.linear(&format!("{prefix}.fc"), dims.conv2, dims.embed),
            }
        });
        let g = [
            b.linear("relation.g1", 2 * dims.embed, dims.relation_hidden),
            b.linear("relation.g2", dims.relation_hidden, dims.embed),
        ];
        let f = [
            b.linear("relation.f1", dims.embed, dims.embed),
            b.linear("relation.f2", dims.embed, dims.embed),
        ];
        let modules = core::array::from_fn(|j| {
            let name = format!("module{}.{}", j / 5, AttributeKind::ALL[j % 5].name());
            [
                b.linear(&format!("{name}.l1"), dims.embed, dims.module_hidden),
                b.linear(&format!("{name}.l2"), dims.module_hidden, dims.transform),
            ]
        });
        let table = b.push("rule_table".into(), &[RULE_ROWS, dims.transform]);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(b.shapes.len());
        for (i, shape) in b.shapes.iter().enumerate() {
            let numel: usize = shape.iter().product();
            let data = if i == table {
                orthonormal_rows(&mut rng, shape[0], shape[1])
            } else if shape.len() == 1 {
                alloc::vec![0.0; numel]
            } else {
                // Linear weights are [in, out]; conv weights are [out, in, kh, kw].
                let fan_in = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let bound = libm::sqrt(6.0 / fan_in as f64);
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.push(Tensor::new(shape, data).expect("numel from shape").with_grad());
        }
        Self {
            dims,
            params,
            names: b.names,
            encoders,
            g,
            f,
            modules,
            table,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Indices into `params` belonging to attribute module `j`.
    pub fn module_params(&self, j: usize) -> [usize; 4] {
        let [l1, l2] = self.modules[j];
        [l1.w, l1.b, l2.w, l2.b]
    }

    pub fn rule_table(&self) -> &Tensor {
        &self.params[self.table]
    }

    /// Named tensors in registry order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.params.iter().map(|p| Tensor {
                requires_grad: false,
                grad: None,
                ..p.clone()
            }))
            .collect()
    }

    /// Rebuilds a model from named tensors, inferring dimensions from shapes.
    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape.clone())
                .ok_or_else(|| ModelError::BadInput(format!("missing tensor {name}")))
        };
        let conv1 = find("enc1.conv1.weight")?;
        let conv2 = find("enc1.conv2.weight")?;
        let fc = find("enc1.fc.weight")?;
        let g1 = find("relation.g1.weight")?;
        let l1 = find("module0.number.l1.weight")?;
        let table = find("rule_table")?;
        let dim = |s: &[usize], i: usize| s.get(i).copied().unwrap_or(0);
        let dims = ModelDims {
            conv1: dim(&conv1, 0),
            conv2: dim(&conv2, 0),
            embed: dim(&fc, 1),
            relation_hidden: dim(&g1, 1),
            module_hidden: dim(&l1, 1),
            transform: dim(&table, 1),
        };
        let mut model = Self::new(dims, 0);
        if tensors.len() != model.names.len() {
            return Err(ModelError::BadInput(format!(
                "expected {} tensors, got {}",
                model.names.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != model.names[i] || t.shape != model.params[i].shape {
                return Err(ModelError::BadInput(format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    model.names[i], model.params[i].shape, t.shape
                )));
            }
            model.params[i].data = t.data;
        }
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>, ModelError> {
        Ok(crate::tensor::encode_checkpoint(&self.to_named())?)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_named(crate::tensor::decode_checkpoint(bytes)?)
    }
}

/// `rows` mutually orthonormal vectors (Gram–Schmidt on uniform draws).
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(rows * cols);
    while out.len() < rows * cols {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for prev in out.chunks_exact(cols) {
            let dot: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            out.extend(v.iter().map(|x| x / norm));
        }
    }
    out
}
