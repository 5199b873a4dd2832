use super::{Example, LinearIdx, MmonModel, Mode, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use alloc::vec;
use alloc::vec::Vec;

/// Panels (indices into the 16 stored panels) of the 10 rows: the two context
/// rows, then row 3 completed with each candidate.
const ROWS: [[usize; 3]; 10] = [
    [0, 1, 2],
    [3, 4, 5],
    [6, 7, 8],
    [6, 7, 9],
    [6, 7, 10],
    [6, 7, 11],
    [6, 7, 12],
    [6, 7, 13],
    [6, 7, 14],
    [6, 7, 15],
];

/// Ordered panel pairs within a row.
const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];

/// Row-pair stacks fed to the 6-channel encoder: `(row1,row2)`, then
/// `(row2,row3ᵏ)` for each k, then `(row1,row3ᵏ)` for each k. Values index [`ROWS`].
fn row_pairs() -> [(usize, usize); 17] {
    let mut out = [(0, 1); 17];
    for k in 0..8 {
        out[1 + k] = (1, 2 + k);
        out[9 + k] = (0, 2 + k);
    }
    out
}

/// Intermediate embeddings of one forward pass, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `[10, d]` panel-level row embeddings (row 1, row 2, row 3ᵏ).
    pub panelwise: Vec<f64>,
    /// `[10, d]` row-level embeddings.
    pub rowwise: Vec<f64>,
    /// `[17, d]` row-pair embeddings (see the 6-channel stack order).
    pub overall: Vec<f64>,
    /// `[24, d]`: e₁ᵏ for k = 0..8, then e₂ᵏ, then e₃ᵏ.
    pub rows: Vec<f64>,
}

/// Output of [`MmonModel::score_candidates`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: [f64; 8],
    /// Modules that contributed, ascending.
    pub active: Vec<usize>,
    /// Per active module, its `[24, d_t]` outputs on the rows of [`Embeddings::rows`].
    pub transforms: Vec<Vec<f64>>,
    /// `[24, d_t]` sum of the active module outputs.
    pub tau: Vec<f64>,
    /// Per active module, the rule-table row selected for each of the 24 rows.
    pub selected: Vec<[usize; 24]>,
    /// Base term of each candidate.
    pub base: [f64; 8],
    /// Per active module, the rule term of each candidate.
    pub rule_terms: Vec<[f64; 8]>,
    pub embeddings: Embeddings,
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    dot / (na.max(1e-8) * nb.max(1e-8))
}

/// Most similar rule-table row to a module output and its cosine similarity;
/// ties go to the lowest row.
pub fn infer_rule(output: &[f64], table: &Tensor) -> (usize, f64) {
    let d = output.len();
    let mut best = (0, f64::NEG_INFINITY);
    for r in 0..table.data.len() / d.max(1) {
        let c = cosine(output, &table.data[r * d..(r + 1) * d]);
        if c > best.1 {
            best = (r, c);
        }
    }
    best
}

/// `CE(softmax(s), y) + λ·(Σ_{i≠y} sᵢ − s_y)`; with `λ = 0` this is exactly the
/// cross-entropy node.
pub fn loss(tape: &mut Tape, scores: Var, label: usize, lambda: f64) -> Result<Var, TensorError> {
    let ce = tape.softmax_cross_entropy(scores, label)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let n = tape.data(scores).len();
    let signs = (0..n).map(|i| if i == label { -1.0 } else { 1.0 }).collect();
    let signs = tape.constant(&[n], signs)?;
    let signed = tape.mul(scores, signs)?;
    let margin = tape.sum_all(signed);
    let margin = tape.scale(margin, lambda);
    tape.add(ce, margin)
}

/// A forward pass recorded on a tape.
pub(crate) struct Graph<'m> {
    pub tape: Tape,
    pub model: &'m MmonModel,
    pub vars: Vec<Option<Var>>,
    track: bool,
    dropout: f64,
    dropout_seed: u64,
}

pub(crate) struct GraphOutput {
    pub scores: Var,
    pub transforms: Vec<Var>,
    pub tau: Var,
    pub base: Var,
    pub rule_terms: Vec<Var>,
    pub active: Vec<usize>,
    pub panelwise: Var,
    pub rowwise: Var,
    pub overall: Var,
    pub rows: Var,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m MmonModel, track: bool, dropout: f64, dropout_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            model,
            vars: vec![None; model.params.len()],
            track,
            dropout,
            dropout_seed,
        }
    }

    fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let p = &self.model.params[i];
        let t = Tensor {
            shape: p.shape.clone(),
            data: p.data.clone(),
            requires_grad: self.track && p.requires_grad,
            grad: None,
        };
        let v = self.tape.leaf(t);
        self.vars[i] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, l: LinearIdx) -> Result<Var, TensorError> {
        let (w, b) = (self.param(l.w), self.param(l.b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row_bias(y, b)
    }

    /// conv s2 → relu → conv s2 → relu → global mean pool → linear.
    fn encode(&mut self, enc: usize, input: Var) -> Result<Var, TensorError> {
        let e = self.model.encoders[enc];
        let (w1, b1) = (self.param(e.conv1.w), self.param(e.conv1.b));
        let h = self.tape.conv2d(input, w1, Some(b1), 2, 1)?;
        let h = self.tape.relu(h);
        let (w2, b2) = (self.param(e.conv2.w), self.param(e.conv2.b));
        let h = self.tape.conv2d(h, w2, Some(b2), 2, 1)?;
        let h = self.tape.relu(h);
        let s = self.tape.shape(h).to_vec();
        let h = self.tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = self.tape.mean(h, 2)?;
        self.linear(pooled, e.fc)
    }

    fn mlp(&mut self, x: Var, layers: [LinearIdx; 2], final_relu: bool) -> Result<Var, TensorError> {
        let h = self.linear(x, layers[0])?;
        let h = self.tape.relu(h);
        let y = self.linear(h, layers[1])?;
        Ok(if final_relu { self.tape.relu(y) } else { y })
    }

    pub fn run(&mut self, ex: &Example, mode: Mode) -> Result<GraphOutput, ModelError> {
        let active = ex.active_modules(mode)?;
        let targets: Vec<usize> = match mode {
            Mode::Meta => active
                .iter()
                .map(|&j| ex.rule_target(j).ok_or(ModelError::MissingMeta))
                .collect::<Result<_, _>>()?,
            Mode::Plain => Vec::new(),
        };
        let hw = ex.size * ex.size;
        let norm: Vec<f64> = ex
            .pixels
            .iter()
            .map(|&v| (255.0 - v as f64) / 255.0)
            .collect();
        let panel = |p: usize| &norm[p * hw..(p + 1) * hw];

        // Panel level: Enc1 on every panel, relation head over ordered pairs.
        let panels = self.tape.constant(&[16, 1, ex.size, ex.size], norm.clone())?;
        let r = self.encode(0, panels)?;
        let mut left = Vec::with_capacity(60);
        let mut right = Vec::with_capacity(60);
        for row in ROWS {
            for (a, b) in PAIRS {
                left.push(row[a]);
                right.push(row[b]);
            }
        }
        let l = self.tape.index_select(r, &left)?;
        let rr = self.tape.index_select(r, &right)?;
        let pairs = self.tape.concat(l, rr, 1)?;
        let g = self.mlp(pairs, self.model.g, true)?;
        let d = self.model.dims.embed;
        let g = self.tape.reshape(g, &[10, 6, d])?;
        let summed = self.tape.sum(g, 1)?;
        let mp = self.mlp(summed, self.model.f, false)?;

        // Row level: Enc3 on the channel-stacked row.
        let mut stacked = Vec::with_capacity(10 * 3 * hw);
        for row in ROWS {
            for p in row {
                stacked.extend_from_slice(panel(p));
            }
        }
        let rows_in = self.tape.constant(&[10, 3, ex.size, ex.size], stacked)?;
        let mr = self.encode(1, rows_in)?;

        // Overall level: Enc6 on pairs of rows.
        let mut pair_stack = Vec::with_capacity(17 * 6 * hw);
        for (a, b) in row_pairs() {
            for p in ROWS[a].into_iter().chain(ROWS[b]) {
                pair_stack.extend_from_slice(panel(p));
            }
        }
        let pairs_in = self.tape.constant(&[17, 6, ex.size, ex.size], pair_stack)?;
        let mo = self.encode(2, pairs_in)?;

        // e = M_p + M_r + M_o for rows 1, 2 and 3 under each candidate.
        let pr = self.tape.add(mp, mr)?;
        let pr_idx: Vec<usize> = (0..8).map(|_| 0).chain((0..8).map(|_| 1)).chain(2..10).collect();
        let o_idx: Vec<usize> = (1..9).chain(9..17).chain((0..8).map(|_| 0)).collect();
        let pr_rows = self.tape.index_select(pr, &pr_idx)?;
        let o_rows = self.tape.index_select(mo, &o_idx)?;
        let e = self.tape.add(pr_rows, o_rows)?;

        let first: Vec<usize> = (0..8).collect();
        let second: Vec<usize> = (8..16).collect();
        let third: Vec<usize> = (16..24).collect();
        let mut transforms = Vec::with_capacity(active.len());
        let mut tau: Option<Var> = None;
        for &j in &active {
            let [l1, l2] = self.model.modules[j];
            let h = self.linear(e, l1)?;
            let h = self.tape.relu(h);
            let h = self.tape.dropout(h, self.dropout, self.dropout_seed ^ j as u64);
            let out = self.linear(h, l2)?;
            tau = Some(match tau {
                None => out,
                Some(t) => self.tape.add(t, out)?,
            });
            transforms.push(out);
        }
        let tau = tau.ok_or(ModelError::MissingMeta)?;

        let t1 = self.tape.index_select(tau, &first)?;
        let t2 = self.tape.index_select(tau, &second)?;
        let t3 = self.tape.index_select(tau, &third)?;
        let t12 = self.tape.add(t1, t2)?;
        let t12 = self.tape.scale(t12, 0.5);
        let base = self.tape.cosine(t3, t12)?;

        let table = self.param(self.model.table);
        let mut rule_terms = Vec::with_capacity(active.len());
        let mut scores: Option<Var> = None;
        for (n, &out) in transforms.iter().enumerate() {
            let f3 = self.tape.index_select(out, &third)?;
            let reference = match mode {
                Mode::Meta => self.tape.index_select(table, &[targets[n]; 8])?,
                Mode::Plain => {
                    let f1 = self.tape.index_select(out, &first)?;
                    let f2 = self.tape.index_select(out, &second)?;
                    let f12 = self.tape.add(f1, f2)?;
                    self.tape.scale(f12, 0.5)
                }
            };
            let rule = self.tape.cosine(f3, reference)?;
            rule_terms.push(rule);
            let term = self.tape.add(base, rule)?;
            scores = Some(match scores {
                None => term,
                Some(s) => self.tape.add(s, term)?,
            });
        }
        let scores = scores.ok_or(ModelError::MissingMeta)?;

        Ok(GraphOutput {
            scores,
            transforms,
            tau,
            base,
            rule_terms,
            active,
            panelwise: mp,
            rowwise: mr,
            overall: mo,
            rows: e,
        })
    }

    /// `1 − mean cos(f_j(e), t*_j)` over active modules and the 16 context rows.
    pub fn alignment(&mut self, ex: &Example, out: &GraphOutput) -> Result<Var, ModelError> {
        let table = self.param(self.model.table);
        let context: Vec<usize> = (0..16).collect();
        let mut total: Option<Var> = None;
        for (n, &j) in out.active.iter().enumerate() {
            let target = ex.rule_target(j).ok_or(ModelError::MissingMeta)?;
            let f = self.tape.index_select(out.transforms[n], &context)?;
            let t = self.tape.index_select(table, &[target; 16])?;
            let c = self.tape.cosine(f, t)?;
            let s = self.tape.sum_all(c);
            total = Some(match total {
                None => s,
                Some(acc) => self.tape.add(acc, s)?,
            });
        }
        let total = total.ok_or(ModelError::MissingMeta)?;
        let count = (16 * out.active.len()) as f64;
        let mean = self.tape.scale(total, -1.0 / count);
        let one = self.tape.leaf(Tensor::scalar(1.0));
        Ok(self.tape.add(one, mean)?)
    }
}

impl MmonModel {
    /// Scores the 8 candidates of one example.
    pub fn score_candidates(&self, ex: &Example, mode: Mode) -> Result<ScoreVector, ModelError> {
        let mut g = Graph::new(self, false, 0.0, 0);
        let out = g.run(ex, mode)?;
        let t = &g.tape;
        let dt = self.dims.transform;
        let table = self.rule_table();
        let transforms: Vec<Vec<f64>> = out.transforms.iter().map(|&v| t.data(v).to_vec()).collect();
        let selected = transforms
            .iter()
            .map(|f| core::array::from_fn(|i| infer_rule(&f[i * dt..(i + 1) * dt], table).0))
            .collect();
        let eight = |v: Var| -> [f64; 8] { t.data(v).try_into().expect("8 candidates") };
        Ok(ScoreVector {
            scores: eight(out.scores),
            active: out.active.clone(),
            tau: t.data(out.tau).to_vec(),
            selected,
            base: eight(out.base),
            rule_terms: out.rule_terms.iter().map(|&v| eight(v)).collect(),
            transforms,
            embeddings: Embeddings {
                panelwise: t.data(out.panelwise).to_vec(),
                rowwise: t.data(out.rowwise).to_vec(),
                overall: t.data(out.overall).to_vec(),
                rows: t.data(out.rows).to_vec(),
            },
        })
    }

    pub fn predict_example(&self, ex: &Example, mode: Mode) -> Result<usize, ModelError> {
        Ok(predict(&self.score_candidates(ex, mode)?.scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 2);
        assert_eq!(predict(&[0.5; 8]), 0);
        let s = [0.1, 0.7, 0.3, 0.7, -1.0, 0.0, 0.2, 0.0];
        let shifted: Vec<f64> = s.iter().map(|v| v + 3.0).collect();
        assert_eq!(predict(&s), predict(&shifted));
    }

    #[test]
    fn infer_rule_examples() {
        let table = Tensor::new(
            &[4, 2],
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
        )
        .unwrap();
        assert_eq!(infer_rule(&[0.0, 1.0], &table), (1, 1.0));
        assert_eq!(infer_rule(&[0.0, 5.0], &table).0, 1);
        let zero = Tensor::new(&[4, 2], vec![0.0; 8]).unwrap();
        assert_eq!(infer_rule(&[1.0, 1.0], &zero).0, 0);
    }

    #[test]
    fn loss_examples() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::vector(&[0.0; 8]));
        let l = loss(&mut t, s, 3, 0.0).unwrap();
        assert!((t.data(l)[0] - libm::log(8.0)).abs() < 1e-9);
        let mut v = [0.0; 8];
        v[0] = 1.0;
        let s = t.leaf(Tensor::vector(&v));
        let ce = t.softmax_cross_entropy(s, 0).unwrap();
        let l = loss(&mut t, s, 0, 0.1).unwrap();
        assert!((t.data(l)[0] - (t.data(ce)[0] - 0.1)).abs() < 1e-12);
    }
}
