//! Shared/specific ability encoders and the decoupling objectives.
//!
//! Every source ability is projected to a common width `d` (the target
//! ability dimension), averaged, and encoded together with the target
//! ability into a domain-shared vector. A mirrored encoder sees only the
//! target ability (zero-padded to the same input width, so both encoders
//! have identical parameter shapes) and yields the target-specific vector.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{AbilityVector, Cdm, ItemParams};
use crate::data::DomainId;
use crate::error::{Error, Result};
use crate::nn::{xavier, Linear, LinearVars, Parameterized};
use crate::tape::{Graph, Var};

/// Two affine maps with `tanh` between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub inner: Linear,
    pub outer: Linear,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            inner: Linear::new(rng, input, hidden),
            outer: Linear::new(rng, hidden, output),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        self.outer.apply(&self.inner.apply(x).mapv(f64::tanh))
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.inner.weight, &self.inner.bias, &self.outer.weight, &self.outer.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.inner.weight,
            &mut self.inner.bias,
            &mut self.outer.weight,
            &mut self.outer.bias,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub inner: LinearVars,
    pub outer: LinearVars,
}

impl MlpVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            inner: LinearVars::from_slice(&v[0..2]),
            outer: LinearVars::from_slice(&v[2..4]),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        self.outer.forward(g, g.tanh(self.inner.forward(g, x)))
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.inner.weight, self.inner.bias, self.outer.weight, self.outer.bias]
    }
}

/// Response rows of one domain inside a batch: `rows[k]` indexes the batch
/// examinee, `questions[k]` the item, `labels[k]` the outcome.
#[derive(Debug, Clone)]
pub struct LogRows {
    pub rows: Rc<[usize]>,
    pub questions: Rc<[usize]>,
    pub labels: Array2<f64>,
}

impl LogRows {
    pub fn new(entries: &[(usize, usize, f64)]) -> Self {
        Self {
            rows: entries.iter().map(|e| e.0).collect(),
            questions: entries.iter().map(|e| e.1).collect(),
            labels: Array2::from_shape_fn((entries.len(), 1), |(k, _)| entries[k].2),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A batch of overlap examinees with their pretrained abilities and a sample
/// of their responses in every domain. Sources are in [`Csum::sources`] order.
#[derive(Debug, Clone)]
pub struct CsumBatch {
    pub theta_target: Array2<f64>,
    pub theta_sources: Vec<Array2<f64>>,
    pub target_logs: LogRows,
    pub source_logs: Vec<LogRows>,
}

impl CsumBatch {
    fn total_rows(&self) -> usize {
        self.target_logs.len() + self.source_logs.iter().map(LogRows::len).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csum {
    pub target: DomainId,
    pub sources: Vec<DomainId>,
    /// One `dim(source) x d` matrix per source.
    pub projections: Vec<Array2<f64>>,
    pub shared: Mlp,
    pub specific: Mlp,
    pub fusion: Mlp,
    pub target_head: ItemParams,
    pub source_heads: Vec<ItemParams>,
    /// Cap on each hinged source-domain error in the specific loss.
    pub tau: f64,
}

impl Parameterized for Csum {
    fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.projections.iter().collect();
        out.extend(self.shared.params());
        out.extend(self.specific.params());
        out.extend(self.fusion.params());
        out.extend(self.target_head.params());
        for h in &self.source_heads {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self.projections.iter_mut().collect();
        out.extend(self.shared.params_mut());
        out.extend(self.specific.params_mut());
        out.extend(self.fusion.params_mut());
        out.extend(self.target_head.params_mut());
        for h in &mut self.source_heads {
            out.extend(h.params_mut());
        }
        out
    }
}

/// Tape handles for a bound [`Csum`].
#[derive(Debug, Clone)]
pub struct CsumVars {
    pub projections: Vec<Var>,
    pub shared: MlpVars,
    pub specific: MlpVars,
    pub fusion: MlpVars,
    pub target_head: Vec<Var>,
    pub source_heads: Vec<Vec<Var>>,
}

impl CsumVars {
    pub fn shared_params(&self) -> Vec<Var> {
        self.shared.vars().to_vec()
    }

    pub fn specific_params(&self) -> Vec<Var> {
        self.specific.vars().to_vec()
    }

    /// Every handle, in [`Parameterized::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.projections.clone();
        out.extend(self.shared.vars());
        out.extend(self.specific.vars());
        out.extend(self.fusion.vars());
        out.extend(&self.target_head);
        for h in &self.source_heads {
            out.extend(h);
        }
        out
    }
}

/// The three representations of a batch.
#[derive(Debug, Clone, Copy)]
pub struct CsumForward {
    pub share: Var,
    pub spec: Var,
    pub concat: Var,
}

impl Csum {
    /// Builds encoders for `target` with heads cloned from the pretrained models.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, target: &Cdm, sources: &[&Cdm], hidden: usize, tau: f64) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Invalid("at least one source domain is required".into()));
        }
        let d = target.ability_dim();
        for s in sources {
            if s.ability_dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.ability_dim(),
                });
            }
        }
        let input = 2 * d;
        Ok(Self {
            target: target.domain,
            sources: sources.iter().map(|s| s.domain).collect(),
            projections: sources.iter().map(|s| xavier(rng, s.ability_dim(), d)).collect(),
            shared: Mlp::new(rng, input, hidden, d),
            specific: Mlp::new(rng, input, hidden, d),
            fusion: Mlp::new(rng, 2 * d, hidden, d),
            target_head: target.params.clone(),
            source_heads: sources.iter().map(|s| s.params.clone()).collect(),
            tau,
        })
    }

    /// Common width of the shared and specific vectors (= target ability dim).
    pub fn dim(&self) -> usize {
        self.fusion.outer.output_dim()
    }

    pub fn bind(&self, g: &Graph) -> CsumVars {
        let all = self.bind_all(g);
        let mut it = 0;
        let mut take = |n: usize| {
            let s = all[it..it + n].to_vec();
            it += n;
            s
        };
        let projections = take(self.projections.len());
        let shared = MlpVars::from_slice(&take(4));
        let specific = MlpVars::from_slice(&take(4));
        let fusion = MlpVars::from_slice(&take(4));
        let target_head = take(self.target_head.params().len());
        let source_heads = self
            .source_heads
            .iter()
            .map(|h| take(h.params().len()))
            .collect();
        CsumVars {
            projections,
            shared,
            specific,
            fusion,
            target_head,
            source_heads,
        }
    }

    pub fn forward_tape(&self, g: &Graph, v: &CsumVars, theta_t: Var, theta_s: &[Var]) -> CsumForward {
        let mut pooled = g.matmul(theta_s[0], v.projections[0]);
        for (x, w) in theta_s.iter().zip(&v.projections).skip(1) {
            pooled = g.add(pooled, g.matmul(*x, *w));
        }
        let pooled = g.scale(pooled, 1.0 / theta_s.len() as f64);
        let share = v.shared.forward(g, g.concat_cols(theta_t, pooled));
        let padded = g.pad_cols(theta_t, 0, g.shape(theta_t).1 + self.dim());
        let spec = v.specific.forward(g, padded);
        let concat = v.fusion.forward(g, g.concat_cols(spec, share));
        CsumForward { share, spec, concat }
    }

    fn check_sources(&self, theta_s: &[Array2<f64>]) -> Result<()> {
        if theta_s.len() != self.sources.len() {
            return Err(Error::Invalid(format!(
                "expected {} source ability blocks, got {}",
                self.sources.len(),
                theta_s.len()
            )));
        }
        for (x, w) in theta_s.iter().zip(&self.projections) {
            if x.ncols() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: w.nrows(),
                    got: x.ncols(),
                });
            }
        }
        Ok(())
    }

    /// Shared vectors for a batch of rows.
    pub fn share_batch(&self, theta_t: &Array2<f64>, theta_s: &[Array2<f64>]) -> Result<Array2<f64>> {
        self.check_sources(theta_s)?;
        if theta_t.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta_t.ncols(),
            });
        }
        let mut pooled = Array2::zeros((theta_t.nrows(), self.dim()));
        for (x, w) in theta_s.iter().zip(&self.projections) {
            pooled += &x.dot(w);
        }
        pooled /= theta_s.len() as f64;
        let inp = ndarray::concatenate(Axis(1), &[theta_t.view(), pooled.view()])
            .map_err(|_| Error::Invalid("row counts differ".into()))?;
        Ok(self.shared.apply(&inp))
    }

    pub fn spec_batch(&self, theta_t: &Array2<f64>) -> Result<Array2<f64>> {
        if theta_t.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta_t.ncols(),
            });
        }
        let zeros = Array2::zeros((theta_t.nrows(), self.dim()));
        let inp = ndarray::concatenate(Axis(1), &[theta_t.view(), zeros.view()]).expect("same rows");
        Ok(self.specific.apply(&inp))
    }

    pub fn fuse_batch(&self, spec: &Array2<f64>, share: &Array2<f64>) -> Result<Array2<f64>> {
        if spec.ncols() != self.dim() || share.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: if spec.ncols() != self.dim() { spec.ncols() } else { share.ncols() },
            });
        }
        let inp = ndarray::concatenate(Axis(1), &[spec.view(), share.view()])
            .map_err(|_| Error::Invalid("row counts differ".into()))?;
        Ok(self.fusion.apply(&inp))
    }

    /// Domain-shared vector of one examinee. Every source must be present.
    pub fn shared_cognition(
        &self,
        theta_t: &AbilityVector,
        sources: &BTreeMap<DomainId, AbilityVector>,
    ) -> Result<AbilityVector> {
        let blocks = self
            .sources
            .iter()
            .map(|d| {
                sources
                    .get(d)
                    .map(|v| row(v.as_slice()))
                    .ok_or(Error::MissingSource(*d))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.share_batch(&row(theta_t.as_slice()), &blocks)?;
        Ok(AbilityVector(out.row(0).to_vec()))
    }

    pub fn specific_cognition(&self, theta_t: &AbilityVector) -> Result<AbilityVector> {
        let out = self.spec_batch(&row(theta_t.as_slice()))?;
        Ok(AbilityVector(out.row(0).to_vec()))
    }

    pub fn fuse(&self, spec: &AbilityVector, share: &AbilityVector) -> Result<AbilityVector> {
        let out = self.fuse_batch(&row(spec.as_slice()), &row(share.as_slice()))?;
        Ok(AbilityVector(out.row(0).to_vec()))
    }

    /// Pooled squared error of every head evaluated on the shared vectors.
    pub fn loss_shared(&self, g: &Graph, v: &CsumVars, fwd: &CsumForward, batch: &CsumBatch) -> Var {
        let mut total = head_sq_err(g, &self.target_head, &v.target_head, fwd.share, &batch.target_logs);
        for ((head, hv), logs) in self.source_heads.iter().zip(&v.source_heads).zip(&batch.source_logs) {
            total = g.add(total, head_sq_err(g, head, hv, fwd.share, logs));
        }
        g.scale(total, 1.0 / batch.total_rows().max(1) as f64)
    }

    /// Target error of the fused and specific vectors, minus the hinged
    /// source error of the same vectors, plus the fusion anchor.
    pub fn loss_specific(&self, g: &Graph, v: &CsumVars, fwd: &CsumForward, batch: &CsumBatch, theta_t: Var) -> Var {
        let target = g.add(
            head_sq_err(g, &self.target_head, &v.target_head, fwd.concat, &batch.target_logs),
            head_sq_err(g, &self.target_head, &v.target_head, fwd.spec, &batch.target_logs),
        );
        let mut total = target;
        for ((head, hv), logs) in self.source_heads.iter().zip(&v.source_heads).zip(&batch.source_logs) {
            if logs.is_empty() {
                continue;
            }
            let per_row = g.add(
                head_sq_err_rows(g, head, hv, fwd.concat, logs),
                head_sq_err_rows(g, head, hv, fwd.spec, logs),
            );
            let hinged = g.sum(g.clamp(per_row, f64::NEG_INFINITY, self.tau));
            total = g.sub(total, hinged);
        }
        let pred = g.scale(total, 1.0 / batch.total_rows().max(1) as f64);
        let rows = g.shape(theta_t).0.max(1);
        let anchor = g.scale(g.sum(g.square(g.sub(theta_t, fwd.concat))), 1.0 / rows as f64);
        g.add(pred, anchor)
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn head_sq_err_rows(g: &Graph, head: &ItemParams, hv: &[Var], theta: Var, logs: &LogRows) -> Var {
    let rows = g.gather(theta, Rc::clone(&logs.rows));
    let p = head.forward_tape(g, hv, rows, &logs.questions);
    g.square(g.sub(g.constant(logs.labels.clone()), p))
}

fn head_sq_err(g: &Graph, head: &ItemParams, hv: &[Var], theta: Var, logs: &LogRows) -> Var {
    if logs.is_empty() {
        return g.zeros(1, 1);
    }
    g.sum(head_sq_err_rows(g, head, hv, theta, logs))
}

/// `|cos|` between the gradient of `l1` with respect to `a` and the gradient
/// of `l2` with respect to `b`; `a` and `b` must have matching shapes. Zero
/// when either gradient vanishes. Stays on the tape, so it can be trained on.
pub fn loss_orth(g: &Graph, l1: Var, a: &[Var], l2: Var, b: &[Var]) -> Var {
    assert_eq!(a.len(), b.len(), "loss_orth: parameter lists differ");
    let g1 = g.grad(l1, a);
    let g2 = g.grad(l2, b);
    let mut dot = g.zeros(1, 1);
    let mut n1 = g.zeros(1, 1);
    let mut n2 = g.zeros(1, 1);
    for (x, y) in g1.iter().zip(&g2) {
        assert_eq!(g.shape(*x), g.shape(*y), "loss_orth: parameter shapes differ");
        dot = g.add(dot, g.sum(g.mul(*x, *y)));
        n1 = g.add(n1, g.sum(g.square(*x)));
        n2 = g.add(n2, g.sum(g.square(*y)));
    }
    if g.scalar(n1) == 0.0 || g.scalar(n2) == 0.0 {
        return g.zeros(1, 1);
    }
    let denom = g.sqrt(g.mul(n1, n2));
    g.mul(g.abs(dot), g.recip(denom))
}

/// Plain cosine magnitude of two flattened gradient lists.
pub fn cosine_magnitude(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x * y).sum()).sum();
    let na: f64 = a.iter().map(|x| x.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs().min(1.0)
    }
}
