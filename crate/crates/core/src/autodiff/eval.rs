use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CompGraph, NodeId, Op, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Named input values for a forward pass.
pub type Bindings = BTreeMap<String, DenseTensor>;

/// Evaluation mode and the seed that drives dropout masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub train: bool,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self { train: false, seed: 0 }
    }

    pub fn training(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Cached forward values of a graph, ready for [`Evaluation::backward`].
#[derive(Debug)]
pub struct Evaluation<'g> {
    graph: &'g CompGraph,
    values: Vec<DenseTensor>,
    masks: BTreeMap<usize, Vec<f64>>,
}

/// Gradients of a scalar with respect to every parameter and input leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, DenseTensor>,
    pub inputs: BTreeMap<String, DenseTensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&DenseTensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&DenseTensor> {
        self.inputs.get(name)
    }
}

/// Evaluates every node of `graph` in insertion order.
pub fn forward_eval<'g>(
    graph: &'g CompGraph,
    inputs: &Bindings,
    params: &ParamStore,
    opts: ForwardOptions,
) -> Result<Evaluation<'g>> {
    let order: Vec<NodeId> = (0..graph.len()).map(NodeId).collect();
    forward_eval_ordered(graph, inputs, params, opts, &order)
}

/// Evaluates `graph` following an explicit schedule, which must be a
/// topological ordering of all nodes.
pub fn forward_eval_ordered<'g>(
    graph: &'g CompGraph,
    inputs: &Bindings,
    params: &ParamStore,
    opts: ForwardOptions,
    order: &[NodeId],
) -> Result<Evaluation<'g>> {
    if order.len() != graph.len() {
        return Err(Error::config(format!(
            "schedule covers {} of {} nodes",
            order.len(),
            graph.len()
        )));
    }
    let mut slots: Vec<Option<DenseTensor>> = vec![None; graph.len()];
    let mut masks = BTreeMap::new();
    for &id in order {
        if id.0 >= graph.len() || slots[id.0].is_some() {
            return Err(Error::config(format!("schedule repeats or overruns node #{}", id.0)));
        }
        let op = graph.op(id);
        let mut args = Vec::with_capacity(2);
        for operand in op.operands() {
            match &slots[operand.0] {
                Some(v) => args.push(v),
                None => {
                    return Err(Error::config(format!(
                        "schedule evaluates {} before its operand #{}",
                        graph.describe(id),
                        operand.0
                    )))
                }
            }
        }
        let value = eval_op(graph, id, op, &args, inputs, params, opts, &mut masks)?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                node: graph.describe(id),
            });
        }
        slots[id.0] = Some(value);
    }
    Ok(Evaluation {
        graph,
        values: slots.into_iter().map(|v| v.expect("every node scheduled")).collect(),
        masks,
    })
}

fn shape_err(graph: &CompGraph, id: NodeId, detail: String) -> Error {
    Error::config(format!("shape mismatch at {}: {detail}", graph.describe(id)))
}

fn same_shape(graph: &CompGraph, id: NodeId, a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(graph, id, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_matrix(graph: &CompGraph, id: NodeId, a: &DenseTensor) -> Result<()> {
    if a.rank() != 2 {
        return Err(shape_err(graph, id, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok(())
}

fn zip_with(a: &DenseTensor, b: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> DenseTensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseTensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dropout_mask(seed: u64, key: u64, len: usize, rate: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_op(
    graph: &CompGraph,
    id: NodeId,
    op: &Op,
    args: &[&DenseTensor],
    inputs: &Bindings,
    params: &ParamStore,
    opts: ForwardOptions,
    masks: &mut BTreeMap<usize, Vec<f64>>,
) -> Result<DenseTensor> {
    Ok(match op {
        Op::Input(name) => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("graph input `{name}` is not bound")))?,
        Op::Param(name) => params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("parameter `{name}` is missing")))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul(..) => {
            require_matrix(graph, id, args[0])?;
            require_matrix(graph, id, args[1])?;
            args[0]
                .matmul(args[1])
                .map_err(|e| shape_err(graph, id, e.to_string()))?
        }
        Op::Add(..) => {
            same_shape(graph, id, args[0], args[1])?;
            zip_with(args[0], args[1], |x, y| x + y)
        }
        Op::Sub(..) => {
            same_shape(graph, id, args[0], args[1])?;
            zip_with(args[0], args[1], |x, y| x - y)
        }
        Op::Mul(..) => {
            same_shape(graph, id, args[0], args[1])?;
            zip_with(args[0], args[1], |x, y| x * y)
        }
        Op::AddBias(..) => {
            let (a, b) = (args[0], args[1]);
            require_matrix(graph, id, a)?;
            if b.len() != a.cols() || (b.rank() == 2 && b.rows() != 1) {
                return Err(shape_err(
                    graph,
                    id,
                    format!("bias {:?} for {:?}", b.shape(), a.shape()),
                ));
            }
            let n = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % n];
            }
            out
        }
        Op::Scale(_, f) => args[0].map(|x| x * f),
        Op::AddScalar(_, c) => args[0].map(|x| x + c),
        Op::Sigmoid(_) => args[0].map(stable_sigmoid),
        Op::Exp(_) => args[0].map(f64::exp),
        Op::Log(_) => args[0].map(f64::ln),
        Op::Maximum(_, floor) => args[0].map(|x| x.max(*floor)),
        Op::ConcatCols(..) => {
            let (a, b) = (args[0], args[1]);
            require_matrix(graph, id, a)?;
            require_matrix(graph, id, b)?;
            if a.rows() != b.rows() {
                return Err(shape_err(graph, id, format!("{:?} ⊕ {:?}", a.shape(), b.shape())));
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row_slice(r));
                data.extend_from_slice(b.row_slice(r));
            }
            DenseTensor::new(vec![a.rows(), a.cols() + b.cols()], data)?
        }
        Op::Reshape(_, shape) => args[0]
            .clone()
            .reshaped(shape.clone())
            .map_err(|e| shape_err(graph, id, e.to_string()))?,
        Op::ReduceSum(_) => DenseTensor::scalar(args[0].data().iter().sum()),
        Op::ReduceMean(_) => {
            let a = args[0];
            if a.is_empty() {
                return Err(shape_err(graph, id, "mean of an empty tensor".into()));
            }
            DenseTensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::RowSum(_) => {
            let a = args[0];
            require_matrix(graph, id, a)?;
            let data = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
            DenseTensor::new(vec![a.rows(), 1], data)?
        }
        Op::LogSoftmax(_) => {
            let a = args[0];
            require_matrix(graph, id, a)?;
            let mut out = a.clone();
            let n = a.cols();
            for row in out.data_mut().chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        }
        Op::Dropout { rate, key, .. } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
            }
            if !opts.train || *rate == 0.0 {
                args[0].clone()
            } else {
                let mask = dropout_mask(opts.seed, *key, args[0].len(), *rate);
                let out = zip_with(
                    args[0],
                    &DenseTensor::new(args[0].shape().to_vec(), mask.clone())?,
                    |x, m| x * m,
                );
                masks.insert(id.0, mask);
                out
            }
        }
        Op::EmbeddingBag { bags, .. } => {
            let table = args[0];
            require_matrix(graph, id, table)?;
            let d = table.cols();
            let mut data = Vec::with_capacity(bags.len() * d);
            for bag in bags {
                if bag.is_empty() {
                    return Err(Error::data(format!("empty bag at {}", graph.describe(id))));
                }
                let mut acc = vec![0.0; d];
                for &t in bag {
                    if t >= table.rows() {
                        return Err(shape_err(graph, id, format!("row {t} out of {}", table.rows())));
                    }
                    for (a, v) in acc.iter_mut().zip(table.row_slice(t)) {
                        *a += v;
                    }
                }
                let n = bag.len() as f64;
                data.extend(acc.into_iter().map(|v| v / n));
            }
            DenseTensor::new(vec![bags.len(), d], data)?
        }
        Op::RepeatRows { times, .. } => {
            let a = args[0];
            require_matrix(graph, id, a)?;
            let mut data = Vec::with_capacity(a.len() * times);
            for r in 0..a.rows() {
                for _ in 0..*times {
                    data.extend_from_slice(a.row_slice(r));
                }
            }
            DenseTensor::new(vec![a.rows() * times, a.cols()], data)?
        }
        Op::TileRows { times, .. } => {
            let a = args[0];
            require_matrix(graph, id, a)?;
            let mut data = Vec::with_capacity(a.len() * times);
            for _ in 0..*times {
                data.extend_from_slice(a.data());
            }
            DenseTensor::new(vec![a.rows() * times, a.cols()], data)?
        }
        Op::Gather { indices, .. } => {
            let a = args[0];
            let mut data = Vec::with_capacity(indices.len());
            for &i in indices {
                match a.data().get(i) {
                    Some(&v) => data.push(v),
                    None => return Err(shape_err(graph, id, format!("index {i} out of {}", a.len()))),
                }
            }
            DenseTensor::new(vec![indices.len()], data)?
        }
    })
}

impl<'g> Evaluation<'g> {
    pub fn graph(&self) -> &CompGraph {
        self.graph
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.values[id.0]
    }

    /// Value of the first node carrying `label`.
    pub fn labeled(&self, label: &str) -> Option<&DenseTensor> {
        (0..self.graph.len())
            .find(|&i| self.graph.label_of(NodeId(i)) == Some(label))
            .map(|i| &self.values[i])
    }

    /// Smallest distance between any `Maximum` input and its floor.
    ///
    /// Finite-difference checks are only meaningful when this is larger
    /// than the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for i in 0..self.graph.len() {
            if let Op::Maximum(a, floor) = self.graph.op(NodeId(i)) {
                for v in self.values[a.0].data() {
                    margin = margin.min((v - floor).abs());
                }
            }
        }
        margin
    }

    /// Gradient of the scalar node `loss` with respect to every leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, {} has shape {:?}",
                self.graph.describe(loss),
                self.values[loss.0].shape()
            )));
        }
        let n = self.graph.len();
        let mut grads: Vec<Option<DenseTensor>> = vec![None; n];
        grads[loss.0] = Some(DenseTensor::full(self.values[loss.0].shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let id = NodeId(i);
            match self.graph.op(id) {
                Op::Input(name) => {
                    out.inputs.insert(name.clone(), upstream);
                }
                Op::Param(name) => {
                    out.params.insert(name.clone(), upstream);
                }
                Op::Constant(_) => {}
                op => {
                    for (operand, g) in self.local_grads(id, op, &upstream)? {
                        accumulate(&mut grads[operand.0], g);
                    }
                }
            }
        }
        // Leaves the loss does not depend on still get a zero gradient.
        for i in 0..n {
            match self.graph.op(NodeId(i)) {
                Op::Param(name) => {
                    out.params
                        .entry(name.clone())
                        .or_insert_with(|| DenseTensor::zeros(self.values[i].shape()));
                }
                Op::Input(name) => {
                    out.inputs
                        .entry(name.clone())
                        .or_insert_with(|| DenseTensor::zeros(self.values[i].shape()));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn local_grads(&self, id: NodeId, op: &Op, up: &DenseTensor) -> Result<Vec<(NodeId, DenseTensor)>> {
        let val = |n: &NodeId| &self.values[n.0];
        let out = &self.values[id.0];
        Ok(match op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) => {
                let ga = up.matmul(&val(b).transpose())?;
                let gb = val(a).transpose().matmul(up)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, zip_with(up, val(b), |g, y| g * y)),
                (*b, zip_with(up, val(a), |g, x| g * x)),
            ],
            Op::AddBias(a, b) => {
                let n = up.cols();
                let mut gb = vec![0.0; n];
                for (i, g) in up.data().iter().enumerate() {
                    gb[i % n] += g;
                }
                vec![(*a, up.clone()), (*b, DenseTensor::new(val(b).shape().to_vec(), gb)?)]
            }
            Op::Scale(a, f) => vec![(*a, up.map(|g| g * f))],
            Op::AddScalar(a, _) => vec![(*a, up.clone())],
            Op::Sigmoid(a) => vec![(*a, zip_with(up, out, |g, y| g * y * (1.0 - y)))],
            Op::Exp(a) => vec![(*a, zip_with(up, out, |g, y| g * y))],
            Op::Log(a) => vec![(*a, zip_with(up, val(a), |g, x| g / x))],
            Op::Maximum(a, floor) => {
                vec![(*a, zip_with(up, val(a), |g, x| if x > *floor { g } else { 0.0 }))]
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(a).cols(), val(b).cols());
                let mut ga = Vec::with_capacity(val(a).len());
                let mut gb = Vec::with_capacity(val(b).len());
                for r in 0..up.rows() {
                    let row = up.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..ca + cb]);
                }
                vec![
                    (*a, DenseTensor::new(val(a).shape().to_vec(), ga)?),
                    (*b, DenseTensor::new(val(b).shape().to_vec(), gb)?),
                ]
            }
            Op::Reshape(a, _) => vec![(*a, up.clone().reshaped(val(a).shape().to_vec())?)],
            Op::ReduceSum(a) => vec![(*a, DenseTensor::full(val(a).shape(), up.item()))],
            Op::ReduceMean(a) => {
                let n = val(a).len() as f64;
                vec![(*a, DenseTensor::full(val(a).shape(), up.item() / n))]
            }
            Op::RowSum(a) => {
                let cols = val(a).cols();
                let data = up.data().iter().flat_map(|&g| std::iter::repeat_n(g, cols)).collect();
                vec![(*a, DenseTensor::new(val(a).shape().to_vec(), data)?)]
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let mut g = up.clone();
                for r in 0..out.rows() {
                    let total: f64 = up.row_slice(r).iter().sum();
                    let y = out.row_slice(r);
                    for (gc, yc) in g.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(y) {
                        *gc -= yc.exp() * total;
                    }
                }
                vec![(*a, g)]
            }
            Op::Dropout { input, .. } => match self.masks.get(&id.0) {
                Some(mask) => {
                    let data = up.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    vec![(*input, DenseTensor::new(up.shape().to_vec(), data)?)]
                }
                None => vec![(*input, up.clone())],
            },
            Op::EmbeddingBag { table, bags } => {
                let t = val(table);
                let d = t.cols();
                let mut g = DenseTensor::zeros(t.shape());
                for (b, bag) in bags.iter().enumerate() {
                    let scale = 1.0 / bag.len() as f64;
                    let row = up.row_slice(b);
                    for &tok in bag {
                        let dst = &mut g.data_mut()[tok * d..(tok + 1) * d];
                        for (x, &u) in dst.iter_mut().zip(row) {
                            *x += u * scale;
                        }
                    }
                }
                vec![(*table, g)]
            }
            Op::RepeatRows { input, times } => {
                let src = val(input);
                let cols = src.cols();
                let mut g = DenseTensor::zeros(src.shape());
                for r in 0..up.rows() {
                    let dst = r / times;
                    let row = up.row_slice(r);
                    for (x, &u) in g.data_mut()[dst * cols..(dst + 1) * cols].iter_mut().zip(row) {
                        *x += u;
                    }
                }
                vec![(*input, g)]
            }
            Op::TileRows { input, .. } => {
                let src = val(input);
                let block = src.len();
                let mut g = DenseTensor::zeros(src.shape());
                for chunk in up.data().chunks(block) {
                    for (x, &u) in g.data_mut().iter_mut().zip(chunk) {
                        *x += u;
                    }
                }
                vec![(*input, g)]
            }
            Op::Gather { input, indices } => {
                let mut g = DenseTensor::zeros(val(input).shape());
                for (&i, &u) in indices.iter().zip(up.data()) {
                    g.data_mut()[i] += u;
                }
                vec![(*input, g)]
            }
        })
    }
}

fn accumulate(slot: &mut Option<DenseTensor>, g: DenseTensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
