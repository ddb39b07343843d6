//! Directed acyclic computation graph with forward evaluation and
//! reverse-mode gradient accumulation.
//!
//! The graph owns a fixed vocabulary of layers behind the [`Op`] trait. It is
//! not a general autodiff engine: every op implements its own forward and
//! backward, the graph only schedules them. Scheduling is deterministic:
//! topological order breaks ties by insertion order, gradients are zeroed at
//! the start of every backward pass, and multiple consumers accumulate into a
//! producer's gradient in reverse topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A named parameter tensor with its paired gradient.
#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub learnable: bool,
}

impl<R: Real> Param<R> {
    pub fn new(name: &str, value: Tensor<R>, learnable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.to_string(),
            value,
            grad,
            learnable,
        }
    }
}

/// Forward-pass view handed to an op: borrowed input tensors, its own output
/// tensor and parameters.
pub struct OpForward<'a, R: Real> {
    pub node: &'a str,
    pub inputs: &'a [(&'a str, &'a Tensor<R>)],
    pub output: &'a mut Tensor<R>,
    pub params: &'a mut [Param<R>],
    pub training: bool,
}

/// Backward-pass view: gradients accumulate into `input_grads` and
/// `params[i].grad`; `output_grad` is the upstream gradient of this node.
pub struct OpBackward<'a, R: Real> {
    pub node: &'a str,
    pub inputs: &'a [(&'a str, &'a Tensor<R>)],
    pub input_grads: &'a mut [Tensor<R>],
    pub output: &'a Tensor<R>,
    pub output_grad: &'a Tensor<R>,
    pub params: &'a mut [Param<R>],
}

/// One layer of the fixed vocabulary.
pub trait Op<R: Real>: Send {
    fn kind(&self) -> &'static str;

    /// Fresh parameter tensors for this op. Called once when the node is
    /// added; the RNG stream is derived from the run seed and the node name.
    fn init_params(&mut self, _rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Param<R>> {
        Vec::new()
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()>;

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()>;

    /// Called after parameter tensors were replaced wholesale (model load),
    /// so ops that keep derived state can rebuild it.
    fn params_loaded(&mut self, _params: &[Param<R>]) {}

    /// Freeze/unfreeze running statistics (batch normalization).
    fn set_stats_frozen(&mut self, _frozen: bool) {}

    /// Smallest |margin| over the traversals cached by the last forward pass,
    /// for ops that route through hinges.
    fn cached_min_margin(&self) -> Option<f64> {
        None
    }

    /// Hash of the cached traversal assignments (leaf, vertex, margin sign)
    /// of the last forward pass, for ops that route through hinges.
    fn traversal_signature(&self) -> Option<u64> {
        None
    }

    /// Number of decision evaluations performed since construction, for ops
    /// that traverse decision structures.
    fn decision_count(&self) -> Option<u64> {
        None
    }
}

/// Placeholder op for external inputs; the graph writes its output directly.
struct InputSlot;

impl<R: Real> Op<R> for InputSlot {
    fn kind(&self) -> &'static str {
        "input"
    }

    fn forward(&mut self, _ctx: OpForward<'_, R>) -> Result<()> {
        Ok(())
    }

    fn backward(&mut self, _ctx: OpBackward<'_, R>) -> Result<()> {
        Ok(())
    }
}

struct Node<R: Real> {
    name: String,
    op: Option<Box<dyn Op<R>>>,
    input_names: Vec<String>,
    output: Tensor<R>,
    grad: Tensor<R>,
    params: Vec<Param<R>>,
}

/// The computation graph. Single-threaded during forward/backward; distinct
/// graphs are independent.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    index: HashMap<String, usize>,
    /// Node indices in topological order, with resolved input indices.
    schedule: Option<Vec<(usize, Vec<usize>)>>,
    loss: Option<usize>,
    prediction: Option<usize>,
    data_input: Option<usize>,
    label_input: Option<usize>,
    training: bool,
    forward_done: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            index: HashMap::new(),
            schedule: None,
            loss: None,
            prediction: None,
            data_input: None,
            label_input: None,
            training: true,
            forward_done: false,
        }
    }

    fn push_node(&mut self, node: Node<R>) -> Result<()> {
        if self.index.contains_key(&node.name) {
            return Err(Error::Config(format!(
                "duplicate node name '{}'",
                node.name
            )));
        }
        self.index.insert(node.name.clone(), self.nodes.len());
        self.nodes.push(node);
        self.schedule = None;
        Ok(())
    }

    /// Adds an external-input node.
    pub fn add_input(&mut self, name: &str) -> Result<()> {
        self.push_node(Node {
            name: name.to_string(),
            op: Some(Box::new(InputSlot)),
            input_names: Vec::new(),
            output: Tensor::default(),
            grad: Tensor::default(),
            params: Vec::new(),
        })
    }

    /// Adds a layer node. Parameters are initialized from `rng`. Inputs are
    /// referenced by name and may be declared before they exist; resolution
    /// happens when the schedule is computed.
    pub fn add_node(
        &mut self,
        name: &str,
        inputs: &[&str],
        op: Box<dyn Op<R>>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<()> {
        let mut seen = Vec::new();
        for input in inputs {
            if seen.contains(input) {
                return Err(Error::Config(format!(
                    "node '{name}' lists input '{input}' twice"
                )));
            }
            seen.push(input);
        }
        let mut op = op;
        let params = op.init_params(rng);
        self.push_node(Node {
            name: name.to_string(),
            op: Some(op),
            input_names: inputs.iter().map(|s| s.to_string()).collect(),
            output: Tensor::default(),
            grad: Tensor::default(),
            params,
        })
    }

    pub fn set_loss(&mut self, name: &str) -> Result<()> {
        self.loss = Some(self.require(name)?);
        Ok(())
    }

    pub fn set_prediction(&mut self, name: &str) -> Result<()> {
        self.prediction = Some(self.require(name)?);
        Ok(())
    }

    pub fn set_data_input(&mut self, name: &str) -> Result<()> {
        self.data_input = Some(self.require(name)?);
        Ok(())
    }

    pub fn set_label_input(&mut self, name: &str) -> Result<()> {
        self.label_input = Some(self.require(name)?);
        Ok(())
    }

    pub fn prediction_node(&self) -> Option<&str> {
        self.prediction.map(|i| self.nodes[i].name.as_str())
    }

    pub fn data_input_name(&self) -> Option<&str> {
        self.data_input.map(|i| self.nodes[i].name.as_str())
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown node '{name}'")))
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Freeze or unfreeze running statistics in every op that keeps them.
    pub fn freeze_stats(&mut self, frozen: bool) {
        for node in &mut self.nodes {
            if let Some(op) = node.op.as_mut() {
                op.set_stats_frozen(frozen);
            }
        }
    }

    /// Writes an externally supplied tensor into an input node.
    pub fn set_input(&mut self, name: &str, value: &Tensor<R>) -> Result<()> {
        let i = self.require(name)?;
        if !self.nodes[i].input_names.is_empty() {
            return Err(Error::Config(format!("node '{name}' is not an input")));
        }
        self.nodes[i].output = value.clone();
        Ok(())
    }

    /// Names of all nodes in topological order. Order is stable: among nodes
    /// whose dependencies are satisfied, insertion order wins. Fails with a
    /// configuration error naming a node on the cycle if the edges are not
    /// acyclic.
    pub fn topological_order(&mut self) -> Result<Vec<String>> {
        self.ensure_schedule()?;
        Ok(self
            .schedule
            .as_ref()
            .unwrap()
            .iter()
            .map(|(i, _)| self.nodes[*i].name.clone())
            .collect())
    }

    fn ensure_schedule(&mut self) -> Result<()> {
        if self.schedule.is_some() {
            return Ok(());
        }
        let n = self.nodes.len();
        let mut resolved: Vec<Vec<usize>> = Vec::with_capacity(n);
        for node in &self.nodes {
            let mut ids = Vec::with_capacity(node.input_names.len());
            for input in &node.input_names {
                ids.push(self.index.get(input).copied().ok_or_else(|| {
                    Error::Config(format!(
                        "node '{}' references unknown input '{input}'",
                        node.name
                    ))
                })?);
            }
            resolved.push(ids);
        }

        let mut indegree: Vec<usize> = resolved.iter().map(|ins| ins.len()).collect();
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, ins) in resolved.iter().enumerate() {
            for &j in ins {
                if j == i {
                    return Err(Error::Config(format!(
                        "cycle detected involving node '{}'",
                        self.nodes[i].name
                    )));
                }
                consumers[j].push(i);
            }
        }

        // Kahn's algorithm; the ready set is scanned in insertion order so
        // independent nodes keep a stable ordering.
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().min() {
            ready.retain(|&j| j != i);
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }

        if order.len() != n {
            // Remaining nodes all sit on or behind a cycle. Walking
            // predecessors within the remainder must revisit a node; that
            // node is on a cycle.
            let leftover: Vec<usize> = (0..n).filter(|i| !order.contains(i)).collect();
            let mut seen = vec![false; n];
            let mut cur = leftover[0];
            loop {
                if seen[cur] {
                    return Err(Error::Config(format!(
                        "cycle detected involving node '{}'",
                        self.nodes[cur].name
                    )));
                }
                seen[cur] = true;
                cur = *resolved[cur]
                    .iter()
                    .find(|&&j| leftover.contains(&j))
                    .expect("node in cyclic remainder has a predecessor in it");
            }
        }

        self.schedule = Some(
            order
                .into_iter()
                .map(|i| (i, resolved[i].clone()))
                .collect(),
        );
        Ok(())
    }

    /// Runs a full forward pass: places `batch` and `labels` into the data
    /// and label inputs, evaluates every node in topological order, and
    /// returns the scalar loss.
    pub fn run_forward(&mut self, batch: &Tensor<R>, labels: &Tensor<R>) -> Result<R> {
        if batch.extent0() == 0 {
            return Err(Error::State("empty batch".into()));
        }
        if batch.extent0() != labels.extent0() {
            return Err(Error::Config(format!(
                "batch has {} examples but labels have {}",
                batch.extent0(),
                labels.extent0()
            )));
        }
        let data = self
            .data_input
            .ok_or_else(|| Error::Config("graph has no designated data input".into()))?;
        let label = self
            .label_input
            .ok_or_else(|| Error::Config("graph has no designated label input".into()))?;
        self.nodes[data].output = batch.clone();
        self.nodes[label].output = labels.clone();
        self.forward()
    }

    /// Forward pass over whatever the input nodes currently hold.
    pub fn forward(&mut self) -> Result<R> {
        self.ensure_schedule()?;
        let loss = self
            .loss
            .ok_or_else(|| Error::Config("graph has no designated loss node".into()))?;
        let schedule = self.schedule.clone().unwrap();
        let training = self.training;

        for (i, input_ids) in &schedule {
            let i = *i;
            let is_input = self.nodes[i].op.as_ref().unwrap().kind() == "input";
            if is_input {
                // Output was set externally.
            } else {
                let mut op = self.nodes[i].op.take().expect("op present");
                let mut output = std::mem::take(&mut self.nodes[i].output);
                let mut params = std::mem::take(&mut self.nodes[i].params);
                let result = {
                    let inputs: Vec<(&str, &Tensor<R>)> = input_ids
                        .iter()
                        .map(|&j| (self.nodes[j].name.as_str(), &self.nodes[j].output))
                        .collect();
                    op.forward(OpForward {
                        node: &self.nodes[i].name,
                        inputs: &inputs,
                        output: &mut output,
                        params: &mut params,
                        training,
                    })
                };
                self.nodes[i].op = Some(op);
                self.nodes[i].output = output;
                self.nodes[i].params = params;
                result?;
            }
            if self.nodes[i].output.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    node: self.nodes[i].name.clone(),
                    phase: "forward",
                });
            }
        }

        let out = &self.nodes[loss].output;
        if out.len() != 1 {
            return Err(Error::Config(format!(
                "loss node '{}' must output a scalar, got shape {:?}",
                self.nodes[loss].name,
                out.shape()
            )));
        }
        self.forward_done = true;
        Ok(out.item())
    }

    /// Reverse pass. Zeroes all gradients, seeds the loss gradient with one,
    /// and walks the schedule backwards accumulating input and parameter
    /// gradients.
    pub fn run_backward(&mut self) -> Result<()> {
        if !self.forward_done {
            return Err(Error::State(
                "run_backward called before run_forward".into(),
            ));
        }
        let loss = self
            .loss
            .ok_or_else(|| Error::Config("graph has no designated loss node".into()))?;
        let schedule = self.schedule.clone().unwrap();

        for node in &mut self.nodes {
            node.grad.reset(node.output.shape());
            for p in &mut node.params {
                p.grad.fill_zero();
            }
        }
        self.nodes[loss].grad = Tensor::scalar(R::one());

        for (i, input_ids) in schedule.iter().rev() {
            let i = *i;
            if input_ids.is_empty() {
                continue;
            }
            let mut op = self.nodes[i].op.take().expect("op present");
            let output = std::mem::take(&mut self.nodes[i].output);
            let output_grad = std::mem::take(&mut self.nodes[i].grad);
            let mut params = std::mem::take(&mut self.nodes[i].params);
            let mut input_grads: Vec<Tensor<R>> = input_ids
                .iter()
                .map(|&j| std::mem::take(&mut self.nodes[j].grad))
                .collect();
            let result = {
                let inputs: Vec<(&str, &Tensor<R>)> = input_ids
                    .iter()
                    .map(|&j| (self.nodes[j].name.as_str(), &self.nodes[j].output))
                    .collect();
                op.backward(OpBackward {
                    node: &self.nodes[i].name,
                    inputs: &inputs,
                    input_grads: &mut input_grads,
                    output: &output,
                    output_grad: &output_grad,
                    params: &mut params,
                })
            };
            self.nodes[i].op = Some(op);
            self.nodes[i].output = output;
            self.nodes[i].grad = output_grad;
            self.nodes[i].params = params;
            for (&j, grad) in input_ids.iter().zip(input_grads) {
                self.nodes[j].grad = grad;
            }
            result?;
            for &j in input_ids {
                if self.nodes[j].grad.first_non_finite().is_some() {
                    return Err(Error::NonFinite {
                        node: self.nodes[i].name.clone(),
                        phase: "backward",
                    });
                }
            }
            for p in &self.nodes[i].params {
                if p.grad.first_non_finite().is_some() {
                    return Err(Error::NonFinite {
                        node: self.nodes[i].name.clone(),
                        phase: "backward",
                    });
                }
            }
        }
        Ok(())
    }

    /// Visits every learnable parameter in insertion order as
    /// `(qualified_name, param)`, where the qualified name is
    /// `"node.param"`.
    pub fn for_each_learnable<F: FnMut(&str, &mut Param<R>)>(&mut self, mut f: F) {
        for node in &mut self.nodes {
            for p in &mut node.params {
                if p.learnable {
                    let qualified = format!("{}.{}", node.name, p.name);
                    f(&qualified, p);
                }
            }
        }
    }

    /// Visits every parameter (learnable or not) in insertion order.
    pub fn for_each_param<F: FnMut(&str, &Param<R>)>(&self, mut f: F) {
        for node in &self.nodes {
            for p in &node.params {
                f(&node.name, p);
            }
        }
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Nodes and their parameters in insertion order, for serialization.
    pub fn nodes_with_params(&self) -> Vec<(&str, &[Param<R>])> {
        self.nodes
            .iter()
            .filter(|n| !n.params.is_empty())
            .map(|n| (n.name.as_str(), n.params.as_slice()))
            .collect()
    }

    pub fn node_output(&self, name: &str) -> Result<&Tensor<R>> {
        Ok(&self.nodes[self.require(name)?].output)
    }

    pub fn node_grad(&self, name: &str) -> Result<&Tensor<R>> {
        Ok(&self.nodes[self.require(name)?].grad)
    }

    pub fn node_kind(&self, name: &str) -> Result<&'static str> {
        Ok(self.nodes[self.require(name)?].op.as_ref().unwrap().kind())
    }

    pub fn param(&self, node: &str, param: &str) -> Result<&Param<R>> {
        let i = self.require(node)?;
        self.nodes[i]
            .params
            .iter()
            .find(|p| p.name == param)
            .ok_or_else(|| Error::Config(format!("node '{node}' has no parameter '{param}'")))
    }

    pub fn param_mut(&mut self, node: &str, param: &str) -> Result<&mut Param<R>> {
        let i = self.require(node)?;
        self.nodes[i]
            .params
            .iter_mut()
            .find(|p| p.name == param)
            .ok_or_else(|| Error::Config(format!("node '{node}' has no parameter '{param}'")))
    }

    /// Replaces a node's parameter tensors (used by model loading) and lets
    /// the op rebuild any derived state.
    pub fn load_params(&mut self, node: &str, params: Vec<Param<R>>) -> Result<()> {
        let i = self.require(node)?;
        for (old, new) in self.nodes[i].params.iter().zip(&params) {
            if old.name != new.name || old.value.shape() != new.value.shape() {
                return Err(Error::Data(format!(
                    "node '{node}': stored parameter '{}' {:?} does not match expected '{}' {:?}",
                    new.name,
                    new.value.shape(),
                    old.name,
                    old.value.shape()
                )));
            }
        }
        if params.len() != self.nodes[i].params.len() {
            return Err(Error::Data(format!(
                "node '{node}': stored parameter count {} does not match expected {}",
                params.len(),
                self.nodes[i].params.len()
            )));
        }
        self.nodes[i].params = params;
        let node_ref = &mut self.nodes[i];
        node_ref
            .op
            .as_mut()
            .unwrap()
            .params_loaded(&node_ref.params);
        Ok(())
    }

    /// Combined hash of every forest op's traversal assignments from the
    /// last forward pass. Two forwards with equal signatures routed every
    /// example through the same leaves and minimizing vertices with the
    /// same margin signs, so the loss surface between them is smooth.
    pub fn traversal_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Some(sig) = node.op.as_ref().and_then(|op| op.traversal_signature()) {
                h ^= sig;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Smallest hinge margin cached by any forest op in the last forward
    /// pass.
    pub fn min_forest_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| n.op.as_ref().and_then(|op| op.cached_min_margin()))
            .fold(None, |acc, m| {
                Some(acc.map_or(m, |a: f64| if m < a { m } else { a }))
            })
    }

    /// Total decision evaluations performed by all forest ops.
    pub fn total_decisions(&self) -> u64 {
        self.nodes
            .iter()
            .filter_map(|n| n.op.as_ref().and_then(|op| op.decision_count()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::L2Loss;
    use crate::rng::seed_stream;

    /// No-op layer used to shape topology tests.
    struct PassThrough;

    impl Op<f64> for PassThrough {
        fn kind(&self) -> &'static str {
            "pass"
        }

        fn forward(&mut self, ctx: OpForward<'_, f64>) -> Result<()> {
            let (_, input) = ctx.inputs[0];
            ctx.output.reset(input.shape());
            ctx.output.data_mut().copy_from_slice(input.data());
            Ok(())
        }

        fn backward(&mut self, ctx: OpBackward<'_, f64>) -> Result<()> {
            let g = ctx.output_grad.data();
            for (d, gv) in ctx.input_grads[0].data_mut().iter_mut().zip(g) {
                *d += *gv;
            }
            Ok(())
        }
    }

    /// Scalar loss `p^2` on its own parameter, ignoring inputs.
    struct SquareParamLoss {
        initial: f64,
    }

    impl Op<f64> for SquareParamLoss {
        fn kind(&self) -> &'static str {
            "square_param"
        }

        fn init_params(&mut self, _rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Param<f64>> {
            vec![Param::new(
                "p",
                Tensor::from_vec(&[1], vec![self.initial]).unwrap(),
                true,
            )]
        }

        fn forward(&mut self, ctx: OpForward<'_, f64>) -> Result<()> {
            let p = ctx.params[0].value.data()[0];
            ctx.output.reset(&[1]);
            ctx.output.data_mut()[0] = p * p;
            Ok(())
        }

        fn backward(&mut self, ctx: OpBackward<'_, f64>) -> Result<()> {
            let p = ctx.params[0].value.data()[0];
            let g = ctx.output_grad.data()[0];
            ctx.params[0].grad.data_mut()[0] += 2.0 * p * g;
            Ok(())
        }
    }

    /// Loss that is constant regardless of inputs and parameters.
    struct ConstantLoss;

    impl Op<f64> for ConstantLoss {
        fn kind(&self) -> &'static str {
            "constant"
        }

        fn init_params(&mut self, _rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Param<f64>> {
            vec![Param::new("w", Tensor::zeros(&[4]), true)]
        }

        fn forward(&mut self, ctx: OpForward<'_, f64>) -> Result<()> {
            ctx.output.reset(&[1]);
            ctx.output.data_mut()[0] = 7.5;
            Ok(())
        }

        fn backward(&mut self, _ctx: OpBackward<'_, f64>) -> Result<()> {
            Ok(())
        }
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        seed_stream(0, "test")
    }

    #[test]
    fn topological_order_linear_chain() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("a").unwrap();
        g.add_node("b", &["a"], Box::new(PassThrough), &mut rng()).unwrap();
        g.add_node("c", &["b"], Box::new(PassThrough), &mut rng()).unwrap();
        assert_eq!(g.topological_order().unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn topological_order_diamond_is_stable() {
        // b inserted before c; both depend only on a.
        let mut g: Graph<f64> = Graph::new();
        g.add_input("a").unwrap();
        g.add_node("b", &["a"], Box::new(PassThrough), &mut rng()).unwrap();
        g.add_node("c", &["a"], Box::new(PassThrough), &mut rng()).unwrap();
        g.add_node("d", &["b", "c"], Box::new(L2Loss), &mut rng()).unwrap();
        assert_eq!(g.topological_order().unwrap(), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn cycle_is_reported_with_a_node_name() {
        let mut g: Graph<f64> = Graph::new();
        g.add_node("a", &["b"], Box::new(PassThrough), &mut rng()).unwrap();
        g.add_node("b", &["a"], Box::new(PassThrough), &mut rng()).unwrap();
        let err = g.topological_order().unwrap_err().to_string();
        assert!(err.contains("cycle"), "{err}");
        assert!(err.contains("'a'") || err.contains("'b'"), "{err}");
    }

    #[test]
    fn identity_graph_with_l2_loss_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node("loss", &["data", "labels"], Box::new(L2Loss), &mut rng())
            .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        let batch = Tensor::from_vec(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = g.run_forward(&batch, &batch.clone()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_k() {
        use crate::layers::SoftmaxCrossEntropy;
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node(
            "loss",
            &["data", "labels"],
            Box::new(SoftmaxCrossEntropy::new()),
            &mut rng(),
        )
        .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        // K = 10 uniform logits, batch of 4 (power of two keeps the batch
        // mean exact).
        let batch = Tensor::zeros(&[4, 10]);
        let labels = Tensor::from_vec(&[4], vec![0.0, 3.0, 9.0, 5.0]).unwrap();
        let loss = g.run_forward(&batch, &labels).unwrap();
        assert_eq!(loss, 10.0f64.ln());
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        use crate::layers::{InnerProduct, SoftmaxCrossEntropy};
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node(
            "ip",
            &["data"],
            Box::new(InnerProduct::new(3, 4)),
            &mut seed_stream(7, "init/ip"),
        )
        .unwrap();
        g.add_node(
            "loss",
            &["ip", "labels"],
            Box::new(SoftmaxCrossEntropy::new()),
            &mut rng(),
        )
        .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        let batch = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.25, -0.5]).unwrap();
        let labels = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        let a = g.run_forward(&batch, &labels).unwrap();
        let b = g.run_forward(&batch, &labels).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node("loss", &["data", "labels"], Box::new(ConstantLoss), &mut rng())
            .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        let batch = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        g.run_forward(&batch, &batch.clone()).unwrap();
        g.run_backward().unwrap();
        assert!(g.param("loss", "w").unwrap().grad.data().iter().all(|&v| v == 0.0));
        assert!(g.node_grad("data").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_parameter_gradient() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node(
            "loss",
            &["data", "labels"],
            Box::new(SquareParamLoss { initial: 3.0 }),
            &mut rng(),
        )
        .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        let batch = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        g.run_forward(&batch, &batch.clone()).unwrap();
        g.run_backward().unwrap();
        assert_eq!(g.param("loss", "p").unwrap().grad.data()[0], 6.0);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node("loss", &["data", "labels"], Box::new(L2Loss), &mut rng())
            .unwrap();
        g.set_loss("loss").unwrap();
        let err = g.run_backward().unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn non_finite_forward_is_attributed() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node("loss", &["data", "labels"], Box::new(L2Loss), &mut rng())
            .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        let batch = Tensor::from_vec(&[1, 1], vec![f64::INFINITY]).unwrap();
        let labels = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let err = g.run_forward(&batch, &labels).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn duplicate_inputs_are_rejected() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("a").unwrap();
        let err = g
            .add_node("b", &["a", "a"], Box::new(L2Loss), &mut rng())
            .unwrap_err();
        assert!(err.to_string().contains("twice"), "{err}");
    }

    #[test]
    fn shapes_survive_forward_backward() {
        let mut g: Graph<f64> = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node("mid", &["data"], Box::new(PassThrough), &mut rng()).unwrap();
        g.add_node("loss", &["mid", "labels"], Box::new(L2Loss), &mut rng())
            .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_loss("loss").unwrap();
        let batch = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        let labels = Tensor::from_vec(&[2, 1], vec![1.5, 1.5]).unwrap();
        g.run_forward(&batch, &labels).unwrap();
        g.run_backward().unwrap();
        assert_eq!(g.node_output("mid").unwrap().shape(), &[2, 1]);
        assert_eq!(g.node_grad("mid").unwrap().shape(), &[2, 1]);
        assert_eq!(g.node_grad("data").unwrap().shape(), &[2, 1]);
    }
}
