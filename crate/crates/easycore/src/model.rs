//! Residual MLP classifiers with access to penultimate-layer features.
//!
//! The architecture is: input linear layer to `hidden_dim`, then
//! `num_blocks` residual blocks computing `x <- x + Linear(relu(x))`, then
//! a linear head. The activations entering the head are the penultimate
//! features.

use std::path::Path;

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, num_blocks: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim,
            num_blocks,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.input_dim == 0 {
            issues.push("model.input_dim must be positive".to_string());
        }
        if self.hidden_dim == 0 {
            issues.push("model.hidden_dim must be positive".to_string());
        }
        if self.num_classes < 2 {
            issues.push(format!(
                "model.num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }

    /// Closed-form parameter count:
    /// input_dim*hidden + hidden + num_blocks*(hidden^2 + hidden)
    /// + hidden*classes + classes.
    pub fn parameter_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.num_blocks * (self.hidden_dim * self.hidden_dim + self.hidden_dim)
            + self.hidden_dim * self.num_classes
            + self.num_classes
    }
}

/// One named parameter tensor. Order inside [`Model::params`] is canonical:
/// input layer, blocks in order, head; weight before bias.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

/// Variable bindings of one forward pass on a tape.
pub struct ForwardPass {
    pub param_vars: Vec<VarId>,
    pub penultimate: VarId,
    pub logits: VarId,
}

/// Fan-in uniform bound, the standard linear-layer default. Keeps the
/// variance growth of deep residual stacks mild enough to train.
fn fan_in_limit(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Build the forward graph for the given parameter variables.
/// `param_vars` must follow the canonical parameter order.
pub fn forward_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    param_vars: &[VarId],
    x: VarId,
) -> Result<(VarId, VarId)> {
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != config.input_dim {
        return Err(Error::shape("forward", xs, &[0, config.input_dim]));
    }
    let expected = 2 * (config.num_blocks + 2);
    if param_vars.len() != expected {
        return Err(Error::config(format!(
            "forward_graph: expected {expected} parameter variables, got {}",
            param_vars.len()
        )));
    }
    let mut cur = tape.matmul(x, param_vars[0])?;
    cur = tape.add_row_bias(cur, param_vars[1])?;
    for b in 0..config.num_blocks {
        let w = param_vars[2 + 2 * b];
        let bias = param_vars[3 + 2 * b];
        let r = tape.relu(cur);
        let lin = tape.matmul(r, w)?;
        let lin = tape.add_row_bias(lin, bias)?;
        cur = tape.add(cur, lin)?;
    }
    let penultimate = cur;
    let head_w = param_vars[expected - 2];
    let head_b = param_vars[expected - 1];
    let logits = tape.matmul(penultimate, head_w)?;
    let logits = tape.add_row_bias(logits, head_b)?;
    Ok((penultimate, logits))
}

/// Deterministically build a model from a config and an init seed.
///
/// Weights are drawn uniform in +-1/sqrt(fan_in); biases start at zero.
/// Draws happen in canonical parameter order, so equal (config, seed)
/// always produce bit-identical parameters.
pub fn build_model(config: ModelConfig, init_seed: u64) -> Result<Model> {
    config.validate()?;
    let mut stream = Stream::derived(init_seed, "model-init", 0);
    let mut params = Vec::new();
    let linear = |name: &str, fan_in: usize, fan_out: usize, params: &mut Vec<NamedTensor>, s: &mut Stream| {
        let limit = fan_in_limit(fan_in);
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| s.range_f64(-limit, limit))
            .collect();
        params.push(NamedTensor {
            name: format!("{name}.weight"),
            tensor: Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
        });
        params.push(NamedTensor {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(vec![fan_out]),
        });
    };
    linear("input", config.input_dim, config.hidden_dim, &mut params, &mut stream);
    for b in 0..config.num_blocks {
        linear(
            &format!("block{b}"),
            config.hidden_dim,
            config.hidden_dim,
            &mut params,
            &mut stream,
        );
    }
    linear("head", config.hidden_dim, config.num_classes, &mut params, &mut stream);
    Ok(Model { config, params })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Bind the parameters on a tape and build the forward graph for `x`.
    /// With `params_require_grad`, backward will populate parameter
    /// gradients which can then be folded back via
    /// [`ForwardPass::add_param_grads_to`].
    pub fn forward_pass(
        &self,
        tape: &mut Tape,
        x: VarId,
        params_require_grad: bool,
    ) -> Result<ForwardPass> {
        let param_vars: Vec<VarId> = self
            .params
            .iter()
            .map(|p| {
                tape.leaf_from(
                    p.tensor.shape().to_vec(),
                    p.tensor.values().to_vec(),
                    params_require_grad,
                )
            })
            .collect();
        let (penultimate, logits) = forward_graph(tape, &self.config, &param_vars, x)?;
        Ok(ForwardPass {
            param_vars,
            penultimate,
            logits,
        })
    }

    /// Logits for a batch of shape [batch, input_dim].
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf_from(batch.shape().to_vec(), batch.values().to_vec(), false);
        let pass = self.forward_pass(&mut tape, x, false)?;
        Tensor::new(
            tape.shape(pass.logits).to_vec(),
            tape.values(pass.logits).to_vec(),
        )
    }

    /// Activations entering the head, shape [batch, hidden_dim]. The head
    /// applied to these reproduces [`Model::forward_logits`] exactly: both
    /// run the same graph.
    pub fn penultimate_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf_from(batch.shape().to_vec(), batch.values().to_vec(), false);
        let pass = self.forward_pass(&mut tape, x, false)?;
        Tensor::new(
            tape.shape(pass.penultimate).to_vec(),
            tape.values(pass.penultimate).to_vec(),
        )
    }

    /// Predicted class per row: argmax over logits, ties to the lowest index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(batch)?;
        Ok(argmax_rows(logits.values(), self.config.num_classes))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .collect();
        crate::checkpoint::save(path, &named)
    }

    /// Load a checkpoint into a freshly validated model of this config.
    /// Names, order, and shapes must all match the config exactly.
    pub fn load_checkpoint<P: AsRef<Path>>(config: ModelConfig, path: P) -> Result<Model> {
        config.validate()?;
        let entries = crate::checkpoint::load(&path)?;
        let mut model = build_model(config, 0)?;
        if entries.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                model.params.len(),
                entries.len()
            )));
        }
        for (slot, entry) in model.params.iter_mut().zip(entries) {
            if slot.name != entry.name {
                return Err(Error::Checkpoint(format!(
                    "tensor name mismatch: expected {}, found {}",
                    slot.name, entry.name
                )));
            }
            if slot.tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} shape mismatch: expected {:?}, found {:?}",
                    slot.name,
                    slot.tensor.shape(),
                    entry.shape
                )));
            }
            slot.tensor = Tensor::new(entry.shape, entry.values)?;
        }
        Ok(model)
    }
}

impl ForwardPass {
    /// Fold the tape's parameter gradients into the model's grad buffers.
    pub fn add_param_grads_to(&self, tape: &Tape, model: &mut Model) {
        for (var, p) in self.param_vars.iter().zip(model.params.iter_mut()) {
            tape.add_grad_to(*var, &mut p.tensor);
        }
    }
}

/// Row-wise argmax with ties resolved to the lowest class index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn reference_config_parameter_count() {
        let config = ModelConfig::new(2, 256, 20, 2);
        assert_eq!(config.parameter_count(), 1_317_122);
        let model = build_model(config, 7).unwrap();
        assert_eq!(model.parameter_count(), 1_317_122);
    }

    #[test]
    fn tiny_config_parameter_count() {
        let config = ModelConfig::new(2, 4, 0, 2);
        assert_eq!(config.parameter_count(), 22);
    }

    #[test]
    fn same_seed_rebuilds_identical_parameters() {
        let config = ModelConfig::new(3, 8, 2, 4);
        let a = build_model(config, 123).unwrap();
        let b = build_model(config, 123).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.values(), pb.tensor.values());
        }
        let c = build_model(config, 124).unwrap();
        assert_ne!(
            a.params()[0].tensor.values(),
            c.params()[0].tensor.values()
        );
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(build_model(ModelConfig::new(0, 4, 1, 2), 1).is_err());
        assert!(build_model(ModelConfig::new(2, 0, 1, 2), 1).is_err());
        assert!(build_model(ModelConfig::new(2, 4, 1, 1), 1).is_err());
    }

    #[test]
    fn no_blocks_reduces_to_affine_pipeline() {
        let config = ModelConfig::new(2, 4, 0, 2);
        let model = build_model(config, 5).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        // Head(Input(x)) by hand from the parameter tensors.
        let w_in = model.params()[0].tensor.values();
        let b_in = model.params()[1].tensor.values();
        let w_h = model.params()[2].tensor.values();
        let b_h = model.params()[3].tensor.values();
        let mut hidden = vec![0.0; 4];
        for j in 0..4 {
            hidden[j] = b_in[j] + 0.3 * w_in[j] + (-0.7) * w_in[4 + j];
        }
        let mut want = vec![0.0; 2];
        for c in 0..2 {
            want[c] = b_h[c];
            for j in 0..4 {
                want[c] += hidden[j] * w_h[j * 2 + c];
            }
        }
        let got = model.forward_logits(&x).unwrap();
        for (g, w) in got.values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // Penultimate features equal the input layer output here.
        let feats = model.penultimate_features(&x).unwrap();
        for (f, h) in feats.values().iter().zip(&hidden) {
            assert!((f - h).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_give_zero_logits_and_ln_c_loss() {
        let config = ModelConfig::new(2, 8, 3, 5);
        let mut model = build_model(config, 1).unwrap();
        for p in model.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 0.5]).unwrap();
        let logits = model.forward_logits(&x).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        let loss = tape.softmax_cross_entropy(lv, &[0, 3]).unwrap();
        for &l in tape.values(loss) {
            assert!((l - 5.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_traced_one_block_model() {
        // hidden_dim 1, one block, all weights set by hand:
        //   input: w=2, b=1       -> h0 = 2x + 1
        //   block: w=3, b=-1      -> h1 = h0 + (3*relu(h0) - 1)
        //   head:  w=[1, -2], b=[0.5, 0] -> logits
        // For x = 1: h0 = 3, h1 = 3 + 9 - 1 = 11, logits = (11.5, -22).
        let config = ModelConfig::new(1, 1, 1, 2);
        let mut model = build_model(config, 0).unwrap();
        let values: &[(&str, Vec<f64>)] = &[
            ("input.weight", vec![2.0]),
            ("input.bias", vec![1.0]),
            ("block0.weight", vec![3.0]),
            ("block0.bias", vec![-1.0]),
            ("head.weight", vec![1.0, -2.0]),
            ("head.bias", vec![0.5, 0.0]),
        ];
        for (p, (name, vals)) in model.params_mut().iter_mut().zip(values) {
            assert_eq!(&p.name, name);
            p.tensor.values_mut().copy_from_slice(vals);
        }
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let logits = model.forward_logits(&x).unwrap();
        assert_eq!(logits.values(), &[11.5, -22.0]);

        // For x = -1: h0 = -1, relu -> 0, h1 = -1 + (0 - 1) = -2,
        // logits = (-2 + 0.5, 4) = (-1.5, 4).
        let x = Tensor::matrix(1, 1, vec![-1.0]).unwrap();
        let logits = model.forward_logits(&x).unwrap();
        assert_eq!(logits.values(), &[-1.5, 4.0]);
    }

    #[test]
    fn head_of_penultimate_equals_forward_logits() {
        let config = ModelConfig::new(3, 6, 2, 4);
        let model = build_model(config, 9).unwrap();
        let mut s = Stream::new(4);
        let vals: Vec<f64> = (0..5 * 3).map(|_| s.range_f64(-2.0, 2.0)).collect();
        let x = Tensor::matrix(5, 3, vals).unwrap();
        let feats = model.penultimate_features(&x).unwrap();
        assert_eq!(feats.shape(), &[5, 6]);
        let logits = model.forward_logits(&x).unwrap();
        // Apply the head by hand to the features.
        let w_h = model.params()[model.params().len() - 2].tensor.clone();
        let b_h = model.params()[model.params().len() - 1].tensor.clone();
        let mut tape = Tape::new();
        let f = tape.leaf(&feats);
        let w = tape.leaf(&w_h);
        let b = tape.leaf(&b_h);
        let h = tape.matmul(f, w).unwrap();
        let h = tape.add_row_bias(h, b).unwrap();
        assert_eq!(tape.values(h), logits.values());
    }

    #[test]
    fn residual_identity_with_zeroed_blocks() {
        let config = ModelConfig::new(2, 5, 3, 2);
        let mut model = build_model(config, 11).unwrap();
        // Zero every block parameter; forward must equal Head(Input(x)).
        for p in model.params_mut() {
            if p.name.starts_with("block") {
                p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut s = Stream::new(6);
        let vals: Vec<f64> = (0..4 * 2).map(|_| s.range_f64(-1.0, 1.0)).collect();
        let x = Tensor::matrix(4, 2, vals).unwrap();
        let full = model.forward_logits(&x).unwrap();

        let degenerate = ModelConfig::new(2, 5, 0, 2);
        let mut affine = build_model(degenerate, 0).unwrap();
        let keep: Vec<Tensor> = model
            .params()
            .iter()
            .filter(|p| !p.name.starts_with("block"))
            .map(|p| p.tensor.clone())
            .collect();
        for (slot, t) in affine.params_mut().iter_mut().zip(keep) {
            slot.tensor = t;
        }
        let want = affine.forward_logits(&x).unwrap();
        assert_eq!(full.values(), want.values());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build_model(ModelConfig::new(2, 16, 4, 3), 42).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.5, 1.0, 2.0, -2.0]).unwrap();
        let a = model.forward_logits(&x).unwrap();
        let b = model.forward_logits(&x).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn width_mismatch_is_reported() {
        let model = build_model(ModelConfig::new(3, 4, 1, 2), 1).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(model.forward_logits(&x).is_err());
    }

    #[test]
    fn argmax_breaks_ties_to_lowest_index() {
        assert_eq!(argmax_rows(&[1.0, 1.0, 0.5], 3), vec![0]);
        assert_eq!(argmax_rows(&[0.0, 2.0, 2.0], 3), vec![1]);
    }
}
