use rand::Rng;

use super::tape::{col_means, col_vars, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything holding trainable tensors in a fixed registration order.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a tracked leaf.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.leaf(t)).collect()
    }

    /// Records every parameter as a constant; nothing flows back.
    fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.frozen(t)).collect()
    }

    fn absorb_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (t, v) in self.params_mut().into_iter().zip(vars) {
            tape.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Parameters flattened in registration order.
    fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.numel();
            t.assign(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }
}

/// Train or eval behaviour for normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Uniform `±1/sqrt(in)` initialization.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::param(vec![output, input], w).expect("positive dims"),
            bias: Tensor::param(vec![output], b).expect("positive dims"),
        }
    }

    pub fn from_values(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let mut w = Tensor::from_rows(&weight)?;
        w.set_requires_grad(true);
        if bias.len() != w.rows() {
            return Err(Error::shape("bias length must match output rows"));
        }
        Ok(Self {
            weight: w,
            bias: Tensor::param(vec![bias.len()], bias)?,
        })
    }

    pub fn zeroed(input: usize, output: usize) -> Self {
        let mut weight = Tensor::zeros(vec![output, input]);
        let mut bias = Tensor::zeros(vec![output]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, vars[0], Some(vars[1]))
    }
}

impl Module for LinearLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 1-D batch normalization over `p` features.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(p: usize) -> Self {
        Self::with_options(p, 0.1, 1e-5).expect("default options are valid")
    }

    pub fn with_options(p: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid(format!("batch-norm momentum {momentum} outside (0,1)")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batch-norm eps must be positive"));
        }
        Ok(Self {
            gamma: Tensor::param(vec![p], vec![1.0; p])?,
            beta: Tensor::param(vec![p], vec![0.0; p])?,
            running_mean: vec![0.0; p],
            running_var: vec![1.0; p],
            momentum,
            eps,
        })
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates as `r <- (1 - momentum) * r + momentum * stat`, using
    /// the unbiased batch variance. Eval mode uses the running estimates.
    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Eval => tape.batch_norm_eval(x, vars[0], vars[1], &self.running_mean, &self.running_var, self.eps),
            Mode::Train => {
                let shape = tape.shape(x).to_vec();
                if shape.len() != 2 || shape[1] != self.features() {
                    return Err(Error::shape(format!("batch norm over {} features got {shape:?}", self.features())));
                }
                let n = shape[0];
                if n < 2 {
                    return Err(Error::invalid("train-mode batch norm needs at least 2 rows"));
                }
                let out = tape.batch_norm_train(x, vars[0], vars[1], self.eps)?;
                let xv = tape.value(x);
                let mean = col_means(xv, n, shape[1]);
                let var = col_vars(xv, n, shape[1], true);
                let rho = self.momentum;
                for j in 0..self.features() {
                    self.running_mean[j] = (1.0 - rho) * self.running_mean[j] + rho * mean[j];
                    self.running_var[j] = (1.0 - rho) * self.running_var[j] + rho * var[j];
                }
                Ok(out)
            }
        }
    }
}

impl Module for BatchNorm1d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(p: usize) -> Self {
        Self {
            gamma: Tensor::param(vec![p], vec![1.0; p]).expect("positive dims"),
            beta: Tensor::param(vec![p], vec![0.0; p]).expect("positive dims"),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[0], vars[1], self.eps)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Dense layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub layers: Vec<LinearLayer>,
}

impl MlpEncoder {
    /// `dims = [k, hidden.., p]`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("encoder dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| LinearLayer::new(w[0], w[1], rng)).collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape("encoder layer widths do not chain"));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let width = tape.shape(x).get(1).copied();
        if width != Some(self.input_dim()) {
            return Err(Error::shape(format!(
                "encoder expects width {}, got shape {:?}",
                self.input_dim(),
                tape.shape(x)
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &vars[2 * i..2 * i + 2], h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl Module for MlpEncoder {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Batch normalization followed by one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub bn: BatchNorm1d,
    pub fc: LinearLayer,
}

impl ClassifierHead {
    pub fn new(p: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            bn: BatchNorm1d::new(p),
            fc: LinearLayer::new(p, classes, rng),
        }
    }

    pub fn from_parts(bn: BatchNorm1d, fc: LinearLayer) -> Result<Self> {
        if bn.features() != fc.input_dim() {
            return Err(Error::shape("head batch-norm width must match dense input"));
        }
        Ok(Self { bn, fc })
    }

    pub fn latent_dim(&self) -> usize {
        self.bn.features()
    }

    pub fn classes(&self) -> usize {
        self.fc.output_dim()
    }

    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], z: Var, mode: Mode) -> Result<Var> {
        let h = self.bn.forward(tape, &vars[..2], z, mode)?;
        self.fc.forward(tape, &vars[2..4], h)
    }

    /// Eval-mode forward; never touches the running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let h = tape.batch_norm_eval(z, vars[0], vars[1], &self.bn.running_mean, &self.bn.running_var, self.bn.eps)?;
        self.fc.forward(tape, &vars[2..4], h)
    }

    /// Everything that crosses the wire: gamma, beta, running mean, running
    /// variance, dense weight, dense bias.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.state_len());
        v.extend_from_slice(self.bn.gamma.values());
        v.extend_from_slice(self.bn.beta.values());
        v.extend_from_slice(&self.bn.running_mean);
        v.extend_from_slice(&self.bn.running_var);
        v.extend_from_slice(self.fc.weight.values());
        v.extend_from_slice(self.fc.bias.values());
        v
    }

    pub fn state_len(&self) -> usize {
        4 * self.latent_dim() + self.fc.num_params()
    }

    pub fn load_state_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.state_len() {
            return Err(Error::shape(format!("head state needs {} values, got {}", self.state_len(), v.len())));
        }
        let p = self.latent_dim();
        if v[3 * p..4 * p].iter().any(|x| *x < 0.0) {
            return Err(Error::invalid("running variance must be non-negative"));
        }
        self.bn.gamma.assign(&v[..p])?;
        self.bn.beta.assign(&v[p..2 * p])?;
        self.bn.running_mean.copy_from_slice(&v[2 * p..3 * p]);
        self.bn.running_var.copy_from_slice(&v[3 * p..4 * p]);
        self.fc.load_flat_params(&v[4 * p..])
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.bn.params();
        p.extend(self.fc.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.bn.params_mut();
        p.extend(self.fc.params_mut());
        p
    }
}
