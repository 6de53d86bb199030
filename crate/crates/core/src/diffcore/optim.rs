use super::params::ParamTree;
use super::TensorError;

pub trait Optimizer {
    /// Apply one update in place. `grads` must share the structure of `params`.
    fn step(&mut self, params: &mut ParamTree, grads: &ParamTree) -> Result<(), TensorError>;
}

/// Plain gradient descent with an L2 penalty folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamTree, grads: &ParamTree) -> Result<(), TensorError> {
        if self.weight_decay != 0.0 {
            let decay = params.scaled(self.weight_decay);
            params.axpy(-self.lr, &decay)?;
        }
        params.axpy(-self.lr, grads)
    }
}

/// Adam with coupled L2 penalty (decay added to the gradient).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Option<ParamTree>,
    v: Option<ParamTree>,
}

/// Moment estimates of an [`Adam`] optimizer, for checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamTree,
    pub v: ParamTree,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: None, v: None }
    }

    /// `None` before the first step.
    pub fn state(&self) -> Option<AdamState> {
        Some(AdamState { t: self.t, m: self.m.clone()?, v: self.v.clone()? })
    }

    pub fn restore(&mut self, state: AdamState) {
        self.t = state.t;
        self.m = Some(state.m);
        self.v = Some(state.v);
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamTree, grads: &ParamTree) -> Result<(), TensorError> {
        let mut g = grads.clone();
        if self.weight_decay != 0.0 {
            g.axpy(self.weight_decay, params)?;
        }
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let gl = g.get(&name).ok_or_else(|| TensorError::MissingLeaf(name.clone()))?;
            let ml = m.get_mut(&name).ok_or_else(|| TensorError::MissingLeaf(name.clone()))?;
            let vl = v.get_mut(&name).ok_or_else(|| TensorError::MissingLeaf(name.clone()))?;
            let pl = params.get_mut(&name).expect("leaf");
            if gl.shape() != pl.shape() {
                return Err(TensorError::Structure(format!("gradient leaf {name} has shape {:?}", gl.shape())));
            }
            for (((p, &gi), mi), vi) in
                pl.data_mut().iter_mut().zip(gl.data()).zip(ml.data_mut()).zip(vl.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
