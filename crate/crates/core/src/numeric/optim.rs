use super::{NumericError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            gradient: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.gradient.len() != grad.len() {
            return Err(NumericError::ShapeMismatch {
                op: "accumulate_grad",
                left: p.gradient.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        for (d, &s) in p.gradient.data_mut().iter_mut().zip(grad.data()) {
            *d += s;
        }
        Ok(())
    }

    /// Copy of all values in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NumericError::InvalidLearningRate(lr));
        }
        Ok(Self { lr, beta1, beta2, eps })
    }

    /// Updates every parameter in `store` and zeroes its gradient.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for p in &mut store.params {
            self.step_param(p);
        }
    }

    pub fn step_param<T: Scalar>(&self, p: &mut Parameter<T>) {
        p.step_count += 1;
        let t = p.step_count as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(t));
        let c2 = T::one() - T::lit(self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let values = p.value.data_mut();
        let grads = p.gradient.data_mut();
        let ms = p.adam_m.data_mut();
        let vs = p.adam_v.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            ms[i] = b1 * ms[i] + (T::one() - b1) * g;
            vs[i] = b2 * vs[i] + (T::one() - b2) * g * g;
            let m_hat = ms[i] / c1;
            let v_hat = vs[i] / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            grads[i] = T::zero();
        }
    }
}
