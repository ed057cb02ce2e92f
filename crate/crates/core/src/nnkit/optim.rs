use super::checkpoint::NamedTensor;
use super::layers::Param;
use super::tensor::Scalar;
use crate::error::bail;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are kept in parameter order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            bail!(Shape, "optimizer tracks {} tensors, got {}", self.m.len(), params.len());
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (F::lit(c.lr), F::lit(c.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.grad.len() != m.len() || p.value.len() != m.len() {
                bail!(Shape, "gradient of {} does not match its parameter", p.name);
            }
            let grad = p.grad.data().to_vec();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers named `adam.m.<param>` / `adam.v.<param>`.
    pub fn export(&self, names: &[String], shapes: &[Vec<usize>]) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, (name, shape)) in names.iter().zip(shapes).enumerate() {
            if let (Some(m), Some(v)) = (self.m.get(i), self.v.get(i)) {
                out.push(NamedTensor::from_scalars(format!("adam.m.{name}"), shape, m));
                out.push(NamedTensor::from_scalars(format!("adam.v.{name}"), shape, v));
            }
        }
        out
    }

    pub fn import(&mut self, step: u64, names: &[String], state: &[NamedTensor]) -> Result<()> {
        if state.is_empty() {
            self.step = step;
            self.m.clear();
            self.v.clear();
            return Ok(());
        }
        let find = |key: String| -> Result<Vec<F>> {
            state
                .iter()
                .find(|t| t.name == key)
                .map(|t| t.data.iter().map(|&x| F::lit(x as f64)).collect())
                .ok_or_else(|| crate::Error::Validation(format!("optimizer state lacks {key}")))
        };
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in names {
            m.push(find(format!("adam.m.{name}"))?);
            v.push(find(format!("adam.v.{name}"))?);
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut p = Param::new("w", Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap());
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w - 3)^2, minimum at 3
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![-1.0f64]).unwrap());
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let w = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * (w - 3.0);
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!((p.value.data()[0] - 3.0).abs() < 1e-3, "{}", p.value.data()[0]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Param::new("w", Tensor::from_vec(&[2], vec![0.3f32, -0.7]).unwrap());
            let mut adam = Adam::new(AdamConfig::default());
            for i in 0..50 {
                p.grad.data_mut()[0] = (i as f32).sin();
                p.grad.data_mut()[1] = (i as f32 * 0.3).cos();
                adam.step(&mut [&mut p]).unwrap();
            }
            p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
