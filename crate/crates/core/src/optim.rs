use crate::params::ParamStore;

/// Adam with bias correction. Parameters whose gradient slot is empty are
/// skipped entirely, including their step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Moments>,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let st = &mut self.state[id.index()];
            if st.m.is_empty() {
                st.m = vec![0.0; grad.len()];
                st.v = vec![0.0; grad.len()];
            }
            st.step += 1;
            let c1 = 1.0 - self.beta1.powi(st.step);
            let c2 = 1.0 - self.beta2.powi(st.step);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn matches_hand_stepped_quadratic() {
        // f(a, b) = (a - 3)^2 + 10 (b + 1)^2
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![0.5, 2.0]));
        let mut adam = Adam::new(0.1);

        let (mut p, mut m, mut v) = ([0.5f64, 2.0], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=10 {
            let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }

            let cur = store.get(id).data().to_vec();
            let grad = vec![2.0 * (cur[0] - 3.0), 20.0 * (cur[1] + 1.0)];
            store.get_mut(id).accumulate_grad(&grad);
            adam.step(&mut store);
            for i in 0..2 {
                assert!((store.get(id).data()[i] - p[i]).abs() < 1e-12, "step {t}");
            }
        }
    }

    #[test]
    fn skips_parameters_without_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0]));
        let b = store.add("b", Tensor::from_vec(vec![1.0]));
        store.get_mut(a).accumulate_grad(&[1.0]);
        let mut adam = Adam::new(0.5);
        adam.step(&mut store);
        assert!(store.get(a).data()[0] < 1.0);
        assert_eq!(store.get(b).data()[0], 1.0);
        assert!(store.get(a).grad().is_none());
    }
}
