//! Adaptive-moment optimizer with bias correction.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every `(name, param)` with a matching gradient.
    pub fn step(&mut self, params: &mut [(String, ArrayD<F>)], grads: &BTreeMap<String, ArrayD<F>>, lr: f64) {
        self.step_count += 1;
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let lr_t = F::of_f64(lr * bc2.sqrt() / bc1);
        let eps = F::of_f64(self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name.as_str()) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            for ((pe, ge), (me, ve)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = b1 * *me + (one - b1) * *ge;
                *ve = b2 * *ve + (one - b2) * *ge * *ge;
                *pe = *pe - lr_t * *me / (ve.sqrt() + eps);
            }
        }
    }

    /// Serializes optimizer state as named arrays for trainer checkpoints.
    pub fn export_state(&self) -> BTreeMap<String, ArrayD<F>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.m {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        out
    }

    pub fn import_state(&mut self, arrays: &BTreeMap<String, ArrayD<F>>, step_count: u64) {
        self.step_count = step_count;
        self.m.clear();
        self.v.clear();
        for (k, v) in arrays {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), v.clone());
            }
        }
    }
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Multiplies the rate by `factor` every `every_epochs` epochs.
    StepDecay { initial: f64, factor: f64, every_epochs: usize },
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay {
                initial,
                factor,
                every_epochs,
            } => initial * factor.powi((epoch / every_epochs.max(1)) as i32),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut adam = Adam::<f32>::new();
        let p = ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.5f32);
        let orig = p.clone();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[3]), 0.7f32));
        let mut slots = vec![("p".to_string(), p)];
        adam.step(&mut slots, &grads, 0.0);
        assert_eq!(slots[0].1, orig);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::<f64>::new();
        let mut slots = vec![("p".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 3.0f64))];
        for _ in 0..500 {
            let g = slots[0].1.mapv(|x| 2.0 * x);
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), g);
            adam.step(&mut slots, &grads, 0.05);
        }
        assert!(slots[0].1[[0]].abs() < 0.05, "did not converge: {}", slots[0].1[[0]]);
    }

    #[test]
    fn state_round_trip_preserves_updates() {
        let mut a = Adam::<f64>::new();
        let mut b = Adam::<f64>::new();
        let mut pa = vec![("p".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0f64))];
        let mut pb = pa.clone();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[2]), 0.3f64));
        a.step(&mut pa, &grads, 0.01);
        b.step(&mut pb, &grads, 0.01);
        // round-trip b through export/import
        let state = b.export_state();
        let mut b2 = Adam::<f64>::new();
        b2.import_state(&state, b.step_count);
        a.step(&mut pa, &grads, 0.01);
        b2.step(&mut pb, &grads, 0.01);
        assert_eq!(pa[0].1, pb[0].1);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::StepDecay {
            initial: 0.1,
            factor: 0.001,
            every_epochs: 100,
        };
        assert_eq!(s.at_epoch(0), 0.1);
        assert_eq!(s.at_epoch(99), 0.1);
        assert!((s.at_epoch(100) - 1e-4).abs() < 1e-12);
    }
}
