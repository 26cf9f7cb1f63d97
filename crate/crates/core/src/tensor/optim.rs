//! Plain SGD and Adam, operating in place on flat parameter buffers.

/// Which update rule to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimConfig { kind: OptimKind::Sgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimConfig { kind: OptimKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state. Adam keeps first/second moment buffers per parameter
/// slot, allocated lazily on the first step and keyed by position, so the
/// same parameter list must be passed in the same order every step.
pub struct Optimizer {
    pub cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Apply one update. `pairs` holds (parameter buffer, gradient) slots;
    /// lengths must match within each slot and the slot list must be stable
    /// across steps.
    pub fn step(&mut self, pairs: &mut [(&mut [f64], &[f64])]) {
        match self.cfg.kind {
            OptimKind::Sgd => {
                for (p, g) in pairs.iter_mut() {
                    assert_eq!(p.len(), g.len(), "optimizer: param/grad length mismatch");
                    for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= self.cfg.lr * gv;
                    }
                }
            }
            OptimKind::Adam => {
                if self.m.is_empty() {
                    self.m = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
                    self.v = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
                }
                assert_eq!(self.m.len(), pairs.len(), "optimizer: slot count changed");
                self.t += 1;
                let b1 = self.cfg.beta1;
                let b2 = self.cfg.beta2;
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for (slot, (p, g)) in pairs.iter_mut().enumerate() {
                    assert_eq!(p.len(), g.len(), "optimizer: param/grad length mismatch");
                    let m = &mut self.m[slot];
                    let v = &mut self.v[slot];
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                    }
                }
            }
        }
    }
}
