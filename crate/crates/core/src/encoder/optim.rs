use super::network::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    buffers: EncoderParams,
    pub epoch: u64,
    base_lr: f64,
    warmup_epochs: u64,
    total_epochs: u64,
    weight_decay: f64,
    sgd_momentum: f64,
}

impl OptimState {
    pub fn new(
        params: &EncoderParams,
        base_lr: f64,
        warmup_epochs: u64,
        total_epochs: u64,
        weight_decay: f64,
        sgd_momentum: f64,
    ) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr must be >= 0, got {base_lr}")));
        }
        if total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {weight_decay}")));
        }
        if !(0.0..1.0).contains(&sgd_momentum) {
            return Err(Error::Config(format!("sgd_momentum must lie in [0, 1), got {sgd_momentum}")));
        }
        Ok(Self {
            buffers: params.zeros_like(),
            epoch: 0,
            base_lr,
            warmup_epochs,
            total_epochs,
            weight_decay,
            sgd_momentum,
        })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn warmup_epochs(&self) -> u64 {
        self.warmup_epochs
    }

    pub fn total_epochs(&self) -> u64 {
        self.total_epochs
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn sgd_momentum(&self) -> f64 {
        self.sgd_momentum
    }

    pub fn buffers(&self) -> &EncoderParams {
        &self.buffers
    }
}

/// Linear warmup followed by cosine annealing to zero.
pub fn lr_at(state: &OptimState, epoch: u64) -> Result<f64> {
    if epoch >= state.total_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside 0..{}",
            state.total_epochs
        )));
    }
    let base = state.base_lr;
    let w = state.warmup_epochs;
    if epoch < w {
        return Ok(base * (epoch + 1) as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (state.total_epochs - w) as f64;
    Ok(0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One SGD step with heavy-ball momentum and L2 weight decay at rate `lr`.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.buffers) {
        return Err(Error::Shape("parameter, gradient and buffer shapes differ".into()));
    }
    let (wd, mu) = (state.weight_decay, state.sgd_momentum);
    for ((p, g), b) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.buffers.tensors_mut())
    {
        for ((pv, gv), bv) in p.iter_mut().zip(g).zip(b.iter_mut()) {
            let step = gv + wd * *pv;
            *bv = mu * *bv + step;
            *pv -= lr * *bv;
        }
    }
    Ok(())
}

/// Exponential moving average `key ← m·key + (1−m)·f`.
pub fn momentum_update(f: &EncoderParams, key: &mut EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidInput(format!("momentum must lie in [0, 1], got {m}")));
    }
    if !f.same_shape(key) {
        return Err(Error::Shape("query and key encoders differ in shape".into()));
    }
    for (k, q) in key.tensors_mut().into_iter().zip(f.tensors()) {
        for (kv, qv) in k.iter_mut().zip(q) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::network::Linear;
    use crate::linalg::Matrix;

    fn scalar(w: f64) -> EncoderParams {
        EncoderParams::new(
            vec![],
            vec![Linear { weight: Matrix::from_rows(&[vec![w]]).unwrap(), bias: vec![0.0] }],
        )
        .unwrap()
    }

    fn state(p: &EncoderParams, lr: f64, warmup: u64, total: u64) -> OptimState {
        OptimState::new(p, lr, warmup, total, 0.0, 0.0).unwrap()
    }

    #[test]
    fn warmup_and_cosine() {
        let p = scalar(1.0);
        let s = state(&p, 0.5, 10, 2000);
        assert_eq!(lr_at(&s, 4).unwrap(), 0.25);
        assert_eq!(lr_at(&s, 10).unwrap(), 0.5);
        let last = lr_at(&s, 1999).unwrap();
        let want = 0.5 * 0.5 * (1.0 + (std::f64::consts::PI * 1989.0 / 1990.0).cos());
        assert!((last - want).abs() < 1e-20);
        assert!(last > 0.0 && last < 1e-6);
        assert!(lr_at(&s, 2000).is_err());
        let no_warm = state(&p, 0.2, 0, 5);
        assert_eq!(lr_at(&no_warm, 0).unwrap(), 0.2);
    }

    #[test]
    fn lr_is_monotone_after_warmup() {
        let p = scalar(1.0);
        let s = state(&p, 0.5, 3, 40);
        let lrs: Vec<f64> = (3..40).map(|e| lr_at(&s, e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_step() {
        let mut p = scalar(1.0);
        let mut s = state(&p, 0.1, 0, 1);
        let grad = scalar(2.0 * 1.0);
        sgd_step(&mut p, &grad, &mut s, 0.1).unwrap();
        assert!((p.head[0].weight[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = EncoderParams::init(3, &[4], &[2], 0).unwrap();
        let before = p.clone();
        let mut s = OptimState::new(&p, 0.3, 0, 10, 0.0, 0.9).unwrap();
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut s, 0.3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_and_decay() {
        let mut p = scalar(1.0);
        let mut s = OptimState::new(&p, 0.1, 0, 10, 0.5, 0.9).unwrap();
        let g = scalar(1.0);
        sgd_step(&mut p, &g, &mut s, 0.1).unwrap();
        // g' = 1 + 0.5·1 = 1.5, buf = 1.5, w = 1 − 0.15.
        assert!((p.head[0].weight[(0, 0)] - 0.85).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut s, 0.1).unwrap();
        // g' = 1 + 0.425, buf = 0.9·1.5 + 1.425 = 2.775.
        assert!((p.head[0].weight[(0, 0)] - (0.85 - 0.2775)).abs() < 1e-12);
    }

    #[test]
    fn ema_update() {
        let f = scalar(2.0);
        let mut k = scalar(0.0);
        momentum_update(&f, &mut k, 0.5).unwrap();
        assert_eq!(k.head[0].weight[(0, 0)], 1.0);
        momentum_update(&f, &mut k, 1.0).unwrap();
        assert_eq!(k.head[0].weight[(0, 0)], 1.0);
        momentum_update(&f, &mut k, 0.0).unwrap();
        assert_eq!(k, f);
        assert!(momentum_update(&f, &mut k, 1.5).is_err());
        let mut other = EncoderParams::init(2, &[], &[2], 0).unwrap();
        assert!(momentum_update(&f, &mut other, 0.5).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let p = scalar(1.0);
        assert!(OptimState::new(&p, -1.0, 0, 10, 0.0, 0.0).is_err());
        assert!(OptimState::new(&p, 0.1, 0, 0, 0.0, 0.0).is_err());
        assert!(OptimState::new(&p, 0.1, 0, 10, -1e-4, 0.0).is_err());
        assert!(OptimState::new(&p, 0.1, 0, 10, 0.0, 1.0).is_err());
    }
}
