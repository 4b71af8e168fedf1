//! Adam with lazy (sparse) moments for hash-table rows.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderGradBuffer;
use crate::field::{Field, FieldGrads};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-step scalars shared by every parameter.
#[derive(Clone, Copy, Debug)]
pub struct AdamStep<R> {
    pub lr: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    pub bias1: R,
    pub bias2: R,
}

impl<R: Real> AdamStep<R> {
    pub fn new(cfg: &AdamConfig, lr: f64, step: u64) -> Self {
        let t = step as i32;
        AdamStep {
            lr: R::of(lr),
            beta1: R::of(cfg.beta1),
            beta2: R::of(cfg.beta2),
            eps: R::of(cfg.eps),
            bias1: R::of(1.0 - cfg.beta1.powi(t)),
            bias2: R::of(1.0 - cfg.beta2.powi(t)),
        }
    }
}

/// Element-wise Adam update of `params` given `grads`.
pub fn adam_update<R: Real>(params: &mut [R], grads: &[R], m: &mut [R], v: &mut [R], s: &AdamStep<R>) {
    let one = R::one();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = s.beta1 * *m + (one - s.beta1) * g;
        *v = s.beta2 * *v + (one - s.beta2) * g * g;
        let m_hat = *m / s.bias1;
        let v_hat = *v / s.bias2;
        *p = *p - s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
}

/// How hash-table rows without a gradient this step are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableUpdate {
    /// Only rows touched by the batch are updated; other moments stay frozen.
    #[default]
    Sparse,
    /// Every row is updated, as in textbook Adam.
    Dense,
}

/// Moment buffers for every learnable tensor of a [`Field`].
#[derive(Clone, Debug)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub table_update: TableUpdate,
    pub step: u64,
    mlp_m: Vec<Vec<R>>,
    mlp_v: Vec<Vec<R>>,
    table_m: Vec<R>,
    table_v: Vec<R>,
}

impl<R: Real> AdamState<R> {
    pub fn new(field: &Field<R>, config: AdamConfig, table_update: TableUpdate) -> Self {
        let mlp_m: Vec<Vec<R>> = field.mlp.slices().iter().map(|s| vec![R::zero(); s.len()]).collect();
        let n = field.encoding.tables.len();
        AdamState {
            config,
            table_update,
            step: 0,
            mlp_v: mlp_m.clone(),
            mlp_m,
            table_m: vec![R::zero(); n],
            table_v: vec![R::zero(); n],
        }
    }

    pub fn moments_finite(&self) -> bool {
        let all = |v: &[R]| v.iter().all(|x| x.is_finite());
        self.mlp_m.iter().chain(&self.mlp_v).all(|v| all(v)) && all(&self.table_m) && all(&self.table_v)
    }

    /// One optimizer step over the MLP and the hash tables.
    pub fn step(&mut self, field: &mut Field<R>, grads: &FieldGrads<R>, lr: f64) -> Result<()> {
        if !grads.mlp.all_finite() || grads.encoder.has_non_finite() {
            return Err(Error::NonFinite(format!("gradient at optimizer step {}", self.step + 1)));
        }
        let mlp_grads = grads.mlp.slices();
        if mlp_grads.len() != self.mlp_m.len() || field.encoding.tables.len() != self.table_m.len() {
            return Err(Error::Shape("optimizer state does not match the field".into()));
        }
        self.step += 1;
        let s = AdamStep::<R>::new(&self.config, lr, self.step);
        for (((p, g), m), v) in field.mlp.slices_mut().into_iter().zip(mlp_grads).zip(&mut self.mlp_m).zip(&mut self.mlp_v) {
            if p.len() != g.len() {
                return Err(Error::Shape("gradient tensor shape differs from parameter".into()));
            }
            adam_update(p, g, m, v, &s);
        }
        field.mlp.touch();
        match self.table_update {
            TableUpdate::Dense => {
                adam_update(&mut field.encoding.tables, grads.encoder.dense(), &mut self.table_m, &mut self.table_v, &s)
            }
            TableUpdate::Sparse => self.sparse_tables(field, &grads.encoder, &s),
        }
        Ok(())
    }

    fn sparse_tables(&mut self, field: &mut Field<R>, buf: &EncoderGradBuffer<R>, s: &AdamStep<R>) {
        let f = field.encoding.config.feature_dim;
        for level in 0..field.encoding.config.n_levels {
            for &row in buf.touched(level) {
                let off = field.encoding.row_offset(level, row as usize);
                let r = off..off + f;
                adam_update(
                    &mut field.encoding.tables[r.clone()],
                    buf.row(level, row as usize),
                    &mut self.table_m[r.clone()],
                    &mut self.table_v[r],
                    s,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let s = AdamStep::new(&AdamConfig::default(), 2e-4, 1);
        adam_update(&mut p, &[1.0], &mut m, &mut v, &s);
        assert!((p[0] + 2e-4).abs() < 1e-6 * 2e-4);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameter() {
        let mut p = [0.5f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let s = AdamStep::new(&AdamConfig::default(), 1e-3, 1);
        adam_update(&mut p, &[0.0], &mut m, &mut v, &s);
        assert_eq!(p[0], 0.5);
    }
}
