//! Adaptation objectives and their gradients with respect to model
//! parameters.
//!
//! Every objective is a pure function of the forward-pass logits, so the
//! analytic gradients can be checked against central finite differences by
//! re-evaluating [`eval_loss`] under parameter perturbations.

use ndarray::{Array1, Array2};

use crate::model::{AdaptiveModel, GradMap, StatsMode};
use crate::num::{entropy_row, softmax_rows, PROB_FLOOR};

use super::MethodError;

/// Shannon entropy of a probability vector, with normalization check.
pub fn entropy(p: &[f64]) -> Result<f64, MethodError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&q| q < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(MethodError::NotNormalized(sum));
    }
    Ok(entropy_row(p))
}

/// A differentiable function of the class logits (and optionally the
/// auxiliary-head logits).
pub trait Objective {
    fn value(&self, class_logits: &Array2<f64>, aux_logits: Option<&Array2<f64>>) -> f64;

    /// Gradients w.r.t. class and aux logits.
    fn dlogits(
        &self,
        class_logits: &Array2<f64>,
        aux_logits: Option<&Array2<f64>>,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>);

    /// Whether the auxiliary head participates.
    fn needs_aux(&self) -> bool {
        false
    }
}

/// Evaluate an objective at the current parameters (finite-difference probe).
pub fn eval_loss(
    model: &AdaptiveModel,
    inputs: &Array2<f64>,
    mode: StatsMode,
    obj: &dyn Objective,
) -> f64 {
    let (logits, cache) = model.forward_cached(inputs, mode);
    let aux = obj.needs_aux().then(|| model.aux_logits(&cache)).flatten();
    obj.value(&logits, aux.as_ref())
}

/// Loss value and parameter gradients via the hand-written backward pass.
pub fn loss_and_grads(
    model: &AdaptiveModel,
    inputs: &Array2<f64>,
    mode: StatsMode,
    obj: &dyn Objective,
) -> (f64, GradMap) {
    let (logits, cache) = model.forward_cached(inputs, mode);
    let aux = obj.needs_aux().then(|| model.aux_logits(&cache)).flatten();
    let loss = obj.value(&logits, aux.as_ref());
    let (d_class, d_aux) = obj.dlogits(&logits, aux.as_ref());
    let grads = model.backward(&cache, d_class.as_ref(), d_aux.as_ref());
    (loss, grads)
}

/// `dH/dz` for one sample: `-p ∘ (ln p + H)`.
fn entropy_dlogits_row(p: &[f64], out: &mut [f64], scale: f64) {
    let h = entropy_row(p);
    for (o, &q) in out.iter_mut().zip(p) {
        *o = -q * (q.max(PROB_FLOOR).ln() + h) * scale;
    }
}

/// Mean prediction entropy, optionally restricted to a sample mask.
pub struct MeanEntropy {
    pub mask: Option<Vec<bool>>,
}

impl MeanEntropy {
    pub fn all() -> Self {
        MeanEntropy { mask: None }
    }

    fn selected(&self, b: usize) -> Vec<usize> {
        match &self.mask {
            None => (0..b).collect(),
            Some(m) => (0..b).filter(|&i| m[i]).collect(),
        }
    }
}

impl Objective for MeanEntropy {
    fn value(&self, logits: &Array2<f64>, _: Option<&Array2<f64>>) -> f64 {
        let p = softmax_rows(logits);
        let sel = self.selected(logits.nrows());
        if sel.is_empty() {
            return 0.0;
        }
        sel.iter()
            .map(|&i| entropy_row(p.row(i).as_slice().unwrap()))
            .sum::<f64>()
            / sel.len() as f64
    }

    fn dlogits(
        &self,
        logits: &Array2<f64>,
        _: Option<&Array2<f64>>,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let p = softmax_rows(logits);
        let sel = self.selected(logits.nrows());
        let mut d = Array2::zeros(logits.raw_dim());
        if !sel.is_empty() {
            let scale = 1.0 / sel.len() as f64;
            for &i in &sel {
                entropy_dlogits_row(
                    p.row(i).as_slice().unwrap(),
                    d.row_mut(i).as_slice_mut().unwrap(),
                    scale,
                );
            }
        }
        (Some(d), None)
    }
}

/// Mean cross-entropy against fixed (detached) soft targets.
pub struct CrossEntropyFixed {
    pub targets: Array2<f64>,
}

impl Objective for CrossEntropyFixed {
    fn value(&self, logits: &Array2<f64>, _: Option<&Array2<f64>>) -> f64 {
        let p = softmax_rows(logits);
        let b = logits.nrows() as f64;
        let mut loss = 0.0;
        for (pr, qr) in p.rows().into_iter().zip(self.targets.rows()) {
            for (&pi, &qi) in pr.iter().zip(qr.iter()) {
                loss -= qi * pi.max(PROB_FLOOR).ln();
            }
        }
        loss / b
    }

    fn dlogits(
        &self,
        logits: &Array2<f64>,
        _: Option<&Array2<f64>>,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let p = softmax_rows(logits);
        let b = logits.nrows() as f64;
        (Some((&p - &self.targets) / b), None)
    }
}

/// Information-maximization loss with confident pseudo-label cross-entropy:
/// `mean_i H(p_i) - H(mean_i p_i) + beta * CE over confident samples`.
pub struct InfoMaxPseudo {
    pub beta: f64,
    /// One-hot pseudo-label index per sample.
    pub pseudo: Vec<usize>,
    /// Samples whose max probability exceeded the confidence threshold.
    pub confident: Vec<bool>,
}

impl InfoMaxPseudo {
    fn marginal(p: &Array2<f64>) -> Array1<f64> {
        p.mean_axis(ndarray::Axis(0)).unwrap()
    }
}

impl Objective for InfoMaxPseudo {
    fn value(&self, logits: &Array2<f64>, _: Option<&Array2<f64>>) -> f64 {
        let p = softmax_rows(logits);
        let b = logits.nrows() as f64;
        let mean_h = crate::num::mean_entropy(&p);
        let marg = Self::marginal(&p);
        let div = entropy_row(marg.as_slice().unwrap());
        let n_conf = self.confident.iter().filter(|&&c| c).count();
        let mut ce = 0.0;
        if n_conf > 0 {
            for i in 0..logits.nrows() {
                if self.confident[i] {
                    ce -= p[[i, self.pseudo[i]]].max(PROB_FLOOR).ln();
                }
            }
            ce /= n_conf as f64;
        }
        let _ = b;
        mean_h - div + self.beta * ce
    }

    fn dlogits(
        &self,
        logits: &Array2<f64>,
        _: Option<&Array2<f64>>,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let p = softmax_rows(logits);
        let b = logits.nrows();
        let bf = b as f64;
        let marg = Self::marginal(&p);
        // w = ln(marginal) + 1; gradient of -H(marginal)
        let w: Vec<f64> = marg.iter().map(|&m| m.max(PROB_FLOOR).ln() + 1.0).collect();
        let n_conf = self.confident.iter().filter(|&&c| c).count();
        let mut d = Array2::zeros(logits.raw_dim());
        for i in 0..b {
            let pi = p.row(i);
            let prow = pi.as_slice().unwrap();
            // entropy term
            entropy_dlogits_row(prow, d.row_mut(i).as_slice_mut().unwrap(), 1.0 / bf);
            // diversity term: +(1/b) * J^T w
            let pw: f64 = prow.iter().zip(&w).map(|(&q, &ww)| q * ww).sum();
            for (c, &q) in prow.iter().enumerate() {
                d[[i, c]] += (q * w[c] - q * pw) / bf;
            }
            // confident pseudo-label cross-entropy
            if n_conf > 0 && self.confident[i] {
                let scale = self.beta / n_conf as f64;
                for (c, &q) in prow.iter().enumerate() {
                    let target = if c == self.pseudo[i] { 1.0 } else { 0.0 };
                    d[[i, c]] += scale * (q - target);
                }
            }
        }
        (Some(d), None)
    }
}

/// Entropy of the marginal prediction over the rows (augmented copies of a
/// single input).
pub struct MarginalEntropy;

impl Objective for MarginalEntropy {
    fn value(&self, logits: &Array2<f64>, _: Option<&Array2<f64>>) -> f64 {
        let p = softmax_rows(logits);
        let marg = p.mean_axis(ndarray::Axis(0)).unwrap();
        entropy_row(marg.as_slice().unwrap())
    }

    fn dlogits(
        &self,
        logits: &Array2<f64>,
        _: Option<&Array2<f64>>,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let p = softmax_rows(logits);
        let bf = logits.nrows() as f64;
        let marg = p.mean_axis(ndarray::Axis(0)).unwrap();
        let w: Vec<f64> = marg.iter().map(|&m| m.max(PROB_FLOOR).ln() + 1.0).collect();
        let mut d = Array2::zeros(logits.raw_dim());
        for i in 0..logits.nrows() {
            let prow = p.row(i);
            let prow = prow.as_slice().unwrap();
            let pw: f64 = prow.iter().zip(&w).map(|(&q, &ww)| q * ww).sum();
            for (c, &q) in prow.iter().enumerate() {
                // d H(marg) / dz = -(1/B) J^T w
                d[[i, c]] = -(q * w[c] - q * pw) / bf;
            }
        }
        (Some(d), None)
    }
}

/// Cross-entropy of the auxiliary head against hard transform labels.
pub struct AuxCrossEntropy {
    pub targets: Vec<usize>,
}

impl Objective for AuxCrossEntropy {
    fn needs_aux(&self) -> bool {
        true
    }

    fn value(&self, _: &Array2<f64>, aux: Option<&Array2<f64>>) -> f64 {
        let aux = aux.expect("aux head required");
        let p = softmax_rows(aux);
        let n = aux.nrows() as f64;
        let mut loss = 0.0;
        for (i, &t) in self.targets.iter().enumerate() {
            loss -= p[[i, t]].max(PROB_FLOOR).ln();
        }
        loss / n
    }

    fn dlogits(
        &self,
        _: &Array2<f64>,
        aux: Option<&Array2<f64>>,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let aux = aux.expect("aux head required");
        let p = softmax_rows(aux);
        let n = aux.nrows() as f64;
        let mut d = p;
        for (i, &t) in self.targets.iter().enumerate() {
            d[[i, t]] -= 1.0;
        }
        d.mapv_inplace(|v| v / n);
        (None, Some(d))
    }
}
