//! Central finite-difference checks against the tape's analytic gradients.

use super::{OpKind, Params, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and central differences.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    GradCheck::new(eps).input(f, x)
}

/// Finite-difference checker, optionally with a sign-flip fault injected into the tape.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub flip: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self::new(DEFAULT_EPS)
    }
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self { eps, flip: None }
    }

    pub fn with_flip(mut self, kind: OpKind) -> Self {
        self.flip = Some(kind);
        self
    }

    fn tape(&self) -> Tape<f64> {
        let mut t = Tape::new();
        if let Some(k) = self.flip {
            t.inject_sign_flip(k);
        }
        t
    }

    pub fn input<G>(&self, f: G, x: &Tensor<f64>) -> Result<f64>
    where
        G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let mut tape = self.tape();
        let xv = tape.leaf(x.clone());
        let loss = f(&mut tape, xv)?;
        let analytic = tape.backward(loss)?.get_or_zeros(&tape, xv);

        let eval = |probe: Tensor<f64>| -> Result<f64> {
            let mut t = Tape::new();
            let v = t.leaf(probe);
            let l = f(&mut t, v)?;
            Ok(t.value(l).item())
        };
        let mut worst = 0.0f64;
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += self.eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= self.eps;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * self.eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        Ok(worst)
    }

    /// Checks every parameter group; returns `(group name, max relative error)` in declaration order.
    pub fn params<G>(&self, f: G, params: &Params<f64>) -> Result<Vec<(String, f64)>>
    where
        G: Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>,
    {
        let mut tape = self.tape();
        let loss = f(&mut tape, params)?;
        let mut analytic = params.clone();
        analytic.zero_grad();
        tape.backward_into(loss, &mut analytic)?;

        let eval = |p: &Params<f64>| -> Result<f64> {
            let mut t = Tape::new();
            let l = f(&mut t, p)?;
            Ok(t.value(l).item())
        };
        let mut probe = params.clone();
        let mut report = Vec::with_capacity(params.len());
        for id in params.ids() {
            let mut worst = 0.0f64;
            for i in 0..params.value(id).numel() {
                let orig = params.value(id).data()[i];
                probe.value_mut(id).data_mut()[i] = orig + self.eps;
                let up = eval(&probe)?;
                probe.value_mut(id).data_mut()[i] = orig - self.eps;
                let down = eval(&probe)?;
                probe.value_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(relative_error(analytic.grad(id).data()[i], numeric));
            }
            report.push((params.name(id).to_string(), worst));
        }
        Ok(report)
    }
}
