//! Adam and Euclidean projection onto the probability simplex.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor2<T>>,
    v: Vec<Tensor2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Tensor2<T>> = shapes.into_iter().map(|(r, c)| Tensor2::zeros(r, c)).collect();
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step as usize
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2<T>], grads: &[Tensor2<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adam",
                format!("{} slots, {} params, {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        let one = T::one();
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(Error::dim(
                    "adam",
                    format!("slot {k}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Closest point of `{w : w_i ≥ 0, Σ w_i = 1}` to `v` in Euclidean distance.
pub fn project_simplex<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Contract("projection of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Training("non-finite ensemble weight".into()));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumulative = T::zero();
    let mut theta = T::zero();
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - T::one()) / T::from_usize_lossy(j + 1);
        if uj - t > T::zero() {
            theta = t;
        }
    }
    Ok(v.iter().map(|&x| (x - theta).max(T::zero())).collect())
}

/// Whether `w` lies on the simplex up to `tol`.
pub fn on_simplex<T: Scalar>(w: &[T], tol: T) -> bool {
    !w.is_empty()
        && w.iter().all(|&x| x >= T::zero() && x.is_finite())
        && (w.iter().copied().sum::<T>() - T::one()).abs() <= tol
}
