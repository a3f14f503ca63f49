use crate::error::Result;
use crate::init::{derive_stream, Purpose};
use crate::shape;
use crate::tensor::Tensor;

use super::{LayerSpec, Mode, Model};

/// The nine-weight network
/// `f(x|w) = max(0, w6*max(0, w0*x0 + w1*x1 + w2) + w7*max(0, w3*x0 + w4*x1 + w5) + w8)`
/// assembled from the ordinary dense and ReLU layers, so its gradient comes
/// from the same backward pass the CNNs use.
///
/// Hidden unit 0 (weights w0..w2) and unit 1 (w3..w5) are the two branches.
pub struct TwoBranchReluNet {
    model: Model,
}

impl TwoBranchReluNet {
    pub fn new(w: [f64; 9]) -> Result<Self> {
        let mut rng = derive_stream(0, Purpose::Init, 0);
        let mut b = Model::builder(&[2]);
        b.then(LayerSpec::Dense { units: 2 }, &mut rng)?;
        b.then(LayerSpec::Relu, &mut rng)?;
        b.then(LayerSpec::Dense { units: 1 }, &mut rng)?;
        b.then(LayerSpec::Relu, &mut rng)?;
        let mut model = b.build()?;
        // Dense weights are [in, out]: column j holds hidden unit j.
        let hidden = [w[0], w[3], w[1], w[4]];
        model.param_mut(0).value.data_mut().copy_from_slice(&hidden);
        model.param_mut(1).value.data_mut().copy_from_slice(&[w[2], w[5]]);
        model.param_mut(2).value.data_mut().copy_from_slice(&[w[6], w[7]]);
        model.param_mut(3).value.data_mut().copy_from_slice(&[w[8]]);
        Ok(TwoBranchReluNet { model })
    }

    pub fn weights(&self) -> [f64; 9] {
        let p = |i: usize| self.model.param(i).value.data();
        let (h, hb, o, ob) = (p(0), p(1), p(2), p(3));
        [h[0], h[2], hb[0], h[1], h[3], hb[1], o[0], o[1], ob[0]]
    }

    pub fn eval(&self, x: [f64; 2]) -> Result<f64> {
        let input = Tensor::from_vec(shape![1, 2], x.to_vec())?;
        Ok(self.model.predict(&input)?.data()[0])
    }

    /// Returns `f(x|w)` and `df/dw` for all nine weights.
    pub fn value_and_grad(&mut self, x: [f64; 2]) -> Result<(f64, [f64; 9])> {
        let input = Tensor::from_vec(shape![1, 2], x.to_vec())?;
        self.model.zero_grads();
        let cache = self.model.forward(&input, Mode::Train)?;
        let f = cache.logits().data()[0];
        self.model.backward_from(&cache, Tensor::full(shape![1, 1], 1.0))?;
        let g = |i: usize| self.model.param(i).grad.data();
        let (h, hb, o, ob) = (g(0), g(1), g(2), g(3));
        Ok((f, [h[0], h[2], hb[0], h[1], h[3], hb[1], o[0], o[1], ob[0]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(w: &[f64; 9], x: [f64; 2]) -> f64 {
        let r = |v: f64| v.max(0.0);
        r(w[6] * r(w[0] * x[0] + w[1] * x[1] + w[2]) + w[7] * r(w[3] * x[0] + w[4] * x[1] + w[5]) + w[8])
    }

    #[test]
    fn matches_closed_form() {
        let w = [2.0, -3.0, -3.0, -1.0, -2.0, 3.0, -2.0, 2.0, 5.0];
        let net = TwoBranchReluNet::new(w).unwrap();
        assert_eq!(net.weights(), w);
        for x in [[-1.0, -2.0], [0.5, 0.25], [3.0, -1.0]] {
            assert_eq!(net.eval(x).unwrap(), direct(&w, x));
        }
    }

    #[test]
    fn dead_second_branch_routes_zero() {
        // first branch 1 + 0 + 0.5 > 0, second branch 1 - 4 + 1 < 0
        let w = [1.0, 0.0, 0.5, 1.0, 2.0, 1.0, 0.7, 0.9, 0.1];
        let mut net = TwoBranchReluNet::new(w).unwrap();
        let (_, g) = net.value_and_grad([1.0, -2.0]).unwrap();
        assert_eq!(&g[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(g[7], 0.0);
        assert!(g[0] != 0.0 && g[6] != 0.0);
    }
}
