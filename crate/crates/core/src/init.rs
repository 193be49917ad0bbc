use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Tensor of i.i.d. `N(0, std^2)` draws.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    t
}
