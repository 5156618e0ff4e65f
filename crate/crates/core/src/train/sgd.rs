use crate::nn::Params;
use crate::segment::{shape_err, SegmentError};

/// SGD with classical momentum: `v <- mu v - lr g; p <- p + v`.
#[derive(Clone, Debug)]
pub struct Sgd<P: Params> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: P,
}

impl<P: Params> Sgd<P> {
    pub fn new(params: &P, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<(), SegmentError> {
        sgd_step(params, grads, self.lr, self.momentum, &mut self.velocity)
    }
}

pub fn sgd_step<P: Params>(
    params: &mut P,
    grads: &P,
    lr: f64,
    momentum: f64,
    velocity: &mut P,
) -> Result<(), SegmentError> {
    let shapes = params.shapes();
    if grads.shapes() != shapes {
        return Err(shape_err(
            "gradient",
            format!("{shapes:?}"),
            format!("{:?}", grads.shapes()),
        ));
    }
    if velocity.shapes() != shapes {
        return Err(shape_err(
            "velocity",
            format!("{shapes:?}"),
            format!("{:?}", velocity.shapes()),
        ));
    }
    for ((p, g), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(velocity.blocks_mut())
    {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_descent_on_square() {
        let mut x = vec![1.0];
        let mut v = vec![0.0];
        for expected in [0.8, 0.64] {
            let g = vec![2.0 * x[0]];
            sgd_step(&mut x, &g, 0.1, 0.0, &mut v).unwrap();
            assert!((x[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut x = vec![1.0, 2.0];
        let mut v = vec![0.5, -1.0];
        sgd_step(&mut x, &vec![0.0, 0.0], 0.1, 0.9, &mut v).unwrap();
        assert_eq!(v, vec![0.45, -0.9]);
        assert_eq!(x, vec![1.45, 1.1]);
        let mut x = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut x, &vec![0.0, 0.0], 0.1, 0.9, &mut v).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let mut x = vec![1.0];
        let mut v = vec![0.0];
        assert!(sgd_step(&mut x, &vec![1.0, 2.0], 0.1, 0.0, &mut v).is_err());
    }
}
