//! Elementwise, reduction and shape operations.

use ndarray::{Axis, IxDyn, Zip};

use crate::tape::{sum_to, Array, Var};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    /// `local(grad_out, input)` returns the gradient w.r.t. the input.
    fn unary(self, value: Array, local: impl Fn(&Array, &Array) -> Array + 'static) -> Var<'t> {
        let x = self.value();
        self.tape
            .record(value, &[self], move |g| vec![Some(local(g, &x))])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let value = &*a + &*b;
        self.tape.record(value, &[self, other], move |g| {
            vec![Some(sum_to(g.clone(), &sa)), Some(sum_to(g.clone(), &sb))]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let value = &*a - &*b;
        self.tape.record(value, &[self, other], move |g| {
            vec![Some(sum_to(g.clone(), &sa)), Some(sum_to(-g, &sb))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = &*a * &*b;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape.record(value, &[self, other], move |g| {
            let ga = need_a.then(|| sum_to(g * &*b, a.shape()));
            let gb = need_b.then(|| sum_to(g * &*a, b.shape()));
            vec![ga, gb]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = &*a / &*b;
        self.tape.record(value, &[self, other], move |g| {
            let ga = sum_to(g / &*b, a.shape());
            let gb = sum_to(-(g * &*a) / (&*b * &*b), b.shape());
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = &*self.value() * c;
        self.tape.record(value, &[self], move |g| vec![Some(g * c)])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = &*self.value() + c;
        self.tape.record(value, &[self], |g| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'t> {
        let value = self.value().mapv(|v| v * v);
        self.unary(value, |g, x| g * &x.mapv(|v| 2.0 * v))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().mapv(f64::exp);
        self.unary(value, |g, x| g * &x.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        let value = self.value().mapv(f64::ln);
        self.unary(value, |g, x| g / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.value().mapv(f64::sqrt);
        self.unary(value, |g, x| g / &x.mapv(|v| 2.0 * v.sqrt()))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().mapv(sigmoid);
        self.unary(value, |g, x| {
            g * &x.mapv(|v| {
                let s = sigmoid(v);
                s * (1.0 - s)
            })
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.value().mapv(f64::tanh);
        self.unary(value, |g, x| g * &x.mapv(|v| 1.0 - v.tanh().powi(2)))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let value = self.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(value, move |g, x| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &v| {
                if v <= 0.0 {
                    *o *= slope
                }
            });
            out
        })
    }

    pub fn softplus(self) -> Var<'t> {
        let value = self.value().mapv(softplus_scalar);
        self.unary(value, |g, x| g * &x.mapv(sigmoid))
    }

    /// Forward identity, zero gradient.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant_shared(self.value())
    }

    /// Forward value `replacement`, backward identity onto `self`. This is the
    /// straight-through estimator for a non-differentiable substitution.
    pub fn straight_through(self, replacement: Array) -> Var<'t> {
        assert_eq!(
            self.shape(),
            replacement.shape(),
            "straight_through: shape mismatch"
        );
        self.tape
            .record(replacement, &[self], |g| vec![Some(g.clone())])
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.raw_dim();
        let value = Array::from_elem(IxDyn(&[]), x.sum());
        self.tape.record(value, &[self], move |g| {
            let gv = *g.iter().next().unwrap();
            vec![Some(Array::from_elem(shape.clone(), gv))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis_keep(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = x.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.tape.record(value, &[self], move |g| {
            vec![Some(
                g.broadcast(IxDyn(&shape))
                    .expect("sum_axis broadcast")
                    .to_owned(),
            )]
        })
    }

    pub fn mean_axis_keep(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.record(value, &[self], move |g| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape backward"),
            )]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let value = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record(value, &[self], move |g| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    /// Explicit broadcast to a larger shape.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = x
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible shape")
            .to_owned();
        self.tape
            .record(value, &[self], move |g| vec![Some(sum_to(g.clone(), &old))])
    }
}
