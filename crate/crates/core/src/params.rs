//! Named parameter groups.
//!
//! Every group is generic over its leaf type: `Group<Tensor>` holds values,
//! `Group<Var>` is the same group bound onto a [`Tape`](crate::numerics::Tape)
//! for one forward pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Tape, Tensor, Var};

/// Declares a flat parameter group with `map`, `for_each` and `for_each_mut`.
macro_rules! param_group {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::numerics::Tensor> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field),)*
                }
            }

            pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }

            pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }

            pub fn leaves(&self) -> Vec<&T> {
                vec![$(&self.$field),*]
            }

            pub fn leaves_mut(&mut self) -> Vec<&mut T> {
                vec![$(&mut self.$field),*]
            }
        }

        impl $crate::params::ParamSet for $name<$crate::numerics::Tensor> {
            fn visit(&self, f: &mut dyn FnMut(&str, &$crate::numerics::Tensor)) {
                self.for_each("", &mut |n: &str, t: &$crate::numerics::Tensor| f(n, t));
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut $crate::numerics::Tensor)) {
                self.for_each_mut("", &mut |n: &str, t: &mut $crate::numerics::Tensor| f(n, t));
            }
        }
    };
}
pub(crate) use param_group;

/// Uniform access to the named tensors of a value group, in a fixed order.
pub trait ParamSet: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gaussian init with standard deviation `1/sqrt(fan_in)`.
pub(crate) fn init_linear(rng: &mut (impl Rng + ?Sized), fan_in: usize, fan_out: usize) -> Tensor {
    init_normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

pub(crate) fn init_normal(rng: &mut (impl Rng + ?Sized), rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Binds a value group onto a tape as trainable leaves.
pub fn bind_param(tape: &Tape) -> impl FnMut(&str, &Tensor) -> Var + '_ {
    move |_, t| tape.param(t.clone())
}

/// Binds a value group onto a tape as constants (inference only).
pub fn bind_const(tape: &Tape) -> impl FnMut(&str, &Tensor) -> Var + '_ {
    move |_, t| tape.constant(t.clone())
}
