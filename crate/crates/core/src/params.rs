//! Parameter trees.
//!
//! Model structs are generic over their leaf type: `Tensor<T>` for stored
//! weights, [`Var`] once bound onto a tape. [`ParamTree`] gives a stable,
//! named traversal order that binding, gradient collection, the optimizer
//! and checkpoints all share.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub trait ParamTree<P> {
    type Mapped<Q>: ParamTree<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P, N: ParamTree<P>> ParamTree<P> for Vec<N> {
    type Mapped<Q> = Vec<N::Mapped<Q>>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        for (i, n) in self.iter().enumerate() {
            n.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, n) in self.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q> {
        self.iter().map(|n| n.map(f)).collect()
    }
}

/// Implements [`ParamTree`] for a struct generic over its leaf type.
///
/// Fields are listed as `leaf name` (a bare `P`), `node name` (a nested
/// tree) or `copy name` (plain data carried through `map`).
#[macro_export]
macro_rules! param_tree {
    ($ty:ident { $($kind:ident $field:ident),* $(,)? }) => {
        impl<P> $crate::params::ParamTree<P> for $ty<P> {
            type Mapped<Q> = $ty<Q>;

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
                $( $crate::param_tree!(@visit $kind self, prefix, f, $field); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $( $crate::param_tree!(@visit_mut $kind self, prefix, f, $field); )*
            }

            fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $ty<Q> {
                $ty { $( $field: $crate::param_tree!(@map $kind self, f, $field), )* }
            }
        }
    };
    (@visit leaf $s:ident, $p:ident, $f:ident, $field:ident) => {
        $f(&$crate::params::join($p, stringify!($field)), &$s.$field)
    };
    (@visit node $s:ident, $p:ident, $f:ident, $field:ident) => {
        $crate::params::ParamTree::visit(&$s.$field, &$crate::params::join($p, stringify!($field)), $f)
    };
    (@visit copy $s:ident, $p:ident, $f:ident, $field:ident) => {};
    (@visit_mut leaf $s:ident, $p:ident, $f:ident, $field:ident) => {
        $f(&$crate::params::join($p, stringify!($field)), &mut $s.$field)
    };
    (@visit_mut node $s:ident, $p:ident, $f:ident, $field:ident) => {
        $crate::params::ParamTree::visit_mut(&mut $s.$field, &$crate::params::join($p, stringify!($field)), $f)
    };
    (@visit_mut copy $s:ident, $p:ident, $f:ident, $field:ident) => {};
    (@map leaf $s:ident, $f:ident, $field:ident) => { $f(&$s.$field) };
    (@map node $s:ident, $f:ident, $field:ident) => { $crate::params::ParamTree::map(&$s.$field, $f) };
    (@map copy $s:ident, $f:ident, $field:ident) => { $s.$field.clone() };
}

/// Registers every tensor of `tree` as a trainable leaf on `tape`.
pub fn bind<T: Real, M: ParamTree<Tensor<T>>>(tree: &M, tape: &mut Tape<T>) -> M::Mapped<Var> {
    tree.map(&mut |t| tape.leaf(t.clone()))
}

/// Registers every tensor of `tree` as a constant (no gradient).
pub fn bind_frozen<T: Real, M: ParamTree<Tensor<T>>>(tree: &M, tape: &mut Tape<T>) -> M::Mapped<Var> {
    tree.map(&mut |t| tape.constant(t.clone()))
}

/// Gradients of a bound tree in traversal order.
pub fn grads<T: Real, B: ParamTree<Var>>(bound: &B, tape: &Tape<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    bound.visit("", &mut |_, v| out.push(tape.grad(*v)));
    out
}

pub fn named<T: Real, M: ParamTree<Tensor<T>>>(tree: &M) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, t| out.push((name.to_string(), t)));
    out
}

pub fn count<T: Real, M: ParamTree<Tensor<T>>>(tree: &M) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.numel());
    n
}

/// Converts every leaf to another scalar type.
pub fn cast<T: Real, U: Real, M: ParamTree<Tensor<T>>>(tree: &M) -> M::Mapped<Tensor<U>> {
    tree.map(&mut |t| t.cast::<U>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Pair<P> {
        a: P,
        b: Vec<Inner<P>>,
        tag: u8,
    }

    #[derive(Debug, Clone, PartialEq)]
    struct Inner<P> {
        w: P,
    }

    param_tree!(Pair { leaf a, node b, copy tag });
    param_tree!(Inner { leaf w });

    #[test]
    fn traversal_names_and_map() {
        let p = Pair {
            a: 1,
            b: vec![Inner { w: 2 }, Inner { w: 3 }],
            tag: 9,
        };
        let mut names = Vec::new();
        p.visit("m", &mut |n, v| names.push((n.to_string(), *v)));
        assert_eq!(
            names,
            vec![
                ("m.a".to_string(), 1),
                ("m.b.0.w".to_string(), 2),
                ("m.b.1.w".to_string(), 3)
            ]
        );
        let doubled = p.map(&mut |v| v * 2);
        assert_eq!(doubled.b[1].w, 6);
        assert_eq!(doubled.tag, 9);
    }
}
