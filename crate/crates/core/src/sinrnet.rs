//! Permutation-equivariant layers over `K × K` channel-feature cubes.
//!
//! Every position `(k, j)` of a cube relates to every other position
//! `(k', j')` in one of four ways (see [`Category`]). A layer applies one
//! affine map plus ReLU per category and averages the results over the
//! positions of that category. The four averages are stacked along the
//! feature axis. Reordering the UEs on both axes therefore reorders the
//! output the same way.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Relation of a source position `(k', j')` to a target position `(k, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    /// The position itself: the useful-signal gain when `k = j`.
    Same = 1,
    /// Same row: other streams received by UE `k`.
    SameReceiver = 2,
    /// Same column: stream `j` as received by other UEs.
    SameTransmitter = 3,
    /// Neither row nor column shared.
    Other = 4,
}

/// Category of `(kp, jp)` relative to `(k, j)` for `K = n_ues`.
///
/// Panics when an index is out of range.
pub fn category_of(n_ues: usize, k: usize, j: usize, kp: usize, jp: usize) -> Category {
    assert!(
        k < n_ues && j < n_ues && kp < n_ues && jp < n_ues,
        "category index out of range for K = {n_ues}"
    );
    match (kp == k, jp == j) {
        (true, true) => Category::Same,
        (true, false) => Category::SameReceiver,
        (false, true) => Category::SameTransmitter,
        (false, false) => Category::Other,
    }
}

/// The four source sets of every target position, materialized for one `K`.
#[derive(Clone, Debug)]
pub struct CategoryMask {
    n_ues: usize,
}

impl CategoryMask {
    pub fn new(n_ues: usize) -> Self {
        Self { n_ues }
    }

    /// Flat positions `k' · K + j'` in category `c` relative to `(k, j)`.
    pub fn set(&self, k: usize, j: usize, c: Category) -> Vec<usize> {
        let n = self.n_ues;
        (0..n * n)
            .filter(|&q| category_of(n, k, j, q / n, q % n) == c)
            .collect()
    }

    /// Expected size of each category set.
    pub fn cardinality(&self, c: Category) -> usize {
        let m = self.n_ues.saturating_sub(1);
        match c {
            Category::Same => 1,
            Category::SameReceiver | Category::SameTransmitter => m,
            Category::Other => m * m,
        }
    }
}

/// One category layer: `weight` is `[f_in, 4·w]` (block `c` feeds category
/// `c + 1`), `bias` is `[4·w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> CategoryLayer<T> {
    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Layer widths of a SINRnet. Every hidden width is a multiple of four.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SinrNetShape {
    pub input: usize,
    pub widths: Vec<usize>,
    pub output: usize,
}

/// `V` category layers followed by a per-position affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct SinrNetParams<T> {
    pub layers: Vec<CategoryLayer<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
}

impl<T: Scalar> SinrNetParams<T> {
    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: &SinrNetShape, rng: &mut R) -> Self {
        assert!(!shape.widths.is_empty(), "a SINRnet needs at least one layer");
        let mut f_in = shape.input;
        let mut layers = Vec::with_capacity(shape.widths.len());
        for &w in &shape.widths {
            assert!(w > 0 && w % 4 == 0, "layer width {w} must be a positive multiple of 4");
            layers.push(CategoryLayer {
                weight: uniform_init(rng, f_in, &[f_in, w]),
                bias: Tensor::zeros(&[w]),
            });
            f_in = w;
        }
        Self {
            layers,
            head_weight: uniform_init(rng, f_in, &[f_in, shape.output]),
            head_bias: Tensor::zeros(&[shape.output]),
        }
    }

    pub fn shape(&self) -> SinrNetShape {
        SinrNetShape {
            input: self.layers[0].input_dim(),
            widths: self.layers.iter().map(|l| l.output_dim()).collect(),
            output: self.head_weight.shape()[1],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head_weight.shape()[1]
    }

    /// Weight and bias tensors in traversal order: layers, then head.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        v.extend([&self.head_weight, &self.head_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.extend([&mut self.head_weight, &mut self.head_bias]);
        v
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> SinrNetVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        SinrNetVars {
            layers: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
            head: (put(&self.head_weight), put(&self.head_bias)),
        }
    }
}

/// Tape handles of a bound [`SinrNetParams`].
#[derive(Clone, Debug)]
pub struct SinrNetVars {
    pub layers: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

impl SinrNetVars {
    /// Same order as [`SinrNetParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.head.0, self.head.1]);
        v
    }

    /// `[..., K, K, f_in] → [..., K, K, f_out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let mut h = x;
        for &(w, b) in &self.layers {
            h = category_layer(tape, h, w, b);
        }
        let y = tape.matmul(h, self.head.0);
        tape.add_bias(y, self.head.1)
    }
}

/// Mean over each category set of `relu(W^c·F + b^c)`, categories stacked.
pub fn category_layer<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Var {
    tape.category_layer(x, weight, bias)
}

/// `[..., K, K, 1] → [..., K]`: the diagonal entries.
pub fn diagonal_readout<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    assert_eq!(s.last(), Some(&1), "readout expects feature dim 1, got {s:?}");
    let d = tape.diag_gather(x);
    tape.reshape(d, &s[..s.len() - 2])
}
