//! Message passing over the complete AP graph and the power-support policy.
//!
//! Each AP node carries a `K × K × f` feature cube. Per layer, every node
//! computes one message from its own features with a SINRnet `φ` and
//! broadcasts it; each node averages the messages of all other nodes and
//! feeds its own features together with that mean to a second SINRnet `γ`.
//! Because a message depends only on its sender, it is computed once per
//! node and layer.
//!
//! Two such networks produce raw scores for the lower bound and the width
//! of the per-entry power support; sigmoids map them into `[0, p_max]`.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::objective::SupportBounds;
use crate::scalar::Scalar;
use crate::scenario::dataset::{read_f64, read_u32};
use crate::sinrnet::{diagonal_readout, CategoryLayer, SinrNetParams, SinrNetShape, SinrNetVars};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFPM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dimensions of one message-passing network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GnnArch {
    pub layers: usize,
    /// Node feature width between layers (the first layer reads 1, the last emits 1).
    pub node_dim: usize,
    pub message_dim: usize,
    /// Category-layer widths inside every SINRnet.
    pub sinr_widths: Vec<usize>,
}

impl Default for GnnArch {
    fn default() -> Self {
        Self {
            layers: 2,
            node_dim: 4,
            message_dim: 4,
            sinr_widths: vec![32, 32],
        }
    }
}

/// `φ` and `γ` of one message-passing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayerParams<T> {
    pub message: SinrNetParams<T>,
    pub update: SinrNetParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams<T> {
    pub layers: Vec<GnnLayerParams<T>>,
}

impl<T: Scalar> GnnParams<T> {
    pub fn init<R: Rng + ?Sized>(arch: &GnnArch, rng: &mut R) -> Self {
        assert!(arch.layers >= 1, "need at least one message-passing layer");
        let mut node_in = 1;
        let layers = (0..arch.layers)
            .map(|n| {
                let node_out = if n + 1 == arch.layers { 1 } else { arch.node_dim };
                let message = SinrNetParams::init(
                    &SinrNetShape {
                        input: node_in,
                        widths: arch.sinr_widths.clone(),
                        output: arch.message_dim,
                    },
                    rng,
                );
                let update = SinrNetParams::init(
                    &SinrNetShape {
                        input: node_in + arch.message_dim,
                        widths: arch.sinr_widths.clone(),
                        output: node_out,
                    },
                    rng,
                );
                node_in = node_out;
                GnnLayerParams { message, update }
            })
            .collect();
        Self { layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.message.tensors().into_iter().chain(l.update.tensors()))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.message.tensors_mut().into_iter().chain(l.update.tensors_mut()))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GnnVars {
        GnnVars {
            layers: self
                .layers
                .iter()
                .map(|l| (l.message.bind(tape, trainable), l.update.bind(tape, trainable)))
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format { kind: "checkpoint", reason: m });
        let mut node_in = 1;
        for (n, l) in self.layers.iter().enumerate() {
            if l.message.input_dim() != node_in {
                return bad(format!("layer {n}: message input {} != node dim {node_in}", l.message.input_dim()));
            }
            if l.update.input_dim() != node_in + l.message.output_dim() {
                return bad(format!("layer {n}: update input mismatch"));
            }
            node_in = l.update.output_dim();
        }
        if node_in != 1 {
            return bad(format!("final node dim {node_in} != 1"));
        }
        Ok(())
    }
}

/// Result of a recorded GNN pass.
#[derive(Clone, Copy, Debug)]
pub struct GnnOutput {
    /// `[B, L, K, K, 1]`.
    pub features: Var,
    /// Node messages computed: `B · L` per layer.
    pub messages: usize,
}

#[derive(Clone, Debug)]
pub struct GnnVars {
    pub layers: Vec<(SinrNetVars, SinrNetVars)>,
}

impl GnnVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|(m, u)| m.vars().into_iter().chain(u.vars()))
            .collect()
    }

    /// Runs every layer on node features `[B, L, K, K, f]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> GnnOutput {
        let mut h = x;
        let mut messages = 0;
        for (phi, gamma) in &self.layers {
            let (m, count) = message(tape, phi, h);
            messages += count;
            let agg = aggregate(tape, m);
            h = node_update(tape, gamma, h, agg);
        }
        GnnOutput { features: h, messages }
    }
}

/// One message per node from its own features; returns the number computed.
pub fn message<T: Scalar>(tape: &mut Tape<T>, phi: &SinrNetVars, x: Var) -> (Var, usize) {
    let s = tape.value(x).shape();
    let nodes = s[0] * s[1];
    (phi.forward(tape, x), nodes)
}

/// Mean over the other nodes of `[B, L, K, K, f]`; zero for a single node.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, messages: Var) -> Var {
    tape.neighbor_mean(messages, 1)
}

pub fn node_update<T: Scalar>(tape: &mut Tape<T>, gamma: &SinrNetVars, x: Var, agg: Var) -> Var {
    let joined = tape.concat(&[x, agg]);
    gamma.forward(tape, joined)
}

/// The two networks mapping gains to the support's lower bound and width.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    pub alpha: GnnParams<T>,
    pub beta: GnnParams<T>,
    pub p_max: f64,
}

/// Tape handles of the policy's support.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    /// `[B, K, L]`.
    pub a: Var,
    /// `[B, K, L]`.
    pub width: Var,
    pub messages: usize,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn init<R: Rng + ?Sized>(arch: &GnnArch, p_max: f64, rng: &mut R) -> Self {
        assert!(p_max > 0.0, "p_max must be positive");
        Self {
            alpha: GnnParams::init(arch, rng),
            beta: GnnParams::init(arch, rng),
            p_max,
        }
    }

    /// `alpha` tensors followed by `beta` tensors.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.alpha.tensors().into_iter().chain(self.beta.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.alpha
            .tensors_mut()
            .into_iter()
            .chain(self.beta.tensors_mut())
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> PolicyVars {
        PolicyVars {
            alpha: self.alpha.bind(tape, trainable),
            beta: self.beta.bind(tape, trainable),
            p_max: self.p_max,
        }
    }

    /// Supports for a batch of normalized node features `[B, L, K, K, 1]`.
    ///
    /// `mask` (`[B, K, L]`, entries 0 or 1) zeroes links an AP does not serve.
    pub fn bounds(&self, features: &Tensor<T>, mask: Option<&Tensor<T>>) -> Vec<SupportBounds> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let m = mask.map(|m| tape.constant(m.clone()));
        let out = vars.forward(&mut tape, x, m);
        let (a, w) = (tape.value(out.a), tape.value(out.width));
        let s = a.shape();
        let (b, k, l) = (s[0], s[1], s[2]);
        (0..b)
            .map(|i| SupportBounds {
                n_ues: k,
                n_aps: l,
                a: a.data()[i * k * l..(i + 1) * k * l].iter().map(|v| v.as_f64()).collect(),
                width: w.data()[i * k * l..(i + 1) * k * l].iter().map(|v| v.as_f64()).collect(),
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let mut desc = Vec::new();
        for net in [&self.alpha, &self.beta] {
            desc.push(net.layers.len());
            for l in &net.layers {
                for s in [&l.message, &l.update] {
                    let shape = s.shape();
                    desc.push(shape.input);
                    desc.push(shape.widths.len());
                    desc.extend(&shape.widths);
                    desc.push(shape.output);
                }
            }
        }
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        for d in desc {
            let d = u32::try_from(d).map_err(|_| Error::InvalidParams("dimension exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.p_max.to_le_bytes())?;
        let mut buf = Vec::new();
        for t in self.tensors() {
            buf.clear();
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.as_f64().to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads the policy part of a checkpoint, leaving any trailer in `r`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            kind: "checkpoint",
            reason,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fmt(format!("header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let n_desc = read_u32(r)? as usize;
        if n_desc > 1 << 20 {
            return Err(fmt("descriptor too long".into()));
        }
        let desc = (0..n_desc)
            .map(|_| read_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let p_max = read_f64(r)?;
        if !(p_max > 0.0) {
            return Err(fmt(format!("p_max {p_max} not positive")));
        }
        let mut cursor = desc.into_iter();
        let alpha = gnn_from_descriptor(&mut cursor)?;
        let beta = gnn_from_descriptor(&mut cursor)?;
        if cursor.next().is_some() {
            return Err(fmt("descriptor has trailing entries".into()));
        }
        let mut policy = Self { alpha, beta, p_max };
        for t in policy.tensors_mut() {
            for v in t.data_mut() {
                *v = T::of(read_f64(r)?);
            }
        }
        Ok(policy)
    }
}

fn gnn_from_descriptor<T: Scalar>(desc: &mut impl Iterator<Item = usize>) -> Result<GnnParams<T>> {
    let fmt = |reason: String| Error::Format {
        kind: "checkpoint",
        reason,
    };
    let mut next = || desc.next().ok_or_else(|| fmt("descriptor truncated".into()));
    let sinrnet = |next: &mut dyn FnMut() -> Result<usize>| -> Result<SinrNetParams<T>> {
        let input = next()?;
        let n_layers = next()?;
        if n_layers == 0 || n_layers > 64 {
            return Err(fmt(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut f_in = input;
        for _ in 0..n_layers {
            let w = next()?;
            if w == 0 || w % 4 != 0 || w > 1 << 16 {
                return Err(fmt(format!("layer width {w} not a positive multiple of 4")));
            }
            layers.push(CategoryLayer {
                weight: Tensor::zeros(&[f_in, w]),
                bias: Tensor::zeros(&[w]),
            });
            f_in = w;
        }
        let output = next()?;
        Ok(SinrNetParams {
            layers,
            head_weight: Tensor::zeros(&[f_in, output]),
            head_bias: Tensor::zeros(&[output]),
        })
    };
    let n_layers = next()?;
    if n_layers == 0 || n_layers > 64 {
        return Err(fmt(format!("implausible GNN depth {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let message = sinrnet(&mut next)?;
        let update = sinrnet(&mut next)?;
        layers.push(GnnLayerParams { message, update });
    }
    let net = GnnParams { layers };
    net.check()?;
    Ok(net)
}

/// Tape handles of a bound [`PolicyParams`].
#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub alpha: GnnVars,
    pub beta: GnnVars,
    pub p_max: f64,
}

impl PolicyVars {
    pub fn vars(&self) -> Vec<Var> {
        self.alpha.vars().into_iter().chain(self.beta.vars()).collect()
    }

    /// `a = p_max·σ(u_a)`, `ℓ = (p_max − a)·σ(u_ℓ)`, so `0 ≤ a ≤ a + ℓ ≤ p_max`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, features: Var, mask: Option<Var>) -> PolicyOutput {
        let p_max = T::of(self.p_max);
        let ua = self.alpha.forward(tape, features);
        let ul = self.beta.forward(tape, features);
        let raw_a = readout_powers(tape, ua.features);
        let raw_l = readout_powers(tape, ul.features);
        let sa = tape.sigmoid(raw_a);
        let mut a = tape.scale(sa, p_max);
        let neg = tape.scale(a, -T::one());
        let headroom = tape.add_scalar(neg, p_max);
        let sl = tape.sigmoid(raw_l);
        let mut width = tape.mul(headroom, sl);
        if let Some(m) = mask {
            a = tape.mul(a, m);
            width = tape.mul(width, m);
        }
        PolicyOutput {
            a,
            width,
            messages: ua.messages + ul.messages,
        }
    }
}

/// `[B, L, K, K, 1] → [B, K, L]`.
fn readout_powers<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let per_node = diagonal_readout(tape, x);
    tape.transpose_last2(per_node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> GnnArch {
        GnnArch {
            layers: 2,
            node_dim: 3,
            message_dim: 2,
            sinr_widths: vec![8, 4],
        }
    }

    fn features(rng: &mut ChaCha8Rng, b: usize, l: usize, k: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, l, k, k, 1], |_| rng.gen_range(-1.0..1.0))
    }

    /// `x[b][l][k][j] → x[b][ap[l]][ue[k]][ue[j]]` with `perm[new] = old`.
    fn permute(x: &Tensor<f64>, ap: &[usize], ue: &[usize]) -> Tensor<f64> {
        let s = x.shape();
        let (b, l, k) = (s[0], s[1], s[2]);
        Tensor::from_fn(s, |i| {
            let j = i % k;
            let kk = (i / k) % k;
            let ll = (i / (k * k)) % l;
            let bb = i / (k * k * l);
            x.data()[((bb * l + ap[ll]) * k + ue[kk]) * k + ue[j]]
        })
        .reshaped(&[b, l, k, k, 1])
    }

    fn zero_sinrnet(shape: &SinrNetShape) -> SinrNetParams<f64> {
        let mut p = SinrNetParams::init(shape, &mut ChaCha8Rng::seed_from_u64(0));
        p.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        p
    }

    #[test]
    fn zero_message_net_sends_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = zero_sinrnet(&SinrNetShape {
            input: 1,
            widths: vec![4],
            output: 3,
        });
        let mut tape = Tape::new();
        let vars = phi.bind(&mut tape, false);
        let x = tape.constant(features(&mut rng, 2, 3, 2));
        let (m, count) = message(&mut tape, &vars, x);
        assert_eq!(count, 6);
        assert_eq!(tape.value(m).shape(), &[2, 3, 2, 2, 3]);
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_nodes_send_identical_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi: SinrNetParams<f64> = SinrNetParams::init(
            &SinrNetShape {
                input: 1,
                widths: vec![8],
                output: 2,
            },
            &mut rng,
        );
        let node = features(&mut rng, 1, 1, 3);
        let x = Tensor::from_fn(&[1, 4, 3, 3, 1], |i| node.data()[i % 9]);
        let mut tape = Tape::new();
        let vars = phi.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (m, _) = message(&mut tape, &vars, xv);
        let d = tape.value(m).data();
        let per = 3 * 3 * 2;
        for l in 1..4 {
            assert_eq!(&d[l * per..(l + 1) * per], &d[..per]);
        }
    }

    #[test]
    fn one_message_per_node_and_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape, false);
        let x = tape.constant(features(&mut rng, 1, 5, 3));
        let out = vars.forward(&mut tape, x, None);
        // two networks, two layers, five nodes
        assert_eq!(out.messages, 2 * 2 * 5);
    }

    #[test]
    fn aggregate_averages_the_other_nodes() {
        let mut tape: Tape<f64> = Tape::new();
        let m = tape.constant(Tensor::new(vec![1, 3, 1, 1, 1], vec![1.0, 2.0, 6.0]));
        let agg = aggregate(&mut tape, m);
        assert_eq!(tape.value(agg).data(), &[4.0, 3.5, 1.5]);
        let single = tape.constant(Tensor::new(vec![1, 1, 1, 1, 2], vec![5.0, -1.0]));
        let agg = aggregate(&mut tape, single);
        assert_eq!(tape.value(agg).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_heads_give_half_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 2.0, &mut rng);
        for net in [&mut policy.alpha, &mut policy.beta] {
            let last = &mut net.layers.last_mut().unwrap().update;
            last.head_weight.data_mut().fill(0.0);
            last.head_bias.data_mut().fill(0.0);
        }
        let b = policy.bounds(&features(&mut rng, 2, 3, 4), None);
        assert_eq!(b.len(), 2);
        for s in &b {
            assert_eq!((s.n_ues, s.n_aps), (4, 3));
            assert!(s.a.iter().all(|&v| (v - 1.0).abs() < 1e-15));
            assert!(s.width.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn bounds_stay_inside_the_box_and_respect_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 0.7, &mut rng);
        let x = features(&mut rng, 3, 4, 3).map(|v| 50.0 * v);
        for s in policy.bounds(&x, None) {
            for (a, w) in s.a.iter().zip(&s.width) {
                assert!(*a >= 0.0 && *w >= 0.0 && a + w <= 0.7 + 1e-12);
            }
        }
        let mask = Tensor::from_fn(&[3, 3, 4], |i| (i % 3 != 0) as u8 as f64);
        let masked = policy.bounds(&x, Some(&mask));
        for (bi, s) in masked.iter().enumerate() {
            for e in 0..12 {
                if mask.data()[bi * 12 + e] == 0.0 {
                    assert_eq!((s.a[e], s.width[e]), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn policy_is_ue_and_ap_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 1.0, &mut rng);
        let (nl, nk) = (4, 3);
        let x = features(&mut rng, 1, nl, nk);
        let base = &policy.bounds(&x, None)[0];
        let ue = [2, 0, 1];
        let ap = [3, 1, 0, 2];
        let moved = &policy.bounds(&permute(&x, &ap, &ue), None)[0];
        for k in 0..nk {
            for l in 0..nl {
                let (new, old) = (k * nl + l, ue[k] * nl + ap[l]);
                assert!((moved.a[new] - base.a[old]).abs() < 1e-12);
                assert!((moved.width[new] - base.width[old]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 1.5, &mut rng);
        let mut bytes = Vec::new();
        policy.write_to(&mut bytes).unwrap();
        bytes.extend_from_slice(b"TAIL");
        let mut r = &bytes[..];
        let back: PolicyParams<f64> = PolicyParams::read_from(&mut r).unwrap();
        assert_eq!(back, policy);
        assert_eq!(r, b"TAIL");
        let single: PolicyParams<f32> = PolicyParams::read_from(&mut &bytes[..]).unwrap();
        assert_eq!(single.n_params(), policy.n_params());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 1.0, &mut rng);
        let mut bytes = Vec::new();
        policy.write_to(&mut bytes).unwrap();
        assert!(PolicyParams::<f64>::read_from(&mut &b"CFEE\x01\0\0\0"[..]).is_err());
        assert!(PolicyParams::<f64>::read_from(&mut &bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[12] ^= 0x40; // first descriptor entry: GNN depth
        assert!(PolicyParams::<f64>::read_from(&mut &bad[..]).is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = GnnArch {
            layers: 2,
            node_dim: 2,
            message_dim: 2,
            sinr_widths: vec![4],
        };
        let mut policy: PolicyParams<f64> = PolicyParams::init(&arch, 1.0, &mut rng);
        // zero biases put exact zeros on ReLU kinks; move every parameter off them
        for t in policy.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let x = features(&mut rng, 2, 3, 2);
        let c = Tensor::from_fn(&[2, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let eval = |p: &PolicyParams<f64>| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let out = vars.forward(&mut tape, xv, None);
            let cv = tape.constant(c.clone());
            let wc = tape.mul(out.width, cv);
            let s = tape.add(out.a, wc);
            let loss = tape.sum(s);
            let g = tape.backward(loss);
            let grads = vars.vars().into_iter().map(|v| g.wrt(&tape, v)).collect();
            (tape.value(loss).item(), grads)
        };
        let (_, grads) = eval(&policy);
        let h = 1e-6;
        for (ti, grad) in grads.iter().enumerate() {
            for e in (0..grad.len()).step_by(3) {
                let mut plus = policy.clone();
                plus.tensors_mut()[ti].data_mut()[e] += h;
                let mut minus = policy.clone();
                minus.tensors_mut()[ti].data_mut()[e] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = grad.data()[e];
                let scale = a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() / scale < 1e-4, "tensor {ti} elem {e}: {a} vs {fd}");
            }
        }
    }
}
