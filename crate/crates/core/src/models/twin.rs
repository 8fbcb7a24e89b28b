use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::init::{dense, random_semi_orthogonal, singular_values};
use super::{check_input, DenseParams, Evaluated, Model, ModelKind, NetworkConfig, Parameters};
use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::seeding::{stream_rng, Stream};
use crate::tensor::Tensor;

/// One factored hidden layer, `S diag(relu(v)) D^T` on the `sdot0` path and
/// `S D^T` on the constants path.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankLayerParams {
    /// Left factor `S`, `width x r`.
    pub left: Tensor,
    /// Singular values `v`, `r x 1`. Stored unconstrained; relu at use.
    pub singular: Tensor,
    /// Right factor `D`, `width x r`.
    pub right: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwinNetParams {
    pub config: NetworkConfig,
    pub sdot_in: DenseParams,
    pub const_in: DenseParams,
    pub hidden: Vec<LowRankLayerParams>,
    pub sdot_out: DenseParams,
    pub const_out: DenseParams,
    factors_frozen: bool,
}

impl TwinNetParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: NetworkConfig) -> Self {
        let w = config.width;
        let r = config.rank;
        Self {
            config,
            sdot_in: DenseParams::zeros(w, config.n_in()),
            const_in: DenseParams::zeros(w, config.n_in()),
            hidden: (0..config.depth_hidden)
                .map(|_| LowRankLayerParams {
                    left: Tensor::zeros(w, r),
                    singular: Tensor::zeros(r, 1),
                    right: Tensor::zeros(w, r),
                })
                .collect(),
            sdot_out: DenseParams::zeros(config.n_s, w),
            const_out: DenseParams::zeros(config.n_c, w),
            factors_frozen: false,
        }
    }

    /// Fresh parameters: fan-in uniform dense layers, semi-orthogonal `S`, `D`,
    /// and `v ~ U(0.5, 1.5)`. Deterministic in `seed`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate(ModelKind::MetaComet)?;
        let mut rng = stream_rng(seed, Stream::Init);
        let (w, r, n_in) = (config.width, config.rank, config.n_in());
        let sdot_in = dense(&mut rng, w, n_in);
        let const_in = dense(&mut rng, w, n_in);
        let hidden = (0..config.depth_hidden)
            .map(|_| LowRankLayerParams {
                left: random_semi_orthogonal(&mut rng, w, r),
                singular: singular_values(&mut rng, r),
                right: random_semi_orthogonal(&mut rng, w, r),
            })
            .collect();
        let sdot_out = dense(&mut rng, config.n_s, w);
        let const_out = dense(&mut rng, config.n_c, w);
        Ok(Self { config, sdot_in, const_in, hidden, sdot_out, const_out, factors_frozen: false })
    }

    /// Keeps every `S`, `D` (now frozen) and redraws `v` and the four dense layers.
    pub fn reinit_for_phase2(&self, seed: u64) -> Self {
        let config = self.config;
        let mut rng = stream_rng(seed, Stream::Reinit);
        let (w, n_in) = (config.width, config.n_in());
        let sdot_in = dense(&mut rng, w, n_in);
        let const_in = dense(&mut rng, w, n_in);
        let hidden = self
            .hidden
            .iter()
            .map(|layer| LowRankLayerParams {
                left: layer.left.clone(),
                singular: singular_values(&mut rng, config.rank),
                right: layer.right.clone(),
            })
            .collect();
        let sdot_out = dense(&mut rng, config.n_s, w);
        let const_out = dense(&mut rng, config.n_c, w);
        Self { config, sdot_in, const_in, hidden, sdot_out, const_out, factors_frozen: true }
    }

    pub fn factors_frozen(&self) -> bool {
        self.factors_frozen
    }

    pub fn set_factors_frozen(&mut self, frozen: bool) {
        self.factors_frozen = frozen;
    }

    /// `(S, D)` parameter nodes of every hidden layer, given ids from [`Parameters::bind`].
    pub fn factor_nodes(&self, ids: &[NodeId]) -> Vec<(NodeId, NodeId)> {
        let nodes = TwinNodes { ids, depth: self.hidden.len() };
        (0..self.hidden.len())
            .map(|l| {
                let (s, _, d) = nodes.hidden(l);
                (s, d)
            })
            .collect()
    }

    fn is_factor(name: &str) -> bool {
        name.ends_with(".left") || name.ends_with(".right")
    }
}

impl Parameters for TwinNetParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(8 + 3 * self.hidden.len());
        out.push(("sdot_in.weight".into(), &self.sdot_in.weight));
        out.push(("sdot_in.bias".into(), &self.sdot_in.bias));
        out.push(("const_in.weight".into(), &self.const_in.weight));
        out.push(("const_in.bias".into(), &self.const_in.bias));
        for (l, layer) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{l}.left"), &layer.left));
            out.push((format!("hidden.{l}.singular"), &layer.singular));
            out.push((format!("hidden.{l}.right"), &layer.right));
        }
        out.push(("sdot_out.weight".into(), &self.sdot_out.weight));
        out.push(("sdot_out.bias".into(), &self.sdot_out.bias));
        out.push(("const_out.weight".into(), &self.const_out.weight));
        out.push(("const_out.bias".into(), &self.const_out.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(8 + 3 * self.hidden.len());
        out.push(&mut self.sdot_in.weight);
        out.push(&mut self.sdot_in.bias);
        out.push(&mut self.const_in.weight);
        out.push(&mut self.const_in.bias);
        for layer in &mut self.hidden {
            out.push(&mut layer.left);
            out.push(&mut layer.singular);
            out.push(&mut layer.right);
        }
        out.push(&mut self.sdot_out.weight);
        out.push(&mut self.sdot_out.bias);
        out.push(&mut self.const_out.weight);
        out.push(&mut self.const_out.bias);
        out
    }

    fn frozen_mask(&self) -> Vec<bool> {
        self.named_tensors()
            .iter()
            .map(|(name, _)| self.factors_frozen && Self::is_factor(name))
            .collect()
    }
}

/// Parameter nodes of a bound twin network.
struct TwinNodes<'a> {
    ids: &'a [NodeId],
    depth: usize,
}

impl TwinNodes<'_> {
    fn sdot_in(&self) -> (NodeId, NodeId) {
        (self.ids[0], self.ids[1])
    }
    fn const_in(&self) -> (NodeId, NodeId) {
        (self.ids[2], self.ids[3])
    }
    /// `(S, v, D)` of hidden layer `l`.
    fn hidden(&self, l: usize) -> (NodeId, NodeId, NodeId) {
        let b = 4 + 3 * l;
        (self.ids[b], self.ids[b + 1], self.ids[b + 2])
    }
    fn sdot_out(&self) -> (NodeId, NodeId) {
        let b = 4 + 3 * self.depth;
        (self.ids[b], self.ids[b + 1])
    }
    fn const_out(&self) -> (NodeId, NodeId) {
        let b = 6 + 3 * self.depth;
        (self.ids[b], self.ids[b + 1])
    }
}

pub(crate) fn affine(tape: &mut Tape, (w, b): (NodeId, NodeId), x: NodeId) -> Result<NodeId> {
    let z = tape.matmul(w, x)?;
    tape.add_bias(z, b)
}

impl Model for TwinNetParams {
    fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn kind(&self) -> ModelKind {
        ModelKind::MetaComet
    }

    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], x: NodeId, with_gradients: bool) -> Result<Evaluated> {
        check_input(tape, x, &self.config, "twin_forward")?;
        let act = self.config.activation;
        let nodes = TwinNodes { ids: params, depth: self.hidden.len() };
        let factors: Vec<(NodeId, NodeId, NodeId, NodeId)> = (0..nodes.depth)
            .map(|l| {
                let (s, v, d) = nodes.hidden(l);
                let d_t = tape.transpose(d)?;
                Ok((s, v, d, d_t))
            })
            .collect::<Result<_>>()?;

        // sdot0 path
        let z = affine(tape, nodes.sdot_in(), x)?;
        let mut h = act.apply(tape, z)?;
        for &(s, v, _, d_t) in &factors {
            let v_pos = tape.relu(v)?;
            let sigma = tape.diag_from_vector(v_pos)?;
            let proj = tape.matmul(d_t, h)?;
            let scaled = tape.matmul(sigma, proj)?;
            let z = tape.matmul(s, scaled)?;
            h = act.apply(tape, z)?;
        }
        let sdot0 = affine(tape, nodes.sdot_out(), h)?;

        // constants path; pre-activations kept for the input gradient
        let mut pre = Vec::with_capacity(factors.len() + 1);
        let z = affine(tape, nodes.const_in(), x)?;
        pre.push(z);
        let mut k = act.apply(tape, z)?;
        for &(s, _, _, d_t) in &factors {
            let proj = tape.matmul(d_t, k)?;
            let z = tape.matmul(s, proj)?;
            pre.push(z);
            k = act.apply(tape, z)?;
        }
        let (w_out, _) = nodes.const_out();
        let constants = affine(tape, nodes.const_out(), k)?;

        let gradients = if with_gradients && self.config.n_c > 0 {
            let batch = tape.value(x).cols();
            let slopes = pre.iter().map(|&z| act.derivative(tape, z)).collect::<Result<Vec<_>>>()?;
            let s_t = factors
                .iter()
                .map(|&(s, ..)| tape.transpose(s))
                .collect::<Result<Vec<_>>>()?;
            let (w_in, _) = nodes.const_in();
            let w_in_t = tape.transpose(w_in)?;
            let mut grads = Vec::with_capacity(self.config.n_c);
            for i in 0..self.config.n_c {
                // adjoint of c_i pushed back through the network, per sample
                let row = tape.slice_rows(w_out, i, i + 1)?;
                let row_t = tape.transpose(row)?;
                let seed = tape.broadcast_column(row_t, batch)?;
                let mut g = tape.hadamard(seed, *slopes.last().expect("at least one layer"))?;
                for l in (0..factors.len()).rev() {
                    let (_, _, d, _) = factors[l];
                    let back = tape.matmul(s_t[l], g)?;
                    let back = tape.matmul(d, back)?;
                    g = tape.hadamard(back, slopes[l])?;
                }
                let gx = tape.matmul(w_in_t, g)?;
                grads.push(tape.slice_rows(gx, 0, self.config.n_s)?);
            }
            grads
        } else {
            Vec::new()
        };
        Ok(Evaluated { sdot0, constants, gradients })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::activation::silu;
    use crate::models::{constants_input_gradient, count_params, input_batch, input_column, semi_orthogonality_residual};
    use crate::seeding::{stream_rng, Stream};
    use rand::Rng as _;

    fn tiny(n_s: usize, n_c: usize, n_f: usize, width: usize, depth: usize, rank: usize) -> NetworkConfig {
        NetworkConfig::new(n_s, n_c, rank).with_force(n_f).with_width(width).with_depth(depth)
    }

    fn randomized(config: NetworkConfig, seed: u64) -> TwinNetParams {
        let mut p = TwinNetParams::init(config, seed).unwrap();
        let mut rng = stream_rng(seed, Stream::Data);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn run(p: &TwinNetParams, s: &[f64], f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape);
        let x = input_column(&mut tape, s, f);
        let out = p.evaluate(&mut tape, &ids, x, false).unwrap();
        (tape.value(out.sdot0).data().to_vec(), tape.value(out.constants).data().to_vec())
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = TwinNetParams::zeros(tiny(3, 2, 0, 5, 2, 2));
        let (sdot0, c) = run(&p, &[0.4, -1.0, 2.0], &[]);
        assert_eq!(sdot0, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn matches_hand_evaluation() {
        let config = tiny(2, 1, 0, 2, 1, 1);
        let mut p = TwinNetParams::zeros(config);
        p.sdot_in.weight = Tensor::new(2, 2, vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        p.sdot_in.bias = Tensor::column(&[0.1, -0.2]);
        p.const_in.weight = Tensor::new(2, 2, vec![1.5, 0.3, -0.7, 0.9]).unwrap();
        p.const_in.bias = Tensor::column(&[0.0, 0.4]);
        p.hidden[0].left = Tensor::column(&[0.6, 0.8]);
        p.hidden[0].singular = Tensor::column(&[1.3]);
        p.hidden[0].right = Tensor::column(&[-0.8, 0.6]);
        p.sdot_out.weight = Tensor::new(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        p.sdot_out.bias = Tensor::column(&[0.05, -0.05]);
        p.const_out.weight = Tensor::new(1, 2, vec![0.7, -1.1]).unwrap();
        p.const_out.bias = Tensor::column(&[0.2]);
        let s = [0.3, -0.9];

        // scalar-by-scalar oracle
        let h1 = [silu(0.5 * s[0] - 1.0 * s[1] + 0.1), silu(0.25 * s[0] + 2.0 * s[1] - 0.2)];
        let proj = 1.3 * (-0.8 * h1[0] + 0.6 * h1[1]);
        let h2 = [silu(0.6 * proj), silu(0.8 * proj)];
        let sdot0 = [h2[0] + 2.0 * h2[1] + 0.05, -3.0 * h2[0] + 0.5 * h2[1] - 0.05];
        let k1 = [silu(1.5 * s[0] + 0.3 * s[1]), silu(-0.7 * s[0] + 0.9 * s[1] + 0.4)];
        let kp = -0.8 * k1[0] + 0.6 * k1[1];
        let k2 = [silu(0.6 * kp), silu(0.8 * kp)];
        let c = 0.7 * k2[0] - 1.1 * k2[1] + 0.2;

        let (got_s, got_c) = run(&p, &s, &[]);
        for i in 0..2 {
            assert!((got_s[i] - sdot0[i]).abs() < 1e-15);
        }
        assert!((got_c[0] - c).abs() < 1e-15);
    }

    #[test]
    fn negative_singular_values_truncate_the_sdot_path() {
        let mut p = randomized(tiny(3, 1, 0, 6, 2, 2), 4);
        for layer in &mut p.hidden {
            layer.singular = Tensor::column(&[-0.5, -2.0]);
        }
        let (sdot0, _) = run(&p, &[0.1, 0.2, 0.3], &[]);
        assert_eq!(sdot0, p.sdot_out.bias.data().to_vec());
    }

    #[test]
    fn constants_ignore_singular_values() {
        let p = randomized(tiny(4, 2, 1, 8, 2, 3), 5);
        let mut q = p.clone();
        for layer in &mut q.hidden {
            layer.singular = layer.singular.map(|v| 3.0 * v - 1.0);
        }
        let s = [0.2, -0.4, 1.1, 0.0];
        assert_eq!(run(&p, &s, &[0.3]).1, run(&q, &s, &[0.3]).1);
    }

    #[test]
    fn identity_factors_reduce_to_activation_chaining() {
        let w = 4;
        let mut p = randomized(tiny(2, 1, 0, w, 2, w), 6);
        for layer in &mut p.hidden {
            layer.left = Tensor::identity(w);
            layer.right = Tensor::identity(w);
            layer.singular = Tensor::filled(w, 1, 1.0);
        }
        let s = [0.7, -0.3];
        let x = Tensor::column(&s);
        let mut h = p.sdot_in.weight.matmul(&x);
        h.add_assign(&p.sdot_in.bias);
        let mut h = h.map(silu);
        for _ in 0..2 {
            h = h.map(silu);
        }
        let mut expected = p.sdot_out.weight.matmul(&h);
        expected.add_assign(&p.sdot_out.bias);
        let (got, _) = run(&p, &s, &[]);
        for i in 0..2 {
            assert!((got[i] - expected.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (seed, n_f) in [(1u64, 0usize), (2, 1), (3, 0)] {
            let p = randomized(tiny(4, 3, n_f, 7, 2, 3), seed);
            let s = [0.3, -0.2, 0.9, -1.2];
            let force = vec![0.4; n_f];
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape);
            let x = input_column(&mut tape, &s, &force);
            let j = constants_input_gradient(&mut tape, &p, &ids, x).unwrap();
            let j = tape.value(j).clone();
            assert_eq!(j.shape(), [3, 4]);
            let h = 1e-6;
            for k in 0..4 {
                let mut up = s;
                up[k] += h;
                let mut down = s;
                down[k] -= h;
                let (_, cu) = run(&p, &up, &force);
                let (_, cd) = run(&p, &down, &force);
                for i in 0..3 {
                    let fd = (cu[i] - cd[i]) / (2.0 * h);
                    let err = (j.get(i, k) - fd).abs() / fd.abs().max(1.0);
                    assert!(err <= 1e-6, "seed {seed} J[{i}][{k}] {} vs {fd}", j.get(i, k));
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_jacobian() {
        let p = TwinNetParams::zeros(tiny(3, 2, 0, 4, 1, 2));
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape);
        let x = input_column(&mut tape, &[1.0, 2.0, 3.0], &[]);
        let j = constants_input_gradient(&mut tape, &p, &ids, x).unwrap();
        assert!(tape.value(j).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_evaluation_matches_single_samples() {
        let p = randomized(tiny(3, 2, 0, 6, 2, 2), 8);
        let states = Tensor::new(3, 2, vec![0.1, -0.5, 0.7, 0.2, -1.0, 0.4]).unwrap();
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape);
        let x = input_batch(&mut tape, &states, None).unwrap();
        let out = p.evaluate(&mut tape, &ids, x, true).unwrap();
        for b in 0..2 {
            let (sdot0, c) = run(&p, &states.column_values(b), &[]);
            assert_eq!(tape.value(out.sdot0).column_values(b), sdot0);
            assert_eq!(tape.value(out.constants).column_values(b), c);
        }
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let config = NetworkConfig::new(2, 1, 10);
        let a = TwinNetParams::init(config, 42).unwrap();
        assert_eq!(a, TwinNetParams::init(config, 42).unwrap());
        assert_ne!(a, TwinNetParams::init(config, 43).unwrap());
        assert_eq!(a.num_params(), count_params(&config, ModelKind::MetaComet));
        assert_eq!(a.num_params(), 12273);
        for layer in &a.hidden {
            assert!(semi_orthogonality_residual(&layer.left) <= 1e-12);
            assert!(semi_orthogonality_residual(&layer.right) <= 1e-12);
        }
        let bound = 1.0 / 250f64.sqrt();
        assert!(a.sdot_out.weight.data().iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn reinit_keeps_and_freezes_factors() {
        let a = TwinNetParams::init(NetworkConfig::new(4, 2, 10), 1).unwrap();
        let b = a.reinit_for_phase2(2);
        for (la, lb) in a.hidden.iter().zip(&b.hidden) {
            assert_eq!(la.left.data(), lb.left.data());
            assert_eq!(la.right.data(), lb.right.data());
            assert_ne!(la.singular, lb.singular);
            assert!(lb.singular.data().iter().all(|&v| (0.5..1.5).contains(&v)));
        }
        assert_ne!(a.sdot_in, b.sdot_in);
        assert_ne!(a.const_out, b.const_out);
        assert!(!a.frozen_mask().iter().any(|&f| f));
        let frozen: Vec<String> = b
            .named_tensors()
            .into_iter()
            .zip(b.frozen_mask())
            .filter(|(_, f)| *f)
            .map(|((name, _), _)| name)
            .collect();
        assert_eq!(frozen, vec!["hidden.0.left", "hidden.0.right", "hidden.1.left", "hidden.1.right"]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = TwinNetParams::zeros(tiny(3, 1, 0, 4, 1, 2));
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape);
        let x = input_column(&mut tape, &[1.0, 2.0], &[]);
        assert!(p.evaluate(&mut tape, &ids, x, false).is_err());
    }
}
