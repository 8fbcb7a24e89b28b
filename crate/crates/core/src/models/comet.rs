use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::init::dense;
use super::twin::affine;
use super::{check_input, DenseParams, Evaluated, Model, ModelKind, NetworkConfig, Parameters};
use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::seeding::{stream_rng, Stream};

/// Number of affine layers in the baseline MLP.
pub const COMET_LAYERS: usize = 5;

/// Baseline MLP: `n_in -> w -> w -> w -> w -> n_s + n_c` with the activation
/// between layers. The first `n_s` outputs are `sdot0`, the rest `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CometMlpParams {
    pub config: NetworkConfig,
    pub layers: Vec<DenseParams>,
}

impl CometMlpParams {
    fn widths(config: &NetworkConfig) -> [(usize, usize); COMET_LAYERS] {
        let w = config.width;
        [(w, config.n_in()), (w, w), (w, w), (w, w), (config.n_s + config.n_c, w)]
    }

    pub fn zeros(config: NetworkConfig) -> Self {
        let layers = Self::widths(&config).iter().map(|&(o, i)| DenseParams::zeros(o, i)).collect();
        Self { config, layers }
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate(ModelKind::Comet)?;
        let mut rng = stream_rng(seed, Stream::Init);
        let layers = Self::widths(&config).iter().map(|&(o, i)| dense(&mut rng, o, i)).collect();
        Ok(Self { config, layers })
    }
}

impl Parameters for CometMlpParams {
    fn named_tensors(&self) -> Vec<(String, &crate::tensor::Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, d)| [(format!("layer.{l}.weight"), &d.weight), (format!("layer.{l}.bias"), &d.bias)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        self.layers.iter_mut().flat_map(|d| [&mut d.weight, &mut d.bias]).collect()
    }

    fn frozen_mask(&self) -> Vec<bool> {
        alloc::vec![false; 2 * self.layers.len()]
    }
}

impl Model for CometMlpParams {
    fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Comet
    }

    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], x: NodeId, with_gradients: bool) -> Result<Evaluated> {
        check_input(tape, x, &self.config, "comet_forward")?;
        let act = self.config.activation;
        let n_layers = self.layers.len();
        let layer = |l: usize| (params[2 * l], params[2 * l + 1]);

        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut h = x;
        for l in 0..n_layers - 1 {
            let z = affine(tape, layer(l), h)?;
            pre.push(z);
            h = act.apply(tape, z)?;
        }
        let out = affine(tape, layer(n_layers - 1), h)?;
        let (n_s, n_c) = (self.config.n_s, self.config.n_c);
        let sdot0 = tape.slice_rows(out, 0, n_s)?;
        let constants = tape.slice_rows(out, n_s, n_s + n_c)?;

        let mut gradients = Vec::new();
        if with_gradients && n_c > 0 {
            let batch = tape.value(x).cols();
            let slopes = pre.iter().map(|&z| act.derivative(tape, z)).collect::<Result<Vec<_>>>()?;
            let w_t = (0..n_layers - 1)
                .map(|l| tape.transpose(layer(l).0))
                .collect::<Result<Vec<_>>>()?;
            let (w_last, _) = layer(n_layers - 1);
            for i in 0..n_c {
                let row = tape.slice_rows(w_last, n_s + i, n_s + i + 1)?;
                let row_t = tape.transpose(row)?;
                let seed = tape.broadcast_column(row_t, batch)?;
                let mut g = tape.hadamard(seed, slopes[n_layers - 2])?;
                for l in (1..n_layers - 1).rev() {
                    let back = tape.matmul(w_t[l], g)?;
                    g = tape.hadamard(back, slopes[l - 1])?;
                }
                let gx = tape.matmul(w_t[0], g)?;
                gradients.push(tape.slice_rows(gx, 0, n_s)?);
            }
        }
        Ok(Evaluated { sdot0, constants, gradients })
    }
}
