//! Layer building blocks: conv blocks, dense layers, MC dropout, pooling.
//!
//! All layer functions append onto a caller-owned [`Tape`] and take their
//! parameters as tape nodes, so the same code serves training, stochastic
//! inference, and deterministic inference. Mode handling follows one rule:
//! dropout layers here are *Monte Carlo* dropout — they stay active during
//! `McInference` so repeated passes sample different masks, while batch
//! normalization always uses running statistics outside of training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, NodeId, Tape, Tensor};

/// Batchnorm variance guard.
pub const BN_EPSILON: f64 = 1e-5;
/// Running-statistics momentum: `r = momentum * r + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Execution mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batchnorm normalizes with batch statistics.
    Train,
    /// Dropout active, batchnorm uses running statistics; the stochastic
    /// inference mode that ensemble MC dropout averages over.
    McInference,
    /// Dropout inactive, batchnorm uses running statistics.
    Deterministic,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McInference)
    }

    pub fn batchnorm_training(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Configuration of one double-conv block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub has_dropout: bool,
    pub dropout_rate: f64,
}

impl ConvBlockSpec {
    pub fn new(out_channels: usize, kernel: usize) -> Self {
        ConvBlockSpec {
            out_channels,
            kernel,
            has_dropout: false,
            dropout_rate: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.has_dropout = true;
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::parameter("conv block needs out_channels >= 1"));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::parameter(format!(
                "conv block kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.has_dropout != (self.dropout_rate > 0.0) {
            return Err(Error::parameter(format!(
                "dropout_rate {} inconsistent with has_dropout={}",
                self.dropout_rate, self.has_dropout
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::parameter(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Dropout layer configuration; `always_active` keeps the mask sampling on
/// at inference, which is what makes it a Monte Carlo dropout layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDropoutLayer {
    pub rate: f64,
    pub always_active: bool,
}

/// Activation applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

/// Conv weight/bias pair already registered on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ConvParamNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Batchnorm parameters: learned affine on the tape, running stats by value
/// (tensor clones are cheap buffer shares).
pub struct BatchNormNodes<T: Element> {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Dense weight/bias pair on the tape; weight is `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct DenseParamNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Output of a block that owns a batchnorm layer. In training mode the batch
/// mean/variance are surfaced so the caller can fold them into the running
/// statistics; inference modes leave `batch_stats` empty.
pub struct BlockOutput<T: Element> {
    pub out: NodeId,
    pub batch_stats: Option<(Tensor<T>, Tensor<T>)>,
}

/// Monte Carlo dropout: inverted dropout that can stay active at inference.
///
/// Inactive or rate-0 calls are exact identities and consume no randomness.
pub fn mc_dropout<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    rate: f64,
    rng: &mut Rng,
    active: bool,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::parameter(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !active || rate == 0.0 {
        return Ok(x);
    }
    tape.dropout(x, rate, rng)
}

/// Double-conv block: conv-ReLU-conv-ReLU-batchnorm-maxpool(2), plus an
/// optional trailing MC dropout. Halves the spatial dims.
#[allow(clippy::too_many_arguments)]
pub fn conv_block<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    spec: &ConvBlockSpec,
    conv1: ConvParamNodes,
    conv2: ConvParamNodes,
    bn: BatchNormNodes<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<BlockOutput<T>> {
    spec.validate()?;
    let h = tape.conv2d(x, conv1.weight, conv1.bias)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, conv2.weight, conv2.bias)?;
    let h = tape.relu(h);
    let (h, batch_stats) = batchnorm(tape, h, bn, mode)?;
    let h = tape.maxpool2d(h, 2)?;
    let out = if spec.has_dropout {
        mc_dropout(tape, h, spec.dropout_rate, rng, mode.dropout_active())?
    } else {
        h
    };
    Ok(BlockOutput { out, batch_stats })
}

/// Single-conv block: conv-ReLU-batchnorm-maxpool(2).
pub fn conv_pool_block<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    conv: ConvParamNodes,
    bn: BatchNormNodes<T>,
    mode: Mode,
) -> Result<BlockOutput<T>> {
    let h = tape.conv2d(x, conv.weight, conv.bias)?;
    let h = tape.relu(h);
    let (h, batch_stats) = batchnorm(tape, h, bn, mode)?;
    let out = tape.maxpool2d(h, 2)?;
    Ok(BlockOutput { out, batch_stats })
}

/// Normalization-free single-conv block: conv-ReLU-maxpool(2).
pub fn conv_pool_block_plain<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    conv: ConvParamNodes,
) -> Result<NodeId> {
    let h = tape.conv2d(x, conv.weight, conv.bias)?;
    let h = tape.relu(h);
    tape.maxpool2d(h, 2)
}

/// Normalization-free double-conv block: conv-ReLU-conv-ReLU-maxpool(2),
/// the VGG block shape. Used for the surrogate backbone branch.
pub fn vgg_block<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    conv1: ConvParamNodes,
    conv2: ConvParamNodes,
) -> Result<NodeId> {
    let h = tape.conv2d(x, conv1.weight, conv1.bias)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, conv2.weight, conv2.bias)?;
    let h = tape.relu(h);
    tape.maxpool2d(h, 2)
}

fn batchnorm<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    bn: BatchNormNodes<T>,
    mode: Mode,
) -> Result<(NodeId, Option<(Tensor<T>, Tensor<T>)>)> {
    if mode.batchnorm_training() {
        let (out, mean, var) = tape.batchnorm_train(x, bn.gamma, bn.beta, BN_EPSILON)?;
        Ok((out, Some((mean, var))))
    } else {
        let out = tape.batchnorm_eval(
            x,
            bn.gamma,
            bn.beta,
            &bn.running_mean,
            &bn.running_var,
            BN_EPSILON,
        )?;
        Ok((out, None))
    }
}

/// Per-channel spatial mean, `[B,C,H,W] -> [B,C]`.
pub fn global_average_pool<T: Element>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    tape.global_avg_pool(x)
}

/// Affine map plus activation, `[B,in] -> [B,out]`.
pub fn dense<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    params: DenseParamNodes,
    activation: Activation,
) -> Result<NodeId> {
    let h = tape.matmul(x, params.weight)?;
    let h = tape.add_row_bias(h, params.bias)?;
    Ok(match activation {
        Activation::None => h,
        Activation::Relu => tape.relu(h),
        Activation::Softmax => tape.softmax(h)?,
    })
}

/// Flattens `[B, ...]` to `[B, rest]`.
pub fn flatten<T: Element>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let batch = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, &[batch, rest])
}

/// Folds batch statistics into running statistics with [`BN_MOMENTUM`].
pub fn update_running_stat<T: Element>(running: &Tensor<T>, batch: &Tensor<T>) -> Tensor<T> {
    let momentum = T::from_f64(BN_MOMENTUM);
    let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
    let data: Vec<T> = running
        .iter()
        .zip(batch.iter())
        .map(|(&r, &b)| momentum * r + one_minus * b)
        .collect();
    Tensor::from_vec(running.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf<T: Element>(tape: &mut Tape<T>, t: Tensor<T>) -> NodeId {
        tape.leaf(t, false)
    }

    fn block_params(
        tape: &mut Tape<f32>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        seed: u64,
    ) -> (ConvParamNodes, ConvParamNodes, Tensor<f32>, Tensor<f32>, NodeId, NodeId) {
        let w1 = leaf(tape, Tensor::randn(&[out_ch, in_ch, kernel, kernel], seed, 0.1).unwrap());
        let b1 = leaf(tape, Tensor::zeros(&[out_ch]).unwrap());
        let w2 = leaf(tape, Tensor::randn(&[out_ch, out_ch, kernel, kernel], seed + 1, 0.1).unwrap());
        let b2 = leaf(tape, Tensor::zeros(&[out_ch]).unwrap());
        let gamma = leaf(tape, Tensor::full(&[out_ch], 1.0).unwrap());
        let beta = leaf(tape, Tensor::zeros(&[out_ch]).unwrap());
        let rm = Tensor::zeros(&[out_ch]).unwrap();
        let rv = Tensor::full(&[out_ch], 1.0).unwrap();
        (
            ConvParamNodes { weight: w1, bias: b1 },
            ConvParamNodes { weight: w2, bias: b2 },
            rm,
            rv,
            gamma,
            beta,
        )
    }

    #[test]
    fn dropout_rate_zero_identity_any_mode() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::<f32>::randn(&[32], 1, 1.0).unwrap());
        let mut rng = Rng::new(5);
        for active in [true, false] {
            let out = mc_dropout(&mut tape, x, 0.0, &mut rng, active).unwrap();
            assert!(tape.value(out).bit_eq(tape.value(x)));
        }
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let run = |seed| {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, Tensor::<f32>::full(&[128], 1.0).unwrap());
            let mut rng = Rng::new(seed);
            let out = mc_dropout(&mut tape, x, 0.5, &mut rng, true).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn dropout_mask_statistics() {
        let n = 1_000_000usize;
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::<f32>::full(&[n], 1.0).unwrap());
        let mut rng = Rng::new(17);
        let out = mc_dropout(&mut tape, x, 0.3, &mut rng, true).unwrap();
        let data = tape.value(out).data();
        let zeros = data.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.3).abs() < 0.002, "zero fraction {zeros}");
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.005, "inverted-dropout mean {mean}");
    }

    #[test]
    fn dropout_expectation_matches_input() {
        // Per-element average over many mask draws approaches the input.
        let values = [0.5f32, -1.25, 2.0, 3.5];
        let draws = 100_000;
        let mut rng = Rng::new(23);
        let mut sums = [0f64; 4];
        for _ in 0..draws {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, Tensor::from_vec(vec![4], values.to_vec()).unwrap());
            let out = tape.dropout(x, 0.3, &mut rng).unwrap();
            for (s, &v) in sums.iter_mut().zip(tape.value(out).data()) {
                *s += v as f64;
            }
        }
        for (s, &v) in sums.iter().zip(values.iter()) {
            let avg = s / draws as f64;
            assert!(
                (avg - v as f64).abs() / (v as f64).abs() < 0.01,
                "expectation {avg} vs input {v}"
            );
        }
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::<f32>::full(&[4], 1.0).unwrap());
        let mut rng = Rng::new(1);
        assert!(mc_dropout(&mut tape, x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn conv_block_output_shape() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::<f32>::randn(&[1, 1, 32, 32], 2, 1.0).unwrap());
        let (c1, c2, rm, rv, gamma, beta) = block_params(&mut tape, 1, 16, 3, 10);
        let spec = ConvBlockSpec::new(16, 3);
        let mut rng = Rng::new(1);
        let out = conv_block(
            &mut tape,
            x,
            &spec,
            c1,
            c2,
            BatchNormNodes { gamma, beta, running_mean: rm.clone(), running_var: rv.clone() },
            Mode::Deterministic,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(out.out).shape(), &[1, 16, 16, 16]);
        assert!(out.batch_stats.is_none());
    }

    #[test]
    fn conv_block_without_dropout_ignores_rng() {
        let run = |rng_seed: u64| {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, Tensor::<f32>::randn(&[1, 1, 8, 8], 3, 1.0).unwrap());
            let (c1, c2, rm, rv, gamma, beta) = block_params(&mut tape, 1, 4, 3, 20);
            let spec = ConvBlockSpec::new(4, 3);
            let mut rng = Rng::new(rng_seed);
            let out = conv_block(
                &mut tape,
                x,
                &spec,
                c1,
                c2,
                BatchNormNodes { gamma, beta, running_mean: rm.clone(), running_var: rv.clone() },
                Mode::McInference,
                &mut rng,
            )
            .unwrap();
            tape.value(out.out).to_vec()
        };
        assert_eq!(run(1), run(999));
    }

    #[test]
    fn five_chained_blocks_reach_2x2() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let mut x = leaf(&mut tape, Tensor::<f32>::randn(&[1, 1, 64, 64], 4, 1.0).unwrap());
        let mut in_ch = 1;
        for (i, out_ch) in [4, 4, 4, 4, 4].into_iter().enumerate() {
            let (c1, c2, rm, rv, gamma, beta) =
                block_params(&mut tape, in_ch, out_ch, 3, 30 + i as u64);
            let spec = ConvBlockSpec::new(out_ch, 3);
            let out = conv_block(
                &mut tape,
                x,
                &spec,
                c1,
                c2,
                BatchNormNodes { gamma, beta, running_mean: rm.clone(), running_var: rv.clone() },
                Mode::Deterministic,
                &mut rng,
            )
            .unwrap();
            x = out.out;
            in_ch = out_ch;
        }
        assert_eq!(tape.value(x).shape(), &[1, 4, 2, 2]);
    }

    #[test]
    fn conv_block_spec_validation() {
        assert!(ConvBlockSpec::new(16, 3).validate().is_ok());
        assert!(ConvBlockSpec::new(16, 4).validate().is_err());
        assert!(ConvBlockSpec::new(0, 3).validate().is_err());
        let mut bad = ConvBlockSpec::new(16, 3);
        bad.has_dropout = true; // rate stays 0
        assert!(bad.validate().is_err());
        assert!(ConvBlockSpec::new(16, 3).with_dropout(0.2).validate().is_ok());
        assert!(ConvBlockSpec::new(16, 3).with_dropout(1.0).validate().is_err());
    }

    #[test]
    fn global_average_pool_cases() {
        let mut tape = Tape::new();
        let c = leaf(&mut tape, Tensor::<f32>::full(&[2, 3, 4, 4], 2.5).unwrap());
        let out = global_average_pool(&mut tape, c).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));

        let x = leaf(
            &mut tape,
            Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        );
        let out = global_average_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(out).data(), &[2.5]);
    }

    #[test]
    fn dense_degenerate_and_softmax() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::<f32>::randn(&[4, 5], 6, 1.0).unwrap());

        // Zero weights: every row equals the bias.
        let w = leaf(&mut tape, Tensor::zeros(&[5, 3]).unwrap());
        let b = leaf(&mut tape, Tensor::from_vec(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let out = dense(&mut tape, x, DenseParamNodes { weight: w, bias: b }, Activation::None).unwrap();
        for row in tape.value(out).data().chunks(3) {
            assert_eq!(row, &[1.0, -2.0, 0.5]);
        }

        // Softmax head: rows sum to 1.
        let w = leaf(&mut tape, Tensor::randn(&[5, 3], 7, 1.0).unwrap());
        let b = leaf(&mut tape, Tensor::zeros(&[3]).unwrap());
        let out = dense(&mut tape, x, DenseParamNodes { weight: w, bias: b }, Activation::Softmax).unwrap();
        for row in tape.value(out).data().chunks(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }

        // Identity weight with ReLU clamps negatives.
        let x = leaf(&mut tape, Tensor::from_vec(vec![1, 2], vec![-1.0f32, 2.0]).unwrap());
        let w = leaf(&mut tape, Tensor::identity(2).unwrap());
        let b = leaf(&mut tape, Tensor::zeros(&[2]).unwrap());
        let out = dense(&mut tape, x, DenseParamNodes { weight: w, bias: b }, Activation::Relu).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 2.0]);
    }

    #[test]
    fn running_stat_update_blends() {
        let running = Tensor::from_vec(vec![2], vec![1.0f32, 0.0]).unwrap();
        let batch = Tensor::from_vec(vec![2], vec![0.0f32, 1.0]).unwrap();
        let updated = update_running_stat(&running, &batch);
        assert!((updated.data()[0] - 0.9).abs() < 1e-6);
        assert!((updated.data()[1] - 0.1).abs() < 1e-6);
    }
}
