//! The trainable denoiser: a small convolutional encoder-decoder that
//! receives the noisy target concatenated with the conditioning channels and
//! predicts the clean target, plus its losses, training loop and checkpoint
//! format.

mod checkpoint;
mod losses;
mod net;
mod ops;
mod train;

pub use checkpoint::{decode_checkpoint, encode_params, read_checkpoint, write_checkpoint, CheckpointHeader, PARAM_MAGIC};
pub use losses::{
    divergence, divergence_loss, divergence_loss_grad, dwt_loss, dwt_loss_grad, flow_components, haar_analysis,
    haar_decompose, haar_reconstruct, haar_synthesis, l1_denoise_loss, l1_denoise_loss_grad, sobel, sobel_loss,
    sobel_loss_grad, total_loss, total_loss_grad, HaarLevel, LossBreakdown, LossWeights,
};
pub use net::{Architecture, DenoiserModel, Tape};
pub use train::{
    cosine_lr, prepare_examples, train, validation_l1, Adam, LossRecord, TrainConfig, TrainReport, TrainingExample,
};

use crate::error::{Error, Result};
use crate::grid::{names, Dataset, GroupMask, Stat};
use crate::guidance::Denoiser;
use crate::tensor::Tensor;

/// A network together with the conditioning layout it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    /// Input variable names in assembly order.
    pub inputs: Vec<String>,
    /// Dropout groups; bit `i` of a view refers to `groups[i]`.
    pub groups: Vec<String>,
    /// Group index of every conditioning channel.
    pub channel_groups: Vec<usize>,
    /// Standardization of the speed channel, for physical-unit losses.
    pub speed: Stat,
}

impl TrainedDenoiser {
    pub fn new(model: DenoiserModel, inputs: Vec<String>, groups: Vec<String>, channel_groups: Vec<usize>, speed: Stat) -> Result<Self> {
        let arch = model.architecture();
        if channel_groups.len() != arch.cond_channels {
            return Err(Error::dim(format!(
                "{} conditioning channels but {} channel groups",
                arch.cond_channels,
                channel_groups.len()
            )));
        }
        if groups.len() > 63 {
            return Err(Error::invalid("at most 63 dropout groups are supported"));
        }
        if let Some(g) = channel_groups.iter().find(|&&g| g >= groups.len()) {
            return Err(Error::invalid(format!("channel group {g} out of range")));
        }
        if !(speed.std > 0.0 && speed.std.is_finite() && speed.mean.is_finite()) {
            return Err(Error::invalid("speed statistics must be finite with positive std"));
        }
        Ok(Self {
            model,
            inputs,
            groups,
            channel_groups,
            speed,
        })
    }

    /// Untrained model sized for the dataset's conditioning layout.
    pub fn for_dataset(dataset: &Dataset, arch: impl FnOnce(usize) -> Architecture, init_seed: u64) -> Result<Self> {
        let first = dataset
            .pairs
            .first()
            .ok_or_else(|| Error::invalid("dataset is empty"))?;
        let cond = &first.conditioning;
        let arch = arch(cond.channel_count());
        let model = DenoiserModel::init(arch, init_seed)?;
        Self::new(
            model,
            cond.variables().iter().map(|(s, _)| s.name.clone()).collect(),
            cond.groups().to_vec(),
            cond.channel_groups(),
            dataset.stats.get(names::LR_SPEED)?,
        )
    }

    /// Conditioning with the channels of groups outside `view` zeroed.
    pub fn mask_conditioning(&self, cond: &Tensor, view: GroupMask) -> Tensor {
        let mut out = cond.clone();
        for (c, &g) in self.channel_groups.iter().enumerate() {
            if !view.contains(g) {
                out.channel_mut(c).fill(0.0);
            }
        }
        out
    }

    pub fn assemble_input(&self, x_t: &Tensor, cond: &Tensor, view: GroupMask) -> Result<Tensor> {
        let arch = self.model.architecture();
        if x_t.channels() != arch.target_channels || cond.channels() != arch.cond_channels {
            return Err(Error::dim(format!(
                "expected {} target and {} conditioning channels, got {} and {}",
                arch.target_channels,
                arch.cond_channels,
                x_t.channels(),
                cond.channels()
            )));
        }
        Tensor::concat_channels(&[x_t, &self.mask_conditioning(cond, view)])
    }

    pub fn predict_x0(&self, x_t: &Tensor, cond: &Tensor, t: usize, view: GroupMask) -> Result<Tensor> {
        self.model.forward(&self.assemble_input(x_t, cond, view)?, t as f64)
    }

    /// Binds one assembled conditioning tensor, giving a [`Denoiser`].
    pub fn bind(&self, cond: Tensor) -> Result<BoundDenoiser<'_>> {
        if cond.channels() != self.model.architecture().cond_channels {
            return Err(Error::dim("conditioning channel count does not match the model"));
        }
        Ok(BoundDenoiser { model: self, cond })
    }
}

/// A trained network paired with one timestamp's conditioning.
pub struct BoundDenoiser<'a> {
    model: &'a TrainedDenoiser,
    cond: Tensor,
}

impl BoundDenoiser<'_> {
    pub fn conditioning(&self) -> &Tensor {
        &self.cond
    }
}

impl Denoiser for BoundDenoiser<'_> {
    fn groups(&self) -> &[String] {
        &self.model.groups
    }

    fn predict_x0(&self, x_t: &Tensor, t: usize, view: GroupMask) -> Result<Tensor> {
        self.model.predict_x0(x_t, &self.cond, t, view)
    }

    fn predict_x0_vjp(&self, x_t: &Tensor, t: usize, view: GroupMask, cotangent: &Tensor) -> Result<Tensor> {
        let input = self.model.assemble_input(x_t, &self.cond, view)?;
        let (_, tape) = self.model.model.forward_tape(&input, t as f64)?;
        let dinput = self.model.model.backward(&tape, cotangent, None)?;
        Ok(dinput.slice_channels(0, x_t.channels()))
    }
}

#[cfg(test)]
mod tests;
