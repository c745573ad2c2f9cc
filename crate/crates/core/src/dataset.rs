//! A stack of particle images sharing a box size and pixel size.

use crate::error::{Error, Result};
use crate::volume::ParticleImage;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<ParticleImage>,
    pub n: usize,
    pub pixel_size: f64,
}

impl Dataset {
    pub fn new(images: Vec<ParticleImage>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no images".into()))?;
        let (n, px) = (first.n(), first.pixel_size());
        if let Some((i, _)) = images
            .iter()
            .enumerate()
            .find(|(_, im)| im.n() != n || im.pixel_size() != px)
        {
            return Err(Error::InvalidArgument(format!(
                "image {i} does not share the box size {n} and pixel size {px}"
            )));
        }
        Ok(Self {
            images,
            n,
            pixel_size: px,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.pixel_size
    }

    /// Splits off `count` images as a held-out set, taking them from the end
    /// so the remaining indices are unchanged.
    pub fn split_held_out(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.images.len() {
            return Err(Error::InvalidArgument(format!(
                "held-out size {count} must be in 1..{}",
                self.images.len()
            )));
        }
        let test = self.images.split_off(self.images.len() - count);
        Ok((Dataset::new(self.images)?, Dataset::new(test)?))
    }
}
