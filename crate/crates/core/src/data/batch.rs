use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetInfo, Label, Modality, MultimodalSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A padded minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[n, T̂_m, d_m]` features per modality, zero past each true length.
    pub features: [Tensor; 3],
    /// `[n, T̂_m]` masks per modality, 1 on valid steps.
    pub masks: [Tensor; 3],
    pub lengths: Vec<[usize; 3]>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn features(&self, m: Modality) -> &Tensor {
        &self.features[m.index()]
    }

    pub fn mask(&self, m: Modality) -> &Tensor {
        &self.masks[m.index()]
    }

    /// `[n, 1]` regression targets (class indices as floats in classification).
    pub fn targets(&self) -> Tensor {
        let v = self.labels.iter().map(|l| l.as_f64()).collect();
        Tensor::new(vec![self.len(), 1], v).expect("non-empty batch")
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => *c,
                Label::Score(s) => super::generator::score_class(*s),
            })
            .collect()
    }

    /// Pads `samples` to the dataset maxima.
    pub fn from_samples(samples: &[&MultimodalSample], info: &DatasetInfo) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("cannot batch zero samples".into()));
        }
        let n = samples.len();
        let mut features = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        for m in Modality::ALL {
            let (t_max, dim) = (info.max_lengths[m.index()], info.dims[m.index()]);
            let mut x = vec![0.0; n * t_max * dim];
            let mut mask = vec![0.0; n * t_max];
            for (b, s) in samples.iter().enumerate() {
                info.validate(s)?;
                let seq = s.seq(m);
                let base = b * t_max * dim;
                for (dst, &src) in x[base..base + seq.len() * dim].iter_mut().zip(seq.data()) {
                    *dst = src as f64;
                }
                mask[b * t_max..b * t_max + seq.len()].fill(1.0);
            }
            features.push(Tensor::new(vec![n, t_max, dim], x)?);
            masks.push(Tensor::new(vec![n, t_max], mask)?);
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            features: features.try_into().expect("three modalities"),
            masks: masks.try_into().expect("three modalities"),
            lengths: samples.iter().map(|s| s.lengths()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

/// Splits `samples` into padded batches of `batch_size`; the last batch may be
/// shorter.
pub fn make_batches(
    samples: &[MultimodalSample],
    info: &DatasetInfo,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty sample list".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} must be at least 2")));
    }
    let mut order: Vec<&MultimodalSample> = samples.iter().collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_samples(chunk, info))
        .collect()
}
