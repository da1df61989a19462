//! Datasets, IDX loading, synthetic generation and client partitioning.

mod dataset;
pub mod idx;
mod partition;
mod synthetic;

pub use dataset::LabeledDataset;
pub use idx::{load_idx, write_idx};
pub use partition::{
    dirichlet_partition, largest_remainder, split_per_gate, ClientPartition, ClientSplit,
    PartitionSpec,
};
pub use synthetic::{make_synthetic, make_synthetic_split, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Zero-pads 28×28 images to 32×32, two pixels on every side. 32×32 input is
/// returned unchanged.
pub fn pad_to_32(ds: &LabeledDataset) -> Result<LabeledDataset> {
    match ds.side() {
        32 => return Ok(ds.clone()),
        28 => {}
        s => return Err(Error::dim(format!("pad_to_32 supports 28x28 input, got {s}x{s}"))),
    }
    let (n, ch) = (ds.len(), ds.channels());
    let mut out = vec![0.0; n * ch * 32 * 32];
    let src = ds.features().data();
    for plane in 0..n * ch {
        for i in 0..28 {
            let from = &src[plane * 784 + i * 28..][..28];
            out[plane * 1024 + (i + 2) * 32 + 2..][..28].copy_from_slice(from);
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![n, ch, 32, 32], out)?,
        ds.labels().to_vec(),
        ds.classes(),
    )
}
