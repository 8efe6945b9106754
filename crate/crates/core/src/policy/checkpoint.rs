use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::PolicyConfig;
use super::params::PolicyParams;
use crate::error::{Error, Result};
use crate::format::{read_container, write_container, CHECKPOINT_MAGIC};
use crate::tensor::{Scalar, Tensor};

/// Serialises parameters (as 32-bit floats) in the `SHPI` format.
pub fn write_checkpoint<F: Scalar, W: Write>(params: &PolicyParams<F>, w: &mut W) -> Result<()> {
    let header = serde_json::to_string(params.config())?;
    let owned: Vec<(&str, Tensor<f32>)> = params.iter().map(|(n, t)| (n, t.cast())).collect();
    let refs: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (*n, t)).collect();
    write_container(w, CHECKPOINT_MAGIC, &header, &refs)
}

pub fn read_checkpoint<F: Scalar, R: Read>(r: &mut R) -> Result<PolicyParams<F>> {
    let container = read_container(r, CHECKPOINT_MAGIC)?;
    let config: PolicyConfig = serde_json::from_str(&container.header)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let tensors = container
        .tensors
        .into_iter()
        .map(|(n, t)| (n, t.cast()))
        .collect();
    PolicyParams::from_tensors(config, tensors)
}

pub fn save_checkpoint<F: Scalar>(params: &PolicyParams<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<PolicyParams<F>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
