//! Shared pieces of the `bodyflow` binary: checkpoint loading and the HTTP service.

use std::path::Path;

use bodyflow::container::Container;
use bodyflow::train::Checkpoint;
use bodyflow::{Generator32, Result};

pub mod service;

/// Environment variable that supplies the checkpoint path when no flag is given.
pub const CHECKPOINT_ENV: &str = "BODYFLOW_CHECKPOINT";

/// A loaded checkpoint and a short content-derived id for it.
pub fn load_generator(path: impl AsRef<Path>) -> Result<(Generator32, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| bodyflow::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let id = checkpoint_id(&bytes);
    let ckpt = Checkpoint::from_container(Container::decode(&bytes)?)?;
    Ok((ckpt.generator()?, id))
}

pub fn checkpoint_id(bytes: &[u8]) -> String {
    format!("ckpt-{:08x}", crc32fast::hash(bytes))
}
