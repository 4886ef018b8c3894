//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.txt         network configuration, key=value
//! <dir>/manifest.txt       one line per entry: name shape dtype
//! <dir>/<name>.mlwt        non-bank parameters
//! <dir>/<prefix>.bank      filter banks, dtype "bank"
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Element;
use crate::wavelet::FilterBank;

use super::{init_params, NetworkConfig, NetworkParams, BANK_SUFFIXES};

pub fn save_checkpoint<T: Element>(dir: impl AsRef<Path>, params: &NetworkParams<T>, config: &NetworkConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    let mut manifest = String::new();
    for (i, (name, t)) in params.iter().enumerate() {
        if params.is_bank_param(crate::autodiff::ParamId(i)) {
            continue;
        }
        write_tensor(dir.join(format!("{name}.mlwt")), t)?;
        writeln!(manifest, "{name} {} {}", t.shape(), T::DTYPE.name()).expect("string write");
    }
    for (prefix, bank) in params.banks()? {
        bank.save(dir.join(format!("{prefix}.bank")))?;
        writeln!(manifest, "{prefix} {}x{} bank", BANK_SUFFIXES.len(), bank.len()).expect("string write");
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads a checkpoint, checking every entry against the layout implied by
/// its configuration.
pub fn load_checkpoint<T: Element>(dir: impl AsRef<Path>) -> Result<(NetworkParams<T>, NetworkConfig)> {
    let dir = dir.as_ref();
    let config = NetworkConfig::from_text(&fs::read_to_string(dir.join("config.txt"))?)?;
    let mut params: NetworkParams<T> = init_params(&config, 0)?;
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut seen = 0;
    for (lineno, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, dtype] = fields[..] else {
            return Err(Error::Format(format!("manifest line {}: expected `name shape dtype`", lineno + 1)));
        };
        if dtype == "bank" {
            let bank: FilterBank<T> = FilterBank::load(dir.join(format!("{name}.bank")))?;
            for (suffix, f) in BANK_SUFFIXES.iter().zip(bank.filters()) {
                let slot = params.get_mut(&format!("{name}.{suffix}"))?;
                if slot.len() != f.len() {
                    return Err(Error::shape("load_checkpoint", slot.len(), f.len()));
                }
                slot.data_mut().copy_from_slice(f);
                seen += 1;
            }
            continue;
        }
        let t = read_tensor::<T>(dir.join(format!("{name}.mlwt")))?;
        let slot = params.get_mut(name)?;
        if slot.shape() != t.shape() || t.shape().to_string() != shape {
            return Err(Error::shape("load_checkpoint", slot.shape(), shape));
        }
        *slot = t;
        seen += 1;
    }
    if seen != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {seen} of {} parameters",
            params.len()
        )));
    }
    Ok((params, config))
}
