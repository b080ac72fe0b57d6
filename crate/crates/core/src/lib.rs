//! Subject-novelty detection under background/domain shift.
//!
//! The pipeline learns a representation that splits an image into a subject
//! latent `z_s` and a background latent `z_b`. Independence between the two
//! is pushed by minimizing a sampled variational upper bound on their mutual
//! information, while a mini-batch Gaussian mixture energy anchors `z_b` to
//! the background clusters. Novelty is then scored by kernel density
//! estimation on `z_s` alone, which keeps the detector stable when test
//! backgrounds were never seen during training.
//!
//! Module map:
//! - [`datasets`]: multi-background digit data (IDX ingestion, colorization,
//!   leave-one-class-out splits, on-disk dataset directories)
//! - [`ad`]: reverse-mode autodiff tape used by everything that trains
//! - [`nets`]: the seven parameter groups and the encode/decode paths
//! - [`club`]: sampled mutual-information upper bound and its update modes
//! - [`gmm`]: responsibilities-weighted mixture statistics and the energy
//! - [`train`]: composite objective and the alternating training loop
//! - [`score`]: KDE novelty scoring plus a raw-pixel control baseline
//! - [`evaluator`]: AUROC/AUPRC, the held-out-class protocol, latent export

pub mod ad;
pub mod club;
pub mod datasets;
pub mod error;
pub mod evaluator;
pub mod gmm;
pub mod nets;
pub mod parallel;
pub mod score;
pub mod train;

pub use error::{Error, Result};

/// Hex SHA-256 of a byte slice; used for artifact checksums and config hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
