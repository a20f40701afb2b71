//! Post-hoc fairness calibration for embedding-based face verification.
//!
//! A verification system compares two face embeddings by cosine similarity
//! and thresholds the score. Calibrated globally, such systems can still be
//! badly miscalibrated *per subgroup*, accepting imposter pairs of some
//! populations at far higher rates than others. This crate implements
//! FairCal — per-cluster calibration on unsupervised K-means cells, with
//! population-weighted averaging for pairs spanning two cells — alongside
//! the baselines it is measured against:
//!
//! * `baseline`: one calibration map fitted on all calibration pairs;
//! * `oracle`: per-subgroup maps using the true sensitive attribute;
//! * `fsn`: per-cluster score normalisation equalising cluster FPRs;
//! * `gst`: per-subgroup decision thresholds.
//!
//! Around the methods sit three calibrator families (beta, equal-mass
//! binning, isotonic regression), accuracy and fairness metrics (AUROC,
//! TPR@FPR, subgroup FPR/FNR, KS/ECE/Brier calibration errors), a seeded
//! generator of synthetic biased datasets, and a leave-one-out
//! cross-validation harness that writes deterministic JSON/CSV reports.
//!
//! Everything is deterministic given a seed; the `parallel` feature (on by
//! default) runs the hot loops on rayon without changing any result.

pub mod calib;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kmeans;
pub mod methods;
pub mod metrics;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
