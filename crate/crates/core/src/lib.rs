//! Identity-aware forgery detection on per-frame 3DMM feature sequences.
//!
//! A temporal embedding network maps each video's coefficient sequence to
//! per-frame unit vectors. It is trained so that frames of one person's
//! videos sit close together while frames of other people sit far apart,
//! then hardened against a frame-local generator that pastes one person's
//! appearance onto another person's motion. At test time a video is
//! compared against pristine reference videos of the claimed identity and
//! declared fake when even its best-matching frame pair is too far away.

pub mod autodiff;
pub mod feature;
pub mod generator;
pub mod identifier;
pub mod losses;
pub mod par;
pub mod synth;
pub mod tid;
pub mod trainer;
