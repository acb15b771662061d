//! A small reverse-mode automatic differentiation engine over dense
//! matrices, with finite-difference gradient checking.

pub mod check;
pub mod mat;
pub mod params;
pub mod tape;

pub use check::{grad_check, BlockReport, GradCheckOptions, GradCheckReport};
pub use mat::{Mat, Real};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tape::{AutodiffError, BnBatchStats, Grads, Tape, Var, BN_EPS, MASK_VALUE};
