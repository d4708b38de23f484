//! Choice models: multinomial logit, nested logit, fully connected DNN and
//! alternative-specific-utility DNN.

pub mod arch;
pub mod bound;
pub mod forward;
pub mod params;

pub use arch::{count_params, nest_layout, ArchSpec, Family, InputDims, ParamCount};
pub use bound::{bound_ratio_asu_vs_f, entry_bounded_norms, frobenius_norms, rademacher_bound};
pub use forward::{
    asudnn_forward, fdnn_forward, mnl_forward, nl_forward, nl_probabilities, ChoiceModel, Pass, UtilityOutput,
};
pub use params::{ModelParams, Net, Role};
