mod error;
pub mod counterfactual;
pub mod eval;
pub mod flow;
pub mod gp;
mod linalg;
mod optim;
pub mod recourse;
pub mod rng;
pub mod scm;
pub mod vi;

pub use error::{Error, Result};

// The guide under book/ is compiled here so its listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/causal-models.md")]
    mod causal_models {}
    #[doc = include_str!("../../../book/src/warped-gp.md")]
    mod warped_gp {}
    #[doc = include_str!("../../../book/src/counterfactuals.md")]
    mod counterfactuals {}
    #[doc = include_str!("../../../book/src/recourse.md")]
    mod recourse {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
