pub mod models;
pub mod integrator;
pub mod qp;
pub mod transcription;
pub mod cmon;
pub mod perturbation;
pub mod schemes;
pub mod harness;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models-and-integration.md")]
    mod models_and_integration {}
    #[doc = include_str!("../../../book/src/qp-subproblem.md")]
    mod qp_subproblem {}
    #[doc = include_str!("../../../book/src/nonlinearity-measures.md")]
    mod nonlinearity_measures {}
    #[doc = include_str!("../../../book/src/distance-to-optimum.md")]
    mod distance_to_optimum {}
    #[doc = include_str!("../../../book/src/schemes.md")]
    mod schemes {}
    #[doc = include_str!("../../../book/src/scenarios-and-cli.md")]
    mod scenarios_and_cli {}
}
