//! Synthetic data: Gaussian-mixture feature models and a procedural image
//! corpus whose "generators" each imprint a distinct pixel artifact.

mod corpus;
mod gmm;

pub use corpus::{
    family_name, imprint_artifact, make_corpus, make_corpus_with, prototype_set, real_base_image, CorpusSpec,
    SynthImage, DEFAULT_IMAGE_SIZE, MAX_FAMILIES,
};
pub use gmm::{
    analytic_total_variance, mixture_covariance, mixture_mean, sample_ensemble, sample_gmm, GaussianComponent,
    GeneratorEnsemble, GmmSpec, TotalVariance,
};
