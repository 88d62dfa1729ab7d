//! The frozen classifier and the experiments built on it: accuracy of
//! reconstructions of corrupted images, loss landscapes of 2-latent models,
//! and recognition speed against sample typicality.

mod classifier;
mod landscape;
mod ood;
pub mod stats;
mod typicality;

pub use classifier::{
    fraction_correct, train_classifier, Classifier, ClassifierConfig, CLASSES, GATE_ACCURACY, MNIST_MEAN,
    MNIST_STD,
};
pub use landscape::{distance, elbo_landscape, loss_surface, GridConfig, LandscapeGrid, Surface};
pub use ood::{
    beta_sweep, ood_accuracy, reconstructions_at, AccuracyReport, BetaRow, Method, OodConfig, StepAccuracy,
    StepSelection, EVAL_CHUNK,
};
pub use typicality::{
    centile_spearman, centile_summary, quartile_examples, typicality_analysis, CentileRow, TypicalityRecord,
    TypicalityReport, CENTILES,
};
