//! Decision-tree baselines: random forest, SAMME AdaBoost and multinomial
//! gradient boosting, all on one CART engine.

mod ensemble;
mod tree;

pub use ensemble::{
    fit_adaboost, fit_gradient_boosting, fit_random_forest, EnsembleKind, EnsembleModel, ForestParams,
    ENSEMBLE_EXTENSION,
};
pub use tree::{fit_tree, improves, DecisionTree, Matrix, MaxFeatures, Node, SplitChoice, TreeParams, TreeTarget};
