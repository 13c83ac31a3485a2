//! U-Net reconstructors, the layer classifier, and their training loop.

mod model;
mod train;

pub use model::{
    argmax, build_ann1_c, build_ann1_r, build_ann2, build_model, load_model, load_model_for, plane,
    save_model, ModelState, NetKind, NetworkSpec,
};
pub use train::{
    evaluate, evaluate_loss, retrain_star, train, train_samples, train_step, EpochStats,
    TestMetrics, TrainConfig, TrainReport,
};
