//! Multi-label prediction, label sorting and selection, and rank-adaptive
//! selected-label pixel classification.

mod classify;
mod multilabel;
mod select;
mod table;
mod target;

pub use classify::{
    complete_label_classify, predict_classes, rank_adaptive_pixel_classify, rank_adaptive_softmax,
    PixelClassification,
};
pub use multilabel::{multilabel_forward, MultiLabelHead, MultiLabelHeadVariant, MultiLabelOutput};
pub use select::{top_k_select, SelectionMode, SelectionRequest, SelectionResult};
pub use table::{CategoryTable, MultiLabelWeights, RankTemperatures, INIT_INVERSE_TAU};
pub use target::build_multilabel_target;
