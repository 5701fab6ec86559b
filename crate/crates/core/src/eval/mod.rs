//! Synthetic lesion scenes, ROC/FROC metrics and checkpoint sweeps.

mod metrics;
mod scene;
mod sweep;

pub use metrics::{
    froc_area, froc_curve, heatmap_to_detections, match_detections, roc_auc, standardized_image_eval, Detection,
    DetectionSet, Truth,
};
pub use scene::{
    curve_distance, gen_scene, gen_toy_dataset, label_rule, near_vessel_fraction, read_dataset, write_dataset,
    Region, RegionKind, SceneConfig, Shape, ToyScene,
};
pub use sweep::{
    checkpoint_sweep, eval_criterion, evaluate_checkpoint, prepare_scenes, CheckpointEval, EvalConfig, SweepInput,
    SweepRow, SweepTable, SWEEP_HEADER,
};
