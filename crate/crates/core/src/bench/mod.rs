//! Synthetic benchmark: scene generation, training, metrics, ablations,
//! scan timing and heatmaps.

pub mod ablation;
pub mod config;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scan_bench;
pub mod scene;
pub mod train;

pub use ablation::{run_ablation, write_ablation_csv, AblationGrid, AblationRow, MixerKind};
pub use config::{Config, TrainConfig};
pub use heatmap::{heatmap_export, heatmap_pgm, l2_norm_map};
pub use metrics::{ap_by_distance, evaluate, nds, nds10, tp_errors, MetricsReport, TpErrors};
pub use model::{load_checkpoint, save_checkpoint, History, Model};
pub use optim::AdamW;
pub use scan_bench::{bench_scan, loglog_slope, write_scan_csv, ScanBenchConfig, ScanReport, ScanTiming};
pub use scene::{decode_dataset, encode_dataset, gen_scene, gen_sequences, load_dataset, save_dataset, ClassSpec, Frame, SceneConfig, SceneSource, Sequence, Split};
pub use train::{evaluate_model, fit_synthetic, predict_all, train, train_step, write_loss_csv, LossRecord, Trained};
