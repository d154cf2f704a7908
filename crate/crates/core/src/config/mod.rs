//! Darknet-style configuration files: network `.cfg`, binary `.weights`, and
//! the `.data` / `.names` dataset metadata.

pub mod cfg;
pub mod data;
pub mod weights;

pub use cfg::{
    infer_shapes, parse_cfg, render_cfg, Census, ConvLayer, LayerDef, LayerKind, MaxpoolLayer, NetOptions,
    NetworkDef, RouteLayer, Shape, UpsampleLayer, YoloLayer,
};
pub use data::{parse_data_file, parse_names_file, DataFile, DatasetMeta};
pub use weights::{expected_weights_len, load_weights, param_template, save_weights, ParamSet};
