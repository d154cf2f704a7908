use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tinydet::config::{infer_shapes, load_weights, parse_cfg, parse_data_file, parse_names_file, DatasetMeta, ParamSet};
use tinydet::dataset::{resize_to_net, RgbImage};
use tinydet::head::{decode_all, Detection};
use tinydet::network::{baseline_tiny_def, custom_tiny_def, BuiltNetwork, DEFAULT_ANCHORS};
use tinydet::postprocess::nms;

use crate::NetArgs;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// What to do when no weights file is given.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    Random,
    Zeros,
}

pub fn load_network(args: &NetArgs, fallback: Fallback) -> Result<BuiltNetwork> {
    let def = match (&args.cfg, &args.builtin) {
        (Some(path), _) => {
            let text = read_text(path)?;
            let def = parse_cfg(&text).with_context(|| format!("{}", path.display()))?;
            infer_shapes(def).with_context(|| format!("{}", path.display()))?
        }
        (None, Some(crate::Builtin::Custom)) => custom_tiny_def(args.classes, &DEFAULT_ANCHORS)?,
        (None, Some(crate::Builtin::Baseline)) => baseline_tiny_def(args.classes, &DEFAULT_ANCHORS)?,
        (None, None) => bail!("either --cfg or --builtin is required"),
    };
    let params = match &args.weights {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
            load_weights(&bytes, &def).with_context(|| format!("{}", path.display()))?
        }
        None if fallback == Fallback::Zeros => ParamSet::zeros(&def)?,
        None => {
            log::warn!("no --weights given; using random parameters (seed {})", args.seed);
            ParamSet::random(&def, args.seed)?
        }
    };
    Ok(BuiltNetwork::new(def, params)?)
}

/// Class names from `--names`, else from the `.data` file, else `class<N>`.
pub fn class_names(names: Option<&Path>, data: Option<&DatasetMeta>, classes: usize) -> Result<Vec<String>> {
    let list = match (names, data) {
        (Some(p), _) => parse_names_file(&read_text(p)?),
        (None, Some(meta)) => meta.names.clone(),
        (None, None) => (0..classes).map(|i| format!("class{i}")).collect(),
    };
    if list.len() != classes {
        bail!("network predicts {classes} classes but {} names were given", list.len());
    }
    Ok(list)
}

pub fn load_data_meta(path: &Path) -> Result<DatasetMeta> {
    let data = parse_data_file(&read_text(path)?).with_context(|| format!("{}", path.display()))?;
    let names_path = resolve(Path::new(&data.names), path.parent());
    let names = parse_names_file(&read_text(&names_path)?);
    Ok(DatasetMeta::new(data, names)?)
}

/// Uses `p` as given when it exists, otherwise relative to `base`.
pub fn resolve(p: &Path, base: Option<&Path>) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(b) = base {
            let joined = b.join(p);
            if joined.exists() {
                return joined;
            }
        }
    }
    p.to_path_buf()
}

/// Resize, forward pass, decode at `conf` and per-class NMS.
pub fn detect(net: &BuiltNetwork, image: &RgbImage, conf: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    let [_, _, h, w] = net.input_dims();
    let input = resize_to_net(&image.to_tensor(), w, h)?;
    let maps = net.forward(&input)?;
    Ok(nms(&decode_all(&maps, conf)?, nms_iou))
}
