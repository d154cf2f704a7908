//! Fixture builders shared by the CLI test targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tinydet::config::{infer_shapes, render_cfg, save_weights, NetworkDef, ParamSet};
use tinydet::dataset::{render_label_file, save_ppm, GroundTruthLabel, RgbImage};
use tinydet::head::inverse_decode;
use tinydet::network::{custom_tiny_def, BuiltNetwork, DEFAULT_ANCHORS};
use tinydet::postprocess::BBox;
use tinydet::tensor::BatchNorm;

/// Input side of the planted network: grids 2, 4 and 8.
pub const SIDE: usize = 64;
/// Cells per side of the stride-8 head that carries the plants.
pub const GRID: usize = SIDE / 8;
/// Size of every planted box, in image fractions.
pub const PLANT_W: f64 = 0.1;
pub const PLANT_H: f64 = 0.1;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn tinydet(args: &[&str]) -> Output {
    tinydet_env(args, &[])
}

pub fn tinydet_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tinydet"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("run tinydet");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn small_custom_def() -> NetworkDef {
    let mut def = custom_tiny_def(1, &DEFAULT_ANCHORS).unwrap();
    def.net.width = SIDE;
    def.net.height = SIDE;
    infer_shapes(def).unwrap()
}

/// Parameters under which the red channel is carried unchanged through convs
/// 0, 2, 4 and 6 (pooled to an 8x8 map) and on through the stride-8 head.
/// There, anchor 0 gets objectness logit `40 * red - 20`, class logit 20 and
/// constant box logits that decode to a `PLANT_W x PLANT_H` box centred in
/// whichever cell is lit. Everything else predicts objectness logit -20.
pub fn planted_params(def: &NetworkDef) -> ParamSet {
    let mut params = ParamSet::zeros(def).unwrap();
    let slot = |layer: usize| def.conv_layers().position(|(i, _)| i == layer).unwrap();

    for (layer, from) in [(0, 0), (2, 0), (4, 0), (6, 0), (28, 64)] {
        let p = &mut params.convs[slot(layer)];
        p.batch_norm = Some(BatchNorm::identity(p.out_channels));
        let w = p.weight_index(0, from, 1, 1);
        p.weights[w] = 1.0;
    }
    for layer in [15, 22, 29] {
        let p = &mut params.convs[slot(layer)];
        for a in 0..2 {
            p.bias[a * 6 + 4] = -20.0;
        }
    }

    let net = BuiltNetwork::new(def.clone(), ParamSet::zeros(def).unwrap()).unwrap();
    let scale = &net.yolo_outputs()[2];
    assert_eq!((scale.stride, scale.grid_w), (8, GRID));
    let (col, row) = (3, 4);
    let target = BBox::new((col as f64 + 0.5) / GRID as f64, (row as f64 + 0.5) / GRID as f64, PLANT_W, PLANT_H);
    let t = inverse_decode(&target, (col, row), scale.anchors[0], scale);

    let p = &mut params.convs[slot(29)];
    for (k, v) in t.iter().enumerate() {
        p.bias[k] = *v as f32;
    }
    let w = p.weight_index(4, 0, 0, 0);
    p.weights[w] = 40.0;
    p.bias[5] = 20.0;
    params
}

/// Box the planted network reports for a lit cell.
pub fn plant_box(col: usize, row: usize) -> BBox {
    BBox::new((col as f64 + 0.5) / GRID as f64, (row as f64 + 0.5) / GRID as f64, PLANT_W, PLANT_H)
}

/// Black `SIDE x SIDE` image with a 4x4 block of the given red level in the
/// middle of each listed stride-8 cell.
pub fn lit_image(cells: &[(usize, usize, u8)]) -> RgbImage {
    let mut img = RgbImage::new(SIDE, SIDE);
    for &(col, row, red) in cells {
        for y in row * 8 + 2..row * 8 + 6 {
            for x in col * 8 + 2..col * 8 + 6 {
                img.put(x, y, [red, 40, 40]);
            }
        }
    }
    img
}

pub struct PlantedModel {
    pub cfg: PathBuf,
    pub weights: PathBuf,
    pub names: PathBuf,
}

pub fn write_planted_model(dir: &Path) -> PlantedModel {
    let def = small_custom_def();
    let cfg = dir.join("drone.cfg");
    let weights = dir.join("drone.weights");
    let names = dir.join("drone.names");
    fs::write(&cfg, render_cfg(&def)).unwrap();
    fs::write(&weights, save_weights(&planted_params(&def))).unwrap();
    fs::write(&names, "Drone\n").unwrap();
    PlantedModel { cfg, weights, names }
}

/// Three-image validation set. Image `a` has one exact plant, `c` one plant
/// in the wrong place (a false positive and a miss) and `b` a plant whose
/// truth is 25% wider (IoU 0.8). Scores rank a > c > b.
pub fn write_eval_fixture(dir: &Path) -> (PlantedModel, PathBuf) {
    let model = write_planted_model(dir);
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&labels).unwrap();

    let cases: [(&str, (usize, usize, u8), GroundTruthLabel); 3] = [
        ("a", (3, 4, 255), GroundTruthLabel::new(0, 0.4375, 0.5625, 0.1, 0.1)),
        ("b", (5, 2, 204), GroundTruthLabel::new(0, 0.6875, 0.3125, 0.125, 0.1)),
        ("c", (1, 1, 230), GroundTruthLabel::new(0, 0.8125, 0.8125, 0.1, 0.1)),
    ];
    let mut list = String::new();
    for (name, cell, truth) in cases {
        let img = images.join(format!("{name}.ppm"));
        save_ppm(&lit_image(&[cell]), &img).unwrap();
        fs::write(labels.join(format!("{name}.txt")), render_label_file(&[truth])).unwrap();
        list.push_str(&format!("images/{name}.ppm\n"));
    }
    let valid = dir.join("valid.txt");
    fs::write(&valid, list).unwrap();
    fs::write(dir.join("drone.data"), "classes = 1\nvalid = valid.txt\nnames = drone.names\nbackup = backup/\n").unwrap();
    (model, valid)
}

/// Parses `  name: 97.00% cx=.. cy=.. w=.. h=..` lines of `detect` output.
pub fn parse_detect_boxes(stdout: &str) -> Vec<(String, f64, [f64; 4])> {
    stdout
        .lines()
        .filter(|l| l.starts_with("  "))
        .map(|l| {
            let (name, rest) = l.trim().split_once(": ").unwrap();
            let mut it = rest.split_whitespace();
            let score: f64 = it.next().unwrap().trim_end_matches('%').parse().unwrap();
            let mut v = [0.0; 4];
            for (slot, field) in v.iter_mut().zip(it) {
                *slot = field.split_once('=').unwrap().1.parse().unwrap();
            }
            (name.to_string(), score / 100.0, v)
        })
        .collect()
}
