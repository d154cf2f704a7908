use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One `class cx cy w h` row of a YOLO label file, box in image fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthLabel {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        GroundTruthLabel { class_id, cx, cy, w, h }
    }

    pub fn bbox(&self) -> crate::postprocess::BBox {
        crate::postprocess::BBox::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        for (name, v) in [("x_center", self.cx), ("y_center", self.cy), ("width", self.w), ("height", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("label {name} = {v} is outside [0, 1]")));
            }
        }
        if let Some(n) = classes {
            if self.class_id >= n {
                return Err(Error::Validation(format!("label class {} but only {n} classes", self.class_id)));
            }
        }
        Ok(())
    }
}

pub fn parse_label_file(text: &str) -> Result<Vec<GroundTruthLabel>> {
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::parse(line, format!("expected 5 fields, got {}", fields.len())));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::parse(line, format!("class id `{}` is not a non-negative integer", fields[0])))?;
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| Error::parse(line, format!("`{f}` is not a number")))?;
        }
        let label = GroundTruthLabel::new(class_id, vals[0], vals[1], vals[2], vals[3]);
        label
            .validate(None)
            .map_err(|e| Error::Validation(format!("line {line}: {}", e.to_string().trim_start_matches("validation error: "))))?;
        labels.push(label);
    }
    Ok(labels)
}

/// Six decimal places per field, one label per line.
pub fn render_label_file(labels: &[GroundTruthLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{} {:.6} {:.6} {:.6} {:.6}", l.class_id, l.cx, l.cy, l.w, l.h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_row() {
        let labels = parse_label_file("0 0.5 0.5 0.2 0.1\n").unwrap();
        assert_eq!(labels, vec![GroundTruthLabel::new(0, 0.5, 0.5, 0.2, 0.1)]);
    }

    #[test]
    fn empty_and_multi_row() {
        assert!(parse_label_file("").unwrap().is_empty());
        let labels = parse_label_file("0 0.1 0.2 0.3 0.4\n\n0 0.9 0.8 0.05 0.05\n").unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[1].cx, 0.9);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(parse_label_file("0 0.5 0.5 0.2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_label_file("0 0.5 0.5 0.2 0.1\nx 1 1 1 1\n"), Err(Error::Parse { line: 2, .. })));
        match parse_label_file("0 0.5 1.5 0.2 0.1\n") {
            Err(Error::Validation(msg)) => assert!(msg.starts_with("line 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(rows in prop::collection::vec((0usize..5, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64), 0..10)) {
            let labels: Vec<_> = rows.iter().map(|&(c, a, b, w, h)| GroundTruthLabel::new(c, a, b, w, h)).collect();
            let back = parse_label_file(&render_label_file(&labels)).unwrap();
            prop_assert_eq!(back.len(), labels.len());
            for (x, y) in back.iter().zip(&labels) {
                prop_assert_eq!(x.class_id, y.class_id);
                for (p, q) in [(x.cx, y.cx), (x.cy, y.cy), (x.w, y.w), (x.h, y.h)] {
                    prop_assert!((p - q).abs() <= 5e-7);
                }
            }
        }
    }
}
