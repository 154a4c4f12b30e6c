//! Result tables and saliency overlays.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::tensor_to_rgb;
use crate::debugger::GridReport;
use crate::error::{Error, Result};
use crate::model::{Cnn, PredictionRecord};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecallRow {
    pub class_label: usize,
    pub class_name: String,
    pub original_recall: f64,
    pub debugged_recall: f64,
    pub change: f64,
}

/// Per-class recall before and after, sorted by change (largest gain first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallDeltaTable {
    pub rows: Vec<ClassRecallRow>,
}

impl RecallDeltaTable {
    pub fn top_improved(&self, k: usize) -> Vec<&ClassRecallRow> {
        self.rows
            .iter()
            .filter(|r| r.change > 0.0)
            .take(k)
            .collect()
    }

    /// Largest decreases first.
    pub fn top_decreased(&self, k: usize) -> Vec<&ClassRecallRow> {
        self.rows
            .iter()
            .rev()
            .filter(|r| r.change < 0.0)
            .take(k)
            .collect()
    }

    /// Improved/decreased sections, two-decimal cells.
    pub fn write_sections(&self, path: impl AsRef<Path>, k: usize) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "Section",
            "Class",
            "Original recall",
            "Debugged recall",
            "Change",
        ])?;
        for (section, rows) in [
            ("improved", self.top_improved(k)),
            ("decreased", self.top_decreased(k)),
        ] {
            for r in rows {
                w.write_record([
                    section.to_string(),
                    r.class_name.clone(),
                    format!("{:.2}", r.original_recall),
                    format!("{:.2}", r.debugged_recall),
                    format!("{:.2}", r.change),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_ranked(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["Class", "Original recall", "Debugged recall", "Change"])?;
        for r in &self.rows {
            w.write_record([
                r.class_name.clone(),
                format!("{:.4}", r.original_recall),
                format!("{:.4}", r.debugged_recall),
                format!("{:.4}", r.change),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn class_recalls<T: Scalar>(
    records: &[PredictionRecord<T>],
) -> Result<BTreeMap<usize, (usize, usize)>> {
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        let truth = r
            .true_class
            .ok_or_else(|| Error::Usage(format!("record {} has no true class", r.image_id)))?;
        let e = per_class.entry(truth).or_default();
        e.0 += usize::from(r.inferred_class == truth);
        e.1 += 1;
    }
    Ok(per_class)
}

pub fn class_recall_delta<T: Scalar>(
    base: &[PredictionRecord<T>],
    debugged: &[PredictionRecord<T>],
    class_names: &[String],
) -> Result<RecallDeltaTable> {
    let ids = |rs: &[PredictionRecord<T>]| {
        rs.iter()
            .map(|r| (r.image_id.clone(), r.true_class))
            .collect::<BTreeSet<_>>()
    };
    if base.len() != debugged.len() || ids(base) != ids(debugged) {
        return Err(Error::Usage(
            "base and debugged results do not cover the same test images".into(),
        ));
    }
    let before = class_recalls(base)?;
    let after = class_recalls(debugged)?;
    let mut rows: Vec<ClassRecallRow> = before
        .iter()
        .map(|(&c, &(hit, total))| {
            let (hit_after, _) = after[&c];
            let original_recall = hit as f64 / total as f64;
            let debugged_recall = hit_after as f64 / total as f64;
            ClassRecallRow {
                class_label: c,
                class_name: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                original_recall,
                debugged_recall,
                change: debugged_recall - original_recall,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.change
            .total_cmp(&a.change)
            .then(a.class_label.cmp(&b.class_label))
    });
    Ok(RecallDeltaTable { rows })
}

pub const TABLE2_HEADER: [&str; 5] = [
    "Model",
    "MC filters weight λ1",
    "Non-MC filters weight λ2",
    "Train acc. (%)",
    "Test acc. (%)",
];

/// Accuracy table of a λ sweep: base, fine-tuned, then one row per grid point.
pub fn write_table2<T: Scalar>(path: impl AsRef<Path>, grid: &GridReport<T>) -> Result<()> {
    let path = path.as_ref();
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE2_HEADER)?;
    w.write_record([
        "base".to_string(),
        "-".into(),
        "-".into(),
        pct(grid.base_train_accuracy),
        pct(grid.base_test_accuracy),
    ])?;
    w.write_record([
        "Fine-tuned".to_string(),
        "-".into(),
        "-".into(),
        pct(grid.fine_tuned.final_train_accuracy),
        pct(grid.fine_tuned.final_test_accuracy),
    ])?;
    for arm in &grid.arms {
        w.write_record([
            "debugged".to_string(),
            arm.lambda1.to_string(),
            arm.lambda2.to_string(),
            pct(arm.final_train_accuracy),
            pct(arm.final_test_accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Grad-CAM heatmap at input resolution, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// No positive evidence anywhere; the map is all zeros.
    pub uniform: bool,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Channel weights are the spatial mean of `d logit[class] / d maps`;
/// the map is the ReLU of the weighted channel sum, scaled by its maximum and
/// bilinearly upsampled to the input size.
pub fn grad_cam<T: Scalar>(net: &Cnn<T>, image: &Tensor3<T>, class: usize) -> Result<Heatmap> {
    let maps = net.final_maps(image)?;
    let grads = net.class_gradient_wrt_final_maps(class)?;
    let area = maps.plane_len() as f64;
    let weights: Vec<f64> = (0..maps.channels)
        .map(|k| grads.plane(k).iter().map(|g| g.as_f64()).sum::<f64>() / area)
        .collect();
    let mut cam = vec![0.0; maps.plane_len()];
    for (k, w) in weights.iter().enumerate() {
        for (c, a) in cam.iter_mut().zip(maps.plane(k)) {
            *c += w * a.as_f64();
        }
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    let max = cam.iter().copied().fold(0.0, f64::max);
    let uniform = !(max > 0.0);
    if uniform {
        log::warn!("Grad-CAM for class {class} has no positive evidence; emitting a uniform map");
        cam.iter_mut().for_each(|c| *c = 0.0);
    } else {
        cam.iter_mut().for_each(|c| *c /= max);
    }
    let (h, w) = (image.height, image.width);
    let values = bilinear(&cam, maps.height, maps.width, h, w);
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        uniform,
    })
}

fn bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, dlen: usize, slen: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * slen as f64 / dlen as f64 - 0.5).clamp(0.0, (slen - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(slen - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, dw, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

fn colormap(v: f64) -> [f64; 3] {
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Writes the input with its Grad-CAM heatmap alpha-blended on top, upscaled
/// by `scale` with nearest-neighbour sampling.
pub fn saliency_overlay<T: Scalar>(
    net: &Cnn<T>,
    image: &Tensor3<T>,
    class: usize,
    path: impl AsRef<Path>,
    alpha: f64,
    scale: u32,
) -> Result<Heatmap> {
    let path = path.as_ref();
    let heat = grad_cam(net, image, class)?;
    let base = tensor_to_rgb(image)?;
    let mut blended = RgbImage::new(base.width(), base.height());
    for (x, y, px) in blended.enumerate_pixels_mut() {
        let src = base.get_pixel(x, y).0;
        let c = colormap(heat.get(y as usize, x as usize));
        *px = Rgb(std::array::from_fn(|i| {
            ((1.0 - alpha) * src[i] as f64 + alpha * 255.0 * c[i])
                .round()
                .clamp(0.0, 255.0) as u8
        }));
    }
    let scale = scale.max(1);
    let out = imageops::resize(
        &blended,
        blended.width() * scale,
        blended.height() * scale,
        imageops::FilterType::Nearest,
    );
    out.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(heat)
}
