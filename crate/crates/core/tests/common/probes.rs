//! Impulse probes of the network structure.

use cfekit::network::{ArchConfig, ArchVariant, Detector, TAP_NAMES};
use cfekit::tensor::Tensor;

pub const TAP_STRIDES: [usize; 3] = [8, 16, 32];

/// Positive, fan-in normalized weights and identity batch norms: every ReLU
/// stays active and every pooling window propagates an upward bump.
pub fn make_monotone<'a>(params: impl Iterator<Item = &'a mut cfekit::params::Param<f64>>) {
    for p in params {
        let shape = p.value.shape();
        if p.name.ends_with(".weight") {
            let fan = (shape[1] * shape[2] * shape[3]) as f64;
            p.value.data_mut().fill(1.0 / fan);
        } else if p.name.ends_with(".bias") {
            p.value.data_mut().fill(0.01);
        } else if p.name.ends_with(".gamma") || p.name.ends_with(".running_var") {
            p.value.data_mut().fill(1.0);
        } else if p.name.ends_with(".beta") || p.name.ends_with(".running_mean") {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Horizontal and vertical extent, in input pixels, of the region that can
/// move the centre cell of each tap's class logits.
/// Each extent comes with a flag telling whether the image border cut it.
pub fn empirical_extents(det: &Detector<f64>, size: usize) -> [[(usize, bool); 2]; 3] {
    let mut out = [[(0, false); 2]; 3];
    for axis in 0..2 {
        let base = Tensor::full([1, 3, size, size], 0.5);
        let reference = det.forward_features(&base).unwrap();
        for (t, stride) in TAP_STRIDES.iter().enumerate() {
            let cells = size / stride;
            let cell = cells / 2;
            // a line through the middle of the cell's window
            let line = cell * stride + stride / 2;
            let bumped: Vec<Tensor<f64>> = (0..size)
                .map(|i| {
                    let mut b = base.clone();
                    let (y, x) = if axis == 0 { (line, i) } else { (i, line) };
                    for ch in 0..3 {
                        b.set(0, ch, y, x, 1.5);
                    }
                    b
                })
                .collect();
            let batch = Tensor::stack(&bumped.iter().collect::<Vec<_>>()).unwrap();
            let outs = det.forward_features(&batch).unwrap();
            let r = reference[t].class_logits.at(0, 0, cell, cell);
            let moved: Vec<usize> = (0..size).filter(|&i| outs[t].class_logits.at(i, 0, cell, cell) != r).collect();
            let (lo, hi) = (moved[0], *moved.last().unwrap());
            assert_eq!(moved.len(), hi - lo + 1, "holes in the receptive field");
            out[t][axis] = (hi - lo + 1, lo == 0 || hi == size - 1);
        }
    }
    out
}

/// Compares the measured receptive field of every tap of every variant with
/// the analytic one. Returns how many unclipped fields matched exactly.
pub fn receptive_field_cases(size: usize) -> Result<usize, String> {
    let mut compared = 0;
    for v in ArchVariant::ALL {
        let cfg = ArchConfig::new(v, size, 1).with_widths([4, 8, 8]);
        let mut det = Detector::<f64>::new(&cfg, 0).map_err(|e| e.to_string())?;
        make_monotone(det.store.iter_mut());
        let extents = empirical_extents(&det, size);
        for (t, name) in TAP_NAMES.iter().enumerate() {
            // the 3×3 head adds one tap stride on each side
            let analytic = det.net.receptive_field_of(name).map_err(|e| e.to_string())? + 2 * TAP_STRIDES[t];
            for (e, clipped) in extents[t] {
                if clipped {
                    if e > analytic {
                        return Err(format!("{v} {name}: clipped field {e} exceeds analytic {analytic}"));
                    }
                } else if e != analytic {
                    return Err(format!("{v} {name}: measured {e}, analytic {analytic}"));
                } else {
                    compared += 1;
                }
            }
        }
    }
    Ok(compared)
}
