//! Kernel-weighted moving average and moving variance of pixel intensities.

use rayon::prelude::*;

use crate::error::Result;
use crate::image::GreyImage;
use crate::kernel::Kernel;
use crate::sms::{check_window, MeanWindow, SmsImage, SmsKind};

fn wrap(kind: SmsKind, w: usize, img: &GreyImage, values: Vec<f64>) -> Result<SmsImage> {
    let margin = (w + 1) / 2;
    Ok(SmsImage {
        kind,
        w,
        values: GreyImage::new(img.rows() - 2 * margin, img.cols() - 2 * margin, values)?,
        margin,
        offset_row: margin,
        offset_col: margin,
        source_rows: img.rows(),
        source_cols: img.cols(),
    })
}

/// Kernel-weighted moving average.
pub fn epwma_sms(img: &GreyImage, w: usize) -> Result<SmsImage> {
    check_window(w, w + 2, img.rows(), img.cols())?;
    let margin = (w + 1) / 2;
    let kernel = Kernel::new(w);
    let (rows, cols) = (img.rows() - 2 * margin, img.cols() - 2 * margin);
    let mut v = kernel.weighted_sums(img.pixels(), img.cols(), margin, margin, rows, cols);
    v.iter_mut().for_each(|x| *x /= kernel.sum());
    wrap(SmsKind::Epwma, w, img, v)
}

/// Kernel-weighted moving variance around the unweighted local mean.
pub fn epwmv_sms(img: &GreyImage, w: usize, mean_window: MeanWindow) -> Result<SmsImage> {
    check_window(w, w + 2, img.rows(), img.cols())?;
    let margin = (w + 1) / 2;
    let kernel = Kernel::new(w);
    let reach = kernel.reach() as isize;
    let weights = kernel.points();
    let mean_points: Vec<(isize, isize)> = match mean_window {
        MeanWindow::Disk => weights.iter().map(|&(h, m, _)| (h, m)).collect(),
        MeanWindow::Square => (-reach..=reach).flat_map(|h| (-reach..=reach).map(move |m| (h, m))).collect(),
    };
    let (rows, cols) = (img.rows() - 2 * margin, img.cols() - 2 * margin);
    let src = img.pixels();
    let stride = img.cols() as isize;
    let ksum = kernel.sum();
    let count = mean_points.len() as f64;
    let mut out = vec![0.0; rows * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(i, line)| {
        for (j, o) in line.iter_mut().enumerate() {
            let centre = (i + margin) as isize * stride + (j + margin) as isize;
            let mean = mean_points.iter().map(|&(h, m)| src[(centre - h * stride - m) as usize]).sum::<f64>() / count;
            let mut acc = 0.0;
            for &(h, m, k) in weights {
                let d = src[(centre - h * stride - m) as usize] - mean;
                acc += k * d * d;
            }
            *o = acc / ksum;
        }
    });
    wrap(SmsKind::Epwmv, w, img, out)
}
