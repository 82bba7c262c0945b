//! Network input channels built from laser scans: the projected depth image
//! (proj-d), the column-filled reference depth map (ref-d), scan dropout for
//! sparsity sweeps, and dataset-level scan-row statistics.

use std::path::{Path, PathBuf};

use crate::geometry::{LaserScan, PixelHit};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Debug, thiserror::Error)]
pub enum EncodingError {
    #[error("scan_row_stats: no image with hits (skipped {0})")]
    NoUsableImages(usize),
    #[error("png write {path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Which depth encoding (if any) rides along with RGB, and therefore which
/// head/loss the network uses downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    ProjD,
    RefD,
    RgbOnly,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::RgbOnly => 3,
            _ => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::ProjD => "proj-d",
            InputMode::RefD => "ref-d",
            InputMode::RgbOnly => "rgb-only",
        }
    }
}

/// H×W grid of depths in meters; 0.0 encodes "no measurement".
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> DepthImage<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        DepthImage {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    /// Wraps row-major data. Panics on length mismatch or on values that
    /// violate the depth contract (negative or non-finite).
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "depth image data length");
        for &d in &data {
            assert!(
                d >= T::zero() && d.is_finite(),
                "depth values must be finite and >= 0, got {d}"
            );
        }
        DepthImage {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, v: usize, u: usize) -> T {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, v: usize, u: usize, d: T) {
        self.data[v * self.width + u] = d;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn n_nonzero(&self) -> usize {
        self.data.iter().filter(|&&d| d > T::zero()).count()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.height, self.width], self.data.clone())
    }

    /// Reinterprets a rank-2 tensor as a depth image (validating values).
    pub fn from_tensor(t: &Tensor<T>) -> Self {
        assert_eq!(t.rank(), 2, "depth image tensor must be rank 2");
        Self::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> DepthImage<U> {
        DepthImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&d| U::of(d.f64())).collect(),
        }
    }
}

/// RGB (+ optional depth) stack ready for the network, C×H×W.
#[derive(Clone, Debug)]
pub struct InputTensor<T> {
    pub tensor: Tensor<T>,
    pub mode: InputMode,
}

/// Rasterizes projected hits into a sparse depth image. Panics on an
/// out-of-bounds hit: projection upstream guarantees bounds, so such a hit
/// is a bug, not data.
pub fn make_proj_d<T: Scalar>(hits: &[PixelHit<T>], height: usize, width: usize) -> DepthImage<T> {
    let mut img = DepthImage::zeros(height, width);
    for h in hits {
        assert!(
            h.u < width && h.v < height,
            "hit ({}, {}) outside {}x{} image",
            h.u,
            h.v,
            width,
            height
        );
        img.set(h.v, h.u, h.depth);
    }
    img
}

/// Column fill along the gravity (v) axis: every pixel of a column with at
/// least one measurement takes the depth of the vertically nearest nonzero
/// pixel (tie → smaller depth). Empty columns stay zero.
pub fn make_ref_d<T: Scalar>(proj_d: &DepthImage<T>) -> DepthImage<T> {
    let (h, w) = (proj_d.height, proj_d.width);
    let mut out = DepthImage::zeros(h, w);
    let mut hits: Vec<(usize, T)> = Vec::new();
    for u in 0..w {
        hits.clear();
        for v in 0..h {
            let d = proj_d.get(v, u);
            if d > T::zero() {
                hits.push((v, d));
            }
        }
        if hits.is_empty() {
            continue;
        }
        // hits is sorted by v; for each row the nearest hit is one of the
        // two neighbors around the insertion point.
        for v in 0..h {
            let i = hits.partition_point(|&(hv, _)| hv < v);
            let below = i.checked_sub(1).map(|j| hits[j]);
            let above = hits.get(i).copied();
            let d = match (below, above) {
                (Some((bv, bd)), Some((av, ad))) => {
                    let (db, da) = (v - bv, av - v);
                    if db < da {
                        bd
                    } else if da < db {
                        ad
                    } else if bd <= ad {
                        bd
                    } else {
                        ad
                    }
                }
                (Some((_, bd)), None) => bd,
                (None, Some((_, ad))) => ad,
                (None, None) => unreachable!(),
            };
            out.set(v, u, d);
        }
    }
    out
}

/// Invalidates a random subset of valid beams so that exactly
/// ⌈keep_fraction·N_valid⌉ stay valid. Deterministic for a fixed seed;
/// angles and ranges are untouched.
pub fn dropout_scan<S: Scalar>(scan: &LaserScan<S>, keep_fraction: f64, seed: u64) -> LaserScan<S> {
    assert!(
        (0.0..=1.0).contains(&keep_fraction),
        "keep_fraction {keep_fraction} outside [0,1]"
    );
    let valid_idx: Vec<usize> = (0..scan.len()).filter(|&i| scan.valid()[i]).collect();
    let n_keep = ceil_count(keep_fraction, valid_idx.len());
    let mut shuffled = valid_idx.clone();
    shuffled.shuffle(&mut rng_from(seed));
    let mut out = scan.clone();
    for &i in &shuffled[n_keep..] {
        out.invalidate(i);
    }
    out
}

/// ⌈f·n⌉ with a snap-to-integer guard: decimal fractions like 0.37 are not
/// exactly representable, and a bare ceil would bump 37.0000000000000018 to
/// 38.
fn ceil_count(f: f64, n: usize) -> usize {
    let x = f * n as f64;
    let r = x.round();
    let exact = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    exact as usize
}

/// Stacks RGB and a depth channel into a 4×H×W input. `mode` must be one of
/// the depth-bearing encodings.
pub fn assemble_input<T: Scalar>(
    rgb: &Tensor<T>,
    depth_channel: &DepthImage<T>,
    mode: InputMode,
) -> InputTensor<T> {
    assert!(
        mode != InputMode::RgbOnly,
        "rgb-only inputs carry no depth channel; use rgb_only_input"
    );
    let shape = rgb.shape();
    assert!(
        shape.len() == 3 && shape[0] == 3,
        "rgb must be 3xHxW, got {shape:?}"
    );
    let (h, w) = (shape[1], shape[2]);
    assert!(
        depth_channel.height() == h && depth_channel.width() == w,
        "depth channel {}x{} does not match rgb {h}x{w}",
        depth_channel.height(),
        depth_channel.width()
    );
    for &x in rgb.data() {
        assert!(
            x >= T::zero() && x <= T::one(),
            "rgb values must lie in [0,1], got {x}"
        );
    }
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(rgb.data());
    data.extend_from_slice(depth_channel.data());
    InputTensor {
        tensor: Tensor::from_vec(&[4, h, w], data),
        mode,
    }
}

/// RGB-only variant (3×H×W, no depth channel).
pub fn rgb_only_input<T: Scalar>(rgb: &Tensor<T>) -> InputTensor<T> {
    let shape = rgb.shape();
    assert!(
        shape.len() == 3 && shape[0] == 3,
        "rgb must be 3xHxW, got {shape:?}"
    );
    InputTensor {
        tensor: rgb.clone(),
        mode: InputMode::RgbOnly,
    }
}

/// Distribution of the top edge of the scan band across a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowStats {
    pub mean_min_v: f64,
    pub std_min_v: f64,
    /// 5th percentile of min-v (nearest-rank), lower edge of the central 90%.
    pub p10_low: f64,
    /// 95th percentile of min-v (nearest-rank), upper edge of the central 90%.
    pub p10_high: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

/// Per image takes the minimum v among nonzero pixels, then reports mean,
/// population std, and the central-90% band. Images without hits are skipped
/// and counted.
pub fn scan_row_stats<T: Scalar>(proj_d_list: &[DepthImage<T>]) -> Result<RowStats, EncodingError> {
    let mut min_vs: Vec<usize> = Vec::new();
    let mut skipped = 0usize;
    for img in proj_d_list {
        let mut min_v = None;
        'rows: for v in 0..img.height() {
            for u in 0..img.width() {
                if img.get(v, u) > T::zero() {
                    min_v = Some(v);
                    break 'rows;
                }
            }
        }
        match min_v {
            Some(v) => min_vs.push(v),
            None => skipped += 1,
        }
    }
    if min_vs.is_empty() {
        return Err(EncodingError::NoUsableImages(skipped));
    }
    let n = min_vs.len();
    let mean = min_vs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = min_vs
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n as f64;
    min_vs.sort_unstable();
    Ok(RowStats {
        mean_min_v: mean,
        std_min_v: var.sqrt(),
        p10_low: nearest_rank(&min_vs, 5.0) as f64,
        p10_high: nearest_rank(&min_vs, 95.0) as f64,
        n_used: n,
        n_skipped: skipped,
    })
}

fn nearest_rank(sorted: &[usize], percentile: f64) -> usize {
    let n = sorted.len();
    let rank = (percentile / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Writes a depth image as 16-bit grayscale PNG in millimeters
/// (value = round(depth·1000), 0 = no measurement).
pub fn depth_to_png16<T: Scalar>(depth: &DepthImage<T>, path: &Path) -> Result<(), EncodingError> {
    let pixels: Vec<u16> = depth
        .data()
        .iter()
        .map(|&d| (d.f64() * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_vec(
            depth.width() as u32,
            depth.height() as u32,
            pixels,
        )
        .expect("pixel buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| EncodingError::Png {
            path: path.to_path_buf(),
            source,
        })
}
