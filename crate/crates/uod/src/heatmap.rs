//! Heatmap codec: truncated-Gaussian encoding with exponential weighting and
//! threshold/connected-component decoding.
//!
//! Encoding writes, per landmark, a Gaussian bump truncated at radial
//! distance sigma. The exponential weighting `Y = (a^Y_raw - 1)/(a^m - 1)`
//! (with `m` the analytic peak `1/(sqrt(2 pi) sigma)`) sharpens the contrast
//! between near-peak pixels while keeping the background at exactly 0 and the
//! peak at exactly 1, which a binary cross-entropy target requires. The
//! mapping is strictly monotone, so argmax positions survive it unchanged.
//!
//! Decoding binarizes each map at a fraction of its maximum, finds
//! 4-connected components, keeps the one with the largest summed response
//! (ties: larger pixel count, then smaller row-major seed index), and returns
//! the response-weighted centroid. An all-zero map yields a per-landmark
//! error flag rather than a guessed coordinate.

use ndarray::{Array2, Array3};

use crate::domain::{DomainId, LandmarkSet};
use crate::error::{Result, UodError};

/// A stack of per-landmark response maps in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct HeatmapStack {
    /// `(num_landmarks, H, W)` response maps.
    pub maps: Array3<f64>,
    pub domain_id: DomainId,
    /// Truncation radius and Gaussian width, in pixels.
    pub sigma: f64,
    /// Exponential weighting base.
    pub alpha: f64,
}

/// The analytic Gaussian peak value `1/(sqrt(2 pi) sigma)`.
pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Raw truncated-Gaussian stack: `Y_raw(i, j) = peak * exp(-r^2 / (2 s^2))`
/// for radial distance `r <= sigma`, else 0; one map per landmark.
pub fn encode_gaussian(
    landmarks: &LandmarkSet,
    shape: (usize, usize),
    sigma: f64,
) -> Result<Array3<f64>> {
    if sigma <= 0.0 {
        return Err(UodError::validation(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = shape;
    let peak = gaussian_peak(sigma);
    let mut maps = Array3::zeros((landmarks.coords.len(), h, w));
    for (n, &(ci, cj)) in landmarks.coords.iter().enumerate() {
        if !(0.0..h as f64).contains(&ci) || !(0.0..w as f64).contains(&cj) {
            return Err(UodError::validation(format!(
                "landmark {n} at ({ci}, {cj}) outside image {h}x{w}"
            )));
        }
        let lo_i = (ci - sigma).floor().max(0.0) as usize;
        let hi_i = ((ci + sigma).ceil() as usize).min(h - 1);
        let lo_j = (cj - sigma).floor().max(0.0) as usize;
        let hi_j = ((cj + sigma).ceil() as usize).min(w - 1);
        for i in lo_i..=hi_i {
            for j in lo_j..=hi_j {
                let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                if r2 <= sigma * sigma {
                    maps[(n, i, j)] = peak * (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Ok(maps)
}

/// Exponential weighting normalized to `[0, 1]`: `(a^x - 1)/(a^m - 1)` with
/// `m` the analytic peak for `sigma`.
pub fn exponentiate(raw: &Array3<f64>, sigma: f64, alpha: f64) -> Result<Array3<f64>> {
    if alpha <= 1.0 {
        return Err(UodError::validation(format!("alpha must exceed 1, got {alpha}")));
    }
    if sigma <= 0.0 {
        return Err(UodError::validation(format!("sigma must be positive, got {sigma}")));
    }
    let m = gaussian_peak(sigma);
    let ln_a = alpha.ln();
    let den = (m * ln_a).exp_m1();
    Ok(raw.mapv(|x| (x * ln_a).exp_m1() / den))
}

/// Encode landmarks straight to a weighted [`HeatmapStack`].
pub fn encode_heatmaps(
    landmarks: &LandmarkSet,
    shape: (usize, usize),
    sigma: f64,
    alpha: f64,
) -> Result<HeatmapStack> {
    let raw = encode_gaussian(landmarks, shape, sigma)?;
    let maps = exponentiate(&raw, sigma, alpha)?;
    Ok(HeatmapStack { maps, domain_id: landmarks.domain_id, sigma, alpha })
}

/// Decode one response map: threshold at `ratio * max`, 4-connected
/// components, strongest component's weighted centroid. `None` when the map
/// is all zero.
pub fn decode_map(map: &Array2<f64>, threshold_ratio: f64) -> Option<(f64, f64)> {
    let (h, w) = map.dim();
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return None;
    }
    let threshold = threshold_ratio * max;
    let ms = map.as_slice().expect("standard layout");
    let mut visited = vec![false; h * w];

    struct Component {
        sum: f64,
        count: usize,
        seed: usize,
        ci: f64,
        cj: f64,
    }
    let mut best: Option<Component> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if visited[start] || ms[start] < threshold {
            continue;
        }
        // Flood-fill the 4-connected component seeded at `start` (the
        // smallest unvisited row-major index, by scan order).
        let mut comp = Component { sum: 0.0, count: 0, seed: start, ci: 0.0, cj: 0.0 };
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let v = ms[p];
            comp.sum += v;
            comp.count += 1;
            comp.ci += v * i as f64;
            comp.cj += v * j as f64;
            let mut try_push = |q: usize| {
                if !visited[q] && ms[q] >= threshold {
                    visited[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                try_push(p - w);
            }
            if i + 1 < h {
                try_push(p + w);
            }
            if j > 0 {
                try_push(p - 1);
            }
            if j + 1 < w {
                try_push(p + 1);
            }
        }
        let better = match &best {
            None => true,
            Some(b) => {
                comp.sum > b.sum
                    || (comp.sum == b.sum && comp.count > b.count)
                    || (comp.sum == b.sum && comp.count == b.count && comp.seed < b.seed)
            }
        };
        if better {
            best = Some(comp);
        }
    }
    best.map(|c| (c.ci / c.sum, c.cj / c.sum))
}

/// Decode every map of a stack. Entry `n` is `None` when map `n` is all zero
/// (the caller decides how to report the failed landmark).
pub fn decode_landmarks(
    maps: &Array3<f64>,
    threshold_ratio: f64,
) -> Result<Vec<Option<(f64, f64)>>> {
    if maps.shape()[0] == 0 {
        return Err(UodError::validation("empty heatmap stack"));
    }
    if !(0.0..1.0).contains(&threshold_ratio) || threshold_ratio <= 0.0 {
        return Err(UodError::validation(format!(
            "threshold ratio must lie in (0, 1), got {threshold_ratio}"
        )));
    }
    Ok((0..maps.shape()[0])
        .map(|n| decode_map(&maps.index_axis(ndarray::Axis(0), n).to_owned(), threshold_ratio))
        .collect())
}

/// Per-landmark Euclidean error of `decode(exponentiate(encode(L)))` vs `L`.
pub fn roundtrip_error(
    landmarks: &LandmarkSet,
    shape: (usize, usize),
    sigma: f64,
    alpha: f64,
    threshold_ratio: f64,
) -> Result<Vec<f64>> {
    let stack = encode_heatmaps(landmarks, shape, sigma, alpha)?;
    let decoded = decode_landmarks(&stack.maps, threshold_ratio)?;
    landmarks
        .coords
        .iter()
        .zip(decoded)
        .enumerate()
        .map(|(n, (&(i, j), d))| {
            let (di, dj) =
                d.ok_or_else(|| UodError::numeric(format!("landmark {n} decoded empty")))?;
            Ok(((di - i).powi(2) + (dj - j).powi(2)).sqrt())
        })
        .collect()
}
