//! The seven sensor-window transformations and augmentation-type labels
//! for the self-supervised task.
//!
//! Every transform maps a `[c, 1, w]` window to a window of the same shape
//! and is a pure function of (window, params, rng stream). Batch
//! augmentation derives one child stream per window from the master seed
//! and the window's index, so results do not depend on execution order.

use crate::data::SensorWindow;
use crate::error::{Error, Result};
use crate::rng::{self, salt};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};

/// Transform identity; the codes double as self-supervision labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Original,
    Rotation,
    Permutation,
    TimeWarp,
    Scale,
    MagnitudeWarp,
    Jitter,
    RandomSample,
}

/// Number of self-supervision classes (original plus seven transforms).
pub const N_AUG_CLASSES: usize = 8;

/// The seven actual transforms, in code order 1..=7.
pub const TRANSFORMS: [AugmentationKind; 7] = [
    AugmentationKind::Rotation,
    AugmentationKind::Permutation,
    AugmentationKind::TimeWarp,
    AugmentationKind::Scale,
    AugmentationKind::MagnitudeWarp,
    AugmentationKind::Jitter,
    AugmentationKind::RandomSample,
];

impl AugmentationKind {
    /// Stable label code in `[0, 8)`.
    pub fn code(self) -> usize {
        match self {
            AugmentationKind::Original => 0,
            AugmentationKind::Rotation => 1,
            AugmentationKind::Permutation => 2,
            AugmentationKind::TimeWarp => 3,
            AugmentationKind::Scale => 4,
            AugmentationKind::MagnitudeWarp => 5,
            AugmentationKind::Jitter => 6,
            AugmentationKind::RandomSample => 7,
        }
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Ok(match code {
            0 => AugmentationKind::Original,
            1 => AugmentationKind::Rotation,
            2 => AugmentationKind::Permutation,
            3 => AugmentationKind::TimeWarp,
            4 => AugmentationKind::Scale,
            5 => AugmentationKind::MagnitudeWarp,
            6 => AugmentationKind::Jitter,
            7 => AugmentationKind::RandomSample,
            _ => return Err(Error::Input(format!("augmentation code {code} out of range [0, 8)"))),
        })
    }
}

/// Knot counts and noise scales for the transform family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub perm_segments: usize,
    pub timewarp_knots: usize,
    pub timewarp_sigma: f64,
    pub scale_sigma: f64,
    pub magwarp_knots: usize,
    pub magwarp_sigma: f64,
    pub jitter_sigma: f64,
    /// Subsample count for random sampling; defaults to `w / 2`.
    pub randsample_points: Option<usize>,
    /// Draw an independent rotation per sensor triad instead of one rigid
    /// rotation shared by all triads.
    pub per_triad_rotation: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            perm_segments: 4,
            timewarp_knots: 4,
            timewarp_sigma: 0.2,
            scale_sigma: 0.1,
            magwarp_knots: 4,
            magwarp_sigma: 0.2,
            jitter_sigma: 0.05,
            randsample_points: None,
            per_triad_rotation: false,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        for (name, v) in [
            ("timewarp_sigma", self.timewarp_sigma),
            ("scale_sigma", self.scale_sigma),
            ("magwarp_sigma", self.magwarp_sigma),
            ("jitter_sigma", self.jitter_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("perm_segments", self.perm_segments),
            ("timewarp_knots", self.timewarp_knots),
            ("magwarp_knots", self.magwarp_knots),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.perm_segments > window_len {
            return Err(Error::Config(format!(
                "perm_segments {} exceeds window length {window_len}",
                self.perm_segments
            )));
        }
        let pts = self.randsample_points.unwrap_or(window_len / 2);
        if pts < 2 || pts > window_len {
            return Err(Error::Config(format!(
                "randsample_points {pts} outside [2, {window_len}]"
            )));
        }
        Ok(())
    }
}

fn window_dims(window: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = window.shape();
    if s.len() != 3 || s[1] != 1 {
        return Err(Error::dim(op, format!("expected [c, 1, w] window, got {s:?}")));
    }
    Ok((s[0], s[2]))
}

// ── natural cubic spline ────────────────────────────────────────────

/// Natural cubic spline through `(xs[i], ys[i])`; xs strictly increasing.
struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    fn fit(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        debug_assert_eq!(n, ys.len());
        let mut second = vec![0.0; n];
        if n > 2 {
            // Thomas solve of the tridiagonal system for interior knots.
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut lower = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                lower[i] = h0;
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            for i in 1..m {
                let w = lower[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (1..m).rev() {
                second[i] = (rhs[i - 1] - upper[i - 1] * second[i + 1]) / diag[i - 1];
            }
        }
        Self { xs, ys, second }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 {
            return self.ys[0];
        }
        let x = x.clamp(self.xs[0], self.xs[n - 1]);
        let mut i = match self.xs.binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
            Ok(idx) => idx.min(n - 2),
            Err(idx) => idx.saturating_sub(1).min(n - 2),
        };
        if x < self.xs[i] && i > 0 {
            i -= 1;
        }
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h
                / 6.0
    }
}

fn even_anchors(w: usize, knots: usize) -> Vec<f64> {
    if knots == 1 {
        return vec![0.0];
    }
    (0..knots)
        .map(|i| i as f64 * (w - 1) as f64 / (knots - 1) as f64)
        .collect()
}

/// Smooth curve through `knots` Gaussian values N(mean, sigma²) at evenly
/// spaced anchors, sampled at every integer position in `[0, w)`.
fn spline_curve(w: usize, knots: usize, mean: f64, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let xs = even_anchors(w, knots);
    let ys: Vec<f64> = (0..knots)
        .map(|_| mean + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let spline = CubicSpline::fit(xs, ys);
    (0..w).map(|t| spline.eval(t as f64)).collect()
}

fn interp(values: &[f64], pos: f64) -> f64 {
    let last = values.len() - 1;
    let p = pos.clamp(0.0, last as f64);
    let i = (p.floor() as usize).min(last.saturating_sub(1));
    if values.len() == 1 {
        return values[0];
    }
    let frac = p - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}

/// Linear interpolation of (xs, ys) samples onto every integer in `[0, w)`;
/// xs strictly increasing and spanning `[0, w-1]`.
fn interp_at_integers(xs: &[f64], ys: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; w];
    let mut seg = 0usize;
    for (t, o) in out.iter_mut().enumerate() {
        let x = t as f64;
        while seg + 2 < xs.len() && xs[seg + 1] < x {
            seg += 1;
        }
        let (x0, x1) = (xs[seg], xs[seg + 1]);
        let frac = if x1 > x0 { ((x - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 0.0 };
        *o = ys[seg] + frac * (ys[seg + 1] - ys[seg]);
    }
    out
}

// ── transforms ──────────────────────────────────────────────────────

/// Rotation matrix for a unit axis and angle (Rodrigues form).
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Apply a fixed 3-D rotation to every consecutive channel triple.
pub fn rotate_with(window: &Tensor, r: &[[f64; 3]; 3]) -> Result<Tensor> {
    let (c, w) = window_dims(window, "rotate")?;
    if c % 3 != 0 {
        return Err(Error::Input(format!(
            "rotation needs triaxial channel groups (c divisible by 3) but c = {c}; \
             disable rotation for this dataset"
        )));
    }
    let x = window.data();
    let mut out = vec![0.0; c * w];
    for g in 0..c / 3 {
        for t in 0..w {
            let v = [x[(3 * g) * w + t], x[(3 * g + 1) * w + t], x[(3 * g + 2) * w + t]];
            for row in 0..3 {
                out[(3 * g + row) * w + t] =
                    r[row][0] * v[0] + r[row][1] * v[1] + r[row][2] * v[2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let axis = loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    rotation_matrix(axis, angle)
}

/// Rotate each channel triad by a random 3-D rotation (one shared rotation
/// per window unless `per_triad_rotation` is set).
pub fn rotate(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, w) = window_dims(window, "rotate")?;
    if c % 3 != 0 {
        return Err(Error::Input(format!(
            "rotation needs triaxial channel groups (c divisible by 3) but c = {c}; \
             disable rotation for this dataset"
        )));
    }
    if !params.per_triad_rotation {
        return rotate_with(window, &random_rotation(rng));
    }
    let x = window.data();
    let mut out = vec![0.0; c * w];
    for g in 0..c / 3 {
        let r = random_rotation(rng);
        for t in 0..w {
            let v = [x[(3 * g) * w + t], x[(3 * g + 1) * w + t], x[(3 * g + 2) * w + t]];
            for row in 0..3 {
                out[(3 * g + row) * w + t] =
                    r[row][0] * v[0] + r[row][1] * v[1] + r[row][2] * v[2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

/// Bounds of `n` near-equal time segments; the remainder is spread over
/// the leading segments.
pub fn segment_bounds(w: usize, n: usize) -> Vec<(usize, usize)> {
    let base = w / n;
    let rem = w % n;
    let mut bounds = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < rem);
        bounds.push((start, start + len));
        start += len;
    }
    bounds
}

/// Reorder segments so output slot `k` holds source segment `order[k]`,
/// the same order for every channel.
pub fn permute_with(window: &Tensor, order: &[usize]) -> Result<Tensor> {
    let (c, w) = window_dims(window, "permute")?;
    let n = order.len();
    if n == 0 || n > w {
        return Err(Error::Input(format!("segment count {n} outside [1, {w}]")));
    }
    let bounds = segment_bounds(w, n);
    let x = window.data();
    let mut out = vec![0.0; c * w];
    for ch in 0..c {
        let mut dst = ch * w;
        for &src_seg in order {
            let (s, e) = bounds[src_seg];
            for t in s..e {
                out[dst] = x[ch * w + t];
                dst += 1;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

/// Slice the window into `perm_segments` segments and reorder them by a
/// uniformly random permutation.
pub fn permute(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    let (_, w) = window_dims(window, "permute")?;
    let n = params.perm_segments;
    if n > w {
        return Err(Error::Input(format!("perm_segments {n} exceeds window length {w}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    permute_with(window, &order)
}

/// Smoothly distort the time axis: fit a spline of rates through knots
/// ~ N(1, σ²) clamped below at 0.1, integrate into a cumulative map
/// rescaled so the endpoints stay pinned, then resample each channel.
pub fn time_warp(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, w) = window_dims(window, "time_warp")?;
    if w < 4 {
        return Err(Error::Input(format!("time_warp requires w >= 4, got {w}")));
    }
    let anchors = even_anchors(w, params.timewarp_knots);
    let knots: Vec<f64> = (0..params.timewarp_knots)
        .map(|_| (1.0 + params.timewarp_sigma * rng.sample::<f64, _>(StandardNormal)).max(0.1))
        .collect();
    let spline = CubicSpline::fit(anchors, knots);
    let rates: Vec<f64> = (0..w).map(|t| spline.eval(t as f64)).collect();
    let mut cum = vec![0.0; w];
    for t in 1..w {
        cum[t] = cum[t - 1] + rates[t];
        if cum[t] <= cum[t - 1] {
            // Clamping is on the knots; a spline undershooting to a
            // non-positive rate would break the map here.
            return Err(Error::Internal(format!(
                "time_warp cumulative map non-monotone at position {t}"
            )));
        }
    }
    let scale = (w - 1) as f64 / cum[w - 1];
    let x = window.data();
    let mut out = vec![0.0; c * w];
    for ch in 0..c {
        let row = &x[ch * w..(ch + 1) * w];
        out[ch * w] = row[0];
        out[(ch + 1) * w - 1] = row[w - 1];
        for t in 1..w - 1 {
            out[ch * w + t] = interp(row, cum[t] * scale);
        }
    }
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

/// Multiply the whole window by one random scalar ~ N(1, scale_sigma²).
pub fn scale(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    window_dims(window, "scale")?;
    let s = 1.0 + params.scale_sigma * rng.sample::<f64, _>(StandardNormal);
    Ok(window.map(|v| v * s))
}

/// Multiply each channel by its own smooth curve ~ spline(N(1, σ²)).
pub fn magnitude_warp(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, w) = window_dims(window, "magnitude_warp")?;
    if w < 4 {
        return Err(Error::Input(format!("magnitude_warp requires w >= 4, got {w}")));
    }
    let x = window.data();
    let mut out = vec![0.0; c * w];
    for ch in 0..c {
        let curve = spline_curve(w, params.magwarp_knots, 1.0, params.magwarp_sigma, rng);
        for t in 0..w {
            out[ch * w + t] = x[ch * w + t] * curve[t];
        }
    }
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

/// Add i.i.d. Gaussian noise N(0, jitter_sigma²) per element.
pub fn jitter(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, w) = window_dims(window, "jitter")?;
    let x = window.data();
    let out = (0..c * w)
        .map(|i| x[i] + params.jitter_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

/// Keep a sorted random subset of timestamps (always including both
/// endpoints) and linearly interpolate back to the full grid.
pub fn random_sample(window: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, w) = window_dims(window, "random_sample")?;
    let m = params.randsample_points.unwrap_or(w / 2);
    if m < 2 || m > w {
        return Err(Error::Input(format!("randsample_points {m} outside [2, {w}]")));
    }
    let mut keep: Vec<usize> = Vec::with_capacity(m);
    keep.push(0);
    if m > 2 {
        let mut interior: Vec<usize> = (1..w - 1).collect();
        for i in 0..(m - 2) {
            let j = rng.random_range(i..interior.len());
            interior.swap(i, j);
        }
        let mut chosen: Vec<usize> = interior[..m - 2].to_vec();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.push(w - 1);
    let xs: Vec<f64> = keep.iter().map(|&t| t as f64).collect();
    let x = window.data();
    let mut out = vec![0.0; c * w];
    for ch in 0..c {
        let ys: Vec<f64> = keep.iter().map(|&t| x[ch * w + t]).collect();
        let filled = interp_at_integers(&xs, &ys, w);
        out[ch * w..(ch + 1) * w].copy_from_slice(&filled);
    }
    Ok(Tensor::from_parts(vec![c, 1, w], out))
}

/// Apply the transform named by `kind`; `Original` is the identity.
pub fn apply(
    kind: AugmentationKind,
    window: &Tensor,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    match kind {
        AugmentationKind::Original => Ok(window.clone()),
        AugmentationKind::Rotation => rotate(window, params, rng),
        AugmentationKind::Permutation => permute(window, params, rng),
        AugmentationKind::TimeWarp => time_warp(window, params, rng),
        AugmentationKind::Scale => scale(window, params, rng),
        AugmentationKind::MagnitudeWarp => magnitude_warp(window, params, rng),
        AugmentationKind::Jitter => jitter(window, params, rng),
        AugmentationKind::RandomSample => random_sample(window, params, rng),
    }
}

static ROTATION_SKIP_LOGGED: AtomicBool = AtomicBool::new(false);

/// Study mode: emit all seven transforms of every original window (7:1
/// ratio) instead of the one-per-original default used in training.
/// Rotation is dropped for non-triaxial channel layouts.
pub fn augment_batch_all_transforms(
    originals: &[SensorWindow],
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<SensorWindow>> {
    if originals.is_empty() {
        return Err(Error::Input("augment_batch requires a nonempty batch".into()));
    }
    let mut out = Vec::with_capacity(originals.len() * TRANSFORMS.len());
    for (i, win) in originals.iter().enumerate() {
        let c = win.data.shape()[0];
        for kind in TRANSFORMS {
            if kind == AugmentationKind::Rotation && c % 3 != 0 {
                continue;
            }
            let mut rng = rng::stream(seed, &[salt::TRANSFORM, i as u64, kind.code() as u64]);
            out.push(SensorWindow {
                data: apply(kind, &win.data, params, &mut rng)?,
                activity_label: win.activity_label,
                subject_id: win.subject_id,
                aug_kind: kind,
            });
        }
    }
    Ok(out)
}

/// Produce one augmented counterpart per original window (1:1 ratio).
///
/// Each window draws one transform uniformly from the seven; the output
/// inherits the activity label and subject id and carries the transform's
/// code as its augmentation label. Windows whose channel count is not a
/// multiple of 3 redraw among the six non-rotation transforms.
pub fn augment_batch(
    originals: &[SensorWindow],
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<SensorWindow>> {
    if originals.is_empty() {
        return Err(Error::Input("augment_batch requires a nonempty batch".into()));
    }
    let mut out = Vec::with_capacity(originals.len());
    for (i, win) in originals.iter().enumerate() {
        let mut rng = rng::stream(seed, &[salt::TRANSFORM, i as u64]);
        let c = win.data.shape()[0];
        let mut kind = TRANSFORMS[rng.random_range(0..TRANSFORMS.len())];
        if kind == AugmentationKind::Rotation && c % 3 != 0 {
            if !ROTATION_SKIP_LOGGED.swap(true, Ordering::Relaxed) {
                log::warn!("channel count {c} not triaxial; redrawing rotation among 6 transforms");
            }
            let alt: Vec<AugmentationKind> = TRANSFORMS
                .iter()
                .copied()
                .filter(|&k| k != AugmentationKind::Rotation)
                .collect();
            kind = alt[rng.random_range(0..alt.len())];
        }
        let data = apply(kind, &win.data, params, &mut rng)?;
        out.push(SensorWindow {
            data,
            activity_label: win.activity_label,
            subject_id: win.subject_id,
            aug_kind: kind,
        });
    }
    Ok(out)
}
