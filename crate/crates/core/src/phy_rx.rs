//! Camera-side receiver.
//!
//! Acquisition differences two consecutive captures, keeps connected blobs of
//! changed pixels that line up horizontally, and takes the widest such group
//! as the bar. Tracking then follows the four antiphase tracking blocks: on
//! every symbol transition blocks 0 and 11 change one way and blocks 1 and 10
//! the other, which both confirms the bar is still there and pins its outer
//! edges. Demodulation splits the bar span into twelve equal windows and
//! thresholds the eight data windows halfway between the lit and dark
//! tracking pairs of the same capture.

use std::collections::VecDeque;
use std::ops::Range;

use thiserror::Error;

use crate::bits::BitString;
use crate::channel::CameraFrame;
use crate::phy_tx::{BLOCKS, IDLE_BYTE, MIN_IDLE_GAP, SYNC_BYTE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxConfig {
    /// Minimum smoothed frame difference, gray levels, for a pixel to count
    /// as blinking during acquisition.
    pub diff_threshold: u8,
    /// Acquisition threshold in units of the estimated difference noise.
    pub detect_snr: f64,
    /// Minimum on/off reference separation, gray levels.
    pub contrast_floor: f64,
    /// Consecutive captures without tracking evidence before the ROI is dropped.
    pub lost_limit: u32,
    /// Data bytes per packet.
    pub n_frame: usize,
    /// Nominal captures per transmitted symbol.
    pub captures_per_symbol: usize,
    /// Camera frame interval, seconds.
    pub frame_interval: f64,
    /// Per-capture processing time, seconds.
    pub processing_delay: f64,
    /// Weight of the newest edge measurement when tracking.
    pub track_gain: f64,
    /// Symbols to wait for a delimiter before reporting no packet.
    pub sync_timeout: usize,
}

impl Default for RxConfig {
    fn default() -> Self {
        Self {
            diff_threshold: 6,
            detect_snr: 5.0,
            contrast_floor: 4.0,
            lost_limit: 4,
            n_frame: 53,
            captures_per_symbol: 2,
            frame_interval: 1e-3,
            processing_delay: 0.0,
            track_gain: 0.1,
            sync_timeout: 4096,
        }
    }
}

/// Estimated image of the bar inside a region of interest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarSpan {
    /// Outer edge of block 0, continuous pixel coordinate.
    pub left: f64,
    /// Outer edge of block 11.
    pub right: f64,
    /// Rows carrying the bar's light.
    pub top: usize,
    pub bottom: usize,
}

impl BarSpan {
    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn block_width(&self) -> f64 {
        self.width() / BLOCKS as f64
    }

    pub fn block_window(&self, b: usize) -> (f64, f64) {
        let w = self.block_width();
        (self.left + b as f64 * w, self.left + (b + 1) as f64 * w)
    }

    pub fn rows(&self) -> Range<usize> {
        self.top..self.bottom
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionOfInterest {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub valid: bool,
    pub bar: BarSpan,
    /// Consecutive captures without tracking evidence.
    pub lost_frames: u32,
}

impl RegionOfInterest {
    pub fn invalid() -> Self {
        Self {
            x0: 0,
            y0: 0,
            width: 0,
            height: 0,
            valid: false,
            bar: BarSpan {
                left: 0.0,
                right: 0.0,
                top: 0,
                bottom: 0,
            },
            lost_frames: 0,
        }
    }

    /// Search window around `bar`: 20% of the bar size on every side, at least
    /// three rows vertically, clipped to the image.
    pub fn around(bar: BarSpan, image_w: usize, image_h: usize) -> Self {
        let mx = 0.2 * bar.width();
        let my = ((0.2 * (bar.bottom - bar.top) as f64).ceil() as usize).max(3);
        let x0 = (bar.left - mx).floor().max(0.0) as usize;
        let x1 = ((bar.right + mx).ceil().max(0.0) as usize).min(image_w);
        let y0 = bar.top.saturating_sub(my);
        let y1 = (bar.bottom + my).min(image_h);
        let valid = x1 > x0 && y1 > y0 && bar.width() > 0.0;
        Self {
            x0,
            y0,
            width: x1.saturating_sub(x0),
            height: y1.saturating_sub(y0),
            valid,
            bar,
            lost_frames: 0,
        }
    }

    pub fn rows(&self) -> Range<usize> {
        self.y0..self.y0 + self.height
    }

    pub fn cols(&self) -> Range<usize> {
        self.x0..self.x0 + self.width
    }

    pub fn contains_span(&self, left: f64, right: f64) -> bool {
        self.valid && left >= self.x0 as f64 && right <= (self.x0 + self.width) as f64
    }
}

fn common_rows(a: &CameraFrame, b: &CameraFrame) -> Range<usize> {
    a.rows.start.max(b.rows.start)..a.rows.end.min(b.rows.end)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Robust standard deviation from the median absolute value of zero-mean data.
fn mad_sigma(v: &mut [f64]) -> f64 {
    for x in v.iter_mut() {
        *x = x.abs();
    }
    1.4826 * median(v)
}

const BOX_H: usize = 3;
const BOX_W: usize = 7;
/// Narrowest bar image, pixels, that acquisition accepts.
const MIN_BAR_WIDTH: usize = 12;
/// Capture pairs whose difference energy acquisition accumulates.
const ACQ_WINDOW: usize = 32;

/// `BOX_H` x `BOX_W` box mean of a `w` x `h` field, zero outside it.
fn box_filter(field: &[f32], w: usize, h: usize) -> Vec<f32> {
    let (rh, rw) = (BOX_H / 2, BOX_W / 2);
    let mut horiz = vec![0f32; w * h];
    for iy in 0..h {
        let d = &field[iy * w..(iy + 1) * w];
        let out = &mut horiz[iy * w..(iy + 1) * w];
        let mut acc = 0f32;
        for x in 0..w + rw {
            if x < w {
                acc += d[x];
            }
            if x >= BOX_W {
                acc -= d[x - BOX_W];
            }
            if x >= rw {
                out[x - rw] = acc;
            }
        }
    }
    let mut data = vec![0f32; w * h];
    let norm = 1.0 / (BOX_H * BOX_W) as f32;
    for iy in 0..h {
        let lo = iy.saturating_sub(rh);
        let hi = (iy + rh + 1).min(h);
        let out = &mut data[iy * w..(iy + 1) * w];
        for yy in lo..hi {
            for (o, v) in out.iter_mut().zip(&horiz[yy * w..(yy + 1) * w]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= norm;
        }
    }
    data
}

fn signed_diff(prev: &CameraFrame, curr: &CameraFrame, rows: Range<usize>) -> Vec<f32> {
    let mut d = Vec::with_capacity(curr.width * rows.len());
    for y in rows {
        d.extend(prev.row(y).iter().zip(curr.row(y)).map(|(&p, &c)| c as f32 - p as f32));
    }
    d
}

fn sampled(field: &[f32]) -> Vec<f64> {
    field.iter().step_by(5).map(|&v| v as f64).collect()
}

/// Pixels of one connected group of changed pixels.
#[derive(Debug, Clone)]
struct Blob {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    mass: f64,
    cy: f64,
}

fn label_blobs(mask: &[bool], w: usize, h: usize, strength: &[f32]) -> Vec<Blob> {
    let mut seen = vec![false; mask.len()];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut b = Blob {
            x0: usize::MAX,
            x1: 0,
            y0: usize::MAX,
            y1: 0,
            mass: 0.0,
            cy: 0.0,
        };
        let mut wy = 0.0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let m = strength[i].abs() as f64;
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x + 1);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y + 1);
            b.mass += m;
            wy += m * (y as f64 + 0.5);
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)] {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        b.cy = wy / b.mass.max(f64::MIN_POSITIVE);
        blobs.push(b);
    }
    blobs
}

/// Column profile of the signed difference summed over `rows`, for columns
/// `cols`.
fn diff_profile(prev: &CameraFrame, curr: &CameraFrame, rows: Range<usize>, cols: Range<usize>) -> Vec<f64> {
    let mut p = vec![0.0; cols.len()];
    for y in rows {
        let (a, b) = (&prev.row(y)[cols.clone()], &curr.row(y)[cols.clone()]);
        for ((o, &pa), &cb) in p.iter_mut().zip(a).zip(b) {
            *o += cb as f64 - pa as f64;
        }
    }
    p
}

/// Area-weighted mean of `profile` (indexed from `origin`) over `[a, b)`.
fn window_mean(profile: &[f64], origin: usize, a: f64, b: f64) -> Option<f64> {
    let lo = a.floor().max(origin as f64) as usize;
    let hi = (b.ceil() as usize).min(origin + profile.len());
    let (mut sum, mut wsum) = (0.0, 0.0);
    for x in lo..hi {
        let wgt = (b.min(x as f64 + 1.0) - a.max(x as f64)).max(0.0);
        sum += wgt * profile[x - origin];
        wsum += wgt;
    }
    (wsum > 0.0).then(|| sum / wsum)
}

/// Tracking-block evidence in a signed difference profile: the antiphase
/// combination of the four end blocks, plus refined outer edges.
#[derive(Debug, Clone, Copy)]
struct EndEvidence {
    /// Summed mean change of blocks 0 and 11 minus that of blocks 1 and 10, over four.
    swing: f64,
    /// Standard error of `swing` from the profile noise.
    swing_sigma: f64,
    left: f64,
    right: f64,
}

fn end_evidence(profile: &[f64], origin: usize, bar: &BarSpan, noise_per_col: f64) -> Option<EndEvidence> {
    let w = bar.block_width();
    if w <= 0.0 {
        return None;
    }
    let m = |b: usize| {
        let (a, c) = bar.block_window(b);
        window_mean(profile, origin, a, c)
    };
    let (m0, m1, m10, m11) = (m(0)?, m(1)?, m(10)?, m(11)?);
    let swing = (m0 + m11 - m1 - m10) / 4.0;
    let swing_sigma = noise_per_col / (4.0 * w).sqrt();

    // outer edges: best antiphase fit within half a block of the estimate
    let pre = [Prefix::new(profile, origin)];
    let mut best = None;
    search_span(
        &pre,
        (bar.left - 0.5 * w, bar.left + 0.5 * w),
        (bar.right - 0.5 * w, bar.right + 0.5 * w),
        0.25,
        MIN_BAR_WIDTH as f64,
        &mut best,
    );
    let (left, right) = best.map_or((bar.left, bar.right), |(_, l, r)| (l, r));
    Some(EndEvidence {
        swing,
        swing_sigma,
        left,
        right,
    })
}

/// Prefix sums of a profile for O(1) area-weighted window sums.
struct Prefix {
    origin: usize,
    values: Vec<f64>,
    cum: Vec<f64>,
}

impl Prefix {
    fn new(profile: &[f64], origin: usize) -> Self {
        let mut cum = Vec::with_capacity(profile.len() + 1);
        cum.push(0.0);
        for v in profile {
            cum.push(cum.last().unwrap() + v);
        }
        Self {
            origin,
            values: profile.to_vec(),
            cum,
        }
    }

    fn at(&self, t: f64) -> f64 {
        let u = (t - self.origin as f64).clamp(0.0, self.values.len() as f64);
        let i = u.floor() as usize;
        if i >= self.values.len() {
            return self.cum[self.values.len()];
        }
        self.cum[i] + (u - i as f64) * self.values[i]
    }

    fn sum(&self, a: f64, b: f64) -> f64 {
        self.at(b) - self.at(a)
    }
}

/// Bar ends that best explain a set of signed difference profiles: maximizes
/// the antiphase end-block statistic `S0 + S11 - S1 - S10` in energy over
/// its noise scale, summed across profiles.
fn fit_span(profiles: &[Vec<f64>], origin: usize, min_width: f64) -> Option<(f64, f64)> {
    let n = profiles.first()?.len();
    if n < BLOCKS {
        return None;
    }
    let pre: Vec<Prefix> = profiles.iter().map(|p| Prefix::new(p, origin)).collect();
    let (lo, hi) = (origin as f64, (origin + n) as f64);
    let half = n as f64 / 2.0;
    let mut best = None;
    search_span(&pre, (lo, lo + half), (hi - half, hi), 1.0, min_width, &mut best);
    let (_, l0, r0) = best?;
    search_span(&pre, (l0 - 1.0, l0 + 1.0), (r0 - 1.0, r0 + 1.0), 0.25, min_width, &mut best);
    best.map(|(_, l, r)| (l, r))
}

fn span_score(pre: &[Prefix], l: f64, r: f64) -> f64 {
    let w = (r - l) / BLOCKS as f64;
    let e: f64 = pre
        .iter()
        .map(|p| {
            let s = p.sum(l, l + w) + p.sum(r - w, r) - p.sum(l + w, l + 2.0 * w) - p.sum(r - 2.0 * w, r - w);
            s * s
        })
        .sum();
    e / (4.0 * w)
}

/// Grid search of `span_score` over left ends in `ls` and right ends in `rs`
/// (both inclusive), keeping the best `(score, left, right)` in `best`.
fn search_span(pre: &[Prefix], ls: (f64, f64), rs: (f64, f64), step: f64, min_width: f64, best: &mut Option<(f64, f64, f64)>) {
    let Some(p0) = pre.first() else {
        return;
    };
    let (lo, hi) = (p0.origin as f64, (p0.origin + p0.values.len()) as f64);
    let nl = ((ls.1 - ls.0) / step).floor() as usize;
    let nr = ((rs.1 - rs.0) / step).floor() as usize;
    for i in 0..=nl {
        let l = ls.0 + i as f64 * step;
        for j in 0..=nr {
            let r = rs.1 - j as f64 * step;
            if r - l < min_width || l < lo || r > hi {
                continue;
            }
            let sc = span_score(pre, l, r);
            if best.map_or(true, |b| sc > b.0) {
                *best = Some((sc, l, r));
            }
        }
    }
}

/// Contiguous rows around the strongest one that maximize summed amplitude over root count,
/// after removing the noise floor of the band's quietest rows.
fn strong_rows(energy: &[f64], start: usize) -> Option<Range<usize>> {
    let mut sorted = energy.to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = if sorted.len() >= 5 { sorted[sorted.len() / 4] } else { 0.0 };
    let energy: Vec<f64> = energy.iter().map(|e| (e - floor).max(0.0)).collect();
    let amp: Vec<f64> = energy.iter().map(|e| e.sqrt()).collect();
    let peak = (0..amp.len()).max_by(|&a, &b| amp[a].total_cmp(&amp[b]))?;
    if amp[peak] <= 0.0 {
        return None;
    }
    let mut best = (0.0, peak, peak + 1);
    for a in 0..=peak {
        for b in peak + 1..=amp.len() {
            let score = amp[a..b].iter().sum::<f64>() / ((b - a) as f64).sqrt();
            if score > best.0 {
                best = (score, a, b);
            }
        }
    }
    Some(start + best.1..start + best.2)
}

/// Bounding box `(x0, x1, y0, y1)` of the strongest set of above-threshold
/// blobs lying on one horizontal line and shaped like a bar.
fn find_bar_group(field: &[f32], w: usize, h: usize, threshold: f32) -> Option<(usize, usize, usize, usize)> {
    let mask: Vec<bool> = field.iter().map(|v| v.abs() >= threshold).collect();
    let blobs: Vec<Blob> = label_blobs(&mask, w, h, field)
        .into_iter()
        .filter(|b| (b.x1 - b.x0) * (b.y1 - b.y0) >= 4)
        .collect();
    let mut order: Vec<usize> = (0..blobs.len()).collect();
    order.sort_by(|&a, &b| blobs[a].cy.total_cmp(&blobs[b].cy));
    let mut best: Option<(f64, usize, usize, usize, usize)> = None;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let base = blobs[order[i]].cy;
        while j + 1 < order.len() && blobs[order[j + 1]].cy - base <= 3.0 {
            j += 1;
        }
        let group = &order[i..=j];
        let x0 = group.iter().map(|&k| blobs[k].x0).min().unwrap_or(0);
        let x1 = group.iter().map(|&k| blobs[k].x1).max().unwrap_or(0);
        let y0 = group.iter().map(|&k| blobs[k].y0).min().unwrap_or(0);
        let y1 = group.iter().map(|&k| blobs[k].y1).max().unwrap_or(0);
        let mass: f64 = group.iter().map(|&k| blobs[k].mass).sum();
        let (gw, gh) = (x1 - x0, y1 - y0);
        if gw >= MIN_BAR_WIDTH && gw >= 3 * gh && best.map_or(true, |b| mass > b.0) {
            best = Some((mass, x0, x1, y0, y1));
        }
        i = j + 1;
    }
    best.map(|(_, x0, x1, y0, y1)| (x0, x1, y0, y1))
}

/// Refines a blob group into a bar estimate using the capture pairs that
/// produced it. Group coordinates are relative to `rows.start`.
fn locate_bar(
    pairs: &[(&CameraFrame, &CameraFrame)],
    group: (usize, usize, usize, usize),
    rows: Range<usize>,
) -> RegionOfInterest {
    let (x0, x1, y0, y1) = group;
    let curr = pairs[pairs.len() - 1].1;
    let w = curr.width;
    let (y0, y1) = (rows.start + y0, rows.start + y1);
    // the box filter blurs and partly cancels the antiphase end blocks, so
    // search well outside the group for the true ends
    let pad = BOX_W + (x1 - x0) / 4;
    let cols = x0.saturating_sub(pad)..(x1 + pad).min(w);
    let band = y0.saturating_sub(4).max(rows.start)..(y1 + 4).min(rows.end);
    let energy: Vec<f64> = band
        .clone()
        .map(|y| {
            pairs
                .iter()
                .map(|(p, c)| {
                    let (a, b) = (&p.row(y)[cols.clone()], &c.row(y)[cols.clone()]);
                    a.iter().zip(b).map(|(&u, &v)| (v as f64 - u as f64).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect();
    let Some(bar_rows) = strong_rows(&energy, band.start) else {
        return RegionOfInterest::invalid();
    };
    let profiles: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(p, c)| diff_profile(p, c, bar_rows.clone(), cols.clone()))
        .collect();
    let Some((left, right)) = fit_span(&profiles, cols.start, MIN_BAR_WIDTH as f64) else {
        return RegionOfInterest::invalid();
    };
    let bar = BarSpan {
        left,
        right,
        top: bar_rows.start,
        bottom: bar_rows.end,
    };
    RegionOfInterest::around(bar, w, curr.height)
}

/// Locates the bar from two consecutive captures; an invalid ROI means no
/// candidate.
pub fn detect_bar(prev: &CameraFrame, curr: &CameraFrame, diff_threshold: u8) -> RegionOfInterest {
    detect_bar_with(prev, curr, diff_threshold, RxConfig::default().detect_snr)
}

pub fn detect_bar_with(prev: &CameraFrame, curr: &CameraFrame, diff_threshold: u8, detect_snr: f64) -> RegionOfInterest {
    assert_eq!((prev.width, prev.height), (curr.width, curr.height), "frame size mismatch");
    let rows = common_rows(prev, curr);
    if rows.len() < BOX_H {
        return RegionOfInterest::invalid();
    }
    let (w, h) = (curr.width, rows.len());
    let smooth = box_filter(&signed_diff(prev, curr, rows.clone()), w, h);
    let threshold = (diff_threshold.max(1) as f64).max(detect_snr * mad_sigma(&mut sampled(&smooth))) as f32;
    match find_bar_group(&smooth, w, h, threshold) {
        Some(g) => locate_bar(&[(prev, curr)], g, rows),
        None => RegionOfInterest::invalid(),
    }
}

/// Multi-capture acquisition: squared pair differences accumulated over a
/// sliding window of whole captures, so a faint bar builds up evidence over
/// several symbols.
#[derive(Debug, Clone, Default)]
struct Acquirer {
    frames: VecDeque<CameraFrame>,
    energy: Vec<f32>,
}

impl Acquirer {
    fn reset(&mut self) {
        self.frames.clear();
        self.energy.clear();
    }

    fn accumulate(&mut self, a: usize, b: usize, sign: f32) {
        let (p, c) = (&self.frames[a], &self.frames[b]);
        for ((e, &u), &v) in self.energy.iter_mut().zip(&p.pixels).zip(&c.pixels) {
            let d = v as f32 - u as f32;
            *e += sign * d * d;
        }
    }

    fn push(&mut self, frame: CameraFrame) {
        let whole = frame.rows == (0..frame.height);
        let fits = self.frames.back().map_or(true, |b| (b.width, b.height) == (frame.width, frame.height));
        if !whole || !fits {
            self.reset();
            if !whole {
                return;
            }
        }
        if self.energy.is_empty() {
            self.energy = vec![0.0; frame.width * frame.height];
        }
        self.frames.push_back(frame);
        let n = self.frames.len();
        if n >= 2 {
            self.accumulate(n - 2, n - 1, 1.0);
        }
        if n > ACQ_WINDOW + 1 {
            self.accumulate(0, 1, -1.0);
            self.frames.pop_front();
        }
    }

    fn detect(&self, cfg: &RxConfig) -> RegionOfInterest {
        let Some(curr) = self.frames.back() else {
            return RegionOfInterest::invalid();
        };
        if self.frames.len() < 2 {
            return RegionOfInterest::invalid();
        }
        let (w, h) = (curr.width, curr.height);
        let smooth = box_filter(&self.energy, w, h);
        let mut sample = sampled(&smooth);
        let med = median(&mut sample);
        for v in sample.iter_mut() {
            *v -= med;
        }
        let spread = mad_sigma(&mut sample);
        let floor = (cfg.diff_threshold.max(1) as f64).powi(2);
        let threshold = (med + cfg.detect_snr * spread).max(floor) as f32;
        let Some(group) = find_bar_group(&smooth, w, h, threshold) else {
            return RegionOfInterest::invalid();
        };
        let pairs: Vec<(&CameraFrame, &CameraFrame)> = self.frames.iter().zip(self.frames.iter().skip(1)).collect();
        locate_bar(&pairs, group, 0..h)
    }
}

/// Noise per profile column, estimated from ROI pixels away from the bar.
fn background_noise(prev: &CameraFrame, curr: &CameraFrame, roi: &RegionOfInterest, rows: &Range<usize>) -> f64 {
    let bar = &roi.bar;
    let mut v = Vec::new();
    for y in roi.rows() {
        if !rows.contains(&y) {
            continue;
        }
        let near_rows = y + 1 >= bar.top && y <= bar.bottom;
        for x in roi.cols() {
            let xf = x as f64;
            if near_rows && xf + 1.0 >= bar.left - 1.0 && xf <= bar.right + 1.0 {
                continue;
            }
            v.push(curr.get(x, y) as f64 - prev.get(x, y) as f64);
        }
    }
    if v.len() < 16 {
        return 0.0;
    }
    mad_sigma(&mut v) * ((bar.bottom - bar.top) as f64).sqrt()
}

/// Follows the bar from the previous estimate using the tracking blocks.
pub fn track_roi(roi: &RegionOfInterest, prev: &CameraFrame, curr: &CameraFrame) -> RegionOfInterest {
    track_roi_with(roi, prev, curr, &RxConfig::default())
}

pub fn track_roi_with(roi: &RegionOfInterest, prev: &CameraFrame, curr: &CameraFrame, cfg: &RxConfig) -> RegionOfInterest {
    if !roi.valid {
        return *roi;
    }
    let lost = |r: &RegionOfInterest| {
        let mut out = *r;
        out.lost_frames += 1;
        if out.lost_frames > cfg.lost_limit {
            out.valid = false;
        }
        out
    };
    let rows = common_rows(prev, curr);
    let bar = roi.bar;
    if bar.top < rows.start || bar.bottom > rows.end || bar.bottom <= bar.top {
        return lost(roi);
    }
    // two captures of the same symbol: the tracking blocks did not toggle
    let phase = |f: &CameraFrame| {
        let m = block_means(f, &bar);
        (m[0] + m[11] - m[1] - m[10]) / 2.0
    };
    let (pp, pc) = (phase(prev), phase(curr));
    if pp.abs() >= cfg.contrast_floor && pc.abs() >= cfg.contrast_floor && pp.signum() == pc.signum() {
        return *roi;
    }
    let cols = roi.cols();
    let profile = diff_profile(prev, curr, bar.rows(), cols.clone());
    let noise = background_noise(prev, curr, roi, &rows);
    let Some(ev) = end_evidence(&profile, cols.start, &bar, noise) else {
        return lost(roi);
    };
    let rows_n = (bar.bottom - bar.top) as f64;
    let floor = 0.5 * cfg.contrast_floor * rows_n;
    if ev.swing.abs() < floor || ev.swing.abs() < 4.0 * ev.swing_sigma {
        return lost(roi);
    }
    let g = cfg.track_gain;
    let left = bar.left + g * (ev.left - bar.left);
    let right = bar.right + g * (ev.right - bar.right);
    let next = BarSpan { left, right, ..bar };
    let mut out = RegionOfInterest::around(next, curr.width, curr.height);
    if !out.valid || left < 0.0 || right > curr.width as f64 {
        return lost(roi);
    }
    out.lost_frames = 0;
    out
}

/// Tracking-block antiphase statistic of one row of a difference pair.
fn row_phase_stat(prev: &CameraFrame, curr: &CameraFrame, y: usize, bar: &BarSpan, cols: Range<usize>) -> f64 {
    let d: Vec<f64> = prev.row(y)[cols.clone()]
        .iter()
        .zip(&curr.row(y)[cols.clone()])
        .map(|(&a, &b)| b as f64 - a as f64)
        .collect();
    let p = Prefix::new(&d, cols.start);
    let w = bar.block_width();
    let (l, r) = (bar.left, bar.right);
    p.sum(l, l + w) + p.sum(r - w, r) - p.sum(l + w, l + 2.0 * w) - p.sum(r - 2.0 * w, r - w)
}

/// Running per-row energy of the tracking statistic, used to re-fit the
/// bar's rows while it is tracked.
#[derive(Debug, Clone, Default)]
struct RowEnergy {
    energy: Vec<f64>,
    pairs: u32,
}

impl RowEnergy {
    const DECAY: f64 = 0.98;
    const MIN_PAIRS: u32 = 32;

    fn reset(&mut self) {
        self.energy.clear();
        self.pairs = 0;
    }

    /// Accumulates one pair and returns the refitted ROI once enough pairs
    /// have been seen.
    fn update(&mut self, roi: &RegionOfInterest, prev: &CameraFrame, curr: &CameraFrame) -> Option<RegionOfInterest> {
        if self.energy.len() != curr.height {
            self.energy = vec![0.0; curr.height];
        }
        let rows = common_rows(prev, curr);
        let band = roi.rows().start.max(rows.start)..roi.rows().end.min(rows.end);
        let cols = roi.cols();
        for e in self.energy.iter_mut() {
            *e *= Self::DECAY;
        }
        for y in band.clone() {
            let s = row_phase_stat(prev, curr, y, &roi.bar, cols.clone());
            self.energy[y] += s * s;
        }
        self.pairs += 1;
        if self.pairs < Self::MIN_PAIRS || band.is_empty() {
            return None;
        }
        let fit = strong_rows(&self.energy[band.clone()], band.start)?;
        if fit == roi.bar.rows() {
            return None;
        }
        let bar = BarSpan {
            top: fit.start,
            bottom: fit.end,
            ..roi.bar
        };
        let mut out = RegionOfInterest::around(bar, curr.width, curr.height);
        out.lost_frames = roi.lost_frames;
        out.valid.then_some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemodFrame {
    pub byte_value: u8,
    /// Per data block, MSB first: distance from threshold relative to half
    /// the reference contrast, clamped to `[0, 1]`.
    pub confidence: [f64; 8],
    pub capture_time: f64,
    pub symbol_parity: Parity,
}

impl DemodFrame {
    pub fn min_confidence(&self) -> f64 {
        self.confidence.iter().cloned().fold(1.0, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DemodError {
    #[error("low contrast: on/off reference separation {contrast:.2} below floor {floor:.2}")]
    LowContrast { contrast: f64, floor: f64 },
    #[error("no valid region of interest")]
    NoRoi,
}

/// Mean pixel value of each block window over the bar rows.
pub fn block_means(frame: &CameraFrame, bar: &BarSpan) -> [f64; BLOCKS] {
    let (x0, x1) = (
        bar.left.floor().max(0.0) as usize,
        (bar.right.ceil().max(0.0) as usize).min(frame.width),
    );
    let mut profile = vec![0.0; x1.saturating_sub(x0)];
    for y in bar.rows() {
        for (o, &p) in profile.iter_mut().zip(&frame.row(y)[x0..x1]) {
            *o += p as f64;
        }
    }
    let rows = (bar.bottom - bar.top).max(1) as f64;
    std::array::from_fn(|b| {
        let (a, c) = bar.block_window(b);
        window_mean(&profile, x0, a, c).unwrap_or(0.0) / rows
    })
}

pub fn demod_frame(curr: &CameraFrame, roi: &RegionOfInterest) -> Result<DemodFrame, DemodError> {
    demod_frame_with(curr, roi, RxConfig::default().contrast_floor)
}

pub fn demod_frame_with(curr: &CameraFrame, roi: &RegionOfInterest, contrast_floor: f64) -> Result<DemodFrame, DemodError> {
    if !roi.valid || roi.bar.bottom <= roi.bar.top || roi.bar.width() <= 0.0 {
        return Err(DemodError::NoRoi);
    }
    let means = block_means(curr, &roi.bar);
    let even_pair = (means[0] + means[11]) / 2.0;
    let odd_pair = (means[1] + means[10]) / 2.0;
    let (on_ref, off_ref, parity) = if even_pair >= odd_pair {
        (even_pair, odd_pair, Parity::Even)
    } else {
        (odd_pair, even_pair, Parity::Odd)
    };
    let contrast = on_ref - off_ref;
    if contrast < contrast_floor {
        return Err(DemodError::LowContrast {
            contrast,
            floor: contrast_floor,
        });
    }
    let threshold = (on_ref + off_ref) / 2.0;
    let mut byte = 0u8;
    let mut confidence = [0.0; 8];
    for (k, b) in (2..=9).enumerate() {
        let m = means[b];
        byte = (byte << 1) | u8::from(m > threshold);
        confidence[k] = ((m - threshold).abs() / (contrast / 2.0)).clamp(0.0, 1.0);
    }
    Ok(DemodFrame {
        byte_value: byte,
        confidence,
        capture_time: curr.capture_time,
        symbol_parity: parity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RxPacket {
    pub payload_bits: BitString,
    /// Capture time of the first capture of the first data symbol.
    pub first_frame_time: f64,
    /// When the last data symbol's demodulation result is available.
    pub demod_complete_time: f64,
    pub frame_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AssemblyError {
    #[error("no packet: delimiter not found")]
    NoPacket,
    #[error("no packet: stream ended {missing} data frames short")]
    Incomplete { missing: usize },
}

#[derive(Debug, Clone, Copy)]
struct SymbolAcc {
    parity: Parity,
    count: usize,
    best: DemodFrame,
    first_time: f64,
    last_time: f64,
    closed: bool,
}

#[derive(Debug, Clone)]
enum SyncState {
    Hunting { idle_run: usize, since_sync: usize },
    Collecting { bytes: Vec<u8>, first_time: f64 },
}

/// Counters useful for diagnosing a capture stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssemblerStats {
    pub symbols: u64,
    pub slips: u64,
    pub discarded_partials: u64,
    pub unreliable: u64,
}

/// Streaming packet reassembly over demodulated captures.
#[derive(Debug, Clone)]
pub struct PacketAssembler {
    cfg: RxConfig,
    cur: Option<SymbolAcc>,
    state: SyncState,
    pub stats: AssemblerStats,
}

impl PacketAssembler {
    pub fn new(cfg: RxConfig) -> Self {
        Self {
            cfg,
            cur: None,
            state: SyncState::Hunting {
                idle_run: 0,
                since_sync: 0,
            },
            stats: AssemblerStats::default(),
        }
    }

    /// Delay from the last capture of a packet to its demodulation result:
    /// work that fits in one frame interval is reported at the next frame.
    fn report_delay(&self) -> f64 {
        let iv = self.cfg.frame_interval;
        let frames = (self.cfg.processing_delay / iv).ceil().max(1.0);
        frames * iv
    }

    pub fn is_collecting(&self) -> bool {
        matches!(self.state, SyncState::Collecting { .. })
    }

    pub fn missing(&self) -> Option<usize> {
        match &self.state {
            SyncState::Collecting { bytes, .. } => Some(self.cfg.n_frame - bytes.len()),
            SyncState::Hunting { .. } => None,
        }
    }

    fn resync(&mut self) {
        if self.is_collecting() {
            self.stats.discarded_partials += 1;
        }
        self.state = SyncState::Hunting {
            idle_run: 0,
            since_sync: 0,
        };
    }

    /// A capture the receiver could not demodulate.
    pub fn push_unreliable(&mut self, _capture_time: f64) {
        self.stats.unreliable += 1;
        self.cur = None;
        self.resync();
    }

    pub fn push(&mut self, f: DemodFrame) -> Option<RxPacket> {
        let cps = self.cfg.captures_per_symbol.max(1);
        match self.cur.as_mut() {
            Some(acc) if acc.parity == f.symbol_parity => {
                if acc.closed {
                    // more same-parity captures than a symbol can hold
                    self.stats.slips += 1;
                    self.cur = None;
                    self.resync();
                    return None;
                }
                acc.count += 1;
                acc.last_time = f.capture_time;
                if f.min_confidence() > acc.best.min_confidence() {
                    acc.best = f;
                }
                if acc.count >= cps {
                    acc.closed = true;
                    let done = *acc;
                    return self.on_symbol(done);
                }
                None
            }
            _ => {
                let mut out = None;
                if let Some(prev) = self.cur.take() {
                    if !prev.closed {
                        out = self.on_symbol(prev);
                    }
                }
                let mut acc = SymbolAcc {
                    parity: f.symbol_parity,
                    count: 1,
                    best: f,
                    first_time: f.capture_time,
                    last_time: f.capture_time,
                    closed: false,
                };
                if cps == 1 {
                    acc.closed = true;
                    self.cur = Some(acc);
                    return out.or_else(|| self.on_symbol(acc));
                }
                self.cur = Some(acc);
                out
            }
        }
    }

    fn on_symbol(&mut self, sym: SymbolAcc) -> Option<RxPacket> {
        self.stats.symbols += 1;
        let byte = sym.best.byte_value;
        let delay = self.report_delay();
        let n_frame = self.cfg.n_frame;
        match &mut self.state {
            SyncState::Hunting { idle_run, since_sync } => {
                *since_sync += 1;
                if byte == SYNC_BYTE && *idle_run >= MIN_IDLE_GAP {
                    self.state = SyncState::Collecting {
                        bytes: Vec::with_capacity(n_frame),
                        first_time: f64::NAN,
                    };
                } else if byte == IDLE_BYTE {
                    *idle_run += 1;
                } else {
                    *idle_run = 0;
                }
                None
            }
            SyncState::Collecting { bytes, first_time } => {
                if bytes.is_empty() {
                    *first_time = sym.first_time;
                }
                bytes.push(byte);
                if bytes.len() < n_frame {
                    return None;
                }
                let pkt = RxPacket {
                    payload_bits: BitString::from_bytes(bytes),
                    first_frame_time: *first_time,
                    demod_complete_time: sym.last_time + delay,
                    frame_count: n_frame,
                };
                self.state = SyncState::Hunting {
                    idle_run: 0,
                    since_sync: 0,
                };
                Some(pkt)
            }
        }
    }

    /// Flushes a pending symbol at end of stream.
    pub fn finish(&mut self) -> Option<RxPacket> {
        match self.cur.take() {
            Some(acc) if !acc.closed => self.on_symbol(acc),
            _ => None,
        }
    }

    pub fn timed_out(&self) -> bool {
        matches!(self.state, SyncState::Hunting { since_sync, .. } if since_sync > self.cfg.sync_timeout)
    }
}

/// Reassembles the first packet in a finished capture stream.
pub fn assemble_packet(demod_stream: &[DemodFrame], cfg: &RxConfig) -> Result<RxPacket, AssemblyError> {
    let mut asm = PacketAssembler::new(*cfg);
    for f in demod_stream {
        if let Some(p) = asm.push(*f) {
            return Ok(p);
        }
        if asm.timed_out() {
            return Err(AssemblyError::NoPacket);
        }
    }
    if let Some(p) = asm.finish() {
        return Ok(p);
    }
    match asm.missing() {
        Some(missing) => Err(AssemblyError::Incomplete { missing }),
        None => Err(AssemblyError::NoPacket),
    }
}

/// One line of the demodulation trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub capture_time: f64,
    pub demod: Option<DemodFrame>,
}

pub const TRACE_HEADER: &str = "capture_time,byte,c0,c1,c2,c3,c4,c5,c6,c7,parity";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        match &self.demod {
            Some(d) => {
                let conf: Vec<String> = d.confidence.iter().map(|c| format!("{c:.4}")).collect();
                let parity = match d.symbol_parity {
                    Parity::Even => "even",
                    Parity::Odd => "odd",
                };
                format!("{:.6},{},{},{}", self.capture_time, d.byte_value, conf.join(","), parity)
            }
            None => format!("{:.6},,,,,,,,,,unreliable", self.capture_time),
        }
    }
}

/// Full receive chain over a stream of captures: acquisition, tracking,
/// demodulation and packet reassembly.
#[derive(Debug, Clone)]
pub struct Receiver {
    cfg: RxConfig,
    prev: Option<CameraFrame>,
    roi: RegionOfInterest,
    assembler: PacketAssembler,
    trace: Option<Vec<TraceRow>>,
    acquirer: Acquirer,
    rows: RowEnergy,
    pub acquisitions: u64,
}

impl Receiver {
    pub fn new(cfg: RxConfig) -> Self {
        Self {
            cfg,
            prev: None,
            roi: RegionOfInterest::invalid(),
            assembler: PacketAssembler::new(cfg),
            trace: None,
            acquirer: Acquirer::default(),
            rows: RowEnergy::default(),
            acquisitions: 0,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn roi(&self) -> &RegionOfInterest {
        &self.roi
    }

    pub fn stats(&self) -> AssemblerStats {
        self.assembler.stats
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    /// Rows the next capture must contain; `None` means the whole frame.
    /// Whole frames are requested for the last two captures before the ROI
    /// can be dropped, so a reacquisition sees the same pixels it would have
    /// with full renders.
    pub fn rows_needed(&self) -> Option<Range<usize>> {
        (self.roi.valid && self.roi.lost_frames + 1 < self.cfg.lost_limit).then(|| self.roi.rows())
    }

    pub fn push(&mut self, frame: CameraFrame) -> Option<RxPacket> {
        if let Some(prev) = &self.prev {
            if self.roi.valid {
                self.roi = track_roi_with(&self.roi, prev, &frame, &self.cfg);
                if !self.roi.valid {
                    self.acquirer.reset();
                    self.acquirer.push(prev.clone());
                } else if let Some(r) = self.rows.update(&self.roi, prev, &frame) {
                    self.roi = r;
                }
            }
        }
        if !self.roi.valid {
            self.acquirer.push(frame.clone());
            let cand = self.acquirer.detect(&self.cfg);
            if cand.valid && demod_frame_with(&frame, &cand, self.cfg.contrast_floor).is_ok() {
                self.roi = cand;
                self.acquisitions += 1;
                self.acquirer.reset();
                self.rows.reset();
            }
        }
        let mut out = None;
        if !self.roi.valid {
            self.assembler.push_unreliable(frame.capture_time);
        } else {
            match demod_frame_with(&frame, &self.roi, self.cfg.contrast_floor) {
                Ok(d) => {
                    if let Some(t) = self.trace.as_mut() {
                        t.push(TraceRow {
                            capture_time: frame.capture_time,
                            demod: Some(d),
                        });
                    }
                    out = self.assembler.push(d);
                }
                Err(_) => {
                    if let Some(t) = self.trace.as_mut() {
                        t.push(TraceRow {
                            capture_time: frame.capture_time,
                            demod: None,
                        });
                    }
                    self.assembler.push_unreliable(frame.capture_time);
                }
            }
        }
        self.prev = Some(frame);
        out
    }

    pub fn finish(&mut self) -> Option<RxPacket> {
        self.assembler.finish()
    }
}
