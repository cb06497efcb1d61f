//! View transforms for multichannel segments and the policy that draws the
//! `T` views of one instance.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// A channels × time matrix in 64-bit floats, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    channels: usize,
    time: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn new(channels: usize, time: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * time {
            return Err(Error::Shape(format!(
                "{} values cannot fill {channels}x{time}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            time,
            data,
        })
    }

    pub fn from_f32(channels: usize, time: usize, samples: &[f32]) -> Result<Self> {
        Self::new(channels, time, samples.iter().map(|&v| v as f64).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.time..(c + 1) * self.time]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.time..(c + 1) * self.time]
    }
}

/// Row `i` of the output is row `perm[i]` of the input.
pub fn channel_permutation(seg: &Signal, perm: &[usize]) -> Result<Signal> {
    let c = seg.channels;
    let mut seen = vec![false; c];
    if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!(
            "{perm:?} is not a permutation of {c} channels"
        )));
    }
    let mut data = Vec::with_capacity(seg.data.len());
    for &src in perm {
        data.extend_from_slice(seg.channel(src));
    }
    Signal::new(c, seg.time, data)
}

/// Zeroes samples `[start, start + len)` on every channel.
pub fn temporal_mask(seg: &Signal, start: usize, len: usize) -> Result<Signal> {
    if start.checked_add(len).is_none_or(|end| end > seg.time) {
        return Err(Error::InvalidArgument(format!(
            "mask [{start}, {start}+{len}) exceeds {} samples",
            seg.time
        )));
    }
    let mut out = seg.clone();
    for c in 0..out.channels {
        out.channel_mut(c)[start..start + len].fill(0.0);
    }
    Ok(out)
}

/// Zeroes the listed channels.
pub fn channel_dropout(seg: &Signal, channels: &[usize]) -> Result<Signal> {
    if let Some(&bad) = channels.iter().find(|&&c| c >= seg.channels) {
        return Err(Error::InvalidArgument(format!(
            "channel {bad} out of range for {} channels",
            seg.channels
        )));
    }
    let mut out = seg.clone();
    for &c in channels {
        out.channel_mut(c).fill(0.0);
    }
    Ok(out)
}

/// Linearly resamples `[start, start + len)` back to the full length. Output
/// position `i` reads source position `start + i·(len−1)/(time−1)`.
pub fn crop_resize(seg: &Signal, start: usize, len: usize) -> Result<Signal> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!("crop length {len} < 2")));
    }
    if start + len > seg.time {
        return Err(Error::InvalidArgument(format!(
            "crop [{start}, {start}+{len}) exceeds {} samples",
            seg.time
        )));
    }
    let time = seg.time;
    let step = (len - 1) as f64 / (time - 1) as f64;
    let mut out = seg.clone();
    for c in 0..seg.channels {
        let src = seg.channel(c);
        let dst = out.channel_mut(c);
        for (i, d) in dst.iter_mut().enumerate() {
            let pos = start as f64 + i as f64 * step;
            let lo = (pos.floor() as usize).min(start + len - 1);
            let frac = pos - lo as f64;
            *d = if frac == 0.0 || lo + 1 >= start + len {
                src[lo]
            } else {
                src[lo] + frac * (src[lo + 1] - src[lo])
            };
        }
    }
    Ok(out)
}

/// The four transform families, in round-robin order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    ChannelPermutation,
    TemporalMask,
    ChannelDropout,
    CropResize,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::ChannelPermutation,
        TransformKind::TemporalMask,
        TransformKind::ChannelDropout,
        TransformKind::CropResize,
    ];

    pub fn for_view(view: usize) -> Self {
        Self::ALL[view % Self::ALL.len()]
    }
}

/// Parameter ranges for [`sample_views`]. Ratios are fractions of the
/// segment's channel count or length.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPolicy {
    pub views: usize,
    /// Fraction of the `channels/2` possible disjoint pairs that get swapped.
    pub swap_fraction: f64,
    pub mask_ratio: (f64, f64),
    pub dropout_fraction: (f64, f64),
    pub crop_ratio: (f64, f64),
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            views: 4,
            swap_fraction: 0.1,
            mask_ratio: (0.05, 0.2),
            dropout_fraction: (0.05, 0.2),
            crop_ratio: (0.5, 0.95),
        }
    }
}

impl AugPolicy {
    /// Every transform at its no-op setting.
    pub fn identity(views: usize) -> Self {
        Self {
            views,
            swap_fraction: 0.0,
            mask_ratio: (0.0, 0.0),
            dropout_fraction: (0.0, 0.0),
            crop_ratio: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::config("views", "need at least 2 views"));
        }
        if !(0.0..=1.0).contains(&self.swap_fraction) {
            return Err(Error::config("swap_fraction", "must lie in [0, 1]"));
        }
        let check = |key: &str, (lo, hi): (f64, f64), ok: &dyn Fn(f64) -> bool| {
            if !(lo <= hi) || !ok(lo) || !ok(hi) {
                Err(Error::config(key, format!("bad range [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        check("mask_ratio", self.mask_ratio, &|v| (0.0..1.0).contains(&v))?;
        check("dropout_fraction", self.dropout_fraction, &|v| (0.0..1.0).contains(&v))?;
        check("crop_ratio", self.crop_ratio, &|v| v > 0.0 && v <= 1.0)
    }
}

/// The `T` views of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Signal>,
    pub source_index: usize,
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn apply_transform(
    kind: TransformKind,
    seg: &Signal,
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> Result<Signal> {
    let (channels, time) = (seg.channels, seg.time);
    match kind {
        TransformKind::ChannelPermutation => {
            let swaps = (policy.swap_fraction * (channels / 2) as f64).ceil() as usize;
            let mut perm: Vec<usize> = (0..channels).collect();
            for _ in 0..swaps {
                let pair = index::sample(rng, channels, 2);
                perm.swap(pair.index(0), pair.index(1));
            }
            channel_permutation(seg, &perm)
        }
        TransformKind::TemporalMask => {
            let len = (draw(rng, policy.mask_ratio) * time as f64).round() as usize;
            let start = rng.random_range(0..=time - len);
            temporal_mask(seg, start, len)
        }
        TransformKind::ChannelDropout => {
            let count = (draw(rng, policy.dropout_fraction) * channels as f64).round() as usize;
            let mut dropped = index::sample(rng, channels, count.min(channels)).into_vec();
            dropped.sort_unstable();
            channel_dropout(seg, &dropped)
        }
        TransformKind::CropResize => {
            let len = ((draw(rng, policy.crop_ratio) * time as f64).round() as usize).clamp(2, time);
            let start = rng.random_range(0..=time - len);
            crop_resize(seg, start, len)
        }
    }
}

/// Draws `policy.views` views; view `t` uses [`TransformKind::for_view`]`(t)`.
pub fn sample_views(
    seg: &Signal,
    source_index: usize,
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> Result<ViewSet> {
    let views = (0..policy.views)
        .map(|t| apply_transform(TransformKind::for_view(t), seg, policy, rng))
        .collect::<Result<_>>()?;
    Ok(ViewSet {
        views,
        source_index,
    })
}
