//! Frequency-shifted backscatter spectrum, tag channel planning and the
//! receiver's sweep schedule.
//!
//! A tag toggling its RF switch with a square wave at `f_b` mixes the
//! excitation carrier `f_c` with every odd harmonic of `f_b`, so its reflection
//! shows up at `f_c ± (2n-1) f_b` with amplitude `1/(2n-1)` relative to the
//! fundamental. Each tag gets its own receive channel; the planner rejects any
//! assignment whose images land inside another tag's channel.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Timestamp;

/// Width of one WiFi channel, Hz.
pub const CHANNEL_WIDTH_HZ: f64 = 20e6;

/// Highest harmonic order checked for sideband collisions (fundamental and
/// third harmonic). Higher orders carry at most 1/25 of the power.
pub const COLLISION_ORDER: u32 = 2;

/// Default receiver dwell time per channel, seconds.
pub const DEFAULT_DWELL_S: f64 = 0.1;

/// Non-overlapping 20 MHz channels in the 5 GHz band.
pub const CHANNELS_5GHZ: [u32; 25] = [
    36, 40, 44, 48, 52, 56, 60, 64, 100, 104, 108, 112, 116, 120, 124, 128, 132, 136, 140, 144,
    149, 153, 157, 161, 165,
];

/// Center frequency of a 5 GHz channel number, Hz.
pub fn center_frequency_hz(channel: u32) -> Result<f64> {
    if CHANNELS_5GHZ.contains(&channel) {
        Ok(5e9 + 5e6 * channel as f64)
    } else {
        Err(Error::InvalidArgument(format!(
            "channel {channel} is not in the 5 GHz channel table"
        )))
    }
}

/// Channel whose 20 MHz extent contains `freq_hz`, if any.
pub fn channel_containing(freq_hz: f64) -> Option<u32> {
    CHANNELS_5GHZ.iter().copied().find(|&ch| {
        let c = 5e9 + 5e6 * ch as f64;
        (freq_hz - c).abs() < CHANNEL_WIDTH_HZ / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidebandImage {
    pub order: u32,
    pub offset_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub shift_hz: f64,
    /// Ordered by `|offset|`, lower image first within an order.
    pub images: Vec<SidebandImage>,
}

impl SpectrumReport {
    pub fn amplitude_of_order(&self, order: u32) -> Option<f64> {
        self.images
            .iter()
            .find(|img| img.order == order)
            .map(|img| img.amplitude)
    }

    /// Absolute image frequencies around a carrier.
    pub fn frequencies_around(&self, carrier_hz: f64) -> Vec<f64> {
        self.images.iter().map(|i| carrier_hz + i.offset_hz).collect()
    }
}

/// Odd-harmonic images of a square-wave frequency shift, up to `max_order`.
///
/// The square wave `4/π Σ sin((2n-1) ω_b t)/(2n-1)` puts order `n` at
/// `±(2n-1) f_b`; amplitudes are normalized so order 1 is 1.
pub fn sideband_spectrum(shift_hz: f64, max_order: u32) -> Result<SpectrumReport> {
    if !(shift_hz > 0.0) || !shift_hz.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "frequency shift must be positive, got {shift_hz}"
        )));
    }
    if max_order < 1 {
        return Err(Error::InvalidArgument("max_order must be at least 1".into()));
    }
    let mut images = Vec::with_capacity(2 * max_order as usize);
    for n in 1..=max_order {
        let k = (2 * n - 1) as f64;
        let amplitude = 1.0 / k;
        images.push(SidebandImage {
            order: n,
            offset_hz: -k * shift_hz,
            amplitude,
        });
        images.push(SidebandImage {
            order: n,
            offset_hz: k * shift_hz,
            amplitude,
        });
    }
    Ok(SpectrumReport { shift_hz, images })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub tag_id: u32,
    pub shift_hz: f64,
    pub rx_channel: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub excitation_channel: u32,
    pub assignments: Vec<Assignment>,
}

/// One image of one tag landing inside another tag's receive channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub source_tag: u32,
    pub victim_tag: u32,
    pub image_hz: f64,
}

/// Whether tag channel `a`'s images (orders up to [`COLLISION_ORDER`]) land in
/// channel `b` when excited on `excitation`.
fn images_hit(excitation: u32, a: u32, b: u32) -> bool {
    let fc = 5e9 + 5e6 * excitation as f64;
    let fa = 5e9 + 5e6 * a as f64;
    let fb = 5e9 + 5e6 * b as f64;
    let shift = (fa - fc).abs();
    (1..=COLLISION_ORDER).any(|n| {
        let k = (2 * n - 1) as f64;
        [fc - k * shift, fc + k * shift]
            .iter()
            .any(|img| (img - fb).abs() < CHANNEL_WIDTH_HZ / 2.0)
    })
}

fn conflicts(excitation: u32, a: u32, b: u32) -> bool {
    images_hit(excitation, a, b) || images_hit(excitation, b, a)
}

/// Candidate receive channels, nearest to the excitation first.
fn candidates(excitation: u32) -> Vec<u32> {
    let mut c: Vec<u32> = CHANNELS_5GHZ
        .iter()
        .copied()
        .filter(|&ch| ch != excitation)
        .collect();
    c.sort_by_key(|&ch| ((ch as i64 - excitation as i64).abs(), ch));
    c
}

/// Largest conflict-free channel set, lexicographically first in candidate
/// order among all maximum sets.
fn maximum_channel_set(excitation: u32) -> Vec<u32> {
    let cand = candidates(excitation);
    let n = cand.len();
    let conflict_mask: Vec<u64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && conflicts(excitation, cand[i], cand[j]))
                .fold(0u64, |m, j| m | (1 << j))
        })
        .collect();

    fn search(
        idx: usize,
        chosen: u64,
        count: usize,
        masks: &[u64],
        best: &mut (usize, u64),
    ) {
        let n = masks.len();
        if count + (n - idx) <= best.0 {
            return;
        }
        if idx == n {
            *best = (count, chosen);
            return;
        }
        if masks[idx] & chosen == 0 {
            search(idx + 1, chosen | (1 << idx), count + 1, masks, best);
        }
        search(idx + 1, chosen, count, masks, best);
    }

    let mut best = (0usize, 0u64);
    search(0, 0, 0, &conflict_mask, &mut best);
    (0..n)
        .filter(|&i| best.1 & (1 << i) != 0)
        .map(|i| cand[i])
        .collect()
}

/// Maximum number of tags that can be planned around `excitation`.
pub fn capacity(excitation_channel: u32) -> Result<usize> {
    center_frequency_hz(excitation_channel)?;
    Ok(maximum_channel_set(excitation_channel).len())
}

/// Assigns a distinct, collision-free receive channel to tags `0..num_tags`.
pub fn plan_channels(num_tags: usize, excitation_channel: u32) -> Result<ChannelPlan> {
    let fc = center_frequency_hz(excitation_channel)?;
    let set = maximum_channel_set(excitation_channel);
    if num_tags > set.len() {
        return Err(Error::CapacityExceeded {
            requested: num_tags,
            max: set.len(),
        });
    }
    let assignments = set
        .iter()
        .take(num_tags)
        .enumerate()
        .map(|(i, &ch)| Assignment {
            tag_id: i as u32,
            shift_hz: (5e9 + 5e6 * ch as f64 - fc).abs(),
            rx_channel: ch,
        })
        .collect();
    Ok(ChannelPlan {
        excitation_channel,
        assignments,
    })
}

impl ChannelPlan {
    pub fn excitation_frequency_hz(&self) -> f64 {
        5e9 + 5e6 * self.excitation_channel as f64
    }

    pub fn tag_on_channel(&self, channel: u32) -> Option<u32> {
        self.assignments
            .iter()
            .find(|a| a.rx_channel == channel)
            .map(|a| a.tag_id)
    }

    /// Exhaustive check of every image of every tag against every other
    /// tag's channel, plus the structural invariants.
    pub fn collisions(&self) -> Vec<Collision> {
        let fc = self.excitation_frequency_hz();
        let mut out = Vec::new();
        for src in &self.assignments {
            let Ok(spectrum) = sideband_spectrum(src.shift_hz, COLLISION_ORDER) else {
                continue;
            };
            for img in spectrum.frequencies_around(fc) {
                for victim in &self.assignments {
                    if victim.tag_id == src.tag_id {
                        continue;
                    }
                    let center = 5e9 + 5e6 * victim.rx_channel as f64;
                    if (img - center).abs() < CHANNEL_WIDTH_HZ / 2.0 {
                        out.push(Collision {
                            source_tag: src.tag_id,
                            victim_tag: victim.tag_id,
                            image_hz: img,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fc = center_frequency_hz(self.excitation_channel)?;
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.assignments {
            let f = center_frequency_hz(a.rx_channel)?;
            if a.rx_channel == self.excitation_channel {
                return Err(Error::InvalidState(format!(
                    "tag {} assigned the excitation channel",
                    a.tag_id
                )));
            }
            if !seen.insert(a.rx_channel) {
                return Err(Error::InvalidState(format!(
                    "channel {} assigned twice",
                    a.rx_channel
                )));
            }
            if ((f - fc).abs() - a.shift_hz).abs() > 1.0 {
                return Err(Error::InvalidState(format!(
                    "tag {} shift {} Hz does not reach channel {}",
                    a.tag_id, a.shift_hz, a.rx_channel
                )));
            }
        }
        if let Some(c) = self.collisions().first() {
            return Err(Error::InvalidState(format!(
                "image of tag {} at {} Hz falls in the channel of tag {}",
                c.source_tag, c.image_hz, c.victim_tag
            )));
        }
        Ok(())
    }

    /// Writes `tag_id,shift_hz,rx_channel` records with a header line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["# excitation_channel", &self.excitation_channel.to_string(), ""])?;
        for a in &self.assignments {
            wtr.serialize(a)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut excitation = None;
        let mut assignments = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 1;
            let bad = |msg: &str| Error::Parse {
                line,
                msg: msg.to_string(),
            };
            match rec.get(0) {
                Some("# excitation_channel") => {
                    excitation = Some(
                        rec.get(1)
                            .and_then(|s| s.trim().parse().ok())
                            .ok_or_else(|| bad("bad excitation channel"))?,
                    );
                }
                Some("tag_id") => {}
                _ => {
                    if rec.len() != 3 {
                        return Err(bad("expected tag_id,shift_hz,rx_channel"));
                    }
                    assignments.push(Assignment {
                        tag_id: rec[0].trim().parse().map_err(|_| bad("bad tag_id"))?,
                        shift_hz: rec[1].trim().parse().map_err(|_| bad("bad shift_hz"))?,
                        rx_channel: rec[2].trim().parse().map_err(|_| bad("bad rx_channel"))?,
                    });
                }
            }
        }
        let excitation_channel =
            excitation.ok_or_else(|| Error::Parse { line: 1, msg: "missing excitation header".into() })?;
        Ok(Self {
            excitation_channel,
            assignments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Round-robin receiver schedule over the planned tag channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSchedule {
    pub dwell_s: f64,
    pub channels: Vec<u32>,
}

impl SweepSchedule {
    pub fn from_plan(plan: &ChannelPlan, dwell_s: f64) -> Self {
        Self {
            dwell_s,
            channels: plan.assignments.iter().map(|a| a.rx_channel).collect(),
        }
    }

    pub fn period_s(&self) -> f64 {
        self.dwell_s * self.channels.len() as f64
    }

    /// Index of the dwell containing `t`; exact dwell boundaries belong to
    /// the later dwell even after floating-point rounding.
    pub fn slot_at(&self, t: Timestamp) -> u64 {
        let x = t.seconds() / self.dwell_s;
        (x + 1e-9 * x.abs().max(1.0)).floor().max(0.0) as u64
    }

    pub fn channel_of_slot(&self, slot: u64) -> Result<u32> {
        if self.channels.is_empty() {
            return Err(Error::InvalidState("sweep schedule has no channels".into()));
        }
        Ok(self.channels[(slot % self.channels.len() as u64) as usize])
    }
}

/// Channel the receiver is tuned to at `t`.
pub fn rx_channel_at(schedule: &SweepSchedule, t: Timestamp) -> Result<u32> {
    if schedule.channels.is_empty() || !(schedule.dwell_s > 0.0) {
        return Err(Error::InvalidState("sweep schedule is empty".into()));
    }
    schedule.channel_of_slot(schedule.slot_at(t))
}
