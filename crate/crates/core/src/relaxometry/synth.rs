//! Multi-TI synthesis and assembly of network input stacks.

use serde::{Deserialize, Serialize};

use super::fit::QuantMaps;
use super::signal::recovery_factor;
use super::{AcqParams, RelaxError};
use crate::volume::Volume3D;

/// Weighted image at inversion time `ti`. Voxels whose fit failed are 0.
pub fn synthesize_ti(maps: &QuantMaps, ti: f64, tr: f64) -> Result<Volume3D, RelaxError> {
    if !(ti > 0.0 && ti < tr) {
        return Err(RelaxError::TiRange { ti, tr });
    }
    let data = maps
        .pd
        .data()
        .iter()
        .zip(maps.t1.data())
        .zip(&maps.status)
        .map(|((&pd, &t1), status)| {
            if *status == super::FitStatus::Ok {
                pd * recovery_factor(t1, ti, tr)
            } else {
                0.0
            }
        })
        .collect();
    Ok(maps.pd.with_data(data)?)
}

/// Arithmetic TI progression `start, start + step, ..., <= end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for SeriesSpec {
    fn default() -> Self {
        Self {
            start: 400.0,
            end: 1400.0,
            step: 20.0,
        }
    }
}

impl SeriesSpec {
    pub fn tis(&self) -> Result<Vec<f64>, RelaxError> {
        if !(self.step > 0.0) || !(self.start <= self.end) || !self.end.is_finite() {
            return Err(RelaxError::Range {
                start: self.start,
                end: self.end,
                step: self.step,
            });
        }
        // Tolerate representation error in (end - start) / step.
        let count = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|k| self.start + k as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelKind {
    Synthesized,
    /// PD or T1 map.
    Quantitative,
    Acquired,
}

impl ChannelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ChannelKind::Synthesized => "SYNTHESIZED",
            ChannelKind::Quantitative => "QUANTITATIVE",
            ChannelKind::Acquired => "ACQUIRED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub kind: ChannelKind,
    pub ti_ms: Option<f64>,
    pub name: String,
}

impl ChannelMeta {
    pub fn synthesized(ti: f64) -> Self {
        Self {
            kind: ChannelKind::Synthesized,
            ti_ms: Some(ti),
            name: format!("TI{}", format_ti(ti)),
        }
    }
}

fn format_ti(ti: f64) -> String {
    if ti.fract() == 0.0 {
        format!("{}", ti as i64)
    } else {
        format!("{ti}")
    }
}

/// Ordered multi-channel input on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<Volume3D>,
    meta: Vec<ChannelMeta>,
}

impl ChannelStack {
    pub fn new(channels: Vec<Volume3D>, meta: Vec<ChannelMeta>) -> Result<Self, RelaxError> {
        if channels.len() != meta.len() {
            return Err(RelaxError::MissingSource(format!(
                "{} channels but {} metadata entries",
                channels.len(),
                meta.len()
            )));
        }
        if let Some(first) = channels.first() {
            if let Some(bad) = channels.iter().find(|c| c.dims() != first.dims()) {
                return Err(RelaxError::DimMismatch(first.dims(), bad.dims()));
            }
        }
        Ok(Self { channels, meta })
    }

    pub fn channels(&self) -> &[Volume3D] {
        &self.channels
    }

    pub fn meta(&self) -> &[ChannelMeta] {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.channels.first().map(|c| c.dims())
    }

    /// Applies `f` to every channel, keeping the metadata.
    pub fn map_channels(&self, f: impl Fn(&Volume3D) -> Volume3D) -> Result<Self, RelaxError> {
        Self::new(self.channels.iter().map(f).collect(), self.meta.clone())
    }
}

/// Synthesized images at every TI of `series`.
pub fn synthesize_series(maps: &QuantMaps, series: &SeriesSpec, tr: f64) -> Result<ChannelStack, RelaxError> {
    let tis = series.tis()?;
    let channels = tis
        .iter()
        .map(|&ti| synthesize_ti(maps, ti, tr))
        .collect::<Result<Vec<_>, _>>()?;
    ChannelStack::new(channels, tis.iter().map(|&ti| ChannelMeta::synthesized(ti)).collect())
}

/// Divides by the mean intensity inside `mask` (non-zero voxels).
pub fn wm_mean_normalize(vol: &Volume3D, mask: &Volume3D) -> Result<Volume3D, RelaxError> {
    let mean = masked_mean(vol, mask)?;
    Ok(vol.map(|v| v / mean))
}

fn masked_mean(vol: &Volume3D, mask: &Volume3D) -> Result<f64, RelaxError> {
    if vol.dims() != mask.dims() {
        return Err(RelaxError::DimMismatch(vol.dims(), mask.dims()));
    }
    let (sum, count) = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
    if count == 0 {
        return Err(RelaxError::EmptyMask);
    }
    let mean = sum / count as f64;
    if mean == 0.0 || !mean.is_finite() {
        return Err(RelaxError::ZeroMean(mean));
    }
    Ok(mean)
}

/// One requested input channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSource {
    Synth(f64),
    PdMap,
    T1Map,
    Mprage,
    Fgatir,
}

impl ChannelSource {
    fn group(self) -> u8 {
        match self {
            ChannelSource::Synth(_) => 0,
            ChannelSource::PdMap | ChannelSource::T1Map => 1,
            ChannelSource::Mprage | ChannelSource::Fgatir => 2,
        }
    }
}

/// A named set of input channels.
///
/// Stacks are ordered synthesized TIs first (in listed order), then PD and T1
/// maps, then the acquired MPRAGE and FGATIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub name: String,
    pub sources: Vec<ChannelSource>,
}

impl InputConfig {
    /// Preset names: `stage1` (51 synthesized + MPRAGE + FGATIR) and the
    /// nine comparison configurations, addressable as `config1`..`config9` or
    /// by their short names.
    pub fn preset(name: &str) -> Result<Self, RelaxError> {
        let series = |spec: SeriesSpec| -> Vec<ChannelSource> {
            spec.tis()
                .expect("valid preset")
                .into_iter()
                .map(ChannelSource::Synth)
                .collect()
        };
        use ChannelSource::*;
        let (canonical, sources) = match name.to_ascii_lowercase().as_str() {
            "stage1" => ("stage1", [series(SeriesSpec::default()), vec![Mprage, Fgatir]].concat()),
            "config1" | "mprage" => ("mprage", vec![Mprage]),
            "config2" | "fgatir" => ("fgatir", vec![Fgatir]),
            "config3" | "mprage+fgatir" => ("mprage+fgatir", vec![Mprage, Fgatir]),
            "config4" | "pd+t1" => ("pd+t1", vec![PdMap, T1Map]),
            "config5" | "t1" => ("t1", vec![T1Map]),
            "config6" | "ti51" => ("ti51", series(SeriesSpec::default())),
            "config7" | "ti-top1" => ("ti-top1", vec![Synth(740.0)]),
            "config8" | "ti-top2" => ("ti-top2", vec![Synth(740.0), Synth(760.0)]),
            "config9" | "ti-top4" => ("ti-top4", vec![Synth(720.0), Synth(740.0), Synth(760.0), Synth(780.0)]),
            _ => return Err(RelaxError::UnknownConfig(name.to_string())),
        };
        Ok(Self {
            name: canonical.to_string(),
            sources,
        })
    }

    pub fn preset_names() -> [&'static str; 10] {
        [
            "stage1",
            "mprage",
            "fgatir",
            "mprage+fgatir",
            "pd+t1",
            "t1",
            "ti51",
            "ti-top1",
            "ti-top2",
            "ti-top4",
        ]
    }

    /// Sources in stack order.
    pub fn ordered(&self) -> Vec<ChannelSource> {
        let mut out = self.sources.clone();
        out.sort_by_key(|s| s.group());
        out
    }

    pub fn needs_acquired(&self) -> bool {
        self.sources.iter().any(|s| s.group() == 2)
    }
}

/// Inputs available for stack assembly.
#[derive(Debug, Clone, Copy)]
pub struct StackSources<'a> {
    pub maps: &'a QuantMaps,
    pub mprage: Option<&'a Volume3D>,
    pub fgatir: Option<&'a Volume3D>,
    pub acq: AcqParams,
    /// White-matter mask for intensity normalisation; `None` leaves raw values.
    pub wm_mask: Option<&'a Volume3D>,
}

/// Assembles the channels of `config`.
///
/// With a white-matter mask, every intensity channel (synthesized, PD,
/// MPRAGE, FGATIR) is divided by one common factor, the white-matter mean of
/// the MPRAGE (or of the map-synthesized MPRAGE when none is supplied), and
/// the T1 map is divided by its own white-matter mean. A per-channel factor
/// would divide by values near zero at the white-matter null.
pub fn build_input_stack(src: &StackSources<'_>, config: &InputConfig) -> Result<ChannelStack, RelaxError> {
    let tr = src.acq.tr;
    let (intensity_scale, t1_scale) = match src.wm_mask {
        Some(mask) => {
            let reference = match src.mprage {
                Some(m) => masked_mean(m, mask)?,
                None => masked_mean(&synthesize_ti(src.maps, src.acq.ti1, tr)?, mask)?,
            };
            (reference, masked_mean(&src.maps.t1, mask)?)
        }
        None => (1.0, 1.0),
    };
    let scale = |v: Volume3D, s: f64| if s == 1.0 { v } else { v.map(|x| x / s) };
    let mut channels = Vec::with_capacity(config.sources.len());
    let mut meta = Vec::with_capacity(config.sources.len());
    for source in config.ordered() {
        let (vol, m) = match source {
            ChannelSource::Synth(ti) => (
                scale(synthesize_ti(src.maps, ti, tr)?, intensity_scale),
                ChannelMeta::synthesized(ti),
            ),
            ChannelSource::PdMap => (
                scale(src.maps.pd.clone(), intensity_scale),
                ChannelMeta {
                    kind: ChannelKind::Quantitative,
                    ti_ms: None,
                    name: "PD".into(),
                },
            ),
            ChannelSource::T1Map => (
                scale(src.maps.t1.clone(), t1_scale),
                ChannelMeta {
                    kind: ChannelKind::Quantitative,
                    ti_ms: None,
                    name: "T1".into(),
                },
            ),
            ChannelSource::Mprage => (
                scale(
                    src.mprage
                        .ok_or_else(|| RelaxError::MissingSource("MPRAGE".into()))?
                        .clone(),
                    intensity_scale,
                ),
                ChannelMeta {
                    kind: ChannelKind::Acquired,
                    ti_ms: Some(src.acq.ti1),
                    name: "MPRAGE".into(),
                },
            ),
            ChannelSource::Fgatir => (
                scale(
                    src.fgatir
                        .ok_or_else(|| RelaxError::MissingSource("FGATIR".into()))?
                        .clone(),
                    intensity_scale,
                ),
                ChannelMeta {
                    kind: ChannelKind::Acquired,
                    ti_ms: Some(src.acq.ti2),
                    name: "FGATIR".into(),
                },
            ),
        };
        if vol.dims() != src.maps.dims() {
            return Err(RelaxError::DimMismatch(src.maps.dims(), vol.dims()));
        }
        channels.push(vol);
        meta.push(m);
    }
    ChannelStack::new(channels, meta)
}
