//! Unified token encoding for multi-source time series.
//!
//! Each channel group gets its own learned projection into the shared
//! embedding space. A contextual vector `[channel; sin(time); month]` is
//! added to every token; static groups contribute one token with zeroed
//! temporal slices.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, ParcelSample};
use crate::error::{contract, Error, Result};
use crate::nn::layers::{linear, sinusoid_table};
use crate::nn::params::{init_linear, init_table, init_vector, lookup, ParamMap, TensorMap};
use crate::rng::Rng;
use crate::tensor::{Array, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Dynamic,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum GroupEncoding {
    Numeric,
    /// Single integer-valued channel looked up in a table of `classes` rows.
    Categorical { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelGroup {
    pub name: String,
    pub channels: usize,
    pub kind: GroupKind,
    #[serde(default = "numeric")]
    pub encoding: GroupEncoding,
    /// Indices into the sample's stored channel vector; all channels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select: Option<Vec<usize>>,
    /// Name of the channel group in the dataset; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

fn numeric() -> GroupEncoding {
    GroupEncoding::Numeric
}

impl ChannelGroup {
    pub fn dynamic(name: &str, channels: usize) -> Self {
        ChannelGroup {
            name: name.into(),
            channels,
            kind: GroupKind::Dynamic,
            encoding: GroupEncoding::Numeric,
            select: None,
            source: None,
        }
    }

    pub fn fixed(name: &str, channels: usize) -> Self {
        ChannelGroup {
            kind: GroupKind::Static,
            ..Self::dynamic(name, channels)
        }
    }

    pub fn source_name(&self) -> &str {
        self.source.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelGroupSpec {
    pub groups: Vec<ChannelGroup>,
}

impl ChannelGroupSpec {
    pub fn new(groups: Vec<ChannelGroup>) -> Result<Self> {
        let s = ChannelGroupSpec { groups };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_dynamic() == 0 {
            return Err(contract("channel group spec needs at least one dynamic group"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.channels == 0 {
                return Err(contract(format!("group {} has no channels", g.name)));
            }
            if matches!(g.encoding, GroupEncoding::Categorical { .. }) && g.channels != 1 {
                return Err(contract(format!("categorical group {} must have one channel", g.name)));
            }
            if let Some(sel) = &g.select {
                if sel.len() != g.channels {
                    return Err(contract(format!(
                        "group {} selects {} channels but declares {}",
                        g.name,
                        sel.len(),
                        g.channels
                    )));
                }
            }
            if self.groups[..i].iter().any(|o| o.name == g.name) {
                return Err(contract(format!("duplicate group name {}", g.name)));
            }
        }
        Ok(())
    }

    /// Total channel count `D`.
    pub fn total_channels(&self) -> usize {
        self.groups.iter().map(|g| g.channels).sum()
    }

    pub fn c_static(&self) -> usize {
        self.groups.iter().filter(|g| g.kind == GroupKind::Static).count()
    }

    pub fn c_dynamic(&self) -> usize {
        self.groups.iter().filter(|g| g.kind == GroupKind::Dynamic).count()
    }

    pub fn token_count(&self, t: usize) -> usize {
        self.c_static() + self.c_dynamic() * t
    }

    /// Group indices in token order: static groups, then dynamic groups.
    pub fn token_group_order(&self) -> Vec<usize> {
        let stat = (0..self.groups.len()).filter(|&i| self.groups[i].kind == GroupKind::Static);
        let dynm = (0..self.groups.len()).filter(|&i| self.groups[i].kind == GroupKind::Dynamic);
        stat.chain(dynm).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Presto,
    Xts,
}

/// What the sinusoidal time encoding indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeIndex {
    /// Observation ordinal `0..T`.
    Ordinal,
    /// Day of year minus one, `0..366`.
    DayOfYear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingRegime {
    pub variant: Variant,
    pub d_emb: usize,
    pub d_sin: usize,
    pub d_month: usize,
    pub d_channel: usize,
    pub time_index: TimeIndex,
    pub max_len: usize,
}

impl EncodingRegime {
    pub fn presto(d_emb: usize) -> Self {
        EncodingRegime {
            variant: Variant::Presto,
            d_emb,
            d_sin: d_emb / 2,
            d_month: d_emb / 4,
            d_channel: d_emb / 4,
            time_index: TimeIndex::Ordinal,
            max_len: 24,
        }
    }

    pub fn xts(d_emb: usize) -> Self {
        EncodingRegime {
            variant: Variant::Xts,
            d_emb,
            d_sin: 3 * d_emb / 4,
            d_month: 0,
            d_channel: d_emb / 4,
            time_index: TimeIndex::DayOfYear,
            max_len: 366,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_emb;
        if d == 0 || d % 8 != 0 {
            return Err(contract(format!("d_emb must be a positive multiple of 8, got {d}")));
        }
        let ok = match self.variant {
            Variant::Presto => {
                self.d_sin == d / 2 && self.d_month == d / 4 && self.d_channel == d / 4
            }
            Variant::Xts => self.d_month == 0 && self.d_sin == 3 * d / 4 && self.d_channel == d / 4,
        };
        if !ok || self.d_sin + self.d_month + self.d_channel != d {
            return Err(contract(format!("inconsistent slice widths in {self:?}")));
        }
        Ok(())
    }

    /// Index ranges of the channel, sin and month slices.
    pub fn slices(&self) -> [Range<usize>; 3] {
        let a = self.d_channel;
        let b = a + self.d_sin;
        [0..a, a..b, b..b + self.d_month]
    }
}

/// Calendar month (1..=12) of a day of year under a 366-day calendar.
pub fn month_of(day: usize) -> Result<usize> {
    const LENGTHS: [usize; 12] = [31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    if !(1..=366).contains(&day) {
        return Err(contract(format!("day of year {day} outside 1..=366")));
    }
    let mut end = 0;
    for (m, len) in LENGTHS.iter().enumerate() {
        end += len;
        if day <= end {
            return Ok(m + 1);
        }
    }
    unreachable!("month lengths sum to 366")
}

/// Normalized difference vegetation index from red (B04) and NIR (B08).
pub fn compute_ndvi(b04: f64, b08: f64) -> Result<f64> {
    let den = b08 + b04;
    if den == 0.0 {
        return Err(Error::Degenerate("NDVI with b04 + b08 = 0".into()));
    }
    Ok(((b08 - b04) / den).clamp(-1.0, 1.0))
}

/// Which group and time step a token represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenAnnotation {
    pub group: usize,
    pub time: Option<usize>,
}

pub struct TokenSequence {
    pub tokens: Tensor,
    pub annotations: Vec<TokenAnnotation>,
    /// `true` where the token is unavailable (missing group).
    pub mask: Vec<bool>,
    pub t: usize,
}

/// Raw per-sample token values, prepared once and shareable across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenInput {
    pub t: usize,
    pub time_index: Vec<usize>,
    pub months: Vec<usize>,
    /// One entry per spec group: `[T, d_c]` for dynamic, `[1, d_c]` for static.
    pub values: Vec<Option<Array>>,
}

impl TokenInput {
    pub fn from_sample(
        sample: &ParcelSample,
        spec: &ChannelGroupSpec,
        regime: &EncodingRegime,
        norm: Option<&Normalizer>,
    ) -> Result<Self> {
        let t = sample.days.len();
        if t > regime.max_len {
            return Err(Error::Length {
                len: t,
                max: regime.max_len,
            });
        }
        let time_index = match regime.time_index {
            TimeIndex::Ordinal => (0..t).collect(),
            TimeIndex::DayOfYear => sample.days.iter().map(|&d| d - 1).collect(),
        };
        let months = sample
            .days
            .iter()
            .map(|&d| month_of(d))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(spec.groups.len());
        for g in &spec.groups {
            let Some(rows) = sample.channels.get(g.source_name()) else {
                values.push(None);
                continue;
            };
            let want_rows = if g.kind == GroupKind::Static { 1 } else { t };
            if rows.len() != want_rows {
                return Err(contract(format!(
                    "group {} has {} rows, expected {want_rows}",
                    g.name,
                    rows.len()
                )));
            }
            let mut data = Vec::with_capacity(want_rows * g.channels);
            for row in rows {
                let picked: Vec<f64> = match &g.select {
                    Some(sel) => sel
                        .iter()
                        .map(|&i| {
                            row.get(i).copied().ok_or_else(|| {
                                contract(format!("group {} lacks channel {i}", g.name))
                            })
                        })
                        .collect::<Result<_>>()?,
                    None => row.clone(),
                };
                if picked.len() != g.channels {
                    return Err(contract(format!(
                        "group {} has {} channels, spec declares {}",
                        g.name,
                        picked.len(),
                        g.channels
                    )));
                }
                match (g.encoding, norm) {
                    (GroupEncoding::Numeric, Some(n)) => {
                        data.extend(n.apply(g.source_name(), &picked, g.select.as_deref())?)
                    }
                    _ => data.extend(picked),
                }
            }
            values.push(Some(Array::new(vec![want_rows, g.channels], data)?));
        }
        Ok(TokenInput {
            t,
            time_index,
            months,
            values,
        })
    }
}

/// Learned projections `h^c` and channel-group embeddings under `tokens.`.
pub fn init_projections(
    map: &mut ParamMap,
    spec: &ChannelGroupSpec,
    regime: &EncodingRegime,
    rng: &mut Rng,
) {
    for g in &spec.groups {
        match g.encoding {
            GroupEncoding::Numeric => {
                init_linear(map, &format!("tokens.{}", g.name), g.channels, regime.d_emb, rng)
            }
            GroupEncoding::Categorical { classes } => init_table(
                map,
                &format!("tokens.{}.table", g.name),
                classes,
                regime.d_emb,
                rng,
            ),
        }
        init_vector(map, &format!("tokens.{}.channel", g.name), regime.d_channel, rng);
    }
}

/// Contextual encodings for `rows` tokens of group `g`, shape `[rows, d_emb]`.
fn contextual(
    p: &TensorMap,
    g: &ChannelGroup,
    regime: &EncodingRegime,
    time: Option<(&[usize], &[usize])>,
    rows: usize,
) -> Result<Tensor> {
    let ch = lookup(p, &format!("tokens.{}.channel", g.name))?
        .reshape(&[1, regime.d_channel])?;
    let ch = Tensor::ones(&[rows, 1]).matmul(&ch)?;
    let mut parts = vec![ch];
    match time {
        Some((idx, months)) => {
            parts.push(sinusoid_table(idx, regime.d_sin)?);
            if regime.d_month > 0 {
                let m: Vec<usize> = months.iter().map(|m| m - 1).collect();
                parts.push(sinusoid_table(&m, regime.d_month)?);
            }
        }
        None => parts.push(Tensor::zeros(&[rows, regime.d_sin + regime.d_month])),
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, 1)
}

fn project(p: &TensorMap, g: &ChannelGroup, values: &Array) -> Result<Tensor> {
    let x = Tensor::from_array(values);
    match g.encoding {
        GroupEncoding::Numeric => linear(p, &format!("tokens.{}", g.name), &x),
        GroupEncoding::Categorical { classes } => {
            let idx = values
                .data()
                .iter()
                .map(|&v| {
                    let i = v.round();
                    if i < 0.0 || i as usize >= classes || (v - i).abs() > 1e-9 {
                        Err(contract(format!("category {v} invalid for group {}", g.name)))
                    } else {
                        Ok(i as usize)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::embedding(lookup(p, &format!("tokens.{}.table", g.name))?, &idx)
        }
    }
}

/// Contextual encodings alone, `[N, d_emb]` in token order.
pub fn contexts(
    input: &TokenInput,
    spec: &ChannelGroupSpec,
    regime: &EncodingRegime,
    projections: &TensorMap,
) -> Result<Tensor> {
    let mut blocks = Vec::new();
    for gi in spec.token_group_order() {
        let g = &spec.groups[gi];
        let is_static = g.kind == GroupKind::Static;
        let rows = if is_static { 1 } else { input.t };
        let time = (!is_static).then_some((&input.time_index[..], &input.months[..]));
        blocks.push(contextual(projections, g, regime, time, rows)?);
    }
    let refs: Vec<&Tensor> = blocks.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Builds the token matrix for one sample.
pub fn encode_tokens(
    input: &TokenInput,
    spec: &ChannelGroupSpec,
    regime: &EncodingRegime,
    projections: &TensorMap,
) -> Result<TokenSequence> {
    if input.t > regime.max_len {
        return Err(Error::Length {
            len: input.t,
            max: regime.max_len,
        });
    }
    if input.values.len() != spec.groups.len() {
        return Err(contract("token input does not match the channel group spec"));
    }
    let t = input.t;
    let mut blocks = Vec::new();
    let mut annotations = Vec::with_capacity(spec.token_count(t));
    let mut mask = Vec::with_capacity(spec.token_count(t));
    for gi in spec.token_group_order() {
        let g = &spec.groups[gi];
        let is_static = g.kind == GroupKind::Static;
        let rows = if is_static { 1 } else { t };
        let time = (!is_static).then_some((&input.time_index[..], &input.months[..]));
        let ctx = contextual(projections, g, regime, time, rows)?;
        let (tok, missing) = match &input.values[gi] {
            Some(v) => {
                if v.shape() != [rows, g.channels] {
                    return Err(contract(format!(
                        "group {} values of shape {:?}, expected [{rows}, {}]",
                        g.name,
                        v.shape(),
                        g.channels
                    )));
                }
                (project(projections, g, v)?.add(&ctx)?, false)
            }
            None => (ctx, true),
        };
        blocks.push(tok);
        for i in 0..rows {
            annotations.push(TokenAnnotation {
                group: gi,
                time: (!is_static).then_some(i),
            });
            mask.push(missing);
        }
    }
    let refs: Vec<&Tensor> = blocks.iter().collect();
    Ok(TokenSequence {
        tokens: Tensor::concat(&refs, 0)?,
        annotations,
        mask,
        t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::TensorParams;
    use crate::nn::ModelParams;
    use crate::rng::stream;

    fn spec() -> ChannelGroupSpec {
        ChannelGroupSpec::new(vec![
            ChannelGroup::fixed("loc", 3),
            ChannelGroup::dynamic("s2", 4),
            ChannelGroup::dynamic("s1", 2),
            ChannelGroup::dynamic("era5", 2),
        ])
        .unwrap()
    }

    fn input(spec: &ChannelGroupSpec, t: usize) -> TokenInput {
        let values = spec
            .groups
            .iter()
            .map(|g| {
                let rows = if g.kind == GroupKind::Static { 1 } else { t };
                let data = (0..rows * g.channels).map(|i| (i as f64 * 0.37).sin()).collect();
                Some(Array::new(vec![rows, g.channels], data).unwrap())
            })
            .collect();
        TokenInput {
            t,
            time_index: (0..t).collect(),
            months: (0..t).map(|i| i % 12 + 1).collect(),
            values,
        }
    }

    fn projections(spec: &ChannelGroupSpec, regime: &EncodingRegime) -> TensorParams {
        let mut p = ModelParams::default();
        init_projections(&mut p.backbone, spec, regime, &mut stream(1, "t", 0));
        TensorParams::constant(&p)
    }

    #[test]
    fn month_examples() {
        assert_eq!(month_of(1).unwrap(), 1);
        assert_eq!(month_of(32).unwrap(), 2);
        assert_eq!(month_of(60).unwrap(), 2);
        assert_eq!(month_of(61).unwrap(), 3);
        assert_eq!(month_of(366).unwrap(), 12);
        assert!(month_of(0).is_err());
        assert!(month_of(367).is_err());
    }

    #[test]
    fn ndvi_examples() {
        assert_eq!(compute_ndvi(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(compute_ndvi(0.0, 0.4).unwrap(), 1.0);
        assert!((compute_ndvi(0.2, 0.6).unwrap() - 0.5).abs() < 1e-12);
        assert!(compute_ndvi(0.0, 0.0).is_err());
    }

    #[test]
    fn token_count_matches_layout() {
        let s = spec();
        let r = EncodingRegime::presto(16);
        let seq = encode_tokens(&input(&s, 12), &s, &r, &projections(&s, &r).backbone).unwrap();
        assert_eq!(seq.tokens.shape(), &[37, 16]);
        assert_eq!(seq.annotations[0], TokenAnnotation { group: 0, time: None });
        assert_eq!(seq.annotations[1], TokenAnnotation { group: 1, time: Some(0) });
        assert_eq!(seq.annotations[13], TokenAnnotation { group: 2, time: Some(0) });
    }

    #[test]
    fn zero_projection_gives_context_only() {
        let s = spec();
        let r = EncodingRegime::presto(16);
        let mut tp = projections(&s, &r);
        for (k, v) in tp.backbone.iter_mut() {
            if !k.ends_with(".channel") {
                *v = Tensor::zeros(v.shape());
            }
        }
        let inp = input(&s, 3);
        let seq = encode_tokens(&inp, &s, &r, &tp.backbone).unwrap();
        let ch = tp.backbone["tokens.s2.channel"].values().to_vec();
        let row = &seq.tokens.values()[16..32];
        assert_eq!(&row[..4], &ch[..]);
        let sin = crate::nn::layers::sinusoidal_encoding(0, 8).unwrap();
        assert_eq!(&row[4..12], &sin[..]);
        let mon = crate::nn::layers::sinusoidal_encoding(0, 4).unwrap();
        assert_eq!(&row[12..16], &mon[..]);
        let stat = &seq.tokens.values()[..16];
        assert!(stat[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_steps_differ_only_in_sin_slice() {
        let s = ChannelGroupSpec::new(vec![ChannelGroup::dynamic("s2", 3)]).unwrap();
        let r = EncodingRegime::presto(16);
        let tp = projections(&s, &r);
        let inp = TokenInput {
            t: 2,
            time_index: vec![0, 1],
            months: vec![5, 5],
            values: vec![Some(Array::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap())],
        };
        let seq = encode_tokens(&inp, &s, &r, &tp.backbone).unwrap();
        let v = seq.tokens.values();
        let [chr, sinr, monr] = r.slices();
        for j in 0..16 {
            let diff = v[j] - v[16 + j];
            if sinr.contains(&j) {
                continue;
            }
            assert!(chr.contains(&j) || monr.contains(&j));
            assert_eq!(diff, 0.0, "component {j}");
        }
        assert!((0..16).filter(|j| sinr.contains(j)).any(|j| v[j] != v[16 + j]));
    }

    #[test]
    fn regimes_validate() {
        for d in [64, 128, 256] {
            EncodingRegime::presto(d).validate().unwrap();
            EncodingRegime::xts(d).validate().unwrap();
        }
        let mut bad = EncodingRegime::presto(64);
        bad.d_month = 8;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_group_is_premasked() {
        let s = spec();
        let r = EncodingRegime::presto(16);
        let mut inp = input(&s, 4);
        inp.values[2] = None;
        let seq = encode_tokens(&inp, &s, &r, &projections(&s, &r).backbone).unwrap();
        let masked: Vec<usize> = (0..seq.mask.len()).filter(|&i| seq.mask[i]).collect();
        assert_eq!(masked, vec![5, 6, 7, 8]);
    }

    #[test]
    fn overflow_is_length_error() {
        let s = spec();
        let r = EncodingRegime::presto(16);
        let err = encode_tokens(&input(&s, 25), &s, &r, &projections(&s, &r).backbone);
        assert!(matches!(err, Err(Error::Length { len: 25, max: 24 })));
    }
}
