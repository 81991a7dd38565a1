//! Spectral channel model.
//!
//! A capture consists of an RGB camera (three scalar channels) plus four
//! narrow-band cameras (green, red, red edge, near infrared) with one scalar
//! channel each, seven scalar channels in total.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Band {
    Rgb,
    G,
    R,
    Re,
    Nir,
}

impl Band {
    /// All bands in canonical order.
    pub const ALL: [Band; 5] = [Band::Rgb, Band::G, Band::R, Band::Re, Band::Nir];

    pub fn channel_count(self) -> usize {
        match self {
            Band::Rgb => 3,
            _ => 1,
        }
    }

    /// Position in the canonical ordering.
    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Rgb => "RGB",
            Band::G => "G",
            Band::R => "R",
            Band::Re => "RE",
            Band::Nir => "NIR",
        }
    }

    pub fn is_rgb(self) -> bool {
        self == Band::Rgb
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RGB" => Ok(Band::Rgb),
            "G" => Ok(Band::G),
            "R" => Ok(Band::R),
            "RE" => Ok(Band::Re),
            "NIR" => Ok(Band::Nir),
            _ => Err(Error::UnknownBandName(s.to_string())),
        }
    }
}

impl Serialize for Band {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Band {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Non-empty, duplicate-free set of bands kept in canonical order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BandSet {
    bands: Vec<Band>,
}

/// Deduplicates `requested` and sorts it into canonical order.
pub fn canonicalize_bands(requested: &[Band]) -> Result<BandSet> {
    if requested.is_empty() {
        return Err(Error::EmptyBandList);
    }
    let bands = Band::ALL
        .iter()
        .copied()
        .filter(|b| requested.contains(b))
        .collect();
    Ok(BandSet { bands })
}

impl BandSet {
    pub fn new(requested: &[Band]) -> Result<Self> {
        canonicalize_bands(requested)
    }

    pub fn all() -> Self {
        BandSet {
            bands: Band::ALL.to_vec(),
        }
    }

    pub fn single(band: Band) -> Self {
        BandSet { bands: vec![band] }
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn iter(&self) -> impl Iterator<Item = Band> + '_ {
        self.bands.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn contains(&self, band: Band) -> bool {
        self.bands.contains(&band)
    }

    /// Position of `band` inside this set.
    pub fn index_of(&self, band: Band) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    /// Total scalar channels across all bands.
    pub fn total_channels(&self) -> usize {
        self.bands.iter().map(|b| b.channel_count()).sum()
    }

    /// First scalar channel of `band` in a layout that stacks the bands of
    /// this set in order.
    pub fn channel_offset(&self, band: Band) -> Option<usize> {
        let idx = self.index_of(band)?;
        Some(self.bands[..idx].iter().map(|b| b.channel_count()).sum())
    }

    /// Bands other than RGB.
    pub fn spectral(&self) -> impl Iterator<Item = Band> + '_ {
        self.iter().filter(|b| !b.is_rgb())
    }

    /// Label used in tables, e.g. `RGB+G+NIR`.
    pub fn label(&self) -> String {
        self.bands
            .iter()
            .map(|b| b.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Parses a comma or plus separated list such as `RGB,NIR`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let bands = s
            .split([',', '+'])
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Band>>>()?;
        canonicalize_bands(&bands)
    }
}

impl Serialize for BandSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bands.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BandSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bands = Vec::<Band>::deserialize(d)?;
        canonicalize_bands(&bands).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_order() {
        let set = canonicalize_bands(&[Band::Nir, Band::Rgb]).unwrap();
        assert_eq!(set.bands(), &[Band::Rgb, Band::Nir]);
    }

    #[test]
    fn dedup() {
        let set = canonicalize_bands(&[Band::G, Band::G, Band::R]).unwrap();
        assert_eq!(set.bands(), &[Band::G, Band::R]);
    }

    #[test]
    fn all_bands_have_seven_channels() {
        let set = canonicalize_bands(&[Band::Nir, Band::Re, Band::R, Band::G, Band::Rgb]).unwrap();
        assert_eq!(set.bands(), &Band::ALL);
        assert_eq!(set.total_channels(), 7);
        assert_eq!(Band::Rgb.channel_count(), 3);
        for b in &Band::ALL[1..] {
            assert_eq!(b.channel_count(), 1);
        }
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(canonicalize_bands(&[]), Err(Error::EmptyBandList)));
    }

    #[test]
    fn channel_offsets() {
        let all = BandSet::all();
        assert_eq!(all.channel_offset(Band::Rgb), Some(0));
        assert_eq!(all.channel_offset(Band::G), Some(3));
        assert_eq!(all.channel_offset(Band::Nir), Some(6));
        let sub = BandSet::new(&[Band::Nir, Band::G]).unwrap();
        assert_eq!(sub.channel_offset(Band::Nir), Some(1));
        assert_eq!(sub.channel_offset(Band::Rgb), None);
    }

    #[test]
    fn parse_list() {
        let set = BandSet::parse_list("nir, RGB").unwrap();
        assert_eq!(set.label(), "RGB+NIR");
        assert!(BandSet::parse_list("UV").is_err());
    }

    fn band_strategy() -> impl Strategy<Value = Band> {
        (0usize..5).prop_map(|i| Band::ALL[i])
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(bands in proptest::collection::vec(band_strategy(), 1..12)) {
            let once = canonicalize_bands(&bands).unwrap();
            let twice = canonicalize_bands(once.bands()).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.bands().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
