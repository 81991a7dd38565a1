//! Training event log, written as JSON lines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::band::Band;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Render {
        iter: u64,
        model: String,
        band: Band,
        image: usize,
        degree: usize,
        loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        geometry_before: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        geometry_after: Option<u64>,
    },
    Densify {
        iter: u64,
        model: String,
        cloned: usize,
        split: usize,
        pruned: usize,
        total: usize,
        variant: String,
    },
    OpacityReset {
        iter: u64,
        model: String,
    },
    Freeze {
        iter: u64,
        model: String,
        frozen: Vec<String>,
    },
    /// Spectral SH blocks re-randomized when the delayed bands come in.
    Reinit {
        iter: u64,
        model: String,
        bands: Vec<Band>,
    },
    /// Geometry copied from the RGB model into a spectral model.
    Split {
        iter: u64,
        model: String,
        geometry: u64,
    },
    Eval {
        iter: u64,
        model: String,
        band: Band,
        psnr: serde_json::Value,
        ssim: f64,
    },
}

impl Event {
    pub fn iter(&self) -> u64 {
        match self {
            Event::Render { iter, .. }
            | Event::Densify { iter, .. }
            | Event::OpacityReset { iter, .. }
            | Event::Freeze { iter, .. }
            | Event::Reinit { iter, .. }
            | Event::Split { iter, .. }
            | Event::Eval { iter, .. } => *iter,
        }
    }

    pub fn model(&self) -> &str {
        match self {
            Event::Render { model, .. }
            | Event::Densify { model, .. }
            | Event::OpacityReset { model, .. }
            | Event::Freeze { model, .. }
            | Event::Reinit { model, .. }
            | Event::Split { model, .. }
            | Event::Eval { model, .. } => model,
        }
    }
}

pub fn write_jsonl<W: Write>(events: &[Event], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Event>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let events = vec![
            Event::Render {
                iter: 3,
                model: "RGB".into(),
                band: Band::Nir,
                image: 4,
                degree: 0,
                loss: 0.25,
                geometry_before: None,
                geometry_after: Some(7),
            },
            Event::Densify {
                iter: 5,
                model: "RGB".into(),
                cloned: 1,
                split: 0,
                pruned: 2,
                total: 9,
                variant: "msad".into(),
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"event\":\"render\",\"iter\":3"));
        assert!(!text.contains("geometry_before"));
        assert_eq!(parse_jsonl(&text).unwrap(), events);
    }
}
