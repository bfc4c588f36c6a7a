//! Plain-text (P2) graymaps for masks and heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A parsed P2 image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Graymap {
    /// Pixels above half the maximum are foreground.
    pub fn to_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&v| u32::from(v) * 2 > u32::from(self.maxval)).collect()
    }

    pub fn encode(&self) -> String {
        let mut out = format!("P2\n{} {}\n{}\n", self.width, self.height, self.maxval);
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P2") {
            return Err(Error::Format("graymap does not start with P2".into()));
        }
        let mut number = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Format(format!("graymap ends before {what}")))?
                .parse()
                .map_err(|_| Error::Format(format!("graymap {what} is not a number")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval == 0 || maxval > usize::from(u16::MAX) {
            return Err(Error::Format(format!("graymap maxval {maxval} out of range")));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for i in 0..width * height {
            let v = number(&format!("pixel {i}"))?;
            if v > maxval {
                return Err(Error::Format(format!("pixel {i} = {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as u16);
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }
}

/// Binary mask as 0/255 on an `h × w` grid.
pub fn mask_graymap(mask: &[bool], grid: (usize, usize)) -> Graymap {
    Graymap {
        width: grid.1,
        height: grid.0,
        maxval: 255,
        pixels: mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

/// Linear map of `values` from `[min, max]` onto `0..=255`; a constant
/// input maps to 0.
pub fn heatmap_graymap(values: &[f64], grid: (usize, usize)) -> Graymap {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    Graymap {
        width: grid.1,
        height: grid.0,
        maxval: 255,
        pixels,
    }
}

pub fn write_graymap(path: impl AsRef<Path>, g: &Graymap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, g.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_graymap(path: impl AsRef<Path>) -> Result<Graymap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Graymap::parse(&text)
}
