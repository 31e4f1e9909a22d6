//! Core value types: band sets, tiles and sparse-label patches.

use crate::error::{Error, Result};

/// Identifiers of the spectral bands carried by a tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandSet {
    names: Vec<String>,
}

/// The 16 OLCI bands retained for pre-training.
pub const OLCI_BANDS: [&str; 16] = [
    "OL1", "OL2", "OL3", "OL4", "OL5", "OL6", "OL7", "OL8", "OL9", "OL10", "OL11", "OL12",
    "OL16", "OL17", "OL18", "OL21",
];

pub const SST_BAND: &str = "SST";

impl BandSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Validation(format!("duplicate band identifier {n}")));
            }
        }
        Ok(BandSet { names })
    }

    pub fn olci() -> Self {
        BandSet { names: OLCI_BANDS.iter().map(|s| s.to_string()).collect() }
    }

    pub fn olci_sst() -> Self {
        let mut names: Vec<String> = OLCI_BANDS.iter().map(|s| s.to_string()).collect();
        names.push(SST_BAND.to_string());
        BandSet { names }
    }

    /// Synthetic band names B0..B{n-1}.
    pub fn synthetic(n: usize) -> Self {
        BandSet { names: (0..n).map(|i| format!("B{i}")).collect() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileMeta {
    pub region: String,
    pub year: i16,
    pub month: u8,
    pub lat: f64,
    pub lon: f64,
}

impl Default for TileMeta {
    fn default() -> Self {
        TileMeta { region: "UNKN".to_string(), year: 2020, month: 1, lat: 0.0, lon: 0.0 }
    }
}

/// One multispectral image patch: per-band planes with validity and metadata.
/// Invalid pixels hold NaN in the planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub bands: BandSet,
    pub height: usize,
    pub width: usize,
    /// band-major, row-major, C*H*W values
    pub planes: Vec<f32>,
    /// band-major, row-major, C*H*W flags
    pub validity: Vec<bool>,
    pub meta: TileMeta,
}

impl Tile {
    pub fn new(
        bands: BandSet,
        height: usize,
        width: usize,
        planes: Vec<f32>,
        validity: Vec<bool>,
        meta: TileMeta,
    ) -> Result<Self> {
        let t = Tile { bands, height, width, planes, validity, meta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bands.count() * self.height * self.width;
        if self.planes.len() != n || self.validity.len() != n {
            return Err(Error::Validation(format!(
                "tile buffers hold {}/{} values, expected {n}",
                self.planes.len(),
                self.validity.len()
            )));
        }
        for (i, (&v, &ok)) in self.planes.iter().zip(&self.validity).enumerate() {
            if ok && !v.is_finite() {
                return Err(Error::Validation(format!("valid pixel {i} is not finite")));
            }
            if !ok && !v.is_nan() {
                return Err(Error::Validation(format!("invalid pixel {i} is not NaN")));
            }
        }
        Ok(())
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.planes[band * hw..(band + 1) * hw]
    }

    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.planes[(band * self.height + y) * self.width + x]
    }

    pub fn is_valid(&self, band: usize, y: usize, x: usize) -> bool {
        self.validity[(band * self.height + y) * self.width + x]
    }
}

/// Regression target carried by a labeled patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// chlorophyll-a, log10 mg/m^3
    Chlorophyll,
    /// depth-integrated primary production, log10 mgC/m^2/day
    PrimaryProduction,
}

impl TargetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::Chlorophyll => "chl",
            TargetKind::PrimaryProduction => "pp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chl" => Ok(TargetKind::Chlorophyll),
            "pp" => Ok(TargetKind::PrimaryProduction),
            other => Err(Error::Config(format!("unknown task kind {other}"))),
        }
    }
}

pub const PATCH_SIZE: usize = 80;
/// The 3x3 label block occupies rows/cols 38..=40 of the 80x80 patch.
pub const LABEL_BLOCK_START: usize = 38;

/// An 80x80 fine-tuning sample: the label plane is NaN everywhere except a
/// 3x3 block holding one scalar measurement in log10 units.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub tile: Tile,
    /// H*W row-major, NaN except on the labeled block
    pub label_plane: Vec<f32>,
    pub kind: TargetKind,
    pub source_id: String,
}

impl LabeledPatch {
    pub fn labeled_pixels(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        let w = self.tile.width;
        self.label_plane
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .map(move |(i, &v)| (i / w, i % w, v))
    }

    /// The single label value (all labeled pixels share it).
    pub fn label_value(&self) -> f32 {
        self.label_plane.iter().copied().find(|v| !v.is_nan()).expect("unlabeled patch")
    }
}

/// Check a labeled patch against its structural contract. Violations are
/// returned, not raised.
pub fn validate_labeled_patch(p: &LabeledPatch) -> Vec<String> {
    let mut violations = Vec::new();
    if p.tile.height != PATCH_SIZE || p.tile.width != PATCH_SIZE {
        violations.push(format!(
            "patch extent {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
            p.tile.height, p.tile.width
        ));
    }
    if p.label_plane.len() != p.tile.height * p.tile.width {
        violations.push("label plane extent does not match tile".to_string());
        return violations;
    }
    let labeled: Vec<(usize, usize, f32)> = p.labeled_pixels().collect();
    if labeled.len() != 9 {
        violations.push(format!("label block not 3x3: {} labeled pixels", labeled.len()));
    } else {
        let min_r = labeled.iter().map(|&(r, _, _)| r).min().unwrap();
        let min_c = labeled.iter().map(|&(_, c, _)| c).min().unwrap();
        let is_block = labeled
            .iter()
            .all(|&(r, c, _)| r >= min_r && r < min_r + 3 && c >= min_c && c < min_c + 3);
        if !is_block {
            violations.push("label block not 3x3: pixels not contiguous".to_string());
        }
    }
    let values: Vec<f32> = labeled.iter().map(|&(_, _, v)| v).collect();
    if let Some(&first) = values.first() {
        if !first.is_finite() {
            violations.push("labeled value not finite".to_string());
        }
        if values.iter().any(|&v| v != first) {
            violations.push("labeled values not uniform".to_string());
        }
    }
    violations
}
