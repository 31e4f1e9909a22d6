//! On-disk dataset layouts: directories of OCT1 tiles with TSV sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use oceanfm::error::{Error, Result};
use oceanfm::io::{read_tile, write_atomic, write_tile};
use oceanfm::sampling::{manifest_line, valid_fraction};
use oceanfm::tile::{LabeledPatch, TargetKind, Tile, LABEL_BLOCK_START};

/// Write tiles as `tile_XXXXX.oct` plus a `manifest.tsv` sidecar.
pub fn write_tile_dir(dir: &Path, tiles: &[Tile]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (i, t) in tiles.iter().enumerate() {
        let name = format!("tile_{i:05}.oct");
        write_tile(t, &dir.join(&name))?;
        manifest.push_str(&manifest_line(&name, &t.meta.region, t.meta.month, valid_fraction(t)));
        manifest.push('\n');
    }
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())
}

/// Read every `*.oct` tile in a directory, sorted by file name.
pub fn read_tile_dir(dir: &Path) -> Result<Vec<Tile>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "oct"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!("no .oct tiles in {}", dir.display())));
    }
    paths.iter().map(|p| read_tile(p)).collect()
}

/// Write labeled patches as `patch_XXXXX.oct` plus a `labels.tsv` sidecar
/// (file, task, label in log10 units, source id). The label block position
/// is fixed by the format, so only the scalar is stored.
pub fn write_labeled_dir(dir: &Path, patches: &[LabeledPatch]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut labels = String::from("file\ttask\tlabel\tsource_id\n");
    for (i, p) in patches.iter().enumerate() {
        let name = format!("patch_{i:05}.oct");
        write_tile(&p.tile, &dir.join(&name))?;
        labels.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            p.kind.as_str(),
            p.label_value(),
            p.source_id
        ));
    }
    write_atomic(&dir.join("labels.tsv"), labels.as_bytes())
}

pub fn read_labeled_dir(dir: &Path) -> Result<Vec<LabeledPatch>> {
    let tsv = dir.join("labels.tsv");
    let text = fs::read_to_string(&tsv).map_err(|e| Error::io(tsv.display().to_string(), e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Validation(format!(
                "{}:{}: expected 4 tab-separated fields",
                tsv.display(),
                ln + 1
            )));
        }
        let tile = read_tile(&dir.join(fields[0]))?;
        let kind = TargetKind::parse(fields[1])?;
        let label: f32 = fields[2]
            .parse()
            .map_err(|_| Error::Validation(format!("bad label value {:?}", fields[2])))?;
        let mut label_plane = vec![f32::NAN; tile.height * tile.width];
        for r in LABEL_BLOCK_START..LABEL_BLOCK_START + 3 {
            for c in LABEL_BLOCK_START..LABEL_BLOCK_START + 3 {
                label_plane[r * tile.width + c] = label;
            }
        }
        out.push(LabeledPatch { tile, label_plane, kind, source_id: fields[3].to_string() });
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("no labeled rows in {}", tsv.display())));
    }
    Ok(out)
}
