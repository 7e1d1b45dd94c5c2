//! Head-map dump directories: one file per frame and stride, named
//! `{frame:06}_s{stride}.tnsr`.

use std::collections::BTreeMap;
use std::path::Path;

use motpipe::decode::{self, HeadMap, STRIDES};
use motpipe::io;

use crate::commands::CliError;

fn parse_name(name: &str) -> Option<(u64, u32)> {
    let stem = name.strip_suffix(".tnsr")?;
    let (frame, stride) = stem.split_once("_s")?;
    if frame.len() != 6 {
        return None;
    }
    Some((frame.parse().ok()?, stride.parse().ok()?))
}

pub fn file_name(frame: u64, stride: u32) -> String {
    format!("{frame:06}_s{stride}.tnsr")
}

/// Every frame's head maps, keyed by frame. Files that do not follow the
/// naming scheme are an error rather than silently skipped.
pub fn load_dir(dir: &Path, dfl_bins: Option<usize>) -> Result<BTreeMap<u64, Vec<HeadMap>>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        names.push(entry.file_name().to_string_lossy().into_owned());
    }
    names.sort();
    let mut frames: BTreeMap<u64, Vec<HeadMap>> = BTreeMap::new();
    for name in names {
        let Some((frame, stride)) = parse_name(&name) else {
            return Err(CliError::Invalid(format!(
                "{}: expected files named like {}",
                dir.join(&name).display(),
                file_name(1, 8)
            )));
        };
        if frame < 1 || !STRIDES.contains(&stride) {
            return Err(CliError::Invalid(format!("{name}: bad frame or stride")));
        }
        let map = io::read_tensor(&dir.join(&name))?.to_head_map(stride)?;
        let map = match dfl_bins {
            Some(bins) => decode::reduce_dfl(&map, bins).map_err(|e| CliError::Invalid(format!("{name}: {e}")))?,
            None => map,
        };
        frames.entry(frame).or_default().push(map);
    }
    Ok(frames)
}

/// Input image size implied by the stride-8 map.
pub fn input_size(maps: &[HeadMap]) -> Result<(u32, u32), CliError> {
    maps.iter()
        .find(|m| m.stride == STRIDES[0])
        .map(|m| ((m.width as u32) * m.stride, (m.height as u32) * m.stride))
        .ok_or_else(|| CliError::Invalid(format!("no stride {} map", STRIDES[0])))
}
