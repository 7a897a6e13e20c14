//! On-disk dataset layout and round-trips.
//!
//! ```text
//! <root>/<seq_id>/frames/%08d.png
//! <root>/<seq_id>/groundtruth.txt        x,y,w,h per line
//! <root>/<seq_id>/masks/%08d.png         0/255
//! <root>/<seq_id>/distractor.txt         (only with a distractor)
//! <root>/<seq_id>/distractor_masks/%08d.png
//! <root>/<seq_id>/meta.txt               key=value attribute dump
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::{read_box_file, write_box_file, BinaryMask};
use crate::img::{load_mask_png, save_mask_png, Image};

use super::{AttributeSpec, SequenceRecord};

pub fn sequence_id(index: usize) -> String {
    format!("seq_{index:06}")
}

fn frame_name(index: usize) -> String {
    format!("{index:08}.png")
}

/// Write one sequence under `<root>/<seq_id>/`.
pub fn write_sequence(root: &Path, seq_id: &str, record: &SequenceRecord) -> Result<()> {
    let dir = root.join(seq_id);
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for (i, frame) in record.frames.iter().enumerate() {
        frame.save_png(&frames_dir.join(frame_name(i)))?;
    }
    for (i, mask) in record.target_masks.iter().enumerate() {
        save_mask_png(mask.grid(), &masks_dir.join(frame_name(i)))?;
    }
    write_box_file(&dir.join("groundtruth.txt"), &record.target_boxes)?;
    if !record.distractor_boxes.is_empty() {
        let dmask_dir = dir.join("distractor_masks");
        std::fs::create_dir_all(&dmask_dir).map_err(|e| Error::io(&dmask_dir, e))?;
        for (i, mask) in record.distractor_masks.iter().enumerate() {
            save_mask_png(mask.grid(), &dmask_dir.join(frame_name(i)))?;
        }
        write_box_file(&dir.join("distractor.txt"), &record.distractor_boxes)?;
    }
    let meta_path = dir.join("meta.txt");
    std::fs::write(&meta_path, format_meta(record)).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Stream records to disk; ids are `seq_000000`, `seq_000001`, ...
pub fn write_dataset<I>(root: &Path, records: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = SequenceRecord>,
{
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for (i, record) in records.into_iter().enumerate() {
        let id = sequence_id(i);
        write_sequence(root, &id, &record)?;
        ids.push(id);
    }
    Ok(ids)
}

fn format_meta(record: &SequenceRecord) -> String {
    let spec = &record.spec;
    let mut kv: BTreeMap<&str, String> = BTreeMap::new();
    kv.insert("transparency_level", spec.transparency_level.to_string());
    kv.insert("blur_present", spec.blur_present().to_string());
    if let Some(level) = spec.blur_level {
        kv.insert("blur_level", level.to_string());
    }
    kv.insert("occlusion_present", spec.occlusion_present().to_string());
    if let Some(stripes) = spec.occlusion_stripes {
        kv.insert("occlusion_stripes", stripes.to_string());
    }
    kv.insert("rotation_level", spec.rotation_level.to_string());
    kv.insert("distractor", spec.distractor.to_string());
    kv.insert("target_shape_id", spec.target_shape_id.to_string());
    kv.insert(
        "distractor_shape_id",
        spec.distractor_shape_id.to_string(),
    );
    kv.insert("background_id", spec.background_id.to_string());
    kv.insert("frame_count", spec.frame_count.to_string());
    kv.insert("rng_seed", spec.rng_seed.to_string());
    kv.insert("opaque", record.opaque.to_string());
    let mut out = String::new();
    for (k, v) in kv {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

fn parse_meta(path: &Path) -> Result<(AttributeSpec, bool)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {}: missing '='", idx + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::parse(path, format!("missing key {key:?}")))
    };
    let parse_num = |key: &str| -> Result<u64> {
        get(key)?
            .parse::<u64>()
            .map_err(|e| Error::parse(path, format!("bad value for {key:?}: {e}")))
    };
    let parse_bool = |key: &str| -> Result<bool> {
        get(key)?
            .parse::<bool>()
            .map_err(|e| Error::parse(path, format!("bad value for {key:?}: {e}")))
    };
    let blur_present = parse_bool("blur_present")?;
    let occlusion_present = parse_bool("occlusion_present")?;
    let spec = AttributeSpec {
        transparency_level: parse_num("transparency_level")? as u8,
        blur_level: if blur_present {
            Some(parse_num("blur_level")? as u8)
        } else {
            None
        },
        occlusion_stripes: if occlusion_present {
            Some(parse_num("occlusion_stripes")? as u32)
        } else {
            None
        },
        rotation_level: parse_num("rotation_level")? as u8,
        distractor: parse_bool("distractor")?,
        target_shape_id: parse_num("target_shape_id")? as u32,
        distractor_shape_id: parse_num("distractor_shape_id")? as u32,
        background_id: parse_num("background_id")? as u32,
        frame_count: parse_num("frame_count")? as u32,
        rng_seed: parse_num("rng_seed")?,
    };
    let opaque = kv
        .get("opaque")
        .map(|v| v == "true")
        .unwrap_or(false);
    Ok((spec, opaque))
}

fn read_mask_dir(dir: &Path, count: usize) -> Result<Vec<BinaryMask>> {
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(frame_name(i));
        masks.push(BinaryMask::new(load_mask_png(&path)?)?);
    }
    Ok(masks)
}

/// Read one sequence directory back into memory.
pub fn read_sequence(dir: &Path) -> Result<SequenceRecord> {
    let gt_path = dir.join("groundtruth.txt");
    if !gt_path.exists() {
        return Err(Error::parse(&gt_path, "missing ground-truth file"));
    }
    let target_boxes = read_box_file(&gt_path)?;
    let (spec, opaque) = parse_meta(&dir.join("meta.txt"))?;
    let n = target_boxes.len();
    if n != spec.frame_count as usize {
        return Err(Error::parse(
            &gt_path,
            format!(
                "ground truth has {n} lines but meta declares {} frames",
                spec.frame_count
            ),
        ));
    }
    let frames_dir = dir.join("frames");
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(Image::load_png(&frames_dir.join(frame_name(i)))?);
    }
    let target_masks = read_mask_dir(&dir.join("masks"), n)?;
    let distractor_path = dir.join("distractor.txt");
    let (distractor_boxes, distractor_masks) = if distractor_path.exists() {
        (
            read_box_file(&distractor_path)?,
            read_mask_dir(&dir.join("distractor_masks"), n)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(SequenceRecord {
        frames,
        target_boxes,
        target_masks,
        distractor_boxes,
        distractor_masks,
        spec,
        opaque,
    })
}

/// Sorted sequence directories under a dataset root.
pub fn list_sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Read a whole dataset into memory, sorted by sequence id.
pub fn read_dataset(root: &Path) -> Result<Vec<(String, SequenceRecord)>> {
    let dirs = list_sequence_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::parse(root, "dataset contains no sequences"));
    }
    dirs.into_iter()
        .map(|dir| {
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_sequence(&dir).map(|r| (id, r))
        })
        .collect()
}
