//! On-disk dataset layout: PNM images plus JSON-lines annotations.
//!
//! ```text
//! {root}/{split}/V/{image_id}.ppm
//! {root}/{split}/T/{image_id}.pgm
//! {root}/{split}/annotations_V.jsonl
//! {root}/{split}/annotations_T.jsonl
//! {root}/{split}/scenes.jsonl        (generation metadata, optional)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::ExtendedColorType;
use serde::{Deserialize, Serialize};

use crate::detection::{BBox, GroundTruth, InstanceAttrs};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::synth::{SceneMeta, ScenePair};
use crate::tensor::Tensor;

/// One annotated instance in one modality's image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub height_px: f64,
    pub occlusion: String,
    pub identity: u32,
}

impl Annotation {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            bbox: self.bbox(),
            attrs: Some(InstanceAttrs {
                height_px: self.height_px,
                occlusion: self.occlusion.clone(),
            }),
        }
    }
}

fn annotation_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("annotations_{}.jsonl", m.tag()))
}

fn image_path(dir: &Path, m: Modality, id: &str) -> PathBuf {
    let ext = match m {
        Modality::Visible => "ppm",
        Modality::Thermal => "pgm",
    };
    dir.join(m.tag()).join(format!("{id}.{ext}"))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary graymap (P5) or pixmap (P6) with 8-bit samples.
fn write_pnm(path: &Path, data: &[u8], w: usize, h: usize, gray: bool) -> Result<()> {
    let (subtype, color) = if gray {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .encode(data, w as u32, h as u32, color)?;
    out.flush()?;
    Ok(())
}

/// Writes `scenes` under `root/split`.
pub fn write_dataset(scenes: &[ScenePair], root: &Path, split: &str) -> Result<()> {
    let dir = root.join(split);
    for m in Modality::ALL {
        fs::create_dir_all(dir.join(m.tag()))?;
    }
    let mut ann_v = BufWriter::new(fs::File::create(annotation_path(&dir, Modality::Visible))?);
    let mut ann_t = BufWriter::new(fs::File::create(annotation_path(&dir, Modality::Thermal))?);
    let mut meta = BufWriter::new(fs::File::create(dir.join("scenes.jsonl"))?);
    for s in scenes {
        let (h, w) = s.size();
        let v: Vec<u8> = s.image_v.data().iter().map(|&x| to_u8(x)).collect();
        let t: Vec<u8> = s.image_t.data().iter().map(|&x| to_u8(x)).collect();
        write_pnm(&image_path(&dir, Modality::Visible, s.image_id()), &v, w, h, false)?;
        write_pnm(&image_path(&dir, Modality::Thermal, s.image_id()), &t, w, h, true)?;
        for a in &s.gts_v {
            writeln!(ann_v, "{}", serde_json::to_string(a).expect("serializable"))?;
        }
        for a in &s.gts_t {
            writeln!(ann_t, "{}", serde_json::to_string(a).expect("serializable"))?;
        }
        writeln!(meta, "{}", serde_json::to_string(&s.meta).expect("serializable"))?;
    }
    ann_v.flush()?;
    ann_t.flush()?;
    meta.flush()?;
    Ok(())
}

/// Parses a JSON-lines annotation file; blank lines are skipped.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let b = a.bbox();
        if !b.is_finite() || a.w <= 0.0 || a.h <= 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "box must be finite with positive size".into(),
            });
        }
        out.push(a);
    }
    Ok(out)
}

fn read_image(path: &Path, channels: usize) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.into_luma8().into_raw(),
        _ => img.into_rgb8().into_raw(),
    };
    Tensor::new(
        vec![h, w, channels],
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

/// Reads every scene of `root/split`, ordered by image id.
pub fn read_dataset(root: &Path, split: &str) -> Result<Vec<ScenePair>> {
    let dir = root.join(split);
    let ann_v = read_annotations(&annotation_path(&dir, Modality::Visible))?;
    let ann_t = read_annotations(&annotation_path(&dir, Modality::Thermal))?;
    let vdir = dir.join(Modality::Visible.tag());
    if !vdir.is_dir() {
        return Err(Error::MissingFile(vdir));
    }
    let mut ids: Vec<String> = fs::read_dir(&vdir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "ppm" { return None; }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    let metas: Vec<SceneMeta> = match fs::read_to_string(dir.join("scenes.jsonl")) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: dir.join("scenes.jsonl"),
                line: e.line(),
                message: e.to_string(),
            })?,
        Err(_) => Vec::new(),
    };
    ids.into_iter()
        .map(|id| {
            let image_v = read_image(&image_path(&dir, Modality::Visible, &id), 3)?;
            let image_t = read_image(&image_path(&dir, Modality::Thermal, &id), 1)?;
            let meta = metas.iter().find(|m| m.image_id == id).cloned().unwrap_or(SceneMeta {
                image_id: id.clone(),
                seed: 0,
                shift: (0, 0),
                night: false,
                visibility: Vec::new(),
            });
            Ok(ScenePair {
                gts_v: ann_v.iter().filter(|a| a.image_id == id).cloned().collect(),
                gts_t: ann_t.iter().filter(|a| a.image_id == id).cloned().collect(),
                image_v,
                image_t,
                meta,
            })
        })
        .collect()
}

/// Converts KAIST-style text annotations (`person x y w h occ ...`, pixel
/// units, top-left corner) into records. Header lines starting with `%`
/// and labels other than `person` are skipped. Occlusion codes 0/1/2 map
/// to `none`/`partial`/`heavy`.
pub fn parse_kaist(text: &str, image_id: &str, width: usize, height: usize, source: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() < 5 {
            return Err(err(format!("expected at least 5 fields, found {}", fields.len())));
        }
        if fields[0] != "person" {
            continue;
        }
        let num = |k: usize| {
            fields[k]
                .parse::<f64>()
                .map_err(|e| err(format!("field {}: {e}", k + 1)))
        };
        let (x, y, w, h) = (num(1)?, num(2)?, num(3)?, num(4)?);
        if w <= 0.0 || h <= 0.0 {
            return Err(err("box must have positive size".into()));
        }
        let occlusion = match fields.get(5).copied() {
            None | Some("0") => "none",
            Some("1") => "partial",
            Some("2") => "heavy",
            Some(other) => return Err(err(format!("unknown occlusion code {other:?}"))),
        };
        let (fw, fh) = (width as f64, height as f64);
        out.push(Annotation {
            image_id: image_id.to_string(),
            cx: (x + 0.5 * w) / fw,
            cy: (y + 0.5 * h) / fh,
            w: w / fw,
            h: h / fh,
            height_px: h,
            occlusion: occlusion.to_string(),
            identity: out.len() as u32,
        });
    }
    Ok(out)
}
