//! On-disk dataset layout.
//!
//! A dataset directory holds `classes.json`, `manifest.jsonl` (one image
//! record per line with inline objects) and `images/*.png`. Masks are stored
//! as run-length counts over the row-major full-image bitmap, starting with a
//! run of zeros.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageSample, Mask, ObjectAnnotation, RgbImage};
use crate::detector::boxes::BBox;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

pub fn mask_to_rle(mask: &Mask) -> Rle {
    let mut counts = Vec::new();
    let mut cur = false;
    let mut run = 0u32;
    for y in 0..mask.height {
        for x in 0..mask.width {
            let v = mask.get(x, y);
            if v != cur {
                counts.push(run);
                run = 0;
                cur = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn mask_from_rle(rle: &Rle) -> Result<Mask> {
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (rle.width * rle.height) as u64 {
        return Err(Error::Data(format!(
            "mask runs cover {total} pixels but the image has {}×{}",
            rle.height, rle.width
        )));
    }
    let mut bits = Vec::with_capacity(rle.width * rle.height);
    for (i, &c) in rle.counts.iter().enumerate() {
        bits.extend(std::iter::repeat(i % 2 == 1).take(c as usize));
    }
    Ok(Mask::from_fn(rle.width, rle.height, |x, y| bits[y * rle.width + x]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask_rle: Option<Rle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectRecord>,
}

/// Image and annotation records plus the class-name table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub rng_seed: u64,
    pub images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineObject {
    class: String,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_rle: Option<Rle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    image_path: String,
    width: usize,
    height: usize,
    objects: Vec<LineObject>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassTable {
    class_names: Vec<String>,
    rng_seed: u64,
}

impl DatasetManifest {
    pub fn from_samples(samples: &[ImageSample], class_names: &[String], rng_seed: u64) -> Self {
        let images = samples
            .iter()
            .map(|s| ImageRecord {
                id: s.id.clone(),
                image_path: format!("images/{}.png", s.id),
                width: s.width(),
                height: s.height(),
                objects: s
                    .annotations
                    .iter()
                    .map(|a| ObjectRecord {
                        class_id: a.class_id,
                        bbox: a.bbox,
                        mask_rle: Some(mask_to_rle(&a.mask)),
                    })
                    .collect(),
            })
            .collect();
        DatasetManifest {
            class_names: class_names.to_vec(),
            rng_seed,
            images,
        }
    }

    pub fn num_objects(&self) -> usize {
        self.images.iter().map(|r| r.objects.len()).sum()
    }

    /// Object count per class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_names.len()];
        for o in self.images.iter().flat_map(|r| &r.objects) {
            h[o.class_id] += 1;
        }
        h
    }

    /// JSONL text of the image records.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.images {
            let line = Line {
                id: r.id.clone(),
                image_path: r.image_path.clone(),
                width: r.width,
                height: r.height,
                objects: r
                    .objects
                    .iter()
                    .map(|o| LineObject {
                        class: self.class_names[o.class_id].clone(),
                        bbox: o.bbox.to_array(),
                        mask_rle: o.mask_rle.clone(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Hex sha256 over the class table and the JSONL records.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.class_names)?);
        h.update(self.rng_seed.to_le_bytes());
        h.update(self.to_jsonl()?);
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `manifest.jsonl` and `classes.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = ClassTable {
            class_names: self.class_names.clone(),
            rng_seed: self.rng_seed,
        };
        let cpath = dir.join(CLASSES_FILE);
        std::fs::write(&cpath, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&cpath, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        std::fs::write(&mpath, self.to_jsonl()?).map_err(|e| Error::io(&mpath, e))
    }
}

/// Writes images as PNG and the manifest; returns the manifest written.
pub fn write_dataset(dataset: &super::Dataset, dir: &Path) -> Result<DatasetManifest> {
    let manifest = dataset.manifest();
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (s, r) in dataset.samples.iter().zip(&manifest.images) {
        save_png(&s.image, &dir.join(&r.image_path))?;
    }
    manifest.write(dir)?;
    Ok(manifest)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        *px = image::Rgb(img.get(x as usize, y as usize));
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_png(path: &Path) -> Result<RgbImage> {
    let dynimg = image::open(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let rgb = dynimg.to_rgb8();
    let mut img = RgbImage::new(rgb.width() as usize, rgb.height() as usize);
    for (x, y, px) in rgb.enumerate_pixels() {
        img.set(x as usize, y as usize, px.0);
    }
    Ok(img)
}

/// Reads every image of `manifest` relative to `root`. Objects without a
/// stored mask get a box-filled mask.
pub fn load_samples(manifest: &DatasetManifest, root: &Path) -> Result<Vec<ImageSample>> {
    manifest
        .images
        .iter()
        .map(|r| {
            let path = root.join(&r.image_path);
            let image = load_png(&path)?;
            if image.width != r.width || image.height != r.height {
                return Err(Error::Data(format!(
                    "{} is {}×{} but the manifest says {}×{}",
                    path.display(),
                    image.width,
                    image.height,
                    r.width,
                    r.height
                )));
            }
            let annotations = r
                .objects
                .iter()
                .map(|o| {
                    let mask = match &o.mask_rle {
                        Some(rle) => mask_from_rle(rle)?,
                        None => Mask::from_box(r.width, r.height, &o.bbox),
                    };
                    Ok(ObjectAnnotation {
                        class_id: o.class_id,
                        bbox: o.bbox,
                        mask,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(ImageSample {
                id: r.id.clone(),
                image,
                annotations,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationFormat {
    NativeJsonl,
    VocXmlDir,
}

/// A rejected record and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.file.display(), l, self.message),
            None => write!(f, "{}: {}", self.file.display(), self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub manifest: DatasetManifest,
    pub diagnostics: Vec<Diagnostic>,
}

fn check_object(bbox: &BBox, mask: Option<&Rle>, width: usize, height: usize) -> std::result::Result<(), String> {
    if !(bbox.x1 < bbox.x2 && bbox.y1 < bbox.y2) {
        return Err(format!("degenerate box {:?}", bbox.to_array()));
    }
    if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > width as f64 || bbox.y2 > height as f64 {
        return Err(format!("box {:?} outside {width}×{height} image", bbox.to_array()));
    }
    if let Some(rle) = mask {
        if rle.width != width || rle.height != height {
            return Err(format!("mask is {}×{}, image is {height}×{width}", rle.height, rle.width));
        }
        let m = mask_from_rle(rle).map_err(|e| e.to_string())?;
        let Some(tight) = m.tight_box() else {
            return Err("mask has no on-pixels".into());
        };
        if !bbox.contains_box(&tight) {
            return Err(format!("mask extends outside box {:?}", bbox.to_array()));
        }
    }
    Ok(())
}

fn resolve_class(names: &[String], name: &str, file: &Path, line: usize) -> Result<usize> {
    names.iter().position(|n| n == name).ok_or_else(|| {
        Error::Data(format!(
            "{}:{line}: unknown class {name:?}; known classes: {}",
            file.display(),
            names.join(", ")
        ))
    })
}

/// Parses and validates an annotation set. Malformed records are dropped
/// with a diagnostic; unknown class names abort the whole ingest.
///
/// `path` is a dataset directory (native) or a directory of per-image XML
/// files (VOC). VOC boxes are taken verbatim and resolved against
/// `class_names`, which defaults to the VOC table.
pub fn ingest_annotations(path: &Path, format: AnnotationFormat, class_names: Option<&[String]>) -> Result<IngestOutcome> {
    match format {
        AnnotationFormat::NativeJsonl => ingest_native(path, class_names),
        AnnotationFormat::VocXmlDir => ingest_voc(path, class_names),
    }
}

fn ingest_native(dir: &Path, override_names: Option<&[String]>) -> Result<IngestOutcome> {
    let cpath = dir.join(CLASSES_FILE);
    let table: ClassTable = {
        let text = std::fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", cpath.display())))?
    };
    let class_names = override_names.map(<[String]>::to_vec).unwrap_or(table.class_names);
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut diagnostics = Vec::new();
    let mut images = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let diag = |message: String| Diagnostic {
            file: mpath.clone(),
            line: Some(lineno),
            message,
        };
        let line: Line = match serde_json::from_str(raw) {
            Ok(l) => l,
            Err(e) => {
                diagnostics.push(diag(format!("unparseable record: {e}")));
                continue;
            }
        };
        if !seen.insert(line.id.clone()) {
            diagnostics.push(diag(format!("duplicate image id {:?}", line.id)));
            continue;
        }
        let mut objects = Vec::new();
        for (j, o) in line.objects.into_iter().enumerate() {
            let class_id = resolve_class(&class_names, &o.class, &mpath, lineno)?;
            let bbox = BBox::from_array(o.bbox);
            match check_object(&bbox, o.mask_rle.as_ref(), line.width, line.height) {
                Ok(()) => objects.push(ObjectRecord {
                    class_id,
                    bbox,
                    mask_rle: o.mask_rle,
                }),
                Err(m) => diagnostics.push(diag(format!("image {:?} object {j}: {m}", line.id))),
            }
        }
        if objects.is_empty() {
            diagnostics.push(diag(format!("image {:?} has no valid objects", line.id)));
            continue;
        }
        images.push(ImageRecord {
            id: line.id,
            image_path: line.image_path,
            width: line.width,
            height: line.height,
            objects,
        });
    }
    Ok(IngestOutcome {
        manifest: DatasetManifest {
            class_names,
            rng_seed: table.rng_seed,
            images,
        },
        diagnostics,
    })
}

fn ingest_voc(dir: &Path, class_names: Option<&[String]>) -> Result<IngestOutcome> {
    let class_names = class_names.map(<[String]>::to_vec).unwrap_or_else(super::voc_class_names);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
        .collect();
    files.sort();
    let mut diagnostics = Vec::new();
    let mut images = Vec::new();
    for file in files {
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let doc = match roxmltree::Document::parse(&text) {
            Ok(d) => d,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    file: file.clone(),
                    line: Some(e.pos().row as usize),
                    message: format!("malformed XML: {e}"),
                });
                continue;
            }
        };
        let line_of = |n: roxmltree::Node| doc.text_pos_at(n.range().start).row as usize;
        let root = doc.root_element();
        let child_text = |n: roxmltree::Node, tag: &str| -> Option<String> {
            n.children()
                .find(|c| c.has_tag_name(tag))
                .and_then(|c| c.text())
                .map(|t| t.trim().to_string())
        };
        let num = |n: roxmltree::Node, tag: &str| child_text(n, tag).and_then(|t| t.parse::<f64>().ok());
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let filename = child_text(root, "filename").unwrap_or_else(|| format!("{stem}.png"));
        let size = root.children().find(|c| c.has_tag_name("size"));
        let (Some(width), Some(height)) = (
            size.and_then(|s| num(s, "width")),
            size.and_then(|s| num(s, "height")),
        ) else {
            diagnostics.push(Diagnostic {
                file: file.clone(),
                line: Some(line_of(root)),
                message: "missing <size> width/height".into(),
            });
            continue;
        };
        let (width, height) = (width as usize, height as usize);
        let mut objects = Vec::new();
        for obj in root.children().filter(|c| c.has_tag_name("object")) {
            let ln = line_of(obj);
            let name = child_text(obj, "name").unwrap_or_default();
            let class_id = resolve_class(&class_names, &name, &file, ln)?;
            let bb = obj.children().find(|c| c.has_tag_name("bndbox"));
            let coords = bb.map(|b| ["xmin", "ymin", "xmax", "ymax"].map(|t| num(b, t)));
            let Some([Some(x1), Some(y1), Some(x2), Some(y2)]) = coords else {
                diagnostics.push(Diagnostic {
                    file: file.clone(),
                    line: Some(ln),
                    message: "object without a complete <bndbox>".into(),
                });
                continue;
            };
            let bbox = BBox::new(x1, y1, x2, y2);
            match check_object(&bbox, None, width, height) {
                Ok(()) => objects.push(ObjectRecord {
                    class_id,
                    bbox,
                    mask_rle: None,
                }),
                Err(message) => diagnostics.push(Diagnostic {
                    file: file.clone(),
                    line: Some(ln),
                    message,
                }),
            }
        }
        if objects.is_empty() {
            continue;
        }
        images.push(ImageRecord {
            id: stem,
            image_path: filename,
            width,
            height,
            objects,
        });
    }
    Ok(IngestOutcome {
        manifest: DatasetManifest {
            class_names,
            rng_seed: 0,
            images,
        },
        diagnostics,
    })
}

/// Appends diagnostics as text lines to `out`.
pub fn write_diagnostics(diags: &[Diagnostic], mut out: impl std::io::Write) -> std::io::Result<()> {
    for d in diags {
        writeln!(out, "{d}")?;
    }
    out.flush()
}
