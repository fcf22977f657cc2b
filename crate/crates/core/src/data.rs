//! Dataset types and I/O: COCO-style annotation loading (lazy images),
//! prediction records, and joint image/mask/box augmentation.
//!
//! Category ids are contiguous from 1. Boxes follow the half-open pixel
//! convention `[x1, y1, x2, y2]` everywhere inside the crate; only the
//! COCO annotation file uses `[x, y, w, h]`.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::mask::{
    mask_area, mask_to_tight_box, polygon_to_mask, resize_mask_nearest, rle_decode, rle_encode,
    Mask, Rle,
};

// ---- core sample types ----

/// 8-bit RGB raster, row-major `[h][w][3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageData {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl ImageData {
    pub fn new(h: usize, w: usize) -> Self {
        ImageData { h, w, rgb: vec![0; h * w * 3] }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }

    /// `[3, H, W]` floats in [0, 1].
    pub fn to_chw(&self) -> Array3<f64> {
        let mut out = Array3::<f64>::zeros((3, self.h, self.w));
        for y in 0..self.h {
            for x in 0..self.w {
                let px = self.get(y, x);
                for c in 0..3 {
                    out[[c, y, x]] = px[c] as f64 / 255.0;
                }
            }
        }
        out
    }

    pub fn from_chw(arr: &Array3<f64>) -> Self {
        let (c, h, w) = arr.dim();
        assert_eq!(c, 3, "expected 3-channel raster");
        let mut img = ImageData::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (arr[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (arr[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (arr[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.set(y, x, px);
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.rgb.clone())
            .ok_or_else(|| Error::runtime("raster buffer size mismatch"))?;
        buf.save(path)
            .map_err(|e| Error::runtime(format!("saving {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::runtime(format!("opening {}: {e}", path.display())))?
            .to_rgb8();
        Ok(ImageData {
            h: img.height() as usize,
            w: img.width() as usize,
            rgb: img.into_raw(),
        })
    }
}

/// One image with its ground-truth instances.
#[derive(Clone, Debug)]
pub struct AnnotatedSample {
    pub image_id: u64,
    pub image: ImageData,
    pub boxes: Vec<BoxF>,
    pub categories: Vec<usize>,
    pub masks: Vec<Mask>,
}

impl AnnotatedSample {
    pub fn n_instances(&self) -> usize {
        self.boxes.len()
    }
}

/// One predicted instance.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub category_id: usize,
    pub score: f64,
    pub bbox: BoxF,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

// ---- COCO-style annotation files ----

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnn>,
    categories: Vec<CocoCat>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnn {
    id: u64,
    image_id: u64,
    category_id: usize,
    /// COCO box convention: [x, y, w, h]
    bbox: [f64; 4],
    segmentation: CocoSeg,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CocoSeg {
    Rle { size: [usize; 2], counts: Vec<usize> },
    Polygons(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct CocoCat {
    id: usize,
    name: String,
}

struct SampleEntry {
    image_id: u64,
    image_path: Option<PathBuf>,
    inline_image: Option<ImageData>,
    height: usize,
    width: usize,
    anns: Vec<CocoAnn>,
}

/// A loaded dataset. Images decode lazily via [`DatasetIndex::load_sample`].
pub struct DatasetIndex {
    entries: Vec<SampleEntry>,
    pub categories: Vec<String>,
    pub split: Split,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn image_id(&self, i: usize) -> u64 {
        self.entries[i].image_id
    }

    /// Decode one sample: load the raster and convert annotation geometry
    /// into binary masks and half-open boxes.
    pub fn load_sample(&self, i: usize) -> Result<AnnotatedSample> {
        let entry = &self.entries[i];
        let image = match (&entry.inline_image, &entry.image_path) {
            (Some(img), _) => img.clone(),
            (None, Some(path)) => ImageData::load_png(path)?,
            (None, None) => return Err(Error::runtime("sample has no image source")),
        };
        if image.h != entry.height || image.w != entry.width {
            return Err(Error::domain(format!(
                "image {} is {}x{}, annotations say {}x{}",
                entry.image_id, image.w, image.h, entry.width, entry.height
            )));
        }
        let mut boxes = Vec::new();
        let mut categories = Vec::new();
        let mut masks = Vec::new();
        for ann in &entry.anns {
            let mask = decode_segmentation(&ann.segmentation, entry.height, entry.width)?;
            if mask_area(&mask) == 0 {
                return Err(Error::domain(format!(
                    "annotation {} decodes to an empty mask",
                    ann.id
                )));
            }
            boxes.push([
                ann.bbox[0],
                ann.bbox[1],
                ann.bbox[0] + ann.bbox[2],
                ann.bbox[1] + ann.bbox[3],
            ]);
            categories.push(ann.category_id);
            masks.push(mask);
        }
        Ok(AnnotatedSample { image_id: entry.image_id, image, boxes, categories, masks })
    }

    /// Decode every sample (parallel across images).
    pub fn load_all(&self) -> Result<Vec<AnnotatedSample>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.load_sample(i))
            .collect()
    }
}

fn decode_segmentation(seg: &CocoSeg, h: usize, w: usize) -> Result<Mask> {
    match seg {
        CocoSeg::Rle { size, counts } => {
            if size[0] != h || size[1] != w {
                return Err(Error::domain("rle size disagrees with image size"));
            }
            rle_decode(&Rle { h, w, counts: counts.clone() })
        }
        CocoSeg::Polygons(polys) => {
            if polys.is_empty() {
                return Err(Error::domain("empty polygon list"));
            }
            let mut mask = Mask::default((h, w));
            for poly in polys {
                if poly.len() < 6 || poly.len() % 2 != 0 {
                    return Err(Error::domain("polygon needs ≥3 (x, y) pairs"));
                }
                let pts: Vec<(f64, f64)> =
                    poly.chunks(2).map(|p| (p[0], p[1])).collect();
                let part = polygon_to_mask(&pts, h, w)?;
                mask.zip_mut_with(&part, |m, &p| *m |= p);
            }
            Ok(mask)
        }
    }
}

/// Load a COCO-style annotation file. Image files resolve against
/// `image_root`; the split is inferred from the annotation file's parent
/// directory name (train/val/test), defaulting to train.
pub fn load_coco(annotation_file: &Path, image_root: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(annotation_file)?;
    let coco: CocoFile = serde_json::from_str(&text)?;

    let mut cats = coco.categories;
    cats.sort_by_key(|c| c.id);
    let mut problems: Vec<String> = Vec::new();
    for (i, c) in cats.iter().enumerate() {
        if c.id != i + 1 {
            problems.push(format!("category ids must be contiguous from 1, got {}", c.id));
            break;
        }
    }

    let mut entries: Vec<SampleEntry> = coco
        .images
        .iter()
        .map(|img| SampleEntry {
            image_id: img.id,
            image_path: Some(image_root.join(&img.file_name)),
            inline_image: None,
            height: img.height,
            width: img.width,
            anns: Vec::new(),
        })
        .collect();
    let index_of: std::collections::HashMap<u64, usize> =
        entries.iter().enumerate().map(|(i, e)| (e.image_id, i)).collect();
    if index_of.len() != entries.len() {
        problems.push("duplicate image ids".to_string());
    }

    for ann in coco.annotations {
        if ann.category_id == 0 || ann.category_id > cats.len() {
            problems.push(format!("annotation {}: unknown category {}", ann.id, ann.category_id));
            continue;
        }
        if ann.bbox[2] <= 0.0 || ann.bbox[3] <= 0.0 {
            problems.push(format!("annotation {}: degenerate bbox", ann.id));
            continue;
        }
        match index_of.get(&ann.image_id) {
            Some(&i) => entries[i].anns.push(ann),
            None => problems.push(format!(
                "annotation {}: dangling image id {}",
                ann.id, ann.image_id
            )),
        }
    }
    if !problems.is_empty() {
        return Err(Error::domain(format!(
            "annotation file has {} problem(s):\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }

    let split = annotation_file
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .map(|n| {
            if n.contains("val") {
                Split::Val
            } else if n.contains("test") {
                Split::Test
            } else {
                Split::Train
            }
        })
        .unwrap_or(Split::Train);

    Ok(DatasetIndex {
        entries,
        categories: cats.into_iter().map(|c| c.name).collect(),
        split,
    })
}

/// Build an in-memory index from generated samples (no files involved).
pub fn index_from_samples(
    samples: Vec<AnnotatedSample>,
    categories: Vec<String>,
    split: Split,
) -> DatasetIndex {
    let entries = samples
        .into_iter()
        .map(|s| {
            let anns = s
                .masks
                .iter()
                .zip(s.boxes.iter().zip(s.categories.iter()))
                .enumerate()
                .map(|(k, (m, (b, &cat)))| {
                    let rle = rle_encode(m);
                    CocoAnn {
                        id: s.image_id * 1000 + k as u64,
                        image_id: s.image_id,
                        category_id: cat,
                        bbox: [b[0], b[1], b[2] - b[0], b[3] - b[1]],
                        segmentation: CocoSeg::Rle {
                            size: [rle.h, rle.w],
                            counts: rle.counts,
                        },
                    }
                })
                .collect();
            SampleEntry {
                image_id: s.image_id,
                image_path: None,
                inline_image: Some(s.image.clone()),
                height: s.image.h,
                width: s.image.w,
                anns,
            }
        })
        .collect();
    DatasetIndex { entries, categories, split }
}

/// Write a dataset as `<dir>/annotations.json` + `<dir>/images/*.png`
/// (masks stored as uncompressed RLE) so it round-trips through
/// [`load_coco`].
pub fn save_coco(dir: &Path, samples: &[AnnotatedSample], categories: &[String]) -> Result<()> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for s in samples {
        let file_name = format!("images/img_{:06}.png", s.image_id);
        s.image.save_png(&dir.join(&file_name))?;
        images.push(CocoImage {
            id: s.image_id,
            file_name,
            width: s.image.w,
            height: s.image.h,
        });
        for ((b, &cat), m) in s.boxes.iter().zip(&s.categories).zip(&s.masks) {
            let rle = rle_encode(m);
            annotations.push(CocoAnn {
                id: ann_id,
                image_id: s.image_id,
                category_id: cat,
                bbox: [b[0], b[1], b[2] - b[0], b[3] - b[1]],
                segmentation: CocoSeg::Rle { size: [rle.h, rle.w], counts: rle.counts },
            });
            ann_id += 1;
        }
    }
    let file = CocoFile {
        images,
        annotations,
        categories: categories
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCat { id: i + 1, name: name.clone() })
            .collect(),
    };
    let f = std::fs::File::create(dir.join("annotations.json"))?;
    serde_json::to_writer(std::io::BufWriter::new(f), &file)?;
    Ok(())
}

// ---- prediction records ----

/// One instance prediction as serialized to newline-delimited JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: usize,
    pub score: f64,
    /// half-open [x1, y1, x2, y2]
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub mask: Rle,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---- augmentation ----

/// Horizontal flip (p = 0.5) plus scale jitter with crop/pad back to the
/// original size; image, masks, and boxes transform jointly. Instances
/// whose mask drops below 4 px are removed; boxes are recomputed as tight
/// boxes of the transformed masks.
pub fn augment(
    sample: &AnnotatedSample,
    rng: &mut ChaCha8Rng,
    scale_range: (f64, f64),
) -> AnnotatedSample {
    let (h, w) = (sample.image.h, sample.image.w);
    let mut img = sample.image.to_chw();
    let mut masks = sample.masks.clone();
    let mut categories = sample.categories.clone();

    if rng.gen_bool(0.5) {
        for y in 0..h {
            for x in 0..w / 2 {
                for c in 0..3 {
                    img.swap([c, y, x], [c, y, w - 1 - x]);
                }
            }
        }
        for m in &mut masks {
            for y in 0..h {
                for x in 0..w / 2 {
                    m.swap([y, x], [y, w - 1 - x]);
                }
            }
        }
    }

    let s = rng.gen_range(scale_range.0..=scale_range.1);
    let (sh, sw) = (((h as f64 * s).round() as usize).max(8), ((w as f64 * s).round() as usize).max(8));
    if (sh, sw) != (h, w) {
        let scaled = crate::tensor::Tensor::constant(img.into_dyn())
            .upsample_bilinear(sh, sw)
            .data()
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let scaled_masks: Vec<Mask> =
            masks.iter().map(|m| resize_mask_nearest(m, sh, sw)).collect();
        // crop (scale > 1) or pad (scale < 1) back to h×w at a random offset
        let oy = if sh > h { rng.gen_range(0..=sh - h) as isize } else { -(rng.gen_range(0..=h - sh) as isize) };
        let ox = if sw > w { rng.gen_range(0..=sw - w) as isize } else { -(rng.gen_range(0..=w - sw) as isize) };
        let mut out_img = Array3::<f64>::from_elem((3, h, w), 0.5);
        let mut out_masks: Vec<Mask> = masks.iter().map(|_| Mask::default((h, w))).collect();
        for y in 0..h {
            let sy = y as isize + oy;
            if sy < 0 || sy >= sh as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + ox;
                if sx < 0 || sx >= sw as isize {
                    continue;
                }
                for c in 0..3 {
                    out_img[[c, y, x]] = scaled[[c, sy as usize, sx as usize]];
                }
                for (om, sm) in out_masks.iter_mut().zip(&scaled_masks) {
                    om[[y, x]] = sm[[sy as usize, sx as usize]];
                }
            }
        }
        img = out_img;
        masks = out_masks;
    }

    // drop instances that fell off-canvas, recompute tight boxes
    let mut kept_masks = Vec::new();
    let mut kept_cats = Vec::new();
    let mut kept_boxes = Vec::new();
    for (m, &c) in masks.iter().zip(&categories) {
        if mask_area(m) >= 4 {
            kept_boxes.push(mask_to_tight_box(m).expect("non-empty mask"));
            kept_masks.push(m.clone());
            kept_cats.push(c);
        }
    }
    categories = kept_cats;

    AnnotatedSample {
        image_id: sample.image_id,
        image: ImageData::from_chw(&img),
        boxes: kept_boxes,
        categories,
        masks: kept_masks,
    }
}
