//! On-disk dataset layout.
//!
//! ```text
//! <root>/images/<id>.png      input images (png, pgm, ppm)
//! <root>/masks/<id>.png       8-bit labels: 0 road, 1 obstacle, 2 non-road, 255 ignore
//! <root>/annotations.csv      image_id,x,y,w,h   one row per obstacle box
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_image, BBox, Mask, Raster};
use crate::synth::Scene;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub boxes: BTreeMap<String, Vec<BBox>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    image_id: String,
    x: i32,
    y: i32,
    w: i32,
    h: i32,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let images = root.join("images");
        let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
        let mut samples = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&images, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mask = root.join("masks").join(format!("{id}.png"));
            samples.push(Sample {
                id,
                image: path,
                mask: mask.exists().then_some(mask),
            });
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        if samples.is_empty() {
            return Err(Error::contract(format!("no images under {}", images.display())));
        }
        let ann = root.join("annotations.csv");
        let boxes = if ann.exists() { read_annotations(&ann)? } else { BTreeMap::new() };
        Ok(Self { root: root.to_path_buf(), samples, boxes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fails unless every image has a mask and annotations exist.
    pub fn require_ground_truth(&self) -> Result<()> {
        if !self.root.join("annotations.csv").exists() {
            return Err(Error::Data(format!("{} has no annotations.csv", self.root.display())));
        }
        if let Some(s) = self.samples.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Data(format!("image `{}` has no mask", s.id)));
        }
        Ok(())
    }

    pub fn image(&self, i: usize) -> Result<Raster> {
        load_image(&self.samples[i].image)
    }

    pub fn mask(&self, i: usize) -> Result<Mask> {
        let s = &self.samples[i];
        let path = s.mask.as_ref().ok_or_else(|| Error::Data(format!("image `{}` has no mask", s.id)))?;
        Mask::load(path)
    }

    pub fn gt_boxes(&self, i: usize) -> Vec<BBox> {
        self.boxes.get(&self.samples[i].id).cloned().unwrap_or_default()
    }
}

pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for row in rd.deserialize::<AnnotationRow>() {
        let r = row.map_err(|e| csv_err(path, e))?;
        let b = BBox::new(r.x, r.y, r.w, r.h);
        if !b.is_valid() || b.x < 0 || b.y < 0 {
            return Err(Error::Data(format!("{}: invalid box {b:?} for `{}`", path.display(), r.image_id)));
        }
        out.entry(r.image_id).or_default().push(b);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

/// Writes scenes as `<prefix><index>` samples and a matching annotation file.
pub fn write_scenes(root: &Path, scenes: &[(String, Scene)]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let ann = root.join("annotations.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&ann).map_err(|e| csv_err(&ann, e))?;
    w.write_record(["image_id", "x", "y", "w", "h"]).map_err(|e| csv_err(&ann, e))?;
    for (id, s) in scenes {
        s.image.save_png(&root.join("images").join(format!("{id}.png")))?;
        s.mask.save(&root.join("masks").join(format!("{id}.png")))?;
        for b in &s.boxes {
            w.serialize(AnnotationRow { image_id: id.clone(), x: b.x, y: b.y, w: b.w, h: b.h })
                .map_err(|e| csv_err(&ann, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&ann, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec};

    #[test]
    fn write_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<_> = (0..3).map(|i| (format!("s{i:03}"), generate(&SceneSpec::default().with_seed(i)).unwrap())).collect();
        write_scenes(dir.path(), &scenes).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        ds.require_ground_truth().unwrap();
        assert_eq!(ds.len(), 3);
        for (i, (id, s)) in scenes.iter().enumerate() {
            assert_eq!(&ds.samples[i].id, id);
            assert_eq!(ds.gt_boxes(i), s.boxes);
            assert_eq!(ds.mask(i).unwrap(), s.mask);
            let img = ds.image(i).unwrap();
            assert_eq!((img.width(), img.height(), img.channels()), (320, 240, 3));
        }
    }

    #[test]
    fn empty_or_missing_dataset_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Io { .. })));
        fs::create_dir(dir.path().join("images")).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Contract(_))));
    }

    #[test]
    fn bad_annotation_rows_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "image_id,x,y,w,h\na,1,2,0,4\n").unwrap();
        assert!(read_annotations(&p).is_err());
        fs::write(&p, "image_id,x,y,w,h\na,1,2,x,4\n").unwrap();
        assert!(read_annotations(&p).is_err());
        fs::write(&p, "image_id,x,y,w,h\na,1,2,3,4\na,5,6,7,8\n").unwrap();
        assert_eq!(read_annotations(&p).unwrap()["a"].len(), 2);
    }
}
