//! Dataset generation from image directories.

use std::path::{Path, PathBuf};

use serde::Serialize;
use udl_core::datasets::{
    check_sources, generate_cryo_pair, generate_pair, prepare_center, CryoGenConfig, PairGenConfig,
};
use udl_core::Image;

use crate::dataset::{DatasetInfo, DatasetManifest, DatasetWriter};
use crate::error::{Error, Result};
use crate::images::{list_images, load_grayscale};

#[derive(Debug, Clone, Serialize)]
pub struct CocoOptions {
    pub source_dir: PathBuf,
    pub out_dir: PathBuf,
    pub count: usize,
    pub split: String,
    pub seed: u64,
    #[serde(flatten)]
    pub pairs: PairGenConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct CryoOptions {
    pub centers_dir: PathBuf,
    pub out_dir: PathBuf,
    pub split: String,
    pub seed: u64,
    #[serde(flatten)]
    pub cryo: CryoGenConfig,
}

fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Image { path: dir.to_path_buf(), reason: "no PNG or JPEG images found".into() });
    }
    paths
        .into_iter()
        .map(|p| {
            let img = load_grayscale(&p)?;
            Ok((p, img))
        })
        .collect()
}

/// Patch pairs cut from natural images; writes `opts.count` records.
pub fn generate_coco(opts: &CocoOptions) -> Result<DatasetManifest> {
    opts.pairs.validate()?;
    if opts.count == 0 {
        return Err(Error::Usage("count must be positive".into()));
    }
    let loaded = load_dir(&opts.source_dir)?;
    let need = opts.pairs.min_source_size();
    if let Some((path, img)) = loaded.iter().find(|(_, img)| img.height() < need || img.width() < need) {
        return Err(Error::Image {
            path: path.clone(),
            reason: format!(
                "{}x{} is smaller than the {need}x{need} needed for patch {} with max shift {}",
                img.height(),
                img.width(),
                opts.pairs.patch,
                opts.pairs.max_shift
            ),
        });
    }
    let sources: Vec<Image> = loaded.into_iter().map(|(_, img)| img).collect();
    check_sources(&sources, &opts.pairs)?;
    let info = DatasetInfo {
        split: opts.split.clone(),
        seed: opts.seed,
        generator: generator_record("coco", opts),
    };
    let mut writer = DatasetWriter::create(&opts.out_dir, info)?;
    for i in 0..opts.count {
        writer.push(&generate_pair(&sources, &opts.pairs, opts.seed, i)?.pair)?;
    }
    writer.finish()
}

/// Particle images against their center's reference; `count` per center.
pub fn generate_cryoem(opts: &CryoOptions) -> Result<DatasetManifest> {
    opts.cryo.validate()?;
    if opts.cryo.count == 0 {
        return Err(Error::Usage("count must be positive".into()));
    }
    let templates = load_dir(&opts.centers_dir)?
        .into_iter()
        .map(|(path, img)| prepare_center(&img).map_err(|e| Error::Image { path, reason: e.to_string() }))
        .collect::<Result<Vec<_>>>()?;
    let info = DatasetInfo {
        split: opts.split.clone(),
        seed: opts.seed,
        generator: generator_record("cryoem", opts),
    };
    let mut writer = DatasetWriter::create(&opts.out_dir, info)?;
    for (k, template) in templates.iter().enumerate() {
        for i in 0..opts.cryo.count {
            writer.push(&generate_cryo_pair(template, &opts.cryo, opts.seed, k, i)?.pair)?;
        }
    }
    writer.finish()
}

fn generator_record(kind: &str, opts: &impl Serialize) -> serde_json::Value {
    let mut v = serde_json::to_value(opts).expect("options serialize");
    if let Some(map) = v.as_object_mut() {
        map.remove("out_dir");
        map.insert("kind".into(), kind.into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;
    use crate::images::{save_png, Scaling};
    use udl_core::datasets::synthetic_texture;
    use udl_core::rng::{stream, Domain};

    fn write_sources(dir: &Path, n: usize, size: usize) {
        for i in 0..n {
            let mut rng = stream(11, Domain::Test, i as u64, 0);
            let img = synthetic_texture(size, size, 120, &mut rng);
            save_png(&dir.join(format!("img{i}.png")), &img, Scaling::Clamp).unwrap();
        }
    }

    fn opts(src: &Path, out: &Path) -> CocoOptions {
        CocoOptions {
            source_dir: src.into(),
            out_dir: out.into(),
            count: 6,
            split: "train".into(),
            seed: 7,
            pairs: PairGenConfig::new(32, 4),
        }
    }

    #[test]
    fn coco_generation_is_byte_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        std::fs::create_dir(&src).unwrap();
        write_sources(&src, 3, 96);
        let a = generate_coco(&opts(&src, &tmp.path().join("a"))).unwrap();
        let b = generate_coco(&opts(&src, &tmp.path().join("b"))).unwrap();
        assert_eq!(a, b);
        for f in ["manifest.json", "data-00000.bin"] {
            let fa = std::fs::read(tmp.path().join("a").join(f)).unwrap();
            let fb = std::fs::read(tmp.path().join("b").join(f)).unwrap();
            assert_eq!(fa, fb, "{f}");
        }
        assert_eq!(load_dataset(&tmp.path().join("a")).unwrap().len(), 6);
        assert_eq!(a.generator["kind"], "coco");
    }

    #[test]
    fn small_source_error_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        std::fs::create_dir(&src).unwrap();
        write_sources(&src, 2, 96);
        save_png(&src.join("tiny.png"), &Image::zeros(20, 20), Scaling::Clamp).unwrap();
        let err = generate_coco(&opts(&src, &tmp.path().join("o"))).unwrap_err().to_string();
        assert!(err.contains("tiny.png"), "{err}");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(generate_coco(&opts(tmp.path(), &tmp.path().join("o"))).is_err());
    }
}
