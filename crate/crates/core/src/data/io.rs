//! Dataset directory format: PNG rasters plus `manifest.csv`, whose `#`
//! header lines carry the generator config, seed and factor declarations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{FactorSpec, Sample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::vae::ImageTensor;

pub const MANIFEST: &str = "manifest.csv";

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub factors: Vec<FactorSpec>,
    pub splits: IndexMap<String, Vec<Sample>>,
    /// `# key: value` lines from the manifest header.
    pub header: IndexMap<String, String>,
    /// Hex sha256 of the manifest file.
    pub digest: String,
}

impl DiskDataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("dataset has no `{name}` split")))
    }
}

pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w, c) = img.dims();
    let hw = h * w;
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let bytes: Vec<u8> = match c {
        1 => img.data().iter().map(|&v| to_u8(v)).collect(),
        3 => (0..hw).flat_map(|p| (0..3).map(move |ch| p + ch * hw)).map(|i| to_u8(img.data()[i])).collect(),
        _ => return Err(Error::format(path, format!("cannot store {c}-channel images as PNG"))),
    };
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit raster as grayscale (single-channel sources) or RGB,
/// scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() <= 2 {
        let g = img.to_luma8();
        ImageTensor::new(h, w, 1, g.as_raw().iter().map(|&b| b as f32 / 255.0).collect())
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let data = (0..3).flat_map(|ch| (0..h * w).map(move |p| raw[p * 3 + ch] as f32 / 255.0)).collect();
        ImageTensor::new(h, w, 3, data)
    }
}

pub fn manifest_digest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn relative_path(split: &str, id: &str) -> String {
    format!("images/{}/{id}.png", split.replace(':', "-"))
}

/// Writes every split under `dir` and returns the manifest digest. The
/// manifest is written last, so a directory without one is incomplete.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<String> {
    let factor_names: Vec<&str> = ds.config.factors.iter().map(|f| f.name.as_str()).collect();
    let mut rows = Vec::new();
    for (split, samples) in &ds.splits {
        let sub = dir.join("images").join(split.replace(':', "-"));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for s in samples {
            let rel = relative_path(split, &s.id);
            save_image(&dir.join(&rel), &s.image)?;
            let values: Vec<&str> = factor_names.iter().map(|f| s.value(f).unwrap_or("")).collect();
            let mut row = vec![rel, split.clone(), values.join("|")];
            row.extend(values.iter().map(|v| v.to_string()));
            rows.push(row);
        }
    }

    let mut out = Vec::new();
    let generator = serde_json::to_string(&ds.config).expect("serializable config");
    let factors = serde_json::to_string(&ds.factors).expect("serializable factors");
    writeln!(out, "# generator: {generator}").expect("in-memory write");
    writeln!(out, "# seed: {}", ds.seed).expect("in-memory write");
    writeln!(out, "# factors: {factors}").expect("in-memory write");
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["path", "split", "partition"];
        header.extend(&factor_names);
        w.write_record(&header).map_err(|e| Error::format(dir.join(MANIFEST), e))?;
        for r in rows {
            w.write_record(&r).map_err(|e| Error::format(dir.join(MANIFEST), e))?;
        }
        w.flush().map_err(|e| Error::io(dir.join(MANIFEST), e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&out)))
}

/// Reads a dataset directory written by [`write_dataset`] (or hand-made
/// with the same manifest layout).
pub fn read_dataset(dir: &Path) -> Result<DiskDataset> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut header = IndexMap::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once(':') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let factors: Vec<FactorSpec> = match header.get("factors") {
        Some(f) => serde_json::from_str(f).map_err(|e| Error::format(&path, format!("factors header: {e}")))?,
        None => return Err(Error::format(&path, "manifest lacks a `# factors:` header")),
    };

    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let cols: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(&path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let col = |name: &str| {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::format(&path, format!("manifest lacks column `{name}`")))
    };
    let (pc, sc) = (col("path")?, col("split")?);
    let fcols: Vec<(String, usize)> = factors.iter().map(|f| Ok((f.name.clone(), col(&f.name)?))).collect::<Result<_>>()?;

    let mut splits: IndexMap<String, Vec<Sample>> = IndexMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
        let rel = PathBuf::from(&rec[pc]);
        let id = rel.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = load_image(&dir.join(&rel))?;
        let assignment = fcols.iter().map(|(f, c)| (f.clone(), rec[*c].to_string())).collect();
        splits.entry(rec[sc].to_string()).or_default().push(Sample { id, image, assignment });
    }
    Ok(DiskDataset { factors, splits, header, digest: hex::encode(Sha256::digest(&bytes)) })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_synthetic, GeneratorConfig};
    use super::*;

    #[test]
    fn round_trip_preserves_samples_and_digest() {
        let cfg = GeneratorConfig { train_per_partition: 3, calib_per_partition: 2, test_per_side: 12, ..Default::default() };
        let ds = generate_synthetic(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let digest = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(digest, manifest_digest(dir.path()).unwrap());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.digest, digest);
        assert_eq!(back.factors, ds.factors);
        assert_eq!(back.header["seed"], "2");
        for (name, samples) in &ds.splits {
            assert_eq!(&back.splits[name], samples, "{name}");
        }

        let dir2 = tempfile::tempdir().unwrap();
        assert_eq!(write_dataset(dir2.path(), &ds).unwrap(), digest);
    }

    #[test]
    fn rgb_round_trip() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 255.0).collect();
        let img = ImageTensor::new(2, 2, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
