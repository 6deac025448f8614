//! On-disk dataset layout: `manifest.json`, `images/<id>.png`, `labels/<id>.png`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Domain, DomainSample, PhantomSpec};
use crate::error::{Error, Result};
use crate::tensor::{Image, LabelMap};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: String,
    pub domain: Domain,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub fold_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PhantomSpec>,
    pub samples: Vec<ManifestEntry>,
}

/// 8-bit quantization with round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let to_fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(to_fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(to_fmt)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: expected 8-bit grayscale, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// Writes the bundle under `dir` and returns the manifest path.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    bundle.validate_structure()?;
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let roles: [(&str, &[DomainSample]); 4] = [
        ("d_s", &bundle.d_s),
        ("d_t", &bundle.d_t),
        ("d_u", &bundle.d_u),
        ("val", &bundle.val),
    ];
    let mut entries = Vec::new();
    for (role, samples) in roles {
        for s in samples {
            let image_rel = format!("images/{}.png", s.id);
            let pixels: Vec<u8> = s.image.data.iter().map(|&v| quantize(v)).collect();
            write_gray_png(&dir.join(&image_rel), s.image.width, s.image.height, &pixels)?;
            let label_rel = match &s.label {
                Some(label) => {
                    let rel = format!("labels/{}.png", s.id);
                    write_gray_png(&dir.join(&rel), label.width, label.height, &label.data)?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                id: s.id.clone(),
                role: role.to_string(),
                domain: s.domain,
                image: image_rel,
                label: label_rel,
            });
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        fold_index: bundle.fold_index,
        spec: bundle.spec.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!(
            "unsupported manifest format {} (expected {MANIFEST_FORMAT})",
            manifest.format
        )));
    }
    let mut bundle = DatasetBundle {
        fold_index: manifest.fold_index,
        spec: manifest.spec.clone(),
        ..Default::default()
    };
    for entry in &manifest.samples {
        let slot = match entry.role.as_str() {
            "d_s" => &mut bundle.d_s,
            "d_t" => &mut bundle.d_t,
            "d_u" => &mut bundle.d_u,
            "val" => &mut bundle.val,
            other => {
                return Err(Error::Format(format!(
                    "sample `{}` has role `{other}`; expected one of d_s, d_t, d_u, val",
                    entry.id
                )))
            }
        };
        if entry.role == "d_u" && entry.label.is_some() {
            return Err(Error::Format(format!(
                "sample `{}` is in d_u but references a label file",
                entry.id
            )));
        }
        if entry.role != "d_u" && entry.label.is_none() {
            return Err(Error::Format(format!(
                "sample `{}` in {} has no label file",
                entry.id, entry.role
            )));
        }
        let image_path = dir.join(&entry.image);
        if !image_path.is_file() {
            return Err(Error::MissingFile {
                id: entry.id.clone(),
                path: image_path,
            });
        }
        let (w, h, px) = read_gray_png(&image_path)?;
        let image = Image::new(h, w, px.iter().map(|&v| v as f64 / 255.0).collect())?;
        let label = match &entry.label {
            Some(rel) => {
                let label_path = dir.join(rel);
                if !label_path.is_file() {
                    return Err(Error::MissingFile {
                        id: entry.id.clone(),
                        path: label_path,
                    });
                }
                let (lw, lh, data) = read_gray_png(&label_path)?;
                if (lw, lh) != (w, h) {
                    return Err(Error::Format(format!(
                        "sample `{}`: label is {lw}x{lh}, image is {w}x{h}",
                        entry.id
                    )));
                }
                if let Some(spec) = &manifest.spec {
                    if let Some(&c) = data.iter().find(|&&c| c as usize >= spec.num_classes) {
                        return Err(Error::Format(format!(
                            "sample `{}`: label value {c} exceeds num_classes {}",
                            entry.id, spec.num_classes
                        )));
                    }
                }
                Some(LabelMap::new(lh, lw, data)?)
            }
            None => None,
        };
        slot.push(DomainSample {
            id: entry.id.clone(),
            domain: entry.domain,
            image,
            label,
        });
    }
    bundle.validate_structure()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, make_folds};

    fn small_bundle() -> DatasetBundle {
        let spec = PhantomSpec::new(16, 5, 3);
        let samples = generate_dataset(&spec, 3, 12).unwrap();
        let mut b = make_folds(&samples, 4, 0.25, 1).unwrap().remove(1);
        b.spec = Some(spec);
        b
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = small_bundle();
        save_dataset(&bundle, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.fold_index, 1);
        assert_eq!(loaded.spec, bundle.spec);
        for (a, b) in bundle.all_samples().zip(loaded.all_samples()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }

    fn rewrite_manifest(dir: &Path, f: impl FnOnce(&mut Manifest)) {
        let path = dir.join("manifest.json");
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        f(&mut m);
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn d_u_entry_with_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small_bundle(), dir.path()).unwrap();
        rewrite_manifest(dir.path(), |m| {
            let e = m.samples.iter_mut().find(|e| e.role == "d_u").unwrap();
            e.label = Some("labels/whatever.png".into());
        });
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_role_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small_bundle(), dir.path()).unwrap();
        rewrite_manifest(dir.path(), |m| m.samples[0].role = "train".into());
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(ref s) if s.contains("train")), "{err}");
    }

    #[test]
    fn missing_image_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = small_bundle();
        save_dataset(&bundle, dir.path()).unwrap();
        let id = bundle.d_t[0].id.clone();
        fs::remove_file(dir.path().join(format!("images/{id}.png"))).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile { id: got, .. }) => assert_eq!(got, id),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn empty_d_t_still_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small_bundle(), dir.path()).unwrap();
        rewrite_manifest(dir.path(), |m| m.samples.retain(|e| e.role != "d_t"));
        let b = load_dataset(dir.path()).unwrap();
        assert!(b.d_t.is_empty());
        assert!(b.validate_sizes().is_err());
    }
}
