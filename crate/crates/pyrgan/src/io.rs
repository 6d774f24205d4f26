//! Persistence: PNG pairs, checkpoint archives, raw volumes, loss logs.
//!
//! Checkpoints are a small binary container — magic, version, a JSON
//! manifest, then named f64 tensors — written atomically (temp file + rename)
//! so an interrupted run never leaves a torn archive behind.

use crate::core::{ConditionMask, ImageTensor, SamplePair};
use crate::{PyrganError, Result};
use ndarray::{Array2, Array3};
use pyrgan_nn::Arr4;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const CKPT_MAGIC: &[u8; 4] = b"PYRG";
const CKPT_VERSION: u32 = 1;
const VOL_MAGIC: &[u8; 4] = b"PVOL";

fn bad(msg: impl Into<String>) -> PyrganError {
    PyrganError::State(msg.into())
}

/// 8-bit grayscale PNG from a `[-1, 1]` image.
pub fn write_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let px = image.to_pixels();
    write_gray_png(path, &px)
}

pub fn read_image_png(path: &Path) -> Result<ImageTensor> {
    Ok(ImageTensor::from_pixels(&read_gray_png(path)?))
}

/// Mask PNG at the canonical 0/128/255 values.
pub fn write_mask_png(path: &Path, mask: &ConditionMask) -> Result<()> {
    write_gray_png(path, &mask.to_pixels())
}

pub fn read_mask_png(path: &Path) -> Result<ConditionMask> {
    Ok(ConditionMask::from_pixels(&read_gray_png(path)?))
}

fn write_gray_png(path: &Path, px: &Array2<u8>) -> Result<()> {
    let (h, w) = px.dim();
    let buf: Vec<u8> = px.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| bad("pixel buffer size mismatch"))?;
    img.save(path).map_err(|e| bad(format!("writing {}: {e}", path.display())))
}

fn read_gray_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| bad(format!("reading {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| bad(format!("decoding {}: {e}", path.display())))
}

/// `{name}_img.png` + `{name}_mask.png` under `dir`.
pub fn save_pair(dir: &Path, name: &str, pair: &SamplePair) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_image_png(&dir.join(format!("{name}_img.png")), &pair.image)?;
    write_mask_png(&dir.join(format!("{name}_mask.png")), &pair.mask)
}

pub fn load_pair(dir: &Path, name: &str) -> Result<SamplePair> {
    let image = read_image_png(&dir.join(format!("{name}_img.png")))?;
    let mask = read_mask_png(&dir.join(format!("{name}_mask.png")))?;
    SamplePair::new(image, mask)
}

/// Sorted sample names in a directory (everything with an `_img.png` suffix).
pub fn list_pairs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let fname = entry.file_name();
        let fname = fname.to_string_lossy();
        if let Some(stem) = fname.strip_suffix("_img.png") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    Ok(names)
}

/// Writes `value` as pretty JSON, atomically.
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| bad(format!("encoding JSON: {e}")))?;
    atomic_write(path, text.as_bytes())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| bad(format!("parsing {}: {e}", path.display())))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes a checkpoint: JSON manifest plus named tensors, atomically.
pub fn write_checkpoint(
    path: &Path,
    manifest: &serde_json::Value,
    tensors: &[(String, Arr4)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = temp_sibling(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(manifest).map_err(|e| bad(format!("manifest: {e}")))?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for (name, t) in tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
            w.write_all(name_bytes)?;
            let (a, b, c, d) = t.dim();
            for dim in [a, b, c, d] {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Arr4)>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mlen = read_u64(&mut r)? as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)?;
    let manifest = serde_json::from_slice(&mbytes).map_err(|e| bad(format!("manifest: {e}")))?;
    let count = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u64(&mut r)? as usize;
        let mut nbytes = vec![0u8; nlen];
        r.read_exact(&mut nbytes)?;
        let name = String::from_utf8(nbytes).map_err(|e| bad(format!("tensor name: {e}")))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(&mut r)? as usize;
        }
        let len = dims.iter().product::<usize>();
        let mut data = vec![0f64; len];
        for v in &mut data {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let t = Arr4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
            .map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok((manifest, tensors))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// A 3-D grayscale volume with an aligned 3-D label volume, both `u8`,
/// stored depth-major after a small JSON header.
pub struct Volume {
    pub voxels: Array3<u8>,
    pub labels: Array3<u8>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VolumeHeader {
    depth: usize,
    height: usize,
    width: usize,
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    if vol.voxels.dim() != vol.labels.dim() {
        return Err(PyrganError::Shape(format!(
            "voxels {:?} vs labels {:?}",
            vol.voxels.dim(),
            vol.labels.dim()
        )));
    }
    let (d, h, w) = vol.voxels.dim();
    let header = serde_json::to_vec(&VolumeHeader { depth: d, height: h, width: w })
        .map_err(|e| bad(format!("volume header: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + 2 * d * h * w);
    bytes.extend_from_slice(VOL_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend(vol.voxels.iter().copied());
    bytes.extend(vol.labels.iter().copied());
    atomic_write(path, &bytes)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOL_MAGIC {
        return Err(bad(format!("{} is not a volume file", path.display())));
    }
    let hlen = read_u64(&mut r)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: VolumeHeader =
        serde_json::from_slice(&hbytes).map_err(|e| bad(format!("volume header: {e}")))?;
    let n = header.depth * header.height * header.width;
    let mut voxels = vec![0u8; n];
    r.read_exact(&mut voxels)?;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)?;
    let shape = (header.depth, header.height, header.width);
    Ok(Volume {
        voxels: Array3::from_shape_vec(shape, voxels).map_err(|e| bad(format!("voxels: {e}")))?,
        labels: Array3::from_shape_vec(shape, labels).map_err(|e| bad(format!("labels: {e}")))?,
    })
}

/// Append-only CSV of per-step losses; writes the header when creating.
pub struct LossLog {
    writer: csv::Writer<fs::File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let fresh = !path.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer
                .write_record([
                    "scale", "stage", "epoch", "wppl", "ms_ssim", "ms_fvl", "ms_ful", "mixed",
                    "adv_g", "adv_d",
                ])
                .map_err(|e| bad(format!("loss log: {e}")))?;
        }
        Ok(Self { writer })
    }

    pub fn append(
        &mut self,
        scale: usize,
        stage: &str,
        epoch: usize,
        r: &crate::losses::LossReport,
    ) -> Result<()> {
        self.writer
            .write_record([
                scale.to_string(),
                stage.to_string(),
                epoch.to_string(),
                format!("{:.9e}", r.wppl),
                format!("{:.9e}", r.ms_ssim),
                format!("{:.9e}", r.ms_fvl),
                format!("{:.9e}", r.ms_ful),
                format!("{:.9e}", r.mixed),
                format!("{:.9e}", r.adv_g),
                format!("{:.9e}", r.adv_d),
            ])
            .map_err(|e| bad(format!("loss log: {e}")))?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use tempfile::tempdir;

    #[test]
    fn image_png_round_trip_is_exact_at_8_bit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageTensor::from_pixels(&Array2::from_shape_fn((9, 7), |(r, c)| {
            ((r * 29 + c * 13) % 256) as u8
        }));
        write_image_png(&path, &img).unwrap();
        let back = read_image_png(&path).unwrap();
        assert_eq!(back.to_pixels(), img.to_pixels());
    }

    #[test]
    fn mask_png_round_trip_preserves_labels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask =
            ConditionMask::new(Array2::from_shape_fn((8, 8), |(r, c)| ((r + c) % 3) as u8)).unwrap();
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt/scale0_super.bin");
        let manifest = serde_json::json!({"scale": 0, "stage": "super", "epoch": 17});
        let tensors = vec![
            ("a.w".to_string(), Arr4::from_shape_fn((2, 3, 4, 4), |(i, j, k, l)| {
                (i as f64 * 0.1 + j as f64 * 0.01 + k as f64 + l as f64 * 3.0).sin()
            })),
            ("a.b".to_string(), Arr4::from_elem((1, 3, 1, 1), -0.125)),
        ];
        write_checkpoint(&path, &manifest, &tensors).unwrap();
        let (m2, t2) = read_checkpoint(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(t2.len(), tensors.len());
        for ((n1, v1), (n2, v2)) in tensors.iter().zip(t2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        // No leftover temp file from the atomic write.
        assert!(!path.with_file_name("scale0_super.bin.tmp").exists());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(read_checkpoint(&path).is_err());
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn volume_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scan.vol");
        let voxels = Array3::from_shape_fn((3, 6, 5), |(d, r, c)| ((d * 91 + r * 7 + c) % 256) as u8);
        let labels = Array3::from_shape_fn((3, 6, 5), |(d, r, c)| ((d + r + c) % 4) as u8);
        write_volume(&path, &Volume { voxels: voxels.clone(), labels: labels.clone() }).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.voxels, voxels);
        assert_eq!(vol.labels, labels);
    }

    #[test]
    fn pair_listing_finds_saved_samples() {
        let dir = tempdir().unwrap();
        let img = ImageTensor::new(Array2::zeros((8, 8))).unwrap();
        let mask = ConditionMask::new(Array2::zeros((8, 8))).unwrap();
        let pair = SamplePair::new(img, mask).unwrap();
        save_pair(dir.path(), "scan3_0007", &pair).unwrap();
        save_pair(dir.path(), "scan1_0002", &pair).unwrap();
        assert_eq!(list_pairs(dir.path()).unwrap(), vec!["scan1_0002", "scan3_0007"]);
        let back = load_pair(dir.path(), "scan1_0002").unwrap();
        assert_eq!(back.mask, pair.mask);
    }

    #[test]
    fn loss_log_appends_rows_with_header_once() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("logs/losses.csv");
        let report = crate::losses::LossReport {
            wppl: 0.5,
            ms_ssim: 0.25,
            ms_fvl: 0.1,
            ms_ful: 0.05,
            mixed: 7.0,
            adv_g: 0.69,
            adv_d: 0.70,
        };
        {
            let mut log = LossLog::open(&path).unwrap();
            log.append(0, "super", 1, &report).unwrap();
        }
        {
            let mut log = LossLog::open(&path).unwrap();
            log.append(0, "super", 2, &report).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("scale,stage,epoch"));
        assert!(lines[1].starts_with("0,super,1"));
        assert!(lines[2].starts_with("0,super,2"));
    }
}
