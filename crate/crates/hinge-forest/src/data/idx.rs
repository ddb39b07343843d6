use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;

use super::{DatasetSplit, Labels, SplitTag};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Opens a file, transparently decompressing gzip containers (detected by
/// the 0x1f 0x8b prefix).
fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open '{}': {e}", path.display())))?;
    let mut prefix = [0u8; 2];
    let n = file.read(&mut prefix)?;
    let file = File::open(path)?;
    if n == 2 && prefix == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Loads an IDX image/label pair: big-endian extents, magic 2051 for images
/// and 2049 for labels, unsigned-byte pixels scaled into [0, 1] by 255.
/// Output features are `[N, 1, H, W]`.
pub fn load_idx<R: Real>(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit<R>> {
    let mut images = open_maybe_gz(images_path)?;
    let magic = images
        .read_u32::<BigEndian>()
        .map_err(|e| Error::Data(format!("'{}': {e}", images_path.display())))?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "'{}': bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = images.read_u32::<BigEndian>()? as usize;
    let height = images.read_u32::<BigEndian>()? as usize;
    let width = images.read_u32::<BigEndian>()? as usize;
    let mut pixels = vec![0u8; count * height * width];
    images.read_exact(&mut pixels).map_err(|e| {
        Error::Data(format!(
            "'{}': truncated image data: {e}",
            images_path.display()
        ))
    })?;

    let mut labels = open_maybe_gz(labels_path)?;
    let magic = labels
        .read_u32::<BigEndian>()
        .map_err(|e| Error::Data(format!("'{}': {e}", labels_path.display())))?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "'{}': bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = labels.read_u32::<BigEndian>()? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{count} images in '{}' but {label_count} labels in '{}'",
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    labels.read_exact(&mut raw_labels).map_err(|e| {
        Error::Data(format!(
            "'{}': truncated label data: {e}",
            labels_path.display()
        ))
    })?;

    let scale = 1.0 / 255.0;
    let features: Vec<R> = pixels
        .into_iter()
        .map(|p| R::from_f64(p as f64 * scale))
        .collect();
    let class_count = raw_labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(DatasetSplit {
        features: Tensor::from_vec(&[count, 1, height, width], features)?,
        labels: Labels::Classes(raw_labels.into_iter().map(|l| l as usize).collect()),
        tag: SplitTag::Train,
        class_names: (0..class_count).map(|c| c.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write;

    fn write_images(count: u32, h: u32, w: u32, pixels: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(count).unwrap();
        f.write_u32::<BigEndian>(h).unwrap();
        f.write_u32::<BigEndian>(w).unwrap();
        f.write_all(pixels).unwrap();
        f
    }

    fn write_labels(labels: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
        f.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        f.write_all(labels).unwrap();
        f
    }

    #[test]
    fn loads_and_scales_pixels() {
        let images = write_images(2, 2, 2, &[0, 51, 102, 255, 255, 204, 153, 0]);
        let labels = write_labels(&[3, 1]);
        let split = load_idx::<f64>(images.path(), labels.path()).unwrap();
        assert_eq!(split.features.shape(), &[2, 1, 2, 2]);
        assert_eq!(split.features.data()[0], 0.0);
        assert!((split.features.data()[3] - 1.0).abs() < 1e-12);
        assert!(split.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        match &split.labels {
            super::super::Labels::Classes(v) => assert_eq!(v, &[3, 1]),
            _ => panic!("expected class labels"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_u32::<BigEndian>(0xdeadbeef).unwrap();
        f.write_u32::<BigEndian>(0).unwrap();
        let labels = write_labels(&[]);
        let err = load_idx::<f64>(f.path(), labels.path()).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let images = write_images(2, 1, 1, &[1, 2]);
        let labels = write_labels(&[7]);
        let err = load_idx::<f64>(images.path(), labels.path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("2 images") && err.contains("1 labels"), "{err}");
    }

    #[test]
    fn truncated_file_fails_closed() {
        let images = write_images(3, 2, 2, &[0; 5]); // needs 12 pixel bytes
        let labels = write_labels(&[0, 1, 2]);
        let err = load_idx::<f64>(images.path(), labels.path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn gzip_containers_are_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let mut raw = Vec::new();
        raw.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
        raw.write_u32::<BigEndian>(1).unwrap();
        raw.write_u32::<BigEndian>(1).unwrap();
        raw.write_u32::<BigEndian>(1).unwrap();
        raw.push(255);
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&raw).unwrap();
        let gz_bytes = gz.finish().unwrap();
        let mut images = tempfile::NamedTempFile::new().unwrap();
        images.write_all(&gz_bytes).unwrap();
        let labels = write_labels(&[9]);
        let split = load_idx::<f32>(images.path(), labels.path()).unwrap();
        assert_eq!(split.features.data(), &[1.0f32]);
    }
}
