//! Lossless per-frame PNG export with a text manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lvd_core::codec::{LatentKind, LatentTensor, VideoTensor};
use lvd_core::Tensor;
use sha2::{Digest, Sha256};

pub const DEFAULT_FPS: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleInfo {
    pub mode: String,
    pub seed: u64,
    pub guidance: f64,
    /// Class name or caption.
    pub prompt: String,
    pub config_hash: String,
    pub fps: u32,
}

/// Maps `[-1, 1]` to `0..=255`.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes `frame_%04d.png` for each frame plus `manifest.txt`; returns the
/// frame paths.
pub fn export_frames(
    video: &VideoTensor<f32>,
    dir: &Path,
    info: &SampleInfo,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (f, h, w) = (video.frames(), video.height(), video.width());
    let data = video.tensor().data();
    let frame = h * w * 3;
    let mut paths = Vec::with_capacity(f);
    for i in 0..f {
        let bytes: Vec<u8> = data[i * frame..(i + 1) * frame]
            .iter()
            .map(|&v| to_u8(v))
            .collect();
        let Some(img) = image::RgbImage::from_raw(w as u32, h as u32, bytes) else {
            bail!("frame {i} does not fill {w}x{h}");
        };
        let path = dir.join(format!("frame_{i:04}.png"));
        img.save_with_format(&path, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", path.display()))?;
        paths.push(path);
    }
    let manifest = format!(
        "mode = {}\nframes = {f}\nheight = {h}\nwidth = {w}\nfps = {}\nseed = {}\nguidance = {}\nprompt = {}\nconfig_hash = {}\n",
        info.mode, info.fps, info.seed, info.guidance, info.prompt, info.config_hash
    );
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).with_context(|| format!("writing {}", mpath.display()))?;
    Ok(paths)
}

/// Reads a frame back into `[-1, 1]` RGB values.
pub fn read_frame(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 127.5 - 1.0)
        .collect();
    Ok((h as usize, w as usize, data))
}

/// Writes a latent tensor as `latents.txt` (kind, flag, shape) plus
/// `latents.bin` (little-endian f32).
pub fn save_latents(dir: &Path, z: &LatentTensor<f32>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let dims = z
        .tensor
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let meta = format!(
        "kind = {}\nnormalized = {}\nshape = {dims}\n",
        z.kind.as_str(),
        z.normalized
    );
    let bytes: Vec<u8> = z
        .tensor
        .data()
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect();
    let bin = dir.join("latents.bin");
    fs::write(&bin, bytes).with_context(|| format!("writing {}", bin.display()))?;
    let txt = dir.join("latents.txt");
    fs::write(&txt, meta).with_context(|| format!("writing {}", txt.display()))?;
    Ok(())
}

pub fn load_latents(dir: &Path) -> Result<LatentTensor<f32>> {
    let txt = dir.join("latents.txt");
    let meta = fs::read_to_string(&txt).with_context(|| format!("reading {}", txt.display()))?;
    let mut kind = None;
    let mut normalized = None;
    let mut shape = None;
    for line in meta.lines() {
        match line.split_once(" = ") {
            Some(("kind", "video")) => kind = Some(LatentKind::Video),
            Some(("kind", "image_stack")) => kind = Some(LatentKind::ImageStack),
            Some(("normalized", v)) => normalized = Some(v.parse::<bool>()?),
            Some(("shape", v)) => {
                shape = Some(
                    v.split(',')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()?,
                )
            }
            _ => bail!("{}: unexpected line {line:?}", txt.display()),
        }
    }
    let (Some(kind), Some(normalized), Some(shape)) = (kind, normalized, shape) else {
        bail!("{}: kind, normalized and shape are required", txt.display());
    };
    let bin = dir.join("latents.bin");
    let bytes = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut z = LatentTensor::new(Tensor::from_vec(&shape, data)?, kind)?;
    z.normalized = normalized;
    Ok(z)
}

/// Reads `frame_*.png` files of a directory in name order as one clip.
pub fn read_clip(dir: &Path) -> Result<VideoTensor<f32>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no frame_*.png files in {}", dir.display());
    }
    let mut data = Vec::new();
    let mut dims = None;
    for p in &paths {
        let (h, w, px) = read_frame(p)?;
        if *dims.get_or_insert((h, w)) != (h, w) {
            bail!("{} is {h}x{w}, earlier frames differ", p.display());
        }
        data.extend(px);
    }
    let (h, w) = dims.unwrap_or_default();
    Ok(VideoTensor::new(Tensor::from_vec(
        &[paths.len(), h, w, 3],
        data,
    )?)?)
}

/// Hex SHA-256 over the frame files and manifest of an export directory.
pub fn hash_export(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
                .as_bytes(),
        );
        h.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info() -> SampleInfo {
        SampleInfo {
            mode: "t2v".into(),
            seed: 7,
            guidance: 2.0,
            prompt: "red still".into(),
            config_hash: "abc".into(),
            fps: DEFAULT_FPS,
        }
    }

    fn video(frames: usize) -> VideoTensor<f32> {
        let n = frames * 4 * 6 * 3;
        VideoTensor::new(
            Tensor::from_vec(
                &[frames, 4, 6, 3],
                (0..n).map(|i| ((i % 11) as f32 / 5.0) - 1.0).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn one_file_per_frame_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let paths = export_frames(&video(17), dir.path(), &info()).unwrap();
        assert_eq!(paths.len(), 17);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 18);
        assert!(paths[16].ends_with("frame_0016.png"));
        let first = fs::read(&paths[3]).unwrap();
        export_frames(&video(17), dir.path(), &info()).unwrap();
        assert_eq!(fs::read(&paths[3]).unwrap(), first);
        let m = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(m.contains("frames = 17") && m.contains("seed = 7") && m.contains("guidance = 2"));

        let img_dir = tempfile::tempdir().unwrap();
        assert_eq!(
            export_frames(&video(1), img_dir.path(), &info())
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn pixels_survive_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let v = video(1);
        let paths = export_frames(&v, dir.path(), &info()).unwrap();
        let (h, w, back) = read_frame(&paths[0]).unwrap();
        assert_eq!((h, w), (4, 6));
        let err = back
            .iter()
            .zip(v.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err <= 1.0 / 127.5, "{err}");
    }

    #[test]
    fn latents_and_clips_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = LatentTensor::new(
            Tensor::from_vec(
                &[2, 1, 1, 4],
                vec![0.5, -1.0, 3.25, 0.0, 1.0, 2.0, 3.0, 4.0],
            )
            .unwrap(),
            LatentKind::ImageStack,
        )
        .unwrap();
        z.normalized = true;
        save_latents(dir.path(), &z).unwrap();
        let back = load_latents(dir.path()).unwrap();
        assert_eq!(back, z);

        let v = video(3);
        let out = dir.path().join("clip");
        export_frames(&v, &out, &info()).unwrap();
        let back = read_clip(&out).unwrap();
        assert_eq!(back.tensor().shape(), v.tensor().shape());
        let h1 = hash_export(&out).unwrap();
        export_frames(&v, &out, &info()).unwrap();
        assert_eq!(hash_export(&out).unwrap(), h1);
    }

    #[test]
    fn unwritable_target_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, b"x").unwrap();
        let e = format!(
            "{:#}",
            export_frames(&video(1), &file.join("sub"), &info()).unwrap_err()
        );
        assert!(e.contains("blocker"), "{e}");
    }
}
