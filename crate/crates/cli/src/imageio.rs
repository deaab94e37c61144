use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use ivr_core::tensor::Tensor;

use crate::error::{CliError, CliResult};

const EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Loads an 8-bit RGB PNG or binary PPM as `[1, 3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> CliResult<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?
        .with_guessed_format()?
        .decode()
        .map_err(|e| match e {
            image::ImageError::IoError(e) => CliError::io(format!("{}: {e}", path.display())),
            other => CliError { msg: format!("{}: {other}", path.display()), ..CliError::from(other) },
        })?
        .to_rgb8();
    Ok(to_tensor(&img))
}

pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("image shape")
}

pub fn to_rgb(t: &Tensor) -> RgbImage {
    let [_, _, h, w] = t.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes PNG, or binary PPM for `.ppm`/`.pnm` paths.
pub fn save_image(t: &Tensor, path: &Path) -> CliResult<()> {
    let fmt = match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "ppm" || e == "pnm" => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    to_rgb(t)
        .save_with_format(path, fmt)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Expands directories into their image files, sorted by name.
pub fn collect_images(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::io(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && has_image_ext(e))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("no input images found"));
    }
    Ok(out)
}

pub fn load_all(paths: &[PathBuf]) -> CliResult<(Vec<PathBuf>, Vec<Tensor>)> {
    let files = collect_images(paths)?;
    let images = files.iter().map(|p| load_image(p)).collect::<CliResult<Vec<_>>>()?;
    Ok((files, images))
}
