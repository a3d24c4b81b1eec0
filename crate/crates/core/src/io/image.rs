use std::path::Path;

use super::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parses a binary PPM (P6, maxval 255) into a 3×H×W tensor in [0,1].
pub fn parse_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("corrupt PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Image("unsupported format: expected binary PPM (P6)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::Image(format!("corrupt PPM header: bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image("corrupt PPM header: zero extent".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let needed = width * height * 3;
    if bytes.len() < data_start + needed {
        return Err(Error::Image("PPM raster truncated".into()));
    }
    let raster = &bytes[data_start..data_start + needed];
    let max = T::from_f64_lossy(255.0);
    let mut data = vec![T::zero(); needed];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * width * height + i] = T::from_u8(px[c]).unwrap() / max;
        }
    }
    Tensor::new([3, height, width], data)
}

/// Encodes a 3×H×W tensor in [0,1] as binary PPM, rounding to 8 bits.
pub fn write_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::shape("write_ppm", format!("{:?}", image.shape())));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            let v = image.data()[c * h * w + i].to_f64().unwrap();
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize of a C×H×W tensor to C×size×size.
pub fn resize_nearest<T: Scalar>(image: &Tensor<T>, size: usize) -> Tensor<T> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if h == size && w == size {
        return image.clone();
    }
    Tensor::from_fn([c, size, size], |i| {
        let ch = i / (size * size);
        let y = (i / size) % size;
        let x = i % size;
        let sy = y * h / size;
        let sx = x * w / size;
        image.data()[(ch * h + sy) * w + sx]
    })
}

/// Loads a PPM or a tensor archive with key `"image"`, resized to `size`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, size: usize) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let image = if bytes.starts_with(b"P6") {
        parse_ppm(&bytes)?
    } else if bytes.starts_with(super::MAGIC) {
        let t = Archive::from_bytes(&bytes)?.tensor::<T>("image")?;
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Image(format!("image tensor has shape {:?}", t.shape())));
        }
        t
    } else {
        return Err(Error::Image(
            "unsupported format: expected P6 PPM or tensor archive".into(),
        ));
    };
    Ok(resize_nearest(&image, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let t: Tensor<f32> = parse_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_other_maxval_and_formats() {
        assert!(parse_ppm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(parse_ppm::<f32>(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(parse_ppm::<f32>(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(parse_ppm::<f32>(b"P6\nx 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let t: Tensor<f64> = parse_ppm(b"P6 # made by hand\n1 1 255\n\x00\x80\xff").unwrap();
        assert_eq!(t.data()[2], 1.0);
        assert!((t.data()[1] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn ppm_round_trip_after_quantization() {
        let img = Tensor::<f32>::from_fn([3, 4, 5], |i| (i % 256) as f32 / 255.0);
        let bytes = write_ppm(&img).unwrap();
        let back: Tensor<f32> = parse_ppm(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn nearest_resize() {
        let img = Tensor::<f32>::from_fn([1, 2, 2], |i| i as f32);
        let up = resize_nearest(&img, 4);
        assert_eq!(up.at(&[0, 3, 3]), 3.0);
        assert_eq!(up.at(&[0, 0, 1]), 0.0);
    }
}
