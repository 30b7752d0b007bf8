//! File formats: PNG and raw float32 images, binary PLY point sets,
//! trajectory CSV and float32 blobs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::rasterizer::Image;

/// 8-bit quantization used for PNG export: `round(255·clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for (px, v) in out.pixels_mut().zip(&img.data) {
        *px = image::Rgb([quantize(v[0]), quantize(v[1]), quantize(v[2])]);
    }
    out
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let data = rgb.pixels().map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]).collect();
    Ok(Image { width: rgb.width() as usize, height: rgb.height() as usize, data })
}

/// Row-major RGB float32 little-endian, no header.
pub fn write_raw_f32<W: Write>(img: &Image, sink: W) -> Result<()> {
    write_f32_blob(img.data.iter().flatten().copied(), sink)
}

pub fn read_raw_f32<R: Read>(mut source: R, width: usize, height: usize) -> Result<Image> {
    let mut buf = vec![0u8; width * height * 12];
    source.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Ok(Image { width, height, data: vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() })
}

pub fn write_f32_blob<W: Write, I: IntoIterator<Item = f64>>(values: I, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Binary little-endian PLY with `x y z` floats and `red green blue` bytes.
pub fn write_ply<W: Write>(points: &[Vector3<f64>], colors: Option<&[Vector3<f64>]>, sink: W) -> Result<()> {
    if colors.is_some_and(|c| c.len() != points.len()) {
        return Err(Error::InvalidInput("one color per point required".into()));
    }
    let mut w = BufWriter::new(sink);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )?;
    for (i, p) in points.iter().enumerate() {
        for v in p.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        let c = colors.map_or(Vector3::repeat(1.0), |c| c[i]);
        w.write_all(&[quantize(c[0]), quantize(c[1]), quantize(c[2])])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the vertex positions of a file written by [`write_ply`].
pub fn read_ply<R: Read>(source: R) -> Result<Vec<Vector3<f64>>> {
    let mut r = BufReader::new(source);
    let mut line = String::new();
    let mut count = None;
    let mut props = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::InvalidInput("PLY header not terminated".into()));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] if *f != "binary_little_endian" => {
                return Err(Error::InvalidInput(format!("unsupported PLY format {f}")));
            }
            ["element", "vertex", n] => count = n.parse::<usize>().ok(),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::InvalidInput("PLY without vertex element".into()))?;
    let size = |ty: &str| match ty {
        "float" => Ok(4),
        "uchar" => Ok(1),
        other => Err(Error::InvalidInput(format!("unsupported PLY property type {other}"))),
    };
    let stride: usize = props.iter().map(|(t, _)| size(t)).sum::<Result<usize>>()?;
    let offset_of = |want: &str| -> Result<usize> {
        let mut off = 0;
        for (t, n) in &props {
            if n == want {
                return if t == "float" { Ok(off) } else { Err(Error::InvalidInput(format!("{want} must be float"))) };
            }
            off += size(t)?;
        }
        Err(Error::InvalidInput(format!("PLY lacks property {want}")))
    };
    let offs = [offset_of("x")?, offset_of("y")?, offset_of("z")?];
    let mut buf = vec![0u8; stride * count];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(stride)
        .map(|rec| {
            let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
            Vector3::new(f(offs[0]), f(offs[1]), f(offs[2]))
        })
        .collect())
}

/// `timestep,gaussian,x,y,z` rows for `trajectories[timestep][gaussian]`.
pub fn write_trajectories_csv<W: Write>(trajectories: &[Vec<Vector3<f64>>], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestep", "gaussian", "x", "y", "z"])?;
    for (t, frame) in trajectories.iter().enumerate() {
        for (i, p) in frame.iter().enumerate() {
            w.write_record(&[t.to_string(), i.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image { width: 3, height: 2, data: (0..6).map(|k| [k as f64 / 5.0, 1.0, 0.0]).collect() };
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in back.data.iter().zip(&img.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn raw_round_trip() {
        let img = Image { width: 2, height: 2, data: vec![[0.25, 0.5, 0.75], [1.0, 0.0, 0.125], [0.1, 0.2, 0.3], [0.0; 3]] };
        let mut buf = Vec::new();
        write_raw_f32(&img, &mut buf).unwrap();
        assert_eq!(buf.len(), 48);
        let back = read_raw_f32(buf.as_slice(), 2, 2).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            for c in 0..3 {
                assert_eq!(a[c], b[c] as f32 as f64);
            }
        }
    }

    #[test]
    fn ply_round_trip() {
        let pts = vec![Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.0, 3.25, -1.0)];
        let mut buf = Vec::new();
        write_ply(&pts, Some(&[Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)]), &mut buf).unwrap();
        assert!(buf.starts_with(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"));
        assert_eq!(read_ply(buf.as_slice()).unwrap(), pts);
        assert!(write_ply(&pts, Some(&[Vector3::zeros()]), Vec::new()).is_err());
    }

    #[test]
    fn trajectory_csv() {
        let mut buf = Vec::new();
        write_trajectories_csv(&[vec![Vector3::new(1.0, 2.0, 3.0)], vec![Vector3::new(1.5, 2.0, 3.0)]], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "timestep,gaussian,x,y,z\n0,0,1,2,3\n1,0,1.5,2,3\n");
    }
}
