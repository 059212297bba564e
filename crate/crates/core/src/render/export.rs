use super::{RenderError, TextImage};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5, maxval 255) of the first channel.
pub fn to_pgm(img: &TextImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.side, img.side).into_bytes();
    out.extend(img.pixels.iter().step_by(img.channels).map(|&v| quantize(v)));
    out
}

/// Parses a P5 file back into `(width, height, bytes)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), RenderError> {
    let bad = |m: &str| RenderError::Format(m.to_owned());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad("raster length"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn to_png(img: &TextImage) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.side as u32, img.side as u32);
        let (color, data): (png::ColorType, Vec<u8>) = match img.channels {
            3 => (png::ColorType::Rgb, img.pixels.iter().map(|&v| quantize(v)).collect()),
            _ => (
                png::ColorType::Grayscale,
                img.pixels.iter().step_by(img.channels).map(|&v| quantize(v)).collect(),
            ),
        };
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| RenderError::Format(e.to_string()))?;
        w.write_image_data(&data).map_err(|e| RenderError::Format(e.to_string()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{rasterize, RenderConfig};
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let img = rasterize("Hi", &RenderConfig::default()).unwrap();
        let bytes = to_pgm(&img);
        let (w, h, data) = read_pgm(&bytes).unwrap();
        assert_eq!((w, h), (224, 224));
        assert_eq!(data.iter().filter(|&&b| b == 0).count(), img.pixels.iter().filter(|&&p| p == 0.0).count() / 3);
        assert!(read_pgm(&bytes[..20]).is_err());
    }

    #[test]
    fn png_has_signature() {
        let img = rasterize("Hi", &RenderConfig::default()).unwrap();
        let png = to_png(&img).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }
}
